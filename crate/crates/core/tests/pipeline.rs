use gasnorm::eval::{emit_report, mase, run_experiment, EvalReport, ExperimentSpec, NormalizerChoice};
use gasnorm::gas::Family;
use ndarray::Array2;
use proptest::prelude::*;

fn small_spec() -> ExperimentSpec {
    serde_json::from_value(serde_json::json!({
        "dataset": {"kind": "ar", "length": 400, "ar_coeffs": [0.8], "noise_std": 1.0,
                    "season_amplitude": 1.0, "season_period": 20, "trend_slope": 0.02, "seed": 3},
        "normalizers": [{"kind": "global_norm"}],
        "forecaster": {"layer_widths": [16], "activation": "relu", "learning_rate": 0.01,
                       "epochs": 5, "batch_size": 32, "seed": 0},
        "split": {"train_fraction": 0.6, "val_fraction": 0.2, "context_length": 20, "horizon": 5},
        "gammas": [0.0, 0.1],
        "seeds": [7],
        "fit": {"max_iters": 60, "restarts": 1, "seed": 0}
    }))
    .unwrap()
}

#[test]
fn one_seed_one_normalizer_gives_one_row() {
    let r = run_experiment(&small_spec()).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert!(r.failures.is_empty());
    let row = &r.rows[0];
    assert_eq!((row.n_seeds, row.mase_stderr, row.selected), (1, 0.0, true));
    assert!(row.mase_mean.is_finite() && row.mase_mean > 0.0);
}

#[test]
fn duplicate_normalizers_and_reruns_agree() {
    let mut spec = small_spec();
    spec.normalizers = vec![
        NormalizerChoice::GasNorm { family: Family::StudentT, nu: 20.0 },
        NormalizerChoice::GasNorm { family: Family::StudentT, nu: 20.0 },
        NormalizerChoice::LocalNorm,
        NormalizerChoice::GlobalNorm,
    ];
    spec.seeds = vec![1, 2];
    let a = run_experiment(&spec).unwrap();
    assert_eq!(a, run_experiment(&spec).unwrap());
    assert!(a.failures.is_empty(), "{:?}", a.failures);
    // two γ rows per GAS entry, one row for each of the others
    assert_eq!(a.rows.len(), 6);
    assert_eq!(a.rows[0], a.rows[2]);
    assert_eq!(a.rows[1], a.rows[3]);
    for row in &a.rows {
        let mean = row.test_mase.iter().sum::<f64>() / row.test_mase.len() as f64;
        assert_eq!(row.mase_mean, mean);
    }
    assert_eq!(a.rows.iter().filter(|r| r.selected).count(), 4);
}

#[test]
fn report_files_round_trip() {
    let r = run_experiment(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (csv, json) = emit_report(&r, dir.path(), "report").unwrap();
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 2);
    let back = EvalReport::from_json(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn missing_validation_segment_is_rejected() {
    let mut spec = small_spec();
    spec.split.val_fraction = 0.0;
    assert!(run_experiment(&spec).is_err());
    let mut spec = small_spec();
    spec.seeds.clear();
    assert!(run_experiment(&spec).is_err());
}

proptest! {
    #[test]
    fn mase_is_scale_invariant(
        train in prop::collection::vec(-10.0f64..10.0, 3..30),
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20),
        c in 0.01f64..100.0,
    ) {
        let t = Array2::from_shape_vec((train.len(), 1), train.clone()).unwrap();
        let a = Array2::from_shape_vec((pairs.len(), 1), pairs.iter().map(|p| p.0).collect()).unwrap();
        let f = Array2::from_shape_vec((pairs.len(), 1), pairs.iter().map(|p| p.1).collect()).unwrap();
        let Ok(base) = mase(a.view(), f.view(), t.view(), 1) else {
            return Ok(());
        };
        let scaled = mase((&a * c).view(), (&f * c).view(), (&t * c).view(), 1).unwrap();
        prop_assert!((base[0] - scaled[0]).abs() <= 1e-12 * (1.0 + base[0]));
    }

    #[test]
    fn seasonal_naive_on_training_scores_one(
        train in prop::collection::vec(-10.0f64..10.0, 6..40),
        m in 1usize..4,
    ) {
        let t = Array2::from_shape_vec((train.len(), 1), train.clone()).unwrap();
        let actual = t.slice(ndarray::s![m.., ..]).to_owned();
        let naive = t.slice(ndarray::s![..train.len() - m, ..]).to_owned();
        if let Ok(v) = mase(actual.view(), naive.view(), t.view(), m) {
            prop_assert!((v[0] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn diverging_cells_are_reported_not_fatal() {
    let mut spec = small_spec();
    spec.normalizers = vec![NormalizerChoice::MeanScaling];
    spec.seeds = vec![1, 2, 3];
    let r = run_experiment(&spec).unwrap();
    let scored: usize = r.rows.iter().map(|row| row.n_seeds).sum();
    assert_eq!(scored + r.failures.len(), 3);
    assert!(r.failures.iter().all(|f| f.seed.is_some()));
}
