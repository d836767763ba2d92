use gasnorm::datagen::{gen_ar, ArSpec};
use gasnorm::fit::{fit, fit_frame, initial_params, penalized_objective, FitConfig, ParamBounds};
use gasnorm::gas::{filter_series, Family};
use gasnorm::timeseries::SeriesFrame;
use ndarray::Array2;
use proptest::prelude::*;

fn quick() -> FitConfig {
    FitConfig {
        max_iters: 150,
        restarts: 2,
        ..FitConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn fit_improves_and_respects_bounds(
        seed in 0u64..10_000,
        coeff in -0.8f64..0.95,
        slope in -0.05f64..0.05,
        gamma in 0.0f64..0.9,
        student in any::<bool>(),
    ) {
        let ys = gen_ar(&ArSpec {
            length: 150,
            ar_coeffs: vec![coeff],
            trend_slope: slope,
            seed,
            ..ArSpec::default()
        })
        .unwrap()
        .column(0)
        .to_vec();
        let cfg = FitConfig {
            gamma,
            family: if student { Family::StudentT } else { Family::Gaussian },
            ..quick()
        };
        let r = fit(&ys, &cfg).unwrap();
        let start = penalized_objective(&initial_params(&ys, &cfg).0, &ys).unwrap();
        prop_assert!(r.objective >= start);
        prop_assert_eq!(r.objective, penalized_objective(&r.params, &ys).unwrap());
        let b = ParamBounds::for_moments(r.params.mu0, r.params.sigma2_0);
        let p = r.params;
        for (v, (lo, hi)) in [
            (p.alpha_mu, b.alpha_mu), (p.alpha_sigma, b.alpha_sigma),
            (p.beta_mu, b.beta_mu), (p.beta_sigma, b.beta_sigma),
            (p.omega_mu, b.omega_mu), (p.omega_sigma, b.omega_sigma),
        ] {
            prop_assert!(v >= lo && v <= hi, "{} not in [{}, {}]", v, lo, hi);
        }
    }
}

#[test]
fn permuting_features_permutes_results() {
    let mut vals = Array2::zeros((120, 3));
    for (j, seed) in [3u64, 4, 5].iter().enumerate() {
        let col = gen_ar(&ArSpec {
            length: 120,
            seed: *seed,
            ..ArSpec::default()
        })
        .unwrap();
        vals.column_mut(j).assign(&col.column(0));
    }
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let frame = SeriesFrame::new(vals.clone(), names.clone()).unwrap();
    let order = [2usize, 0, 1];
    let permuted = SeriesFrame::new(
        vals.select(ndarray::Axis(1), &order),
        order.iter().map(|&j| names[j].clone()).collect(),
    )
    .unwrap();
    let a = fit_frame(&frame, &quick()).unwrap();
    let b = fit_frame(&permuted, &quick()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn trend_is_tracked_better_than_by_static_filter() {
    let ys: Vec<f64> = (0..200).map(|t| 0.1 * t as f64).collect();
    let cfg = FitConfig {
        gamma: 0.5,
        family: Family::Gaussian,
        ..FitConfig::default()
    };
    let fitted = fit(&ys, &cfg).unwrap().params;
    let still = gasnorm::gas::GasParams { gamma: 0.0, ..fitted };
    let mae = |p| {
        let tr = filter_series(p, &ys).unwrap();
        tr.states.iter().zip(&ys).map(|(s, y)| (y - s.mu_pred).abs()).sum::<f64>() / ys.len() as f64
    };
    assert!(mae(&fitted) < mae(&still), "{} vs {}", mae(&fitted), mae(&still));
}

#[test]
fn repeated_fits_serialize_identically() {
    let ys = gen_ar(&ArSpec::default()).unwrap().column(0).to_vec();
    let cfg = FitConfig {
        restarts: 3,
        seed: 11,
        ..FitConfig::default()
    };
    let a = serde_json::to_string(&fit(&ys, &cfg).unwrap()).unwrap();
    let b = serde_json::to_string(&fit(&ys, &cfg).unwrap()).unwrap();
    assert_eq!(a, b);
}
