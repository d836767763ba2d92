//! Residual forecasters: a fully connected network trained by mini-batch SGD
//! on mean squared error. With [`Activation::Identity`] it is a linear model.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::Window;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Hidden layer widths; input and output widths come from the data.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Early-stopping patience on validation loss, when validation data is
    /// supplied.
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_patience() -> usize {
    10
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            layer_widths: vec![64, 64],
            activation: Activation::Relu,
            learning_rate: 0.01,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            patience: default_patience(),
        }
    }
}

impl MlpSpec {
    pub fn linear() -> Self {
        Self {
            activation: Activation::Identity,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.contains(&0) {
            return Err(Error::Argument("layer widths must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Argument("learning rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

mod rows {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(serde::de::Error::custom("ragged weight matrix"));
        }
        Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect())
            .map_err(serde::de::Error::custom)
    }
}

/// One affine layer, `out = W · in + b` with `W` of shape (out, in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(with = "rows")]
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(widths: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-limit..limit)),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.nrows())
    }

    fn activate(&self, z: &mut Array2<f64>) {
        if self.activation == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
    }

    /// Rows of `x` are samples.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights.t()) + &layer.bias;
            if i < last {
                self.activate(&mut z);
            }
            a = z;
        }
        a
    }

    /// Pre-activations of every hidden layer, for kink checks.
    pub fn hidden_preactivations(&self, x: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let mut a = x.to_owned();
        let mut out = Vec::new();
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            let z = a.dot(&layer.weights.t()) + &layer.bias;
            out.push(z.clone());
            a = z;
            self.activate(&mut a);
        }
        out
    }

    /// Mean squared error over all samples and outputs, and its gradient.
    pub fn loss_and_gradients(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> (f64, Gradients) {
        let n_layers = self.layers.len();
        let mut inputs: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
        let mut pre: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weights.t()) + &layer.bias;
            inputs.push(a);
            let mut next = z.clone();
            if i + 1 < n_layers {
                self.activate(&mut next);
            }
            pre.push(z);
            a = next;
        }
        let diff = &a - &y;
        let count = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;

        let mut delta = diff * (2.0 / count);
        let mut grads: Vec<Layer> = Vec::with_capacity(n_layers);
        for i in (0..n_layers).rev() {
            if i + 1 < n_layers && self.activation == Activation::Relu {
                ndarray::Zip::from(&mut delta)
                    .and(&pre[i])
                    .for_each(|d, z| {
                        if *z <= 0.0 {
                            *d = 0.0
                        }
                    });
            }
            let gw = delta.t().dot(&inputs[i]);
            let gb = delta.sum_axis(Axis(0));
            let next_delta = delta.dot(&self.layers[i].weights);
            grads.push(Layer {
                weights: gw,
                bias: gb,
            });
            delta = next_delta;
        }
        grads.reverse();
        (loss, Gradients { layers: grads })
    }

    fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights.scaled_add(-lr, &g.weights);
            layer.bias.scaled_add(-lr, &g.bias);
        }
    }

    fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn mse(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> f64 {
        let pred = self.forward(x);
        let diff = &pred - &y;
        diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64
    }

    /// For identity activations, the single affine map `(W, b)` the layers
    /// compose to.
    pub fn collapse_linear(&self) -> Option<Layer> {
        if self.activation != Activation::Identity {
            return None;
        }
        let mut it = self.layers.iter();
        let first = it.next()?.clone();
        Some(it.fold(first, |acc, l| Layer {
            weights: l.weights.dot(&acc.weights),
            bias: l.weights.dot(&acc.bias) + &l.bias,
        }))
    }

    fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let mut idx = idx;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            if idx < nw {
                return layer.weights.as_slice_mut().expect("standard layout").get_mut(idx).unwrap();
            }
            idx -= nw;
            let nb = layer.bias.len();
            if idx < nb {
                return &mut layer.bias[idx];
            }
            idx -= nb;
        }
        panic!("parameter index out of range")
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

impl Gradients {
    fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub network: Mlp,
    pub spec: MlpSpec,
    /// (context_length, features)
    pub context_shape: (usize, usize),
    /// (horizon, target features)
    pub target_shape: (usize, usize),
    /// Mean training MSE per completed epoch.
    pub train_loss_curve: Vec<f64>,
    #[serde(default)]
    pub val_loss_curve: Vec<f64>,
}

impl TrainedModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn flatten(ws: &[Window], pick: impl Fn(&Window) -> &Array2<f64>) -> Array2<f64> {
    let width = pick(&ws[0]).len();
    let mut out = Array2::zeros((ws.len(), width));
    for (mut row, w) in out.rows_mut().into_iter().zip(ws) {
        row.iter_mut().zip(pick(w).iter()).for_each(|(r, v)| *r = *v);
    }
    out
}

fn check_pairs(pairs: &[Window]) -> Result<((usize, usize), (usize, usize))> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Argument("no training pairs".into()))?;
    let cs = first.context.dim();
    let ts = first.target.dim();
    if pairs.iter().any(|p| p.context.dim() != cs || p.target.dim() != ts) {
        return Err(Error::Argument("training pairs have inconsistent shapes".into()));
    }
    Ok((cs, ts))
}

/// Trains on all of `pairs` for the full epoch budget.
pub fn train(spec: &MlpSpec, pairs: &[Window]) -> Result<TrainedModel> {
    train_with_validation(spec, pairs, &[])
}

/// Trains with early stopping on `validation` when it is non-empty; the
/// returned weights are those of the best validation epoch.
pub fn train_with_validation(spec: &MlpSpec, pairs: &[Window], validation: &[Window]) -> Result<TrainedModel> {
    spec.validate()?;
    let (context_shape, target_shape) = check_pairs(pairs)?;
    if !validation.is_empty() {
        let (vc, vt) = check_pairs(validation)?;
        if vc != context_shape || vt != target_shape {
            return Err(Error::Argument("validation pairs differ in shape from training pairs".into()));
        }
    }
    let x = flatten(pairs, |w| &w.context);
    let y = flatten(pairs, |w| &w.target);
    let (vx, vy) = if validation.is_empty() {
        (None, None)
    } else {
        (
            Some(flatten(validation, |w| &w.context)),
            Some(flatten(validation, |w| &w.target)),
        )
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut widths = vec![x.ncols()];
    widths.extend(&spec.layer_widths);
    widths.push(y.ncols());
    let mut net = Mlp::init(&widths, spec.activation, &mut rng);

    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut train_curve = Vec::with_capacity(spec.epochs);
    let mut val_curve = Vec::new();
    let mut best: Option<(f64, Mlp)> = None;
    let mut since_best = 0;
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(spec.batch_size) {
            let bx = x.select(Axis(0), chunk);
            let by = y.select(Axis(0), chunk);
            let (loss, grads) = net.loss_and_gradients(bx.view(), by.view());
            total += loss * chunk.len() as f64;
            net.sgd_step(&grads, spec.learning_rate);
        }
        let epoch_loss = total / x.nrows() as f64;
        if !epoch_loss.is_finite() || !net.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("loss became {epoch_loss}"),
            });
        }
        train_curve.push(epoch_loss);
        if let (Some(vx), Some(vy)) = (&vx, &vy) {
            let v = net.mse(vx.view(), vy.view());
            val_curve.push(v);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, net.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= spec.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, b)) = best {
        net = b;
    }
    Ok(TrainedModel {
        network: net,
        spec: spec.clone(),
        context_shape,
        target_shape,
        train_loss_curve: train_curve,
        val_loss_curve: val_curve,
    })
}

/// Residual forecast of shape (horizon, target features).
pub fn predict(model: &TrainedModel, context: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if context.dim() != model.context_shape {
        return Err(Error::Argument(format!(
            "context shape {:?}, model expects {:?}",
            context.dim(),
            model.context_shape
        )));
    }
    let flat: Vec<f64> = context.iter().copied().collect();
    let x = Array2::from_shape_vec((1, flat.len()), flat).expect("row vector");
    let out = model.network.forward(x.view());
    Ok(out
        .into_shape_with_order(model.target_shape)
        .expect("output width matches target shape"))
}

/// Batched [`predict`] over many contexts.
pub fn predict_many(model: &TrainedModel, contexts: &[Window]) -> Result<Vec<Array2<f64>>> {
    if contexts.is_empty() {
        return Ok(Vec::new());
    }
    if contexts.iter().any(|w| w.context.dim() != model.context_shape) {
        return Err(Error::Argument("context shape does not match the model".into()));
    }
    let x = flatten(contexts, |w| &w.context);
    let out = model.network.forward(x.view());
    Ok(out
        .rows()
        .into_iter()
        .map(|r| {
            r.to_owned()
                .into_shape_with_order(model.target_shape)
                .expect("output width matches target shape")
        })
        .collect())
}

/// Largest relative discrepancy between analytic and central-difference
/// parameter gradients of the MSE on one sample.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps
/// near-zero gradients from turning roundoff into large ratios.
pub fn gradient_check(spec: &MlpSpec, sample: &Window) -> Result<f64> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut widths = vec![sample.context.len()];
    widths.extend(&spec.layer_widths);
    widths.push(sample.target.len());
    let net = Mlp::init(&widths, spec.activation, &mut rng);
    Ok(gradient_check_network(&net, sample))
}

pub fn gradient_check_network(net: &Mlp, sample: &Window) -> f64 {
    let x = Array2::from_shape_vec((1, sample.context.len()), sample.context.iter().copied().collect())
        .expect("row vector");
    let y = Array2::from_shape_vec((1, sample.target.len()), sample.target.iter().copied().collect())
        .expect("row vector");
    let (_, grads) = net.loss_and_gradients(x.view(), y.view());
    let analytic = grads.flat();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(i);
        let h = 1e-5 * orig.abs().max(1.0);
        *probe.param_mut(i) = orig + h;
        let up = probe.mse(x.view(), y.view());
        *probe.param_mut(i) = orig - h;
        let down = probe.mse(x.view(), y.view());
        *probe.param_mut(i) = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    worst
}
