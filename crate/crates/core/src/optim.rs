//! Box-constrained Nelder-Mead simplex search.
//!
//! Candidate vertices are clipped into the box before evaluation, and
//! non-finite objective values are treated as `+inf`, so a vertex that makes
//! the filter blow up is simply never accepted.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Argument("bound vectors differ in length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::Argument("every lower bound must be <= its upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clip(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((v, l), u)| *v >= *l && *v <= *u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_iters: usize,
    /// Stop when the spread of vertex values falls below this.
    pub ftol: f64,
    /// Initial edge length as a fraction of each bound range.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            ftol: 1e-9,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Minimizes `f` from `x0` within `bounds`. The returned value is never worse
/// than `f(clip(x0))`.
pub fn minimize<F>(mut f: F, x0: &[f64], bounds: &Bounds, opts: &NelderMeadOptions) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = bounds.dim();
    if x0.len() != n {
        return Err(Error::Argument(format!(
            "start point has {} coordinates, bounds have {n}",
            x0.len()
        )));
    }
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut start = x0.to_vec();
    bounds.clip(&mut start);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(&start);
    simplex.push((start.clone(), f0));
    for i in 0..n {
        let mut v = start.clone();
        let range = bounds.upper[i] - bounds.lower[i];
        let step = if range > 0.0 {
            opts.initial_step * range
        } else {
            0.0
        };
        // step inward when sitting on the upper face
        if v[i] + step > bounds.upper[i] {
            v[i] -= step;
        } else {
            v[i] += step;
        }
        bounds.clip(&mut v);
        let fv = eval(&v);
        simplex.push((v, fv));
    }

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        if best.is_finite() && (worst - best).abs() <= opts.ftol * (1.0 + best.abs()) {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let towards = |coef: f64, from: &[f64]| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(from)
                .map(|(c, w)| c + coef * (c - w))
                .collect();
            bounds.clip(&mut p);
            p
        };

        let worst_x = simplex[n].0.clone();
        let xr = towards(REFLECT, &worst_x);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = towards(EXPAND, &worst_x);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let xc = towards(CONTRACT, &worst_x);
            let fc = eval(&xc);
            (xc, fc)
        } else {
            let xc = towards(-CONTRACT, &worst_x);
            let fc = eval(&xc);
            (xc, fc)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let best_x = simplex[0].0.clone();
        for (x, fx) in simplex.iter_mut().skip(1) {
            for (v, b) in x.iter_mut().zip(&best_x) {
                *v = b + SHRINK * (*v - b);
            }
            bounds.clip(x);
            *fx = eval(x);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Ok(Minimum {
        x,
        value,
        iterations,
        converged,
    })
}
