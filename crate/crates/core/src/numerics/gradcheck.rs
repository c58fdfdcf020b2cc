//! Central finite differences, the independent oracle for [`Graph::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::tape::{Graph, Var};
use crate::numerics::tensor::{Real, Tensor};

/// `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every coordinate of every parameter.
pub fn finite_diff_grad<T: Real>(
    f: impl Fn(&[Tensor<T>]) -> Result<T>,
    params: &[Tensor<T>],
    h: T,
) -> Result<Vec<Tensor<T>>> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape().to_vec());
        for i in 0..params[p].numel() {
            grad.data_mut()[i] = central_difference(&f, &mut work, p, i, h)?;
        }
        out.push(grad);
    }
    Ok(out)
}

fn central_difference<T: Real>(
    f: &impl Fn(&[Tensor<T>]) -> Result<T>,
    work: &mut [Tensor<T>],
    p: usize,
    i: usize,
    h: T,
) -> Result<T> {
    let orig = work[p].data()[i];
    work[p].data_mut()[i] = orig + h;
    let plus = f(work);
    work[p].data_mut()[i] = orig - h;
    let minus = f(work);
    work[p].data_mut()[i] = orig;
    Ok((plus? - minus?) / (h + h))
}

/// Settings for [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Finite-difference step.
    pub h: f64,
    /// Number of coordinates to sample; `None` checks all of them.
    pub samples: Option<usize>,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Relative error accepted without re-measuring.
    pub tolerance: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            samples: None,
            seed: 0,
            floor: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinates whose first central difference missed the tolerance
    /// (a ReLU kink inside the step, or roundoff on a tiny gradient) and
    /// were re-measured with other steps.
    pub retries: usize,
    /// `(input index, flat offset, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences on sampled input coordinates.
pub fn check_gradients<T, F>(inputs: &[Tensor<T>], cfg: &GradCheck, build: F) -> Result<GradCheckReport>
where
    T: Real,
    F: for<'g> Fn(&[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let analytic: Vec<Tensor<T>> = {
        let g = Graph::new();
        let vars: Vec<Var<'_, T>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .map(|v| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape()))
            })
            .collect()
    };
    let eval = |params: &[Tensor<T>]| -> Result<T> {
        let g = Graph::new();
        let vars: Vec<Var<'_, T>> = params.iter().map(|t| g.leaf(t.clone())).collect();
        Ok(build(&vars)?.value().item())
    };

    let total: usize = inputs.iter().map(|t| t.numel()).sum();
    let coords: Vec<usize> = match cfg.samples {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut v = sample(&mut rng, total, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..total).collect(),
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for flat in coords {
        let (mut p, mut i) = (0, flat);
        while i >= inputs[p].numel() {
            i -= inputs[p].numel();
            p += 1;
        }
        let a = analytic[p].data()[i].as_f64();
        // first step, then smaller steps for kinks and a larger one for
        // gradients so small that roundoff dominates; the best agreement wins
        let mut best = (f64::INFINITY, f64::NAN);
        for (attempt, scale) in [1.0, 0.1, 0.01, 10.0].into_iter().enumerate() {
            let n = central_difference(&eval, &mut work, p, i, T::c(cfg.h * scale))?.as_f64();
            let err = relative_error(a, n, cfg.floor);
            if err < best.0 {
                best = (err, n);
            }
            if best.0 <= cfg.tolerance {
                break;
            }
            if attempt == 0 {
                report.retries += 1;
            }
        }
        let (err, n) = best;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((p, i, a, n));
        }
        report.checked += 1;
    }
    Ok(report)
}
