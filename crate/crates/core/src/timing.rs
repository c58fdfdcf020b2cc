//! Wall-clock helpers for growth-rate measurements.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::ssm::{quadratic_attention, selective_scan, SsmParams};

/// Median of `xs`; `None` when empty or any value is NaN.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() || xs.iter().any(|x| x.is_nan()) {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Median seconds over `repeats` calls of `f`, after one untimed warm-up.
pub fn median_seconds(repeats: usize, mut f: impl FnMut()) -> f64 {
    f();
    let times: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    median(&times).unwrap_or(0.0)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let bad = |detail: &str| Error::InvalidArgument {
        op: "loglog_slope",
        detail: detail.into(),
    };
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(bad("need at least two (x, y) pairs of equal length"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(bad("values must be positive and finite"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(bad("x values must not all be equal"));
    }
    Ok(sxy / sxx)
}

/// Random single-sequence scan operands of length `l`.
pub struct ScanProblem {
    pub x: Tensor<f32>,
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
    pub c: Tensor<f32>,
    pub d: Tensor<f32>,
    pub delta: Tensor<f32>,
}

impl ScanProblem {
    pub fn new(l: usize, d_inner: usize, d_state: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            x: Tensor::uniform([1, d_inner, l], -1.0, 1.0, &mut rng),
            a: Tensor::uniform([d_inner, d_state], -2.0, -0.1, &mut rng),
            b: Tensor::uniform([1, d_state, l], -1.0, 1.0, &mut rng),
            c: Tensor::uniform([1, d_state, l], -1.0, 1.0, &mut rng),
            d: Tensor::uniform([d_inner], -1.0, 1.0, &mut rng),
            delta: Tensor::uniform([1, d_inner, l], 0.01, 0.1, &mut rng),
        }
    }

    pub fn run(&self) -> Result<Tensor<f32>> {
        let p = SsmParams {
            a: &self.a,
            b: &self.b,
            c: &self.c,
            d: &self.d,
            delta: &self.delta,
        };
        selective_scan(&p, &self.x)
    }
}

/// Median scan seconds for each length.
pub fn scan_scaling(lens: &[usize], d_inner: usize, d_state: usize, repeats: usize, seed: u64) -> Result<Vec<f64>> {
    lens.iter()
        .map(|&l| {
            let prob = ScanProblem::new(l, d_inner, d_state, seed);
            prob.run()?;
            Ok(median_seconds(repeats, || {
                std::hint::black_box(prob.run().ok());
            }))
        })
        .collect()
}

/// Median softmax-attention seconds over `[L, dim]` operands for each length.
pub fn attention_scaling(lens: &[usize], dim: usize, repeats: usize, seed: u64) -> Result<Vec<f64>> {
    lens.iter()
        .map(|&l| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q: Tensor<f32> = Tensor::uniform([l, dim], -1.0, 1.0, &mut rng);
            let k: Tensor<f32> = Tensor::uniform([l, dim], -1.0, 1.0, &mut rng);
            let v: Tensor<f32> = Tensor::uniform([l, dim], -1.0, 1.0, &mut rng);
            quadratic_attention(&q, &k, &v)?;
            Ok(median_seconds(repeats, || {
                std::hint::black_box(quadratic_attention(&q, &k, &v).ok());
            }))
        })
        .collect()
}
