//! Adam optimisation, the training loop and evaluation.

use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasynth::Pair;
use crate::error::{Error, Result};
use crate::loss::{psnr, ssim, total_loss, FeatureExtractor, LossWeights};
use crate::model::Model;
use crate::numerics::{Graph, Real, Tensor};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Piecewise-constant learning rate: `(steps, lr)` phases run in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub phases: Vec<(usize, f64)>,
}

impl Schedule {
    /// 1500 steps at 3e-4 followed by 500 at 1e-4.
    pub fn toy() -> Self {
        Self {
            phases: vec![(1500, 3e-4), (500, 1e-4)],
        }
    }

    pub fn constant(steps: usize, lr: f64) -> Self {
        Self {
            phases: vec![(steps, lr)],
        }
    }

    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.0).sum()
    }

    /// Learning rate of 1-based `step`; the last phase extends past the end.
    pub fn lr_at(&self, step: usize) -> f64 {
        let mut end = 0;
        for &(n, lr) in &self.phases {
            end += n;
            if step <= end {
                return lr;
            }
        }
        self.phases.last().map_or(0.0, |p| p.1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() || self.phases.iter().any(|&(_, lr)| !(lr >= 0.0 && lr.is_finite())) {
            return Err(Error::Config("schedule needs at least one phase with a finite lr >= 0".into()));
        }
        Ok(())
    }
}

/// Adam moments, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Real> {
    names: Vec<String>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    pub step: u64,
    pub config: AdamConfig,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self {
            names: params.names(),
            m: zeros(),
            v: zeros(),
            step: 0,
            config,
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.m[i])
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.v[i])
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, grads: &ParamStore<T>, state: &mut OptimState<T>, lr: f64) -> Result<()> {
    if params.len() != state.names.len() {
        return Err(Error::Parameter {
            name: "<optimizer>".into(),
            detail: format!("state tracks {} tensors, store has {}", state.names.len(), params.len()),
        });
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = (state.step + 1) as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for (i, (name, p)) in params.iter_mut().enumerate() {
        let g = grads.get(name)?;
        if name != state.names[i] || g.shape() != p.shape() || state.m[i].shape() != p.shape() {
            return Err(Error::Parameter {
                name: name.to_string(),
                detail: format!("gradient or moment shape does not match {:?}", p.shape()),
            });
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (k, (pk, gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gk = gk.as_f64();
            let mk = beta1 * m[k].as_f64() + (1.0 - beta1) * gk;
            let vk = beta2 * v[k].as_f64() + (1.0 - beta2) * gk * gk;
            m[k] = T::c(mk);
            v[k] = T::c(vk);
            let update = lr * (mk / c1) / ((vk / c2).sqrt() + eps);
            *pk = T::c(pk.as_f64() - update);
        }
    }
    state.step += 1;
    Ok(())
}

/// Global L2 norm over every gradient tensor.
pub fn grad_norm<T: Real>(grads: &ParamStore<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x = T::c(x.as_f64() * s);
            }
        }
    }
    norm
}

/// Runs `items` on a producer thread feeding `consume` through a bounded
/// queue of `depth` slots. The producer blocks when the queue is full and
/// stops early once the consumer returns.
pub fn with_prefetch<B, I, R>(depth: usize, items: I, consume: impl FnOnce(&mut dyn Iterator<Item = B>) -> R) -> R
where
    B: Send,
    I: Iterator<Item = B> + Send,
{
    let (tx, rx) = sync_channel(depth);
    std::thread::scope(|s| {
        s.spawn(move || {
            for item in items {
                if tx.send(item).is_err() {
                    break;
                }
            }
        });
        let mut it = rx.into_iter();
        consume(&mut it)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub batch_size: usize,
    /// Square random-crop size; `None` trains on whole images.
    pub crop: Option<usize>,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::toy(),
            batch_size: 2,
            crop: None,
            clip_norm: None,
            seed: 0,
            log_every: 100,
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            prefetch: 4,
        }
    }
}

/// Degraded inputs and clean targets stacked along the batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Real> {
    pub degraded: Tensor<T>,
    pub clean: Tensor<T>,
}

fn crop<T: Real>(x: &Tensor<T>, top: usize, left: usize, size: usize) -> Tensor<T> {
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for i in top..top + size {
            let row = (ch * h + i) * w;
            out.extend_from_slice(&x.data()[row + left..row + left + size]);
        }
    }
    Tensor::new([1, c, size, size], out).expect("crop extents")
}

fn stack<T: Real>(parts: &[Tensor<T>]) -> Tensor<T> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("stack extents")
}

/// Deterministic batch stream: indices drawn epoch by epoch from a seeded
/// shuffle, each example cropped at a random offset.
fn batches<'a, T: Real>(dataset: &'a [Pair<T>], cfg: &TrainConfig) -> impl Iterator<Item = Batch<T>> + Send + 'a {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let (batch, crop_size) = (cfg.batch_size, cfg.crop);
    (0..cfg.schedule.total_steps()).map(move |_| {
        let mut deg = Vec::with_capacity(batch);
        let mut cln = Vec::with_capacity(batch);
        for _ in 0..batch {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
            }
            let pair = &dataset[order.pop().expect("refilled")];
            match crop_size {
                Some(s) => {
                    let (_, _, h, w) = pair.clean.dims4().expect("validated");
                    let (top, left) = (rng.gen_range(0..=h - s), rng.gen_range(0..=w - s));
                    deg.push(crop(&pair.degraded, top, left, s));
                    cln.push(crop(&pair.clean, top, left, s));
                }
                None => {
                    deg.push(pair.degraded.clone());
                    cln.push(pair.clean.clone());
                }
            }
        }
        Batch {
            degraded: stack(&deg),
            clean: stack(&cln),
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// `(step, loss)` for every step, loss measured before that step's update.
    pub history: Vec<(usize, f64)>,
}

impl TrainReport {
    /// `step,loss` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.history {
            s.push_str(&format!("{step},{loss}\n"));
        }
        s
    }
}

fn validate<T: Real>(dataset: &[Pair<T>], cfg: &TrainConfig) -> Result<()> {
    cfg.schedule.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(c) = cfg.clip_norm {
        if !(c > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
        }
    }
    let shape = dataset[0].clean.shape().to_vec();
    for p in dataset {
        if p.clean.shape() != shape.as_slice() || p.degraded.shape() != shape.as_slice() {
            return Err(Error::Config("all training pairs must share one shape".into()));
        }
    }
    if let Some(s) = cfg.crop {
        let (h, w) = (shape[2], shape[3]);
        if s == 0 || s % 8 != 0 || s > h || s > w {
            return Err(Error::Config(format!("crop {s} must be a positive multiple of 8 within {h}x{w}")));
        }
    }
    Ok(())
}

/// Trains `model` in place. `on_log(step, loss)` fires every
/// `cfg.log_every` steps and at the final step.
pub fn train<T: Real>(
    model: &mut Model<T>,
    dataset: &[Pair<T>],
    cfg: &TrainConfig,
    fx: &dyn FeatureExtractor<T>,
    mut on_log: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    validate(dataset, cfg)?;
    let total = cfg.schedule.total_steps();
    let mut state = OptimState::new(model.params(), cfg.adam);
    let mut history = Vec::with_capacity(total);
    with_prefetch(cfg.prefetch.max(1), batches(dataset, cfg), |stream| {
        for (i, batch) in stream.enumerate() {
            let step = i + 1;
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { step },
                e => e,
            };
            let (loss, mut grads) = loss_and_grads(model, &batch, &cfg.loss, fx).map_err(diverged)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            adam_step(model.params_mut(), &grads, &mut state, cfg.schedule.lr_at(step))?;
            model.step += 1;
            history.push((step, loss));
            if (cfg.log_every > 0 && step % cfg.log_every == 0) || step == total {
                on_log(step, loss);
            }
        }
        Ok(())
    })?;
    Ok(TrainReport { history })
}

/// Loss on `batch` and its gradient for every parameter.
pub fn loss_and_grads<T: Real>(
    model: &Model<T>,
    batch: &Batch<T>,
    weights: &LossWeights,
    fx: &dyn FeatureExtractor<T>,
) -> Result<(f64, ParamStore<T>)> {
    let g = Graph::new();
    let p = model.params().bind(&g, true);
    let out = model.forward_graph(&p, g.constant(batch.degraded.clone()))?;
    let loss = total_loss(out, g.constant(batch.clean.clone()), weights, fx)?;
    let value = loss.value().item().as_f64();
    let mut grads = g.backward(loss)?;
    let mut store = ParamStore::new();
    for (name, var) in p.iter() {
        let gr = grads.take(var).unwrap_or_else(|| Tensor::zeros(var.shape()));
        store.insert(name, gr)?;
    }
    Ok((value, store))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the degraded input against the clean image.
    pub input_psnr: f64,
    pub input_ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_input_psnr: f64,
    pub mean_input_ssim: f64,
    pub rows: Vec<EvalRow>,
}

/// Restores every degraded image and scores it against its clean target.
/// An exact restoration scores `f64::INFINITY` PSNR, which carries into the mean.
pub fn evaluate<T: Real>(model: &Model<T>, dataset: &[Pair<T>]) -> Result<EvalReport> {
    evaluate_with(dataset, |x| model.forward(x))
}

/// [`evaluate`] with an arbitrary restoration function.
pub fn evaluate_with<T: Real>(dataset: &[Pair<T>], mut restore: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let rows = dataset
        .iter()
        .enumerate()
        .map(|(index, pair)| {
            let out = restore(&pair.degraded)?;
            Ok(EvalRow {
                index,
                psnr: psnr(&out, &pair.clean, 1.0)?,
                ssim: ssim(&out, &pair.clean)?,
                input_psnr: psnr(&pair.degraded, &pair.clean, 1.0)?,
                input_ssim: ssim(&pair.degraded, &pair.clean)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        mean_psnr: mean(|r| r.psnr),
        mean_ssim: mean(|r| r.ssim),
        mean_input_psnr: mean(|r| r.input_psnr),
        mean_input_ssim: mean(|r| r.input_ssim),
        rows,
    })
}
