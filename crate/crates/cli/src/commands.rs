//! Subcommand definitions and their implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use famamba_core::datasynth::{make_dataset, DegradeKind, DegradeSpec, Pair};
use famamba_core::loss::{total_loss, ConvStack, LossWeights};
use famamba_core::numerics::{check_gradients, GradCheck};
use famamba_core::params::Bound;
use famamba_core::timing::{attention_scaling, loglog_slope, scan_scaling};
use famamba_core::trainer::{evaluate_with, train, EvalReport};
use famamba_core::wavelet::{dwt_multi, iwt_multi};
use famamba_core::{Model, Precision, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_override, RunConfig};
use crate::image_io::{load_rgb, save_rgb};
use crate::manifest::{self, Entry};
use crate::{CliError, CliResult};

pub const SCAN_SLOPE: (f64, f64) = (0.8, 1.3);
pub const ATTENTION_SLOPE: (f64, f64) = (1.7, 2.3);
pub const MAX_DWT_ERROR: f64 = 1e-4;
pub const MAX_GRAD_ERROR: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "famamba", version, about = "Frequency-aware selective state-space image restoration")]
pub struct Cli {
    /// Worker threads (at least 1). All work currently runs on one thread.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write wavelet sub-band images and report the reconstruction error.
    Dwt(DwtArgs),
    /// Generate clean/degraded image pairs and a manifest.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Restore one image with a trained checkpoint.
    Restore(RestoreArgs),
    /// Score a checkpoint on the pairs of a manifest.
    Eval(EvalArgs),
    /// Time the selective scan against quadratic attention over sequence lengths.
    BenchScan(BenchArgs),
    /// Compare backward gradients with finite differences on a small model.
    Gradcheck(GradArgs),
    /// Report parameter and multiply-accumulate counts.
    Params(ConfigSource),
    /// Print the effective configuration, or describe every key.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct DwtArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub levels: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub h: usize,
    #[arg(long, default_value_t = 32)]
    pub w: usize,
    #[arg(long, default_value = "rain")]
    pub kind: String,
    #[arg(long, default_value_t = 0.3)]
    pub density: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 80.0)]
    pub angle: f64,
    #[arg(long, default_value_t = 1.5)]
    pub radius: f64,
    #[arg(long, default_value_t = 0.8)]
    pub intensity: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct ConfigSource {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set steps1=200`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Shorthand for `--set manifest=PATH`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Shorthand for `--set loss_history=PATH`.
    #[arg(long)]
    pub loss_history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Exit with status 5 unless mean PSNR beats the degraded inputs by this many dB.
    #[arg(long)]
    pub min_gain: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192")]
    pub lens: Vec<usize>,
    /// Attention lengths; defaults to `--lens`.
    #[arg(long, value_delimiter = ',')]
    pub attn_lens: Option<Vec<usize>>,
    #[arg(long, default_value_t = 16)]
    pub d_inner: usize,
    #[arg(long, default_value_t = 16)]
    pub d_state: usize,
    #[arg(long, default_value_t = 16)]
    pub attn_dim: usize,
    #[arg(long, default_value_t = 9)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Exit with status 5 when a fitted slope leaves its expected range.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// Square probe image size, a multiple of 8.
    #[arg(long, default_value_t = 8)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Describe every accepted key instead.
    #[arg(long)]
    pub keys: bool,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    if cli.threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let threads = cli.threads;
    match cli.command {
        Command::Dwt(a) => cmd_dwt(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, threads, out),
        Command::Restore(a) => cmd_restore(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::BenchScan(a) => cmd_bench_scan(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, threads, out),
        Command::Params(a) => cmd_params(&a, threads, out),
        Command::Config(a) => {
            if a.keys {
                write!(out, "{}", RunConfig::describe())?;
            } else {
                write!(out, "{}", load_config(&a.source, threads, &[])?.to_text())?;
            }
            Ok(())
        }
    }
}

/// File, then `extra`, then `--seed`, then `--set` flags, then `--threads` when given.
pub fn load_config(src: &ConfigSource, threads: Option<usize>, extra: &[(String, String)]) -> CliResult<RunConfig> {
    let text = match &src.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let origin = src.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let mut overrides = extra.to_vec();
    if let Some(s) = src.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    for o in &src.overrides {
        overrides.push(parse_override(o)?);
    }
    if let Some(t) = threads {
        overrides.push(("threads".into(), t.to_string()));
    }
    RunConfig::from_sources(text.as_deref().map(|t| (origin.as_str(), t)), &overrides)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

pub fn cmd_dwt(a: &DwtArgs, out: &mut dyn Write) -> CliResult<()> {
    let img: Tensor<f64> = load_rgb(&a.input)?;
    let (_, _, h, w) = img.dims4()?;
    let m = 1usize.checked_shl(a.levels as u32).unwrap_or(0);
    if a.levels == 0 || m == 0 || h % m != 0 || w % m != 0 {
        return Err(CliError::Usage(format!(
            "{}x{w} image cannot be decomposed {} times (extents must be divisible by 2^levels)",
            h, a.levels
        )));
    }
    create_dir(&a.out_dir)?;
    let levels = dwt_multi(&img, a.levels)?;
    for bands in &levels {
        let gain = 0.5f64.powi(bands.level as i32);
        let ll = bands.ll.map(|v| v * gain);
        save_rgb(&a.out_dir.join(format!("level{}_ll.png", bands.level)), &ll)?;
        for (name, band) in [("lh", &bands.lh), ("hl", &bands.hl), ("hh", &bands.hh)] {
            let vis = band.map(|v| (0.5 + v / 2.0).clamp(0.0, 1.0));
            save_rgb(&a.out_dir.join(format!("level{}_{name}.png", bands.level)), &vis)?;
        }
    }
    let err = iwt_multi(&levels)?.max_abs_diff(&img);
    writeln!(out, "wrote {} band images to {}", 4 * levels.len(), a.out_dir.display())?;
    writeln!(out, "reconstruction_error={err:e}")?;
    if err > MAX_DWT_ERROR {
        return Err(CliError::Numeric(format!("reconstruction error {err:e} exceeds {MAX_DWT_ERROR:e}")));
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.n == 0 || a.h == 0 || a.w == 0 {
        return Err(CliError::Usage("--n, --h and --w must be positive".into()));
    }
    let kind: DegradeKind = a.kind.parse()?;
    let template = DegradeSpec {
        kind,
        density: a.density,
        angle: a.angle,
        particle_radius: a.radius,
        intensity: a.intensity,
        seed: a.seed,
    };
    let pairs: Vec<Pair<f32>> = make_dataset(a.n, a.h, a.w, &template, a.seed)?;
    create_dir(&a.out_dir)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.into_iter().enumerate() {
        let e = Entry {
            index: i,
            clean: format!("clean_{i:04}.png").into(),
            degraded: format!("degraded_{i:04}.png").into(),
            spec: p.spec.clone(),
        };
        save_rgb(&a.out_dir.join(&e.clean), &p.clean)?;
        save_rgb(&a.out_dir.join(&e.degraded), &p.degraded)?;
        entries.push(e);
    }
    let path = a.out_dir.join("manifest.tsv");
    std::fs::write(&path, manifest::render(&entries)).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    writeln!(out, "wrote {} pairs and {}", entries.len(), path.display())?;
    Ok(())
}

fn training_pairs<T: Real>(cfg: &RunConfig) -> CliResult<Vec<Pair<T>>> {
    match &cfg.manifest {
        Some(m) => manifest::load_pairs(m),
        None => Ok(make_dataset(cfg.data_n, cfg.data_h, cfg.data_w, &cfg.degrade_spec(), cfg.data_seed())?),
    }
}

fn write_eval(out: &mut dyn Write, prefix: &str, r: &EvalReport) -> CliResult<()> {
    for row in &r.rows {
        writeln!(
            out,
            "{prefix}pair={} psnr={:.4} ssim={:.4} input_psnr={:.4} input_ssim={:.4}",
            row.index, row.psnr, row.ssim, row.input_psnr, row.input_ssim
        )?;
    }
    writeln!(
        out,
        "{prefix}mean psnr={:.4} ssim={:.4} input_psnr={:.4} input_ssim={:.4} gain={:.4}",
        r.mean_psnr,
        r.mean_ssim,
        r.mean_input_psnr,
        r.mean_input_ssim,
        r.mean_psnr - r.mean_input_psnr
    )?;
    Ok(())
}

fn check_gain(r: &EvalReport, min_gain: Option<f64>) -> CliResult<()> {
    let gain = r.mean_psnr - r.mean_input_psnr;
    match min_gain {
        Some(g) if !(gain >= g) => Err(CliError::Threshold(format!("mean PSNR gain {gain:.4} dB is below {g} dB"))),
        _ => Ok(()),
    }
}

fn train_typed<T: Real>(cfg: &RunConfig, checkpoint: &Path, out: &mut dyn Write) -> CliResult<()> {
    let pairs: Vec<Pair<T>> = training_pairs(cfg)?;
    if cfg.holdout >= pairs.len() {
        return Err(CliError::Usage(format!(
            "holdout {} leaves no training pairs out of {}",
            cfg.holdout,
            pairs.len()
        )));
    }
    let (train_set, held) = pairs.split_at(pairs.len() - cfg.holdout);
    let mut model = Model::<T>::build(&cfg.model)?;
    writeln!(out, "training {} pairs, holding out {}, {} parameters", train_set.len(), held.len(), model.param_count())?;
    let fx = ConvStack::<T>::stub();
    let report = train(&mut model, train_set, &cfg.train_config(), &fx, |step, loss| {
        let _ = writeln!(out, "step={step} loss={loss:.6}");
        let _ = out.flush();
    })?;
    model.save(checkpoint).map_err(|e| CliError::Io(format!("{}: {e}", checkpoint.display())))?;
    writeln!(out, "saved {}", checkpoint.display())?;
    if let Some(p) = &cfg.loss_history {
        std::fs::write(p, report.to_csv()).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    }
    if !held.is_empty() {
        let r = evaluate_with(held, |x| restore_any(&model, x))?;
        write_eval(out, "heldout ", &r)?;
        check_gain(&r, cfg.min_gain)?;
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, threads: Option<usize>, out: &mut dyn Write) -> CliResult<()> {
    let mut extra = Vec::new();
    if let Some(m) = &a.manifest {
        extra.push(("manifest".to_string(), m.display().to_string()));
    }
    if let Some(h) = &a.loss_history {
        extra.push(("loss_history".to_string(), h.display().to_string()));
    }
    let cfg = load_config(&a.source, threads, &extra)?;
    writeln!(out, "# effective config")?;
    write!(out, "{}", cfg.to_text())?;
    match cfg.model.precision {
        Precision::F32 => train_typed::<f32>(&cfg, &a.out_checkpoint, out),
        Precision::F64 => train_typed::<f64>(&cfg, &a.out_checkpoint, out),
    }
}

/// Edge-replicates `x` up to multiples of `m`.
pub fn pad_to_multiple<T: Real>(x: &Tensor<T>, m: usize) -> CliResult<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    Ok(Tensor::from_fn([n, c, ph, pw], |k| {
        let (plane, r) = (k / (ph * pw), k % (ph * pw));
        let (i, j) = ((r / pw).min(h - 1), (r % pw).min(w - 1));
        x.data()[(plane * h + i) * w + j]
    }))
}

/// Top-left `h x w` window.
pub fn crop_to<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> CliResult<Tensor<T>> {
    let (n, c, xh, xw) = x.dims4()?;
    if (xh, xw) == (h, w) {
        return Ok(x.clone());
    }
    Ok(Tensor::from_fn([n, c, h, w], |k| {
        let (plane, r) = (k / (h * w), k % (h * w));
        x.data()[(plane * xh + r / w) * xw + r % w]
    }))
}

/// Inference on any extent: pads to a multiple of 8, restores, crops back.
pub fn restore_any<T: Real>(model: &Model<T>, x: &Tensor<T>) -> famamba_core::Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(famamba_core::Error::Config("empty image".into()));
    }
    let padded = pad_to_multiple(x, 8).map_err(|e| famamba_core::Error::Config(e.to_string()))?;
    let y = model.forward(&padded)?;
    crop_to(&y, h, w).map_err(|e| famamba_core::Error::Config(e.to_string()))
}

fn load_model(path: &Path) -> CliResult<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(Model::from_bytes(&bytes)?)
}

pub fn cmd_restore(a: &RestoreArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let img: Tensor<f32> = load_rgb(&a.input)?;
    let y = restore_any(&model, &img)?;
    save_rgb(&a.out, &y)?;
    let (_, _, h, w) = y.dims4()?;
    writeln!(out, "restored {}x{} image to {}", h, w, a.out.display())?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let pairs: Vec<Pair<f32>> = manifest::load_pairs(&a.manifest)?;
    if pairs.is_empty() {
        return Err(CliError::Usage(format!("{} lists no pairs", a.manifest.display())));
    }
    let r = evaluate_with(&pairs, |x| restore_any(&model, x))?;
    write_eval(out, "", &r)?;
    check_gain(&r, a.min_gain)
}

pub fn cmd_bench_scan(a: &BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    let attn_lens = a.attn_lens.clone().unwrap_or_else(|| a.lens.clone());
    if a.lens.len() < 2 || attn_lens.len() < 2 || a.lens.iter().chain(&attn_lens).any(|&l| l == 0) {
        return Err(CliError::Usage("need at least two positive lengths".into()));
    }
    if a.d_inner == 0 || a.d_state == 0 || a.attn_dim == 0 || a.repeats == 0 {
        return Err(CliError::Usage("dimensions and repeats must be positive".into()));
    }
    let scan = scan_scaling(&a.lens, a.d_inner, a.d_state, a.repeats, a.seed)?;
    let attn = attention_scaling(&attn_lens, a.attn_dim, a.repeats, a.seed)?;
    writeln!(out, "op\tlen\tmedian_seconds")?;
    for (l, t) in a.lens.iter().zip(&scan) {
        writeln!(out, "scan\t{l}\t{t:.6e}")?;
    }
    for (l, t) in attn_lens.iter().zip(&attn) {
        writeln!(out, "attention\t{l}\t{t:.6e}")?;
    }
    let xs = |v: &[usize]| v.iter().map(|&l| l as f64).collect::<Vec<_>>();
    let floor = |v: &[f64]| v.iter().map(|t| t.max(1e-9)).collect::<Vec<_>>();
    let scan_slope = loglog_slope(&xs(&a.lens), &floor(&scan))?;
    let attn_slope = loglog_slope(&xs(&attn_lens), &floor(&attn))?;
    writeln!(out, "scan_slope={scan_slope:.4}")?;
    writeln!(out, "attention_slope={attn_slope:.4}")?;
    if a.check {
        let inside = |s: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&s);
        if !inside(scan_slope, SCAN_SLOPE) || !inside(attn_slope, ATTENTION_SLOPE) {
            return Err(CliError::Threshold(format!(
                "slopes scan {scan_slope:.3} (expected {SCAN_SLOPE:?}), attention {attn_slope:.3} (expected {ATTENTION_SLOPE:?})"
            )));
        }
    }
    Ok(())
}

pub fn cmd_gradcheck(a: &GradArgs, threads: Option<usize>, out: &mut dyn Write) -> CliResult<()> {
    if a.size == 0 || a.size % 8 != 0 {
        return Err(CliError::Usage(format!("--size {} must be a positive multiple of 8", a.size)));
    }
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    let cfg = load_config(&a.source, threads, &[])?;
    let mut mc = cfg.model.clone();
    mc.precision = Precision::F64;
    let mut model = Model::<f64>::build(&mc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    // the output projection starts at zero, which would block every upstream gradient
    for (name, t) in model.params_mut().iter_mut() {
        if name.starts_with("out.") {
            *t = Tensor::uniform(t.shape().to_vec(), -0.1, 0.1, &mut rng);
        }
    }
    let image: Tensor<f64> = Tensor::uniform([1, 3, a.size, a.size], 0.0, 1.0, &mut rng);
    let target: Tensor<f64> = Tensor::uniform([1, 3, a.size, a.size], 0.0, 1.0, &mut rng);
    let names = model.params().names();
    let inputs: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let fx = ConvStack::<f64>::stub();
    let weights = LossWeights::new(mc.lambda_perceptual)?;
    let gc = GradCheck {
        samples: Some(a.samples),
        seed: mc.seed,
        ..GradCheck::default()
    };
    let report = check_gradients(&inputs, &gc, |v| {
        let g = v[0].graph();
        let p = Bound::from_vars(&names, v);
        let y = model.forward_graph(&p, g.constant(image.clone()))?;
        total_loss(y, g.constant(target.clone()), &weights, &fx)
    })?;
    writeln!(
        out,
        "checked={} max_rel_error={:.3e} retries={}",
        report.checked, report.max_rel_error, report.retries
    )?;
    if !(report.max_rel_error <= MAX_GRAD_ERROR) {
        return Err(CliError::Numeric(format!(
            "max relative error {:.3e} exceeds {MAX_GRAD_ERROR:e} (worst {:?})",
            report.max_rel_error, report.worst
        )));
    }
    Ok(())
}

pub fn cmd_params(src: &ConfigSource, threads: Option<usize>, out: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(src, threads, &[])?;
    let model = Model::<f32>::build(&cfg.model)?;
    writeln!(out, "preset={}", cfg.preset)?;
    writeln!(out, "param_count={}", model.param_count())?;
    writeln!(out, "analytic_param_count={}", model.analytic_param_count())?;
    writeln!(out, "macs_256x256={}", model.macs(256, 256))?;
    Ok(())
}
