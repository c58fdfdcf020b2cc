//! `key = value` run configuration.
//!
//! A file is read line by line (`#` starts a comment). `--set key=value`
//! flags are applied after the file, so they win. `preset` is applied before
//! any other key regardless of where it appears.

use std::fmt::Write as _;
use std::path::PathBuf;

use famamba_core::datasynth::{DegradeKind, DegradeSpec};
use famamba_core::loss::LossWeights;
use famamba_core::trainer::{Schedule, TrainConfig};
use famamba_core::ModelConfig;

use crate::{CliError, CliResult};

/// Keys other than the model keys, with their meaning.
pub const RUN_KEYS: &[(&str, &str)] = &[
    ("preset", "model preset applied first: toy or full"),
    ("steps1", "steps in the first learning-rate phase"),
    ("lr1", "learning rate of the first phase"),
    ("steps2", "steps in the second learning-rate phase"),
    ("lr2", "learning rate of the second phase"),
    ("batch_size", "pairs per optimisation step"),
    ("crop", "square random-crop size, a multiple of 8; 0 trains on whole images"),
    ("clip_norm", "global gradient-norm clip; 0 disables"),
    ("log_every", "steps between printed loss lines"),
    ("prefetch", "depth of the batch prefetch queue"),
    ("threads", "worker threads; must be 1 or more, work runs on one thread"),
    ("manifest", "train on this manifest instead of a synthesized set"),
    ("data_n", "number of synthesized pairs"),
    ("data_h", "height of synthesized images"),
    ("data_w", "width of synthesized images"),
    ("data_kind", "rain or snow"),
    ("data_density", "degradation density in [0, 1]"),
    ("data_angle", "rain streak angle in degrees"),
    ("data_radius", "snow particle radius in pixels"),
    ("data_intensity", "particle opacity in [0, 1]"),
    ("data_seed", "dataset seed; defaults to seed"),
    ("holdout", "trailing pairs excluded from training and evaluated afterwards"),
    ("min_gain", "required held-out PSNR gain in dB; exit 5 when missed"),
    ("loss_history", "write step,loss CSV to this path"),
];

/// Descriptions of the model keys.
pub const MODEL_KEY_DOCS: &[(&str, &str)] = &[
    ("depths", "FA-blocks per stage, comma separated"),
    ("channels", "feature width C, a multiple of 4"),
    ("levels", "wavelet levels per stage; only 1 is supported"),
    ("lambda_perceptual", "weight of the perceptual term"),
    ("seed", "seed for weights, batch order and (by default) data"),
    ("precision", "f32 or f64"),
    ("cnn_expand", "CNN branch hidden width as a multiple of C"),
    ("ssm_expand", "SSM inner width as a multiple of C"),
    ("ssm_state", "SSM state size"),
    ("ssm_conv", "SSM causal convolution width"),
    ("hfem_width", "base width of the high-frequency U-Net"),
    ("hfem_residual", "add the input prior back after the U-Net"),
    ("pgb_groups", "groups of the prior-guided query and value projections"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub steps1: usize,
    pub lr1: f64,
    pub steps2: usize,
    pub lr2: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub clip_norm: f64,
    pub log_every: usize,
    pub prefetch: usize,
    pub threads: usize,
    pub manifest: Option<PathBuf>,
    pub data_n: usize,
    pub data_h: usize,
    pub data_w: usize,
    pub data_kind: DegradeKind,
    pub data_density: f64,
    pub data_angle: f64,
    pub data_radius: f64,
    pub data_intensity: f64,
    pub data_seed: Option<u64>,
    pub holdout: usize,
    pub min_gain: Option<f64>,
    pub loss_history: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let rain = DegradeSpec::rain(0.3, 0);
        Self {
            preset: "toy".into(),
            model: ModelConfig::toy(),
            steps1: 1500,
            lr1: 3e-4,
            steps2: 500,
            lr2: 1e-4,
            batch_size: 2,
            crop: 0,
            clip_norm: 0.0,
            log_every: 100,
            prefetch: 4,
            threads: 1,
            manifest: None,
            data_n: 16,
            data_h: 32,
            data_w: 32,
            data_kind: DegradeKind::Rain,
            data_density: rain.density,
            data_angle: rain.angle,
            data_radius: rain.particle_radius,
            data_intensity: rain.intensity,
            data_seed: None,
            holdout: 4,
            min_gain: None,
            loss_history: None,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> CliResult<V> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value {value:?} for {key}")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Splits `key = value` text into pairs, rejecting malformed lines.
pub fn parse_lines(text: &str, origin: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` flag.
pub fn parse_override(s: &str) -> CliResult<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Every accepted key in output order.
    pub fn keys() -> Vec<&'static str> {
        let mut k = vec!["preset"];
        k.extend(ModelConfig::keys());
        k.extend(RUN_KEYS.iter().skip(1).map(|p| p.0));
        k
    }

    /// Applies `pairs` in order on top of the defaults, `preset` first.
    pub fn from_pairs(pairs: &[(String, String)]) -> CliResult<Self> {
        let mut cfg = Self::default();
        if let Some((_, p)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            cfg.preset = p.clone();
            cfg.model = ModelConfig::preset(p).map_err(|_| CliError::Usage(format!("unknown preset {p:?}")))?;
        }
        for (k, v) in pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses the optional file text, then the overrides.
    pub fn from_sources(file: Option<(&str, &str)>, overrides: &[(String, String)]) -> CliResult<Self> {
        let mut pairs = match file {
            Some((origin, text)) => parse_lines(text, origin)?,
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        if self.model.set(key, value).map_err(|e| CliError::Usage(e.to_string()))? {
            return Ok(());
        }
        match key {
            "steps1" => self.steps1 = parse(key, value)?,
            "lr1" => self.lr1 = parse(key, value)?,
            "steps2" => self.steps2 = parse(key, value)?,
            "lr2" => self.lr2 = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "prefetch" => self.prefetch = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "manifest" => self.manifest = opt_path(value),
            "data_n" => self.data_n = parse(key, value)?,
            "data_h" => self.data_h = parse(key, value)?,
            "data_w" => self.data_w = parse(key, value)?,
            "data_kind" => self.data_kind = value.parse().map_err(|_| CliError::Usage(format!("invalid value {value:?} for {key}")))?,
            "data_density" => self.data_density = parse(key, value)?,
            "data_angle" => self.data_angle = parse(key, value)?,
            "data_radius" => self.data_radius = parse(key, value)?,
            "data_intensity" => self.data_intensity = parse(key, value)?,
            "data_seed" => self.data_seed = (!value.is_empty()).then(|| parse(key, value)).transpose()?,
            "holdout" => self.holdout = parse(key, value)?,
            "min_gain" => self.min_gain = (!value.is_empty()).then(|| parse(key, value)).transpose()?,
            "loss_history" => self.loss_history = opt_path(value),
            "preset" => return Err(CliError::Usage("preset can only be set once, before other keys".into())),
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.train_config().schedule.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.degrade_spec().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let usage = |m: String| Err(CliError::Usage(m));
        if self.threads == 0 {
            return usage("threads must be at least 1".into());
        }
        if self.batch_size == 0 {
            return usage("batch_size must be at least 1".into());
        }
        if self.crop % 8 != 0 {
            return usage(format!("crop {} must be a multiple of 8", self.crop));
        }
        if !(self.clip_norm >= 0.0) {
            return usage("clip_norm must be >= 0".into());
        }
        if self.manifest.is_none() && (self.data_h % 8 != 0 || self.data_w % 8 != 0 || self.data_n == 0) {
            return usage("data_n must be positive and data_h, data_w multiples of 8".into());
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.model.seed)
    }

    pub fn degrade_spec(&self) -> DegradeSpec {
        DegradeSpec {
            kind: self.data_kind,
            density: self.data_density,
            angle: self.data_angle,
            particle_radius: self.data_radius,
            intensity: self.data_intensity,
            seed: self.data_seed(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: Schedule {
                phases: vec![(self.steps1, self.lr1), (self.steps2, self.lr2)],
            },
            batch_size: self.batch_size,
            crop: (self.crop > 0).then_some(self.crop),
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            seed: self.model.seed,
            log_every: self.log_every,
            loss: LossWeights {
                lambda_perceptual: self.model.lambda_perceptual,
            },
            prefetch: self.prefetch,
            ..TrainConfig::default()
        }
    }

    /// Effective configuration as `key = value` lines.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = format!("preset = {}\n{}", self.preset, self.model.to_text());
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("steps1", self.steps1.to_string());
        line("lr1", self.lr1.to_string());
        line("steps2", self.steps2.to_string());
        line("lr2", self.lr2.to_string());
        line("batch_size", self.batch_size.to_string());
        line("crop", self.crop.to_string());
        line("clip_norm", self.clip_norm.to_string());
        line("log_every", self.log_every.to_string());
        line("prefetch", self.prefetch.to_string());
        line("threads", self.threads.to_string());
        line("manifest", path(&self.manifest));
        line("data_n", self.data_n.to_string());
        line("data_h", self.data_h.to_string());
        line("data_w", self.data_w.to_string());
        line("data_kind", self.data_kind.as_str().to_string());
        line("data_density", self.data_density.to_string());
        line("data_angle", self.data_angle.to_string());
        line("data_radius", self.data_radius.to_string());
        line("data_intensity", self.data_intensity.to_string());
        line("data_seed", self.data_seed.map(|s| s.to_string()).unwrap_or_default());
        line("holdout", self.holdout.to_string());
        line("min_gain", self.min_gain.map(|g| g.to_string()).unwrap_or_default());
        line("loss_history", path(&self.loss_history));
        s
    }

    /// One `key: description` line per accepted key.
    pub fn describe() -> String {
        let mut s = String::new();
        for (k, d) in RUN_KEYS.iter().take(1).chain(MODEL_KEY_DOCS).chain(RUN_KEYS.iter().skip(1)) {
            let _ = writeln!(s, "{k}: {d}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.min_gain = Some(3.0);
        cfg.loss_history = Some("h.csv".into());
        cfg.data_seed = Some(9);
        let back = RunConfig::from_sources(Some(("t", &cfg.to_text())), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_win_and_preset_goes_first() {
        let text = "channels = 16\npreset = toy\n# comment\nsteps1 = 10\n";
        let cfg = RunConfig::from_sources(Some(("f", text)), &pairs(&[("steps1", "20"), ("seed", "7")])).unwrap();
        assert_eq!(cfg.model.channels, 16);
        assert_eq!(cfg.steps1, 20);
        assert_eq!(cfg.model.seed, 7);
        assert_eq!(cfg.data_seed(), 7);
        assert_eq!(cfg.train_config().seed, 7);
        let full = RunConfig::from_pairs(&pairs(&[("preset", "full")])).unwrap();
        assert_eq!(full.model, ModelConfig::full());
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        for bad in [
            vec![("bogus", "1")],
            vec![("steps1", "ten")],
            vec![("threads", "0")],
            vec![("crop", "12")],
            vec![("channels", "6")],
            vec![("preset", "huge")],
            vec![("data_kind", "hail")],
            vec![("data_density", "2")],
        ] {
            assert!(matches!(RunConfig::from_pairs(&pairs(&bad)), Err(CliError::Usage(_))), "{bad:?}");
        }
        assert!(parse_lines("no equals sign", "f").is_err());
        assert!(parse_override("k").is_err());
        assert_eq!(parse_override(" a = b ").unwrap(), ("a".into(), "b".into()));
    }

    #[test]
    fn every_key_is_documented() {
        let docs = RunConfig::describe();
        for k in RunConfig::keys() {
            assert!(docs.lines().any(|l| l.starts_with(&format!("{k}: "))), "{k}");
        }
        let text = RunConfig::default().to_text();
        let emitted: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(emitted, RunConfig::keys());
    }
}
