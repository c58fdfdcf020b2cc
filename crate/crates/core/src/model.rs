//! The full restoration network: wavelet analysis, shallow features, the
//! high-frequency prior, stages of FA-Blocks with stage skips, a band
//! projection and wavelet synthesis. Also configuration and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{BlockDims, Conv, FaBlock, Hfem, PRIOR_CHANNELS};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// FA-Blocks per stage.
    pub depths: Vec<usize>,
    /// Feature width C.
    pub channels: usize,
    /// Wavelet levels; only 1 is supported.
    pub levels: usize,
    pub lambda_perceptual: f64,
    pub seed: u64,
    pub precision: Precision,
    /// CNN branch hidden width as a multiple of C.
    pub cnn_expand: f64,
    /// Selective-scan inner width as a multiple of C.
    pub ssm_expand: f64,
    pub ssm_state: usize,
    pub ssm_conv: usize,
    pub hfem_width: usize,
    pub hfem_residual: bool,
    pub pgb_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

const KEYS: [&str; 13] = [
    "depths",
    "channels",
    "levels",
    "lambda_perceptual",
    "seed",
    "precision",
    "cnn_expand",
    "ssm_expand",
    "ssm_state",
    "ssm_conv",
    "hfem_width",
    "hfem_residual",
    "pgb_groups",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: {value:?}")))
}

impl ModelConfig {
    /// Full-size preset: depths {6,6,4,4}, C = 180.
    pub fn full() -> Self {
        Self {
            depths: vec![6, 6, 4, 4],
            channels: 180,
            levels: 1,
            lambda_perceptual: 0.01,
            seed: 0,
            precision: Precision::F32,
            cnn_expand: 0.5,
            ssm_expand: 0.25,
            ssm_state: 16,
            ssm_conv: 4,
            hfem_width: 16,
            hfem_residual: true,
            pgb_groups: 3,
        }
    }

    /// Desk-scale preset: depths {1,1}, C = 8.
    pub fn toy() -> Self {
        Self {
            depths: vec![1, 1],
            channels: 8,
            cnn_expand: 1.0,
            ssm_expand: 2.0,
            hfem_width: 8,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" | "default" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!("unknown preset {name:?}"))),
        }
    }

    pub fn cnn_hidden(&self) -> usize {
        (self.channels as f64 * self.cnn_expand).round() as usize
    }

    pub fn ssm_inner(&self) -> usize {
        (self.channels as f64 * self.ssm_expand).round() as usize
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            channels: self.channels,
            cnn_hidden: self.cnn_hidden(),
            ssm_inner: self.ssm_inner(),
            ssm_state: self.ssm_state,
            ssm_conv: self.ssm_conv,
            pgb_groups: self.pgb_groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depths.is_empty() || self.depths.contains(&0) {
            return bad(format!("depths must be non-empty and positive, got {:?}", self.depths));
        }
        if self.channels == 0 || self.channels % 4 != 0 {
            return bad(format!("channels must be a positive multiple of 4, got {}", self.channels));
        }
        if self.levels != 1 {
            return bad(format!("only levels = 1 is supported, got {}", self.levels));
        }
        if !(self.lambda_perceptual.is_finite() && self.lambda_perceptual >= 0.0) {
            return bad(format!("lambda_perceptual must be finite and >= 0, got {}", self.lambda_perceptual));
        }
        if !(self.cnn_expand > 0.0 && self.ssm_expand > 0.0) || self.cnn_hidden() == 0 || self.ssm_inner() == 0 {
            return bad("expansion ratios must give positive widths".into());
        }
        if self.ssm_state == 0 || self.ssm_conv == 0 || self.hfem_width == 0 {
            return bad("ssm_state, ssm_conv and hfem_width must be positive".into());
        }
        if self.pgb_groups == 0 || (3 * self.channels) % self.pgb_groups != 0 {
            return bad(format!("pgb_groups {} must divide 3 * channels", self.pgb_groups));
        }
        Ok(())
    }

    /// Sets one field from its text form. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "depths" => {
                self.depths = value
                    .split(',')
                    .map(|v| parse(key, v))
                    .collect::<Result<_>>()?;
            }
            "channels" => self.channels = parse(key, value)?,
            "levels" => self.levels = parse(key, value)?,
            "lambda_perceptual" => self.lambda_perceptual = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "precision" => {
                self.precision = match value.trim() {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    v => return Err(Error::Config(format!("invalid precision {v:?}"))),
                }
            }
            "cnn_expand" => self.cnn_expand = parse(key, value)?,
            "ssm_expand" => self.ssm_expand = parse(key, value)?,
            "ssm_state" => self.ssm_state = parse(key, value)?,
            "ssm_conv" => self.ssm_conv = parse(key, value)?,
            "hfem_width" => self.hfem_width = parse(key, value)?,
            "hfem_residual" => self.hfem_residual = parse(key, value)?,
            "pgb_groups" => self.pgb_groups = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn keys() -> &'static [&'static str] {
        &KEYS
    }

    /// Canonical `key = value` lines, one per field, in a fixed order.
    pub fn to_text(&self) -> String {
        let depths: Vec<String> = self.depths.iter().map(|d| d.to_string()).collect();
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("depths", depths.join(","));
        line("channels", self.channels.to_string());
        line("levels", self.levels.to_string());
        line("lambda_perceptual", self.lambda_perceptual.to_string());
        line("seed", self.seed.to_string());
        line("precision", self.precision.as_str().to_string());
        line("cnn_expand", self.cnn_expand.to_string());
        line("ssm_expand", self.ssm_expand.to_string());
        line("ssm_state", self.ssm_state.to_string());
        line("ssm_conv", self.ssm_conv.to_string());
        line("hfem_width", self.hfem_width.to_string());
        line("hfem_residual", self.hfem_residual.to_string());
        line("pgb_groups", self.pgb_groups.to_string());
        s
    }

    /// Parses [`ModelConfig::to_text`] output. Unspecified keys keep the
    /// full preset value; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::full();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            if !cfg.set(k.trim(), v.trim())? {
                return Err(Error::Config(format!("line {}: unknown key {:?}", i + 1, k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
struct Arch {
    shallow: Conv,
    hfem: Hfem,
    stages: Vec<Vec<FaBlock>>,
    out: Conv,
}

impl Arch {
    fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.block_dims();
        let c = cfg.channels;
        let stages = cfg
            .depths
            .iter()
            .enumerate()
            .map(|(s, &d)| {
                (0..d)
                    .map(|b| FaBlock::new(&format!("stage{s}.block{b}"), &dims))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shallow: Conv::new("shallow", 12, c, 3),
            hfem: Hfem::new("hfem", cfg.hfem_width, cfg.hfem_residual)?,
            stages,
            out: Conv::new("out", c, 12, 3),
        })
    }

    fn blocks(&self) -> impl Iterator<Item = &FaBlock> {
        self.stages.iter().flatten()
    }
}

/// A built restoration network with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    arch: Arch,
    params: ParamStore<T>,
    /// Optimizer steps taken so far; persisted in checkpoints.
    pub step: u64,
}

impl<T: Real> Model<T> {
    /// Deterministic construction from `config.seed`. The final band
    /// projection starts at zero, so a fresh model is the identity map.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        let arch = Arch::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        arch.shallow.init(&mut params, &mut rng)?;
        arch.hfem.init(&mut params, &mut rng)?;
        for b in arch.blocks() {
            b.init(&mut params, &mut rng)?;
        }
        arch.out.init(&mut params, &mut rng)?;
        for (name, t) in params.iter_mut() {
            if name.starts_with("out.") {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
        Ok(Self {
            config: config.clone(),
            arch,
            params,
            step: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Parameter tally from layer shapes alone.
    pub fn analytic_param_count(&self) -> usize {
        self.arch.shallow.param_count()
            + self.arch.hfem.param_count()
            + self.arch.blocks().map(FaBlock::param_count).sum::<usize>()
            + self.arch.out.param_count()
    }

    /// Multiply-accumulates of one forward pass on an `h x w` image.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (bh, bw) = (h / 2, w / 2);
        self.arch.shallow.macs(1, bh, bw)
            + self.arch.hfem.macs(1, bh, bw)
            + self.arch.blocks().map(|b| b.macs(1, bh, bw)).sum::<u64>()
            + self.arch.out.macs(1, bh, bw)
    }

    /// Floating-point operations of one forward pass (2 per multiply-accumulate).
    pub fn flop_estimate(&self, h: usize, w: usize) -> u64 {
        2 * self.macs(h, w)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
            step: self.step,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, 3, h, w] if h % 8 == 0 && w % 8 == 0 => Ok(()),
            [_, 3, h, w] => Err(dim_err("forward", format!("extents {h}x{w} must be divisible by 8"))),
            _ => Err(dim_err("forward", format!("expected [N, 3, H, W], got {shape:?}"))),
        }
    }

    /// The training graph: unclamped restored image.
    pub fn forward_graph<'g>(&self, p: &Bound<'g, T>, image: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_input(&image.shape())?;
        let a = &self.arch;
        let stacked = image.dwt2()?;
        let prior = a.hfem.forward(p, stacked.slice(1, 3, PRIOR_CHANNELS)?)?;
        let mut x = a.shallow.forward(p, stacked)?;
        for stage in &a.stages {
            let skip = x;
            for block in stage {
                x = block.forward(p, x, prior)?;
            }
            x = x.add(skip)?;
        }
        stacked.add(a.out.forward(p, x)?)?.iwt2()
    }

    /// Inference: restored image clamped to `[0, 1]`.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(image.shape())?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let y = self.forward_graph(&p, g.constant(image.clone()))?;
        let out = y.value().clamp(T::zero(), T::one());
        Ok(out)
    }

    /// Serialized checkpoint bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.config, self.step, &self.params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Rebuilds the model described by a checkpoint.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = checkpoint::decode(bytes)?;
        let config = ModelConfig::from_text(&ck.config)?;
        let mut model = Self::build(&config)?;
        model.assign(ck.params)?;
        model.step = ck.step;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads checkpoint weights into this architecture, checking names and
    /// shapes. On error the model is left unchanged.
    pub fn load_weights(&mut self, bytes: &[u8]) -> Result<()> {
        let ck = checkpoint::decode(bytes)?;
        self.assign(ck.params)?;
        self.step = ck.step;
        Ok(())
    }

    fn assign(&mut self, records: Vec<(String, Tensor<f32>)>) -> Result<()> {
        let mut fresh = self.params.clone();
        let mut seen = std::collections::BTreeSet::new();
        for (name, t) in records {
            let slot = fresh.get_mut(&name).map_err(|_| Error::Parameter {
                name: name.clone(),
                detail: "not part of this model".into(),
            })?;
            if slot.shape() != t.shape() {
                return Err(Error::Parameter {
                    detail: format!("checkpoint shape {:?}, model shape {:?}", t.shape(), slot.shape()),
                    name,
                });
            }
            *slot = t.cast();
            seen.insert(name);
        }
        if let Some(name) = self.params.names().into_iter().find(|n| !seen.contains(n)) {
            return Err(Error::Parameter {
                name,
                detail: "missing from checkpoint".into(),
            });
        }
        self.params = fresh;
        Ok(())
    }
}

/// Binary checkpoint layout (little-endian):
///
/// ```text
/// magic "FAMAMBA\0" | version u32 | config: u32 len + UTF-8 | step u64
/// | count u32 | count x (name: u32 len + UTF-8, rank u32, extents u64..., f32 data...)
/// | FNV-1a 64 of all preceding bytes
/// ```
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 8] = b"FAMAMBA\0";
    pub const VERSION: u32 = 1;

    /// Decoded contents of a checkpoint file.
    #[derive(Debug, Clone)]
    pub struct Decoded {
        pub config: String,
        pub step: u64,
        pub params: Vec<(String, Tensor<f32>)>,
    }

    pub fn fnv1a64(bytes: &[u8]) -> u64 {
        bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    pub fn encode<T: Real>(config: &ModelConfig, step: u64, params: &ParamStore<T>) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&step.to_le_bytes());
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
            let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
            let s = &self.buf[self.pos..end];
            self.pos = end;
            Ok(s)
        }

        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
        }

        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        }

        fn string(&mut self) -> Result<String> {
            let n = self.u32()? as usize;
            String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
        }
    }

    /// Validates magic, checksum and version, then parses every record.
    pub fn decode(bytes: &[u8]) -> Result<Decoded> {
        if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a64(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = r.string()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: extent overflow")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            params.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after records".into()));
        }
        Ok(Decoded { config, step, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, GradCheck};
    use crate::wavelet;

    fn probe(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform([1, 3, h, w], 0.0, 1.0, &mut rng)
    }

    fn randomize_out<T: Real>(m: &mut Model<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (name, t) in m.params_mut().iter_mut() {
            if name.starts_with("out.") {
                *t = Tensor::uniform(t.shape().to_vec(), -0.1, 0.1, &mut rng);
            }
        }
    }

    #[test]
    fn config_text_round_trip() {
        for cfg in [ModelConfig::full(), ModelConfig::toy()] {
            assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        }
        assert!(ModelConfig::from_text("bogus = 1").is_err());
        assert!(ModelConfig::from_text("channels = 6").is_err());
        assert!(ModelConfig::from_text("levels = 2").is_err());
        assert!(ModelConfig::from_text("lambda_perceptual = -1").is_err());
        assert!(ModelConfig::from_text("depths =").is_err());
        assert_eq!(ModelConfig::full().lambda_perceptual, 0.01);
        assert_eq!(ModelConfig::keys().len(), ModelConfig::full().to_text().lines().count());
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f32>::build(&ModelConfig::toy()).unwrap();
        let b = Model::<f32>::build(&ModelConfig::toy()).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_eq!(a.params(), b.params());
        let c = Model::<f32>::build(&ModelConfig {
            seed: 1,
            ..ModelConfig::toy()
        })
        .unwrap();
        assert_ne!(a.params().get("shallow.weight").unwrap(), c.params().get("shallow.weight").unwrap());
    }

    #[test]
    fn param_count_grows_with_width() {
        let counts: Vec<usize> = [8, 16, 32]
            .iter()
            .map(|&c| {
                let m = Model::<f32>::build(&ModelConfig {
                    channels: c,
                    ..ModelConfig::toy()
                })
                .unwrap();
                assert_eq!(m.param_count(), m.analytic_param_count());
                m.param_count()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn forward_contract() {
        let mut m = Model::<f32>::build(&ModelConfig::toy()).unwrap();
        let x = probe(32, 32, 1);
        // zero band projection: exact reconstruction
        let y = m.forward(&x).unwrap();
        assert!(y.max_abs_diff(&x) <= 1e-6);
        randomize_out(&mut m);
        let y1 = m.forward(&x).unwrap();
        let y2 = m.forward(&x).unwrap();
        assert_eq!(y1.shape(), x.shape());
        assert_eq!(y1, y2);
        assert!(y1.is_finite());
        assert!(y1.max_abs_diff(&x) > 1e-3);
        assert!(y1.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let y = m.forward(&probe(16, 24, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 16, 24]);
        assert!(m.forward(&probe(12, 16, 3)).is_err());
        assert!(m.forward(&Tensor::zeros([1, 1, 16, 16])).is_err());
    }

    #[test]
    fn macs_match_tape() {
        let mut m = Model::<f64>::build(&ModelConfig::toy()).unwrap();
        randomize_out(&mut m);
        for (h, w) in [(16, 16), (32, 16)] {
            let g = Graph::new();
            let p = m.params().bind(&g, false);
            m.forward_graph(&p, g.constant(probe(h, w, 4).cast())).unwrap();
            assert_eq!(g.macs(), m.macs(h, w));
        }
        assert_eq!(m.flop_estimate(32, 16), 2 * m.flop_estimate(16, 16));
    }

    #[test]
    fn full_preset_in_bracket() {
        let m = Model::<f32>::build(&ModelConfig::full()).unwrap();
        let n = m.param_count();
        assert!((8_000_000..=16_000_000).contains(&n), "{n}");
        assert_eq!(n, m.analytic_param_count());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = Model::<f32>::build(&ModelConfig::toy()).unwrap();
        randomize_out(&mut m);
        m.step = 17;
        let bytes = m.to_bytes();
        let back = Model::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.to_bytes(), bytes);
        let x = probe(32, 32, 5);
        assert_eq!(back.forward(&x).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn checkpoint_rejections() {
        let m = Model::<f32>::build(&ModelConfig::toy()).unwrap();
        let bytes = m.to_bytes();
        let truncated = &bytes[..bytes.len() - 100];
        assert!(matches!(Model::<f32>::from_bytes(truncated), Err(Error::Checkpoint(_))));
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(Model::<f32>::from_bytes(&flipped), Err(Error::Checkpoint(_))));
        let mut versioned = bytes[..bytes.len() - 8].to_vec();
        versioned[8] = 9;
        let sum = checkpoint::fnv1a64(&versioned);
        versioned.extend_from_slice(&sum.to_le_bytes());
        match Model::<f32>::from_bytes(&versioned) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version")),
            other => panic!("{other:?}"),
        }

        let mut wide = Model::<f32>::build(&ModelConfig {
            channels: 12,
            ..ModelConfig::toy()
        })
        .unwrap();
        let before = wide.params().clone();
        match wide.load_weights(&bytes) {
            Err(Error::Parameter { name, detail }) => {
                assert!(wide.params().contains(&name));
                assert!(detail.contains("shape"));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(wide.params(), &before);

        let mut deeper = Model::<f32>::build(&ModelConfig {
            depths: vec![1, 2],
            ..ModelConfig::toy()
        })
        .unwrap();
        match deeper.load_weights(&bytes) {
            Err(Error::Parameter { name, detail }) => {
                assert!(name.starts_with("stage1.block1"));
                assert!(detail.contains("missing"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn end_to_end_gradients() {
        let cfg = ModelConfig {
            channels: 4,
            hfem_width: 4,
            ssm_state: 4,
            ..ModelConfig::toy()
        };
        let mut m = Model::<f64>::build(&cfg).unwrap();
        randomize_out(&mut m);
        let names = m.params().names();
        let k = names.len();
        let mut inputs: Vec<Tensor<f64>> = m.params().iter().map(|(_, t)| t.clone()).collect();
        let samples = m.param_count() / 100;
        inputs.push(probe(16, 16, 6).cast());
        let target: Tensor<f64> = probe(16, 16, 7).cast();
        let cfg = GradCheck {
            samples: Some(samples.max(100)),
            ..GradCheck::default()
        };
        let r = check_gradients(&inputs, &cfg, |v| {
            let p = Bound::from_vars(&names, &v[..k]);
            let y = m.forward_graph(&p, v[k])?;
            let t = y.graph().constant(target.clone());
            let d = y.sub(t)?;
            d.mul(d)?.mean()
        })
        .unwrap();
        assert!(r.checked >= 100);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn zero_model_reconstructs_bands() {
        let m = Model::<f64>::build(&ModelConfig::toy()).unwrap();
        let x: Tensor<f64> = probe(16, 16, 8).cast();
        let y = m.forward(&x).unwrap();
        let b = wavelet::iwt2(&wavelet::dwt2(&x).unwrap()).unwrap();
        assert!(y.max_abs_diff(&b) < 1e-12);
    }
}
