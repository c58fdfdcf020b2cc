//! The dual-branch extractor (DFEB), the prior-guided channel attention
//! block (PGB), the high-frequency U-Net (HFEM) and their composition.

use rand::Rng;

use crate::afsm::{directional_orders, SubBandKind};
use crate::error::{dim_err, Result};
use crate::numerics::{ConvSpec, Real, Var};
use crate::params::{add_conv, Bound, ParamStore};
use crate::ssm::{MambaBranch, MambaDims};

/// Channels of the stacked `(LH, HL, HH)` bands of an RGB image.
pub const PRIOR_CHANNELS: usize = 9;

/// A named 2D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            stride: 1,
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    /// Depthwise: one filter per channel.
    pub fn depthwise(name: impl Into<String>, c: usize, k: usize) -> Self {
        Self::new(name, c, c, k).groups(c)
    }

    fn spec(&self) -> ConvSpec {
        ConvSpec::new(self.stride, self.k / 2, self.groups)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        add_conv(store, &self.name, self.cin, self.cout, self.k, self.groups, self.bias, rng)
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(p.get(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        x.conv2d(w, b, self.spec())
    }

    pub fn param_count(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.k * self.k + if self.bias { self.cout } else { 0 }
    }

    /// Multiply-accumulates on an `n x cin x h x w` input.
    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let p = self.k / 2;
        let ho = (h + 2 * p - self.k) / self.stride + 1;
        let wo = (w + 2 * p - self.k) / self.stride + 1;
        (n * self.cout * ho * wo * (self.cin / self.groups) * self.k * self.k) as u64
    }
}

/// Widths shared by every FA-Block of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockDims {
    pub channels: usize,
    pub cnn_hidden: usize,
    pub ssm_inner: usize,
    pub ssm_state: usize,
    pub ssm_conv: usize,
    /// Groups of the PGB query/value pointwise projections.
    pub pgb_groups: usize,
}

impl BlockDims {
    fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || c % 4 != 0 {
            return Err(dim_err("blocks", format!("channels {c} must be a positive multiple of 4")));
        }
        if self.pgb_groups == 0 || (3 * c) % self.pgb_groups != 0 {
            return Err(dim_err("blocks", format!("3*{c} channels not divisible into {} groups", self.pgb_groups)));
        }
        if self.cnn_hidden == 0 || self.ssm_inner == 0 || self.ssm_state == 0 || self.ssm_conv == 0 {
            return Err(dim_err("blocks", "block widths must be positive"));
        }
        Ok(())
    }
}

fn check_image<T: Real>(op: &'static str, x: &Var<'_, T>, c: usize) -> Result<(usize, usize, usize)> {
    match *x.shape().as_slice() {
        [n, ch, h, w] if ch == c => Ok((n, h, w)),
        ref s => Err(dim_err(op, format!("expected [N, {c}, H, W], got {s:?}"))),
    }
}

/// CNN branch plus a selective-scan branch over the wavelet sub-bands of the
/// input, summed.
#[derive(Debug, Clone)]
pub struct Dfeb {
    pub conv1: Conv,
    pub conv2: Conv,
    /// One branch per sub-band kind, in [`SubBandKind::ALL`] order.
    pub mamba: Vec<MambaBranch>,
    pub channels: usize,
}

impl Dfeb {
    pub fn new(prefix: &str, dims: &BlockDims) -> Result<Self> {
        dims.validate()?;
        let c = dims.channels;
        let md = MambaDims::new(c, dims.ssm_inner, dims.ssm_state, dims.ssm_conv);
        Ok(Self {
            conv1: Conv::new(format!("{prefix}.cnn.conv1"), c, dims.cnn_hidden, 3),
            conv2: Conv::new(format!("{prefix}.cnn.conv2"), dims.cnn_hidden, c, 3),
            mamba: SubBandKind::ALL
                .iter()
                .map(|k| MambaBranch::new(format!("{prefix}.mamba.{}", k.name()), md.clone()))
                .collect(),
            channels: c,
        })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.conv1.init(store, rng)?;
        self.conv2.init(store, rng)?;
        self.mamba.iter().try_for_each(|m| m.init(store, rng))
    }

    pub fn cnn_branch<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.conv1.forward(p, x)?.relu()?;
        self.conv2.forward(p, h)
    }

    /// Each sub-band is scanned in its four directions (batched along the
    /// leading axis), restored to 2D, averaged, and the bands recombined by
    /// the inverse transform.
    pub fn mamba_branch<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let (n, h, w) = check_image("dfeb", &x, self.channels)?;
        let c = self.channels;
        let bands = x.dwt2()?;
        let (bh, bw) = (h / 2, w / 2);
        let mut outs = Vec::with_capacity(4);
        for (i, (kind, branch)) in SubBandKind::ALL.iter().zip(&self.mamba).enumerate() {
            let band = bands.slice(1, i * c, c)?;
            let orders = directional_orders(*kind, bh, bw)?;
            let seqs = orders
                .iter()
                .map(|o| band.scan_with(o))
                .collect::<Result<Vec<_>>>()?;
            let y = branch.forward(p, Var::concat(&seqs, 0)?)?;
            let dirs = orders
                .iter()
                .enumerate()
                .map(|(j, o)| y.slice(0, j * n, n)?.unscan_with(o))
                .collect::<Result<Vec<_>>>()?;
            outs.push(Var::mean_of(&dirs)?);
        }
        Var::concat(&outs, 1)?.iwt2()
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        check_image("dfeb", &x, self.channels)?;
        let a = self.cnn_branch(p, x)?;
        let b = self.mamba_branch(p, x)?;
        if a.shape() != b.shape() {
            return Err(dim_err("dfeb", "branch outputs differ in shape"));
        }
        a.add(b)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.mamba.iter().map(|m| m.dims.param_count()).sum::<usize>()
    }

    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let cnn = self.conv1.macs(n, h, w) + self.conv2.macs(n, h, w);
        let l = (h / 2) * (w / 2);
        cnn + self.mamba.iter().map(|m| m.dims.macs(4 * n, l)).sum::<u64>()
    }
}

/// Prior-guided channel attention.
#[derive(Debug, Clone)]
pub struct Pgb {
    pub q_pw: Conv,
    pub q_dw: Conv,
    pub v_pw: Conv,
    pub v_dw: Conv,
    pub k_pw: Conv,
    pub k_dw: Conv,
    pub proj: Conv,
    pub channels: usize,
}

/// Intermediate values of one PGB pass.
#[derive(Debug, Clone, Copy)]
pub struct PgbTrace<'g, T: Real> {
    /// Row-stochastic `[N, 3C, 3C]` channel attention.
    pub attention: Var<'g, T>,
    /// `[LL, X_res + (LH, HL, HH)]` before synthesis, `[N, 4C, h, w]`.
    pub fused: Var<'g, T>,
    pub output: Var<'g, T>,
}

impl Pgb {
    pub fn new(prefix: &str, dims: &BlockDims) -> Result<Self> {
        dims.validate()?;
        let c = dims.channels;
        let c3 = 3 * c;
        Ok(Self {
            q_pw: Conv::new(format!("{prefix}.q.pw"), c3, c3, 1).groups(dims.pgb_groups),
            q_dw: Conv::depthwise(format!("{prefix}.q.dw"), c3, 3),
            v_pw: Conv::new(format!("{prefix}.v.pw"), c3, c3, 1).groups(dims.pgb_groups),
            v_dw: Conv::depthwise(format!("{prefix}.v.dw"), c3, 3),
            k_pw: Conv::new(format!("{prefix}.k.pw"), PRIOR_CHANNELS, c3, 1),
            k_dw: Conv::depthwise(format!("{prefix}.k.dw"), c3, 3),
            proj: Conv::new(format!("{prefix}.proj"), c, c, 1),
            channels: c,
        })
    }

    fn convs(&self) -> [&Conv; 7] {
        [&self.q_pw, &self.q_dw, &self.v_pw, &self.v_dw, &self.k_pw, &self.k_dw, &self.proj]
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.convs().iter().try_for_each(|c| c.init(store, rng))
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>, prior: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.trace(p, x, prior)?.output)
    }

    pub fn trace<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>, prior: Var<'g, T>) -> Result<PgbTrace<'g, T>> {
        let (n, h, w) = check_image("pgb", &x, self.channels)?;
        let (pn, ph, pw) = check_image("pgb", &prior, PRIOR_CHANNELS)?;
        let c = self.channels;
        let (bh, bw) = (h / 2, w / 2);
        if pn != n || ph < bh || ph % bh != 0 || pw / bw != ph / bh || pw % bw != 0 {
            return Err(dim_err(
                "pgb",
                format!("prior {:?} cannot be pooled to {bh}x{bw}", prior.shape()),
            ));
        }
        let s = x.dwt2()?;
        let lf = s.slice(1, 0, c)?;
        let hf = s.slice(1, c, 3 * c)?;
        let q = self.q_dw.forward(p, self.q_pw.forward(p, hf)?)?;
        let v = self.v_dw.forward(p, self.v_pw.forward(p, hf)?)?;
        let pooled = prior.avg_pool2d(ph / bh)?;
        let k = self.k_dw.forward(p, self.k_pw.forward(p, pooled)?)?;
        let flat = [n, 3 * c, bh * bw];
        let (q, k, v) = (q.reshape(&flat)?, k.reshape(&flat)?, v.reshape(&flat)?);
        let attention = k.bmm(q.transpose()?)?.softmax(2)?;
        let res = attention.bmm(v)?.reshape(&[n, 3 * c, bh, bw])?;
        let fused = Var::concat(&[lf, res.add(hf)?], 1)?;
        let output = self.proj.forward(p, fused.iwt2()?)?;
        Ok(PgbTrace {
            attention,
            fused,
            output,
        })
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }

    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let (bh, bw) = (h / 2, w / 2);
        let c3 = 3 * self.channels;
        let per_band = [&self.q_pw, &self.q_dw, &self.v_pw, &self.v_dw, &self.k_pw, &self.k_dw]
            .iter()
            .map(|c| c.macs(n, bh, bw))
            .sum::<u64>();
        let attn = 2 * (n * c3 * c3 * bh * bw) as u64;
        per_band + attn + self.proj.macs(n, h, w)
    }
}

/// Shape-preserving U-Net on the stacked high-frequency image bands: two
/// stride-2 encoder stages, a bottleneck, two nearest-upsampling decoder
/// stages with skip concatenation.
#[derive(Debug, Clone)]
pub struct Hfem {
    pub enc: Conv,
    pub down1: Conv,
    pub down2: Conv,
    pub mid: Conv,
    pub up1: Conv,
    pub up2: Conv,
    pub out: Conv,
    /// Adds the input to the U-Net output.
    pub residual: bool,
}

impl Hfem {
    pub fn new(prefix: &str, width: usize, residual: bool) -> Result<Self> {
        if width == 0 {
            return Err(dim_err("hfem", "width must be positive"));
        }
        let w = width;
        let c = PRIOR_CHANNELS;
        Ok(Self {
            enc: Conv::new(format!("{prefix}.enc"), c, w, 3),
            down1: Conv::new(format!("{prefix}.down1"), w, 2 * w, 3).stride(2),
            down2: Conv::new(format!("{prefix}.down2"), 2 * w, 4 * w, 3).stride(2),
            mid: Conv::new(format!("{prefix}.mid"), 4 * w, 4 * w, 3),
            up1: Conv::new(format!("{prefix}.up1"), 6 * w, 2 * w, 3),
            up2: Conv::new(format!("{prefix}.up2"), 3 * w, w, 3),
            out: Conv::new(format!("{prefix}.out"), w, c, 3),
            residual,
        })
    }

    fn convs(&self) -> [&Conv; 7] {
        [&self.enc, &self.down1, &self.down2, &self.mid, &self.up1, &self.up2, &self.out]
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.convs().iter().try_for_each(|c| c.init(store, rng))
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let (_, h, w) = check_image("hfem", &x, PRIOR_CHANNELS)?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(dim_err("hfem", format!("extents {h}x{w} must be divisible by 4")));
        }
        let e1 = self.enc.forward(p, x)?.relu()?;
        let e2 = self.down1.forward(p, e1)?.relu()?;
        let e3 = self.down2.forward(p, e2)?.relu()?;
        let m = self.mid.forward(p, e3)?.relu()?;
        let d1 = Var::concat(&[m.upsample_nearest2d(2)?, e2], 1)?;
        let d1 = self.up1.forward(p, d1)?.relu()?;
        let d2 = Var::concat(&[d1.upsample_nearest2d(2)?, e1], 1)?;
        let d2 = self.up2.forward(p, d2)?.relu()?;
        let y = self.out.forward(p, d2)?;
        if self.residual {
            y.add(x)
        } else {
            Ok(y)
        }
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }

    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        self.enc.macs(n, h, w)
            + self.down1.macs(n, h, w)
            + self.down2.macs(n, h / 2, w / 2)
            + self.mid.macs(n, h / 4, w / 4)
            + self.up1.macs(n, h / 2, w / 2)
            + self.up2.macs(n, h, w)
            + self.out.macs(n, h, w)
    }
}

/// `x + pgb(dfeb(x), prior)`.
#[derive(Debug, Clone)]
pub struct FaBlock {
    pub dfeb: Dfeb,
    pub pgb: Pgb,
}

impl FaBlock {
    pub fn new(prefix: &str, dims: &BlockDims) -> Result<Self> {
        Ok(Self {
            dfeb: Dfeb::new(&format!("{prefix}.dfeb"), dims)?,
            pgb: Pgb::new(&format!("{prefix}.pgb"), dims)?,
        })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.dfeb.init(store, rng)?;
        self.pgb.init(store, rng)
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>, prior: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = self.pgb.forward(p, self.dfeb.forward(p, x)?, prior)?;
        x.add(y)
    }

    pub fn param_count(&self) -> usize {
        self.dfeb.param_count() + self.pgb.param_count()
    }

    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        self.dfeb.macs(n, h, w) + self.pgb.macs(n, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, GradCheck, Graph, Tensor};
    use crate::wavelet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(c: usize) -> BlockDims {
        BlockDims {
            channels: c,
            cnn_hidden: c,
            ssm_inner: 2 * c,
            ssm_state: 4,
            ssm_conv: 4,
            pgb_groups: 3,
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn zero_prefix(store: &mut ParamStore<f64>, prefix: &str) {
        for (name, t) in store.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        zero_prefix(store, "");
    }

    fn eval<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> Tensor<f64>
    where
        F: for<'g> Fn(&Bound<'g, f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
    {
        let g = Graph::new();
        let p = store.bind(&g, false);
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        (*f(&p, &vars).unwrap().value()).clone()
    }

    /// Gradient check over all parameters and inputs, reduced to a scalar
    /// by a fixed probe.
    fn gradcheck<F>(store: &ParamStore<f64>, inputs: Vec<Tensor<f64>>, samples: usize, f: F) -> f64
    where
        F: for<'g> Fn(&Bound<'g, f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
    {
        let names = store.names();
        let k = names.len();
        let mut all: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
        all.extend(inputs);
        let cfg = GradCheck {
            samples: Some(samples),
            ..GradCheck::default()
        };
        let r = check_gradients(&all, &cfg, |v| {
            let p = Bound::from_vars(&names, &v[..k]);
            let y = f(&p, &v[k..])?;
            let probe = y.graph().constant(Tensor::from_fn(y.shape(), |i| (i as f64 * 0.37).sin()));
            y.mul(probe)?.sum()
        })
        .unwrap();
        assert!(r.checked >= 100.min(samples));
        if r.max_rel_error > 1e-4 {
            let (p, i, a, n) = r.worst.unwrap();
            let name = names.get(p).map_or("input", String::as_str);
            eprintln!("worst coordinate {name}[{i}]: analytic {a:e}, numeric {n:e}");
        }
        r.max_rel_error
    }

    fn build<B>(seed: u64, f: impl FnOnce(&mut ParamStore<f64>, &mut ChaCha8Rng) -> B) -> (B, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let b = f(&mut store, &mut rng);
        (b, store)
    }

    #[test]
    fn conv_counts() {
        let c = Conv::new("c", 3, 8, 3);
        assert_eq!(c.param_count(), 224);
        assert_eq!(c.macs(1, 8, 8), 8 * 64 * 27);
        assert_eq!(c.macs(1, 16, 8), 2 * c.macs(1, 8, 8));
        assert_eq!(Conv::depthwise("d", 6, 3).param_count(), 6 * 9 + 6);
        assert_eq!(Conv::new("s", 4, 8, 3).stride(2).macs(1, 8, 8), 8 * 16 * 36);
    }

    #[test]
    fn dfeb_is_additive() {
        let (dfeb, mut store) = build(1, |s, r| {
            let d = Dfeb::new("b", &dims(4)).unwrap();
            d.init(s, r).unwrap();
            d
        });
        assert_eq!(store.numel(), dfeb.param_count());
        let x = rand_t(&[2, 4, 8, 8], 2);
        let cnn = eval(&store, &[x.clone()], |p, v| dfeb.cnn_branch(p, v[0]));
        let mamba = eval(&store, &[x.clone()], |p, v| dfeb.mamba_branch(p, v[0]));
        let full = eval(&store, &[x.clone()], |p, v| dfeb.forward(p, v[0]));
        assert_eq!(full.shape(), x.shape());
        assert!(full.max_abs_diff(&crate::numerics::ops::add(&cnn, &mamba).unwrap()) < 1e-15);

        let mut only_cnn = store.clone();
        zero_prefix(&mut only_cnn, "b.mamba.");
        assert_eq!(eval(&only_cnn, &[x.clone()], |p, v| dfeb.forward(p, v[0])), cnn);
        zero_prefix(&mut store, "b.cnn.");
        assert_eq!(eval(&store, &[x.clone()], |p, v| dfeb.forward(p, v[0])), mamba);
    }

    #[test]
    fn dfeb_rejects_wrong_channels() {
        let (dfeb, store) = build(1, |s, r| {
            let d = Dfeb::new("b", &dims(4)).unwrap();
            d.init(s, r).unwrap();
            d
        });
        let g = Graph::new();
        let p = store.bind(&g, false);
        assert!(dfeb.forward(&p, g.constant(Tensor::zeros([1, 8, 8, 8]))).is_err());
        assert!(Dfeb::new("b", &dims(6)).is_err());
    }

    #[test]
    fn dfeb_gradients() {
        let (dfeb, store) = build(3, |s, r| {
            let d = Dfeb::new("b", &dims(4)).unwrap();
            d.init(s, r).unwrap();
            d
        });
        let err = gradcheck(&store, vec![rand_t(&[1, 4, 8, 8], 4)], 200, |p, v| dfeb.forward(p, v[0]));
        assert!(err <= 1e-4, "{err}");
    }

    fn pgb_setup(seed: u64) -> (Pgb, ParamStore<f64>) {
        build(seed, |s, r| {
            let b = Pgb::new("p", &dims(4)).unwrap();
            b.init(s, r).unwrap();
            b
        })
    }

    #[test]
    fn pgb_attention_rows_stochastic() {
        let (pgb, store) = pgb_setup(5);
        for seed in 0..5 {
            let x = rand_t(&[2, 4, 8, 8], seed);
            let prior = rand_t(&[2, 9, 8, 8], seed + 100);
            let a = eval(&store, &[x, prior], |p, v| Ok(pgb.trace(p, v[0], v[1])?.attention));
            assert_eq!(a.shape(), &[2, 12, 12]);
            for row in a.data().chunks(12) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                assert!(row.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn pgb_uniform_attention_averages_values() {
        let (pgb, mut store) = pgb_setup(6);
        // constant keys make every logit row constant
        zero_prefix(&mut store, "p.k.");
        let x = rand_t(&[1, 4, 8, 8], 7);
        let prior = rand_t(&[1, 9, 8, 8], 8);
        let trace = |store: &ParamStore<f64>| {
            let g = Graph::new();
            let p = store.bind(&g, false);
            let t = pgb.trace(&p, g.constant(x.clone()), g.constant(prior.clone())).unwrap();
            let hf = g.constant(x.clone()).dwt2().unwrap().slice(1, 4, 12).unwrap();
            let v = pgb.v_dw.forward(&p, pgb.v_pw.forward(&p, hf).unwrap()).unwrap();
            (
                (*t.attention.value()).clone(),
                (*t.fused.value()).clone(),
                (*v.value()).clone(),
                (*hf.value()).clone(),
            )
        };
        let (att, fused, v, hf) = trace(&store);
        assert!(att.data().iter().all(|&a| (a - 1.0 / 12.0).abs() < 1e-15));
        // every residual channel is the channel mean of V
        let plane = 16;
        for ch in 0..12 {
            for i in 0..plane {
                let mean: f64 = (0..12).map(|k| v.data()[k * plane + i]).sum::<f64>() / 12.0;
                let got = fused.data()[(4 + ch) * plane + i] - hf.data()[ch * plane + i];
                assert!((got - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pgb_zero_values_keep_high_bands() {
        let (pgb, mut store) = pgb_setup(9);
        zero_prefix(&mut store, "p.v.");
        let x = rand_t(&[1, 4, 8, 8], 10);
        let prior = rand_t(&[1, 9, 16, 16], 11);
        let fused = eval(&store, &[x.clone(), prior.clone()], |p, v| Ok(pgb.trace(p, v[0], v[1])?.fused));
        let bands = wavelet::dwt2(&x).unwrap().stacked().unwrap();
        assert!(fused.max_abs_diff(&bands) < 1e-15);
        // identity projection then reproduces the input
        let w = store.get_mut("p.proj.weight").unwrap();
        *w = Tensor::from_fn([4, 4, 1, 1], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        zero_prefix(&mut store, "p.proj.bias");
        let out = eval(&store, &[x.clone(), prior], |p, v| pgb.forward(p, v[0], v[1]));
        assert!(out.max_abs_diff(&x) < 1e-14);
    }

    #[test]
    fn pgb_rejects_incompatible_prior() {
        let (pgb, store) = pgb_setup(9);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(Tensor::zeros([1, 4, 8, 8]));
        assert!(pgb.forward(&p, x, g.constant(Tensor::zeros([1, 9, 2, 2]))).is_err());
        assert!(pgb.forward(&p, x, g.constant(Tensor::zeros([1, 9, 10, 10]))).is_err());
        assert!(pgb.forward(&p, x, g.constant(Tensor::zeros([1, 8, 8, 8]))).is_err());
        assert!(Pgb::new("p", &BlockDims { pgb_groups: 5, ..dims(4) }).is_err());
    }

    #[test]
    fn pgb_gradients() {
        let (pgb, store) = pgb_setup(12);
        let inputs = vec![rand_t(&[1, 4, 8, 8], 13), rand_t(&[1, 9, 8, 8], 14)];
        let err = gradcheck(&store, inputs, 200, |p, v| pgb.forward(p, v[0], v[1]));
        assert!(err <= 1e-4, "{err}");
    }

    fn hfem_setup(residual: bool) -> (Hfem, ParamStore<f64>) {
        build(15, |s, r| {
            let h = Hfem::new("hfem", 4, residual).unwrap();
            h.init(s, r).unwrap();
            h
        })
    }

    #[test]
    fn hfem_shapes_and_zero_weights() {
        let (hfem, mut store) = hfem_setup(false);
        assert_eq!(store.numel(), hfem.param_count());
        let x = rand_t(&[2, 9, 8, 12], 16);
        let y = eval(&store, &[x.clone()], |p, v| hfem.forward(p, v[0]));
        assert_eq!(y.shape(), x.shape());
        zero_all(&mut store);
        let y = eval(&store, &[x.clone()], |p, v| hfem.forward(p, v[0]));
        assert_eq!(y.max_abs(), 0.0);
        let with_skip = Hfem {
            residual: true,
            ..hfem.clone()
        };
        assert_eq!(eval(&store, &[x.clone()], |p, v| with_skip.forward(p, v[0])), x);
        let g = Graph::new();
        assert!(hfem.forward(&store.bind(&g, false), g.constant(Tensor::zeros([1, 9, 6, 8]))).is_err());
    }

    #[test]
    fn hfem_gradients() {
        let (hfem, store) = hfem_setup(true);
        let err = gradcheck(&store, vec![rand_t(&[1, 9, 8, 8], 17)], 200, |p, v| hfem.forward(p, v[0]));
        assert!(err <= 1e-4, "{err}");
    }

    fn block_setup(seed: u64) -> (FaBlock, ParamStore<f64>) {
        build(seed, |s, r| {
            let b = FaBlock::new("blk", &dims(4)).unwrap();
            b.init(s, r).unwrap();
            b
        })
    }

    #[test]
    fn fa_block_zero_weights_is_identity() {
        let (block, mut store) = block_setup(18);
        let x = rand_t(&[2, 4, 8, 8], 19);
        let prior = rand_t(&[2, 9, 8, 8], 20);
        let y = eval(&store, &[x.clone(), prior.clone()], |p, v| block.forward(p, v[0], v[1]));
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs_diff(&x) > 0.0);
        zero_all(&mut store);
        let y = eval(&store, &[x.clone(), prior], |p, v| block.forward(p, v[0], v[1]));
        assert_eq!(y, x);
    }

    #[test]
    fn fa_block_gradients() {
        let (block, store) = block_setup(21);
        let inputs = vec![rand_t(&[1, 4, 8, 8], 22), rand_t(&[1, 9, 8, 8], 23)];
        let err = gradcheck(&store, inputs, 200, |p, v| block.forward(p, v[0], v[1]));
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn macs_match_recorded() {
        let (block, store) = block_setup(24);
        let g = Graph::<f64>::new();
        let p = store.bind(&g, false);
        block
            .forward(&p, g.constant(rand_t(&[2, 4, 8, 8], 25)), g.constant(rand_t(&[2, 9, 8, 8], 26)))
            .unwrap();
        assert_eq!(g.macs(), block.macs(2, 8, 8));
        let (hfem, store) = hfem_setup(true);
        let g = Graph::<f64>::new();
        hfem.forward(&store.bind(&g, false), g.constant(rand_t(&[1, 9, 16, 8], 27)))
            .unwrap();
        assert_eq!(g.macs(), hfem.macs(1, 16, 8));
    }
}
