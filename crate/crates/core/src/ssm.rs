//! Selective state-space sequence kernel.
//!
//! Shapes: `x`, `delta` are `[N, E, L]`; `A` is `[E, S]` (diagonal state
//! matrix per channel); `B`, `C` are `[N, S, L]` and shared by all channels
//! of a sequence; `D` is `[E]`.
//!
//! Discretization is `Abar = exp(delta * A)`, `Bbar = delta * B`, and the
//! recurrence is `h_t = Abar_t h_{t-1} + Bbar_t x_t`, `y_t = C_t . h_t + D x_t`
//! with `h_0 = 0`.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{ops, ConvSpec, Real, Tensor, Var};
use crate::params::{fan_in_uniform, Bound, ParamStore};

/// Borrowed state-space quantities for one batch of sequences.
#[derive(Debug, Clone, Copy)]
pub struct SsmParams<'a, T: Real> {
    pub a: &'a Tensor<T>,
    pub b: &'a Tensor<T>,
    pub c: &'a Tensor<T>,
    pub d: &'a Tensor<T>,
    pub delta: &'a Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dims {
    n: usize,
    e: usize,
    s: usize,
    l: usize,
}

impl<T: Real> SsmParams<'_, T> {
    fn dims(&self, x: &Tensor<T>) -> Result<Dims> {
        let (n, e, l) = x.dims3()?;
        let (ea, s) = self.a.dims2()?;
        let ok = ea == e
            && self.b.shape() == [n, s, l]
            && self.c.shape() == [n, s, l]
            && self.d.shape() == [e]
            && self.delta.shape() == [n, e, l];
        if !ok {
            return Err(dim_err(
                "selective_scan",
                format!(
                    "x {:?}, A {:?}, B {:?}, C {:?}, D {:?}, delta {:?}",
                    x.shape(),
                    self.a.shape(),
                    self.b.shape(),
                    self.c.shape(),
                    self.d.shape(),
                    self.delta.shape()
                ),
            ));
        }
        if self.delta.data().iter().any(|&v| !(v > T::zero())) {
            return Err(Error::InvalidArgument {
                op: "selective_scan",
                detail: "delta must be positive".into(),
            });
        }
        if self.a.data().iter().any(|&v| !(v < T::zero())) {
            return Err(Error::InvalidArgument {
                op: "selective_scan",
                detail: "A must be strictly negative".into(),
            });
        }
        Ok(Dims { n, e, s, l })
    }
}

/// Discretized quantities, each `[N, E, L, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized<T: Real> {
    pub abar: Tensor<T>,
    pub bbar: Tensor<T>,
}

/// `Abar = exp(delta * A)`, `Bbar = delta * B`, elementwise per `(n, e, t, s)`.
pub fn discretize<T: Real>(a: &Tensor<T>, b: &Tensor<T>, delta: &Tensor<T>) -> Result<Discretized<T>> {
    let (n, e, l) = delta.dims3()?;
    let (ea, s) = a.dims2()?;
    if ea != e || b.shape() != [n, s, l] {
        return Err(dim_err(
            "discretize",
            format!("A {:?}, B {:?}, delta {:?}", a.shape(), b.shape(), delta.shape()),
        ));
    }
    if delta.data().iter().any(|&v| !(v > T::zero())) {
        return Err(Error::InvalidArgument {
            op: "discretize",
            detail: "delta must be positive".into(),
        });
    }
    let shape = [n, e, l, s];
    let abar = Tensor::from_fn(shape, |i| {
        let (k, rest) = (i % s, i / s);
        let (t, rest) = (rest % l, rest / l);
        let (ch, bi) = (rest % e, rest / e);
        (delta.at(&[bi, ch, t]) * a.at(&[ch, k])).exp()
    });
    let bbar = Tensor::from_fn(shape, |i| {
        let (k, rest) = (i % s, i / s);
        let (t, rest) = (rest % l, rest / l);
        let (ch, bi) = (rest % e, rest / e);
        delta.at(&[bi, ch, t]) * b.at(&[bi, k, t])
    });
    Ok(Discretized {
        abar: abar.check_finite("discretize")?,
        bbar: bbar.check_finite("discretize")?,
    })
}

/// Literal sequential evaluation of the recurrence over discretized
/// tensors. Reference oracle for [`selective_scan`].
pub fn naive_recurrence<T: Real>(p: &SsmParams<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let Dims { n, e, s, l } = p.dims(x)?;
    let disc = discretize(p.a, p.b, p.delta)?;
    let mut y = Tensor::zeros([n, e, l]);
    for bi in 0..n {
        let mut h = vec![vec![T::zero(); s]; e];
        for t in 0..l {
            for ch in 0..e {
                let xt = x.at(&[bi, ch, t]);
                let mut acc = p.d.at(&[ch]) * xt;
                for k in 0..s {
                    let idx = [bi, ch, t, k];
                    h[ch][k] = disc.abar.at(&idx) * h[ch][k] + disc.bbar.at(&idx) * xt;
                    acc += p.c.at(&[bi, k, t]) * h[ch][k];
                }
                y.set(&[bi, ch, t], acc);
            }
        }
    }
    y.check_finite("naive_recurrence")
}

/// `[N, S, L]` to `[N, L, S]` so the state loop reads contiguously.
fn time_major<T: Real>(x: &Tensor<T>) -> Result<Vec<T>> {
    Ok(ops::permute(x, &[0, 2, 1])?.into_data())
}

/// Single linear pass: `O(N E L S)` work, one `S`-vector of state per
/// channel.
pub fn selective_scan<T: Real>(p: &SsmParams<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let Dims { n, e, s, l } = p.dims(x)?;
    let bt = time_major(p.b)?;
    let ct = time_major(p.c)?;
    let (xd, dd, ad, dv) = (x.data(), p.delta.data(), p.a.data(), p.d.data());
    let mut y = vec![T::zero(); n * e * l];
    let mut h = vec![T::zero(); s];
    for bi in 0..n {
        let bseq = &bt[bi * l * s..(bi + 1) * l * s];
        let cseq = &ct[bi * l * s..(bi + 1) * l * s];
        for ch in 0..e {
            let row = (bi * e + ch) * l;
            let arow = &ad[ch * s..(ch + 1) * s];
            h.iter_mut().for_each(|v| *v = T::zero());
            for t in 0..l {
                let (xt, dt) = (xd[row + t], dd[row + t]);
                let dx = dt * xt;
                let (bs, cs) = (&bseq[t * s..(t + 1) * s], &cseq[t * s..(t + 1) * s]);
                let mut acc = T::zero();
                for k in 0..s {
                    h[k] = (dt * arow[k]).exp() * h[k] + bs[k] * dx;
                    acc += cs[k] * h[k];
                }
                y[row + t] = acc + dv[ch] * xt;
            }
        }
    }
    Tensor::new(vec![n, e, l], y)?.check_finite("selective_scan")
}

/// Gradients of a scalar objective through [`selective_scan`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGrads<T: Real> {
    pub x: Tensor<T>,
    pub delta: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub d: Tensor<T>,
}

/// Reverse pass. States are recomputed per channel rather than stored.
pub fn selective_scan_backward<T: Real>(
    p: &SsmParams<'_, T>,
    x: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<ScanGrads<T>> {
    let Dims { n, e, s, l } = p.dims(x)?;
    if gy.shape() != x.shape() {
        return Err(dim_err("selective_scan_backward", "gradient shape mismatch"));
    }
    let bt = time_major(p.b)?;
    let ct = time_major(p.c)?;
    let (xd, dd, ad, dv, gyd) = (x.data(), p.delta.data(), p.a.data(), p.d.data(), gy.data());
    let mut gx = vec![T::zero(); n * e * l];
    let mut gdelta = vec![T::zero(); n * e * l];
    let mut ga = vec![T::zero(); e * s];
    let mut gbt = vec![T::zero(); n * l * s];
    let mut gct = vec![T::zero(); n * l * s];
    let mut gd = vec![T::zero(); e];
    // hs[t + 1] is the state after step t; hs[0] = 0
    let mut hs = vec![T::zero(); (l + 1) * s];
    let mut abar = vec![T::zero(); l * s];
    let mut gh = vec![T::zero(); s];
    for bi in 0..n {
        let off = bi * l * s;
        for ch in 0..e {
            let row = (bi * e + ch) * l;
            let arow = &ad[ch * s..(ch + 1) * s];
            for t in 0..l {
                let (xt, dt) = (xd[row + t], dd[row + t]);
                for k in 0..s {
                    let a = (dt * arow[k]).exp();
                    abar[t * s + k] = a;
                    hs[(t + 1) * s + k] = a * hs[t * s + k] + bt[off + t * s + k] * dt * xt;
                }
            }
            gh.iter_mut().for_each(|v| *v = T::zero());
            for t in (0..l).rev() {
                let (xt, dt, g) = (xd[row + t], dd[row + t], gyd[row + t]);
                let mut gxt = g * dv[ch];
                let mut gdt = T::zero();
                gd[ch] += g * xt;
                for k in 0..s {
                    let i = off + t * s + k;
                    let h = hs[(t + 1) * s + k];
                    let hprev = hs[t * s + k];
                    let a = abar[t * s + k];
                    gct[i] += g * h;
                    gh[k] += g * ct[i];
                    let gak = gh[k] * hprev * a;
                    gdt += gak * arow[k] + gh[k] * bt[i] * xt;
                    ga[ch * s + k] += gak * dt;
                    gbt[i] += gh[k] * dt * xt;
                    gxt += gh[k] * dt * bt[i];
                    gh[k] *= a;
                }
                gx[row + t] = gxt;
                gdelta[row + t] = gdt;
            }
        }
    }
    let back = |v: Vec<T>| -> Result<Tensor<T>> { ops::permute(&Tensor::new(vec![n, l, s], v)?, &[0, 2, 1]) };
    Ok(ScanGrads {
        x: Tensor::new(vec![n, e, l], gx)?.check_finite("selective_scan_backward")?,
        delta: Tensor::new(vec![n, e, l], gdelta)?.check_finite("selective_scan_backward")?,
        a: Tensor::new(vec![e, s], ga)?.check_finite("selective_scan_backward")?,
        b: back(gbt)?.check_finite("selective_scan_backward")?,
        c: back(gct)?.check_finite("selective_scan_backward")?,
        d: Tensor::new(vec![e], gd)?.check_finite("selective_scan_backward")?,
    })
}

/// Multiply-accumulates of one scan: state update plus readout.
pub fn scan_macs(n: usize, e: usize, s: usize, l: usize) -> u64 {
    (2 * n * e * s * l) as u64
}

impl<'g, T: Real> Var<'g, T> {
    /// Differentiable [`selective_scan`] with `self` as the input sequence.
    pub fn selective_scan(
        self,
        delta: Var<'g, T>,
        a: Var<'g, T>,
        b: Var<'g, T>,
        c: Var<'g, T>,
        d: Var<'g, T>,
    ) -> Result<Self> {
        let (xv, dv, av, bv, cv, ddv) = (
            self.value(),
            delta.value(),
            a.value(),
            b.value(),
            c.value(),
            d.value(),
        );
        let p = SsmParams {
            a: &av,
            b: &bv,
            c: &cv,
            d: &ddv,
            delta: &dv,
        };
        let y = selective_scan(&p, &xv)?;
        let dims = p.dims(&xv)?;
        self.graph()
            .add_macs(scan_macs(dims.n, dims.e, dims.s, dims.l));
        self.graph()
            .record("selective_scan", y, &[self, delta, a, b, c, d], |ctx| {
                let i = &ctx.inputs;
                let p = SsmParams {
                    a: i[2],
                    b: i[3],
                    c: i[4],
                    d: i[5],
                    delta: i[1],
                };
                let g = selective_scan_backward(&p, i[0], ctx.grad)?;
                Ok(vec![Some(g.x), Some(g.delta), Some(g.a), Some(g.b), Some(g.c), Some(g.d)])
            })
    }
}

/// Softmax attention `softmax(q k^T / sqrt(d)) v` over `[L, d]` operands,
/// evaluated row by row. Quadratic in `L`; kept only as a scaling foil.
pub fn quadratic_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (l, d) = q.dims2()?;
    if k.shape() != [l, d] || v.shape() != [l, d] {
        return Err(dim_err("quadratic_attention", "q, k, v must share shape"));
    }
    let scale = T::one() / T::c(d as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![T::zero(); l * d];
    let mut logits = vec![T::zero(); l];
    for i in 0..l {
        let qi = &qd[i * d..(i + 1) * d];
        let mut m = T::neg_infinity();
        for (j, lg) in logits.iter_mut().enumerate() {
            let kj = &kd[j * d..(j + 1) * d];
            *lg = qi.iter().zip(kj).fold(T::zero(), |acc, (&a, &b)| acc + a * b) * scale;
            m = m.max(*lg);
        }
        let mut z = T::zero();
        for lg in logits.iter_mut() {
            *lg = (*lg - m).exp();
            z += *lg;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, &w) in logits.iter().enumerate() {
            let w = w / z;
            for (o, &vv) in oi.iter_mut().zip(&vd[j * d..(j + 1) * d]) {
                *o += w * vv;
            }
        }
    }
    Tensor::new(vec![l, d], out)?.check_finite("quadratic_attention")
}

/// Widths of one gated selective-SSM branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MambaDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub dt_rank: usize,
}

impl MambaDims {
    pub fn new(d_model: usize, d_inner: usize, d_state: usize, d_conv: usize) -> Self {
        Self {
            d_model,
            d_inner,
            d_state,
            d_conv,
            dt_rank: d_model.div_ceil(16),
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, e, s, k, r) = (self.d_model, self.d_inner, self.d_state, self.d_conv, self.dt_rank);
        d * 2 * e + e * k + e + e * (r + 2 * s) + r * e + e + e * s + e + e * d
    }

    /// Multiply-accumulates for `n` sequences of length `l`.
    pub fn macs(&self, n: usize, l: usize) -> u64 {
        let (d, e, s, k, r) = (self.d_model, self.d_inner, self.d_state, self.d_conv, self.dt_rank);
        let per_step = d * 2 * e + e * k + e * (r + 2 * s) + r * e + e * d;
        (n * l * per_step) as u64 + scan_macs(n, e, s, l)
    }
}

/// Gated selective-SSM block over `[N, D, L]` sequences: input projection
/// to `2E`, causal depthwise conv and silu on one half, input-dependent
/// `delta`, `B`, `C`, selective scan, gating by `silu` of the other half,
/// output projection back to `D`.
#[derive(Debug, Clone)]
pub struct MambaBranch {
    pub prefix: String,
    pub dims: MambaDims,
}

impl MambaBranch {
    pub fn new(prefix: impl Into<String>, dims: MambaDims) -> Self {
        Self {
            prefix: prefix.into(),
            dims,
        }
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        let MambaDims {
            d_model: d,
            d_inner: e,
            d_state: s,
            d_conv: k,
            dt_rank: r,
        } = self.dims;
        store.insert(self.name("in_proj.weight"), fan_in_uniform(&[2 * e, d, 1, 1], d, rng))?;
        store.insert(self.name("conv1d.weight"), fan_in_uniform(&[e, k], k, rng))?;
        store.insert(self.name("conv1d.bias"), fan_in_uniform(&[e], k, rng))?;
        store.insert(self.name("x_proj.weight"), fan_in_uniform(&[r + 2 * s, e, 1, 1], e, rng))?;
        store.insert(self.name("dt_proj.weight"), fan_in_uniform(&[e, r, 1, 1], r, rng))?;
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let dt_bias = Tensor::from_fn([e], |_| {
            let dt = rng.gen_range(lo..hi).exp();
            // inverse of softplus
            T::c(dt + (-(-dt).exp_m1()).ln())
        });
        store.insert(self.name("dt_proj.bias"), dt_bias)?;
        store.insert(
            self.name("a_log"),
            Tensor::from_fn([e, s], |i| T::c(((i % s) as f64 + 1.0).ln())),
        )?;
        store.insert(self.name("d"), Tensor::ones([e]))?;
        store.insert(self.name("out_proj.weight"), fan_in_uniform(&[d, e, 1, 1], e, rng))?;
        Ok(())
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        let &[n, d, l] = shape.as_slice() else {
            return Err(dim_err("mamba_branch", format!("expected [N, D, L], got {shape:?}")));
        };
        let MambaDims {
            d_model,
            d_inner: e,
            d_state: s,
            dt_rank: r,
            ..
        } = self.dims;
        if d != d_model {
            return Err(dim_err("mamba_branch", format!("{d} channels, expected {d_model}")));
        }
        let pw = |v: Var<'g, T>, w: &str, b: Option<&str>| -> Result<Var<'g, T>> {
            let c = v.shape()[1];
            let bias = b.map(|b| p.get(&self.name(b))).transpose()?;
            let y = v
                .reshape(&[n, c, 1, l])?
                .conv2d(p.get(&self.name(w))?, bias, ConvSpec::same(1))?;
            let co = y.shape()[1];
            y.reshape(&[n, co, l])
        };
        let xz = pw(x, "in_proj.weight", None)?;
        let xi = xz.slice(1, 0, e)?;
        let z = xz.slice(1, e, e)?;
        let u = xi
            .causal_conv1d(p.get(&self.name("conv1d.weight"))?, p.get(&self.name("conv1d.bias"))?)?
            .silu()?;
        let proj = pw(u, "x_proj.weight", None)?;
        let dt_in = proj.slice(1, 0, r)?;
        let b = proj.slice(1, r, s)?;
        let c = proj.slice(1, r + s, s)?;
        let delta = pw(dt_in, "dt_proj.weight", Some("dt_proj.bias"))?.softplus()?;
        let a = p.get(&self.name("a_log"))?.exp()?.neg()?;
        let y = u.selective_scan(delta, a, b, c, p.get(&self.name("d"))?)?;
        pw(y.mul(z.silu()?)?, "out_proj.weight", None)
    }
}
