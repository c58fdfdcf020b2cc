//! Tensor-level primitives and the gradient kernels the tape uses.
//!
//! Every forward primitive validates shapes and rejects non-finite results.
//! Image tensors use `[batch, channel, height, width]` layout; sequence
//! tensors use `[batch, channel, length]`.

use crate::error::{dim_err, Error, Result};
use crate::numerics::tensor::{Real, Tensor};

/// Stride, zero padding and channel grouping of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    pub const fn with_groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

/// Resolved extents of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    s: usize,
    p: usize,
}

impl ConvGeometry {
    pub(crate) fn new(input: &[usize], weight: &[usize], spec: ConvSpec) -> Result<Self> {
        let op = "conv2d";
        let (n, cin, h, w) = match *input {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(dim_err(op, format!("input must be rank 4, got {input:?}"))),
        };
        let (cout, cin_g, kh, kw) = match *weight {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(dim_err(op, format!("weight must be rank 4, got {weight:?}"))),
        };
        let g = spec.groups;
        if g == 0 || spec.stride == 0 {
            return Err(dim_err(op, "groups and stride must be positive"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(dim_err(op, format!("kernel extents must be odd, got {kh}x{kw}")));
        }
        if cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return Err(dim_err(
                op,
                format!("channels in={cin} out={cout} incompatible with groups={g} and weight {weight:?}"),
            ));
        }
        if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
            return Err(dim_err(op, format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let wo = (w + 2 * spec.padding - kw) / spec.stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            cin_g,
            cout_g: cout / g,
            kh,
            kw,
            ho,
            wo,
            s: spec.stride,
            p: spec.padding,
        })
    }

    pub(crate) fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    /// Multiply-accumulate count of the forward pass.
    pub(crate) fn macs(&self) -> u64 {
        (self.n * self.cout * self.ho * self.wo * self.cin_g * self.kh * self.kw) as u64
    }
}

/// Output positions `o` for which `o*s + k - p` lands inside `[0, len)`.
fn valid_range(k: usize, p: usize, s: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    if len + p < k + 1 {
        return (0, 0);
    }
    let hi = ((len - 1 + p - k) / s + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Visits every (output plane, input plane, kernel tap) triple with the
/// valid output window for that tap.
fn for_each_tap(
    geo: &ConvGeometry,
    mut f: impl FnMut(usize, usize, usize, usize, usize, (usize, usize), (usize, usize)),
) {
    for n in 0..geo.n {
        for co in 0..geo.cout {
            let group = co / geo.cout_g;
            for cig in 0..geo.cin_g {
                let ci = group * geo.cin_g + cig;
                for ky in 0..geo.kh {
                    let ys = valid_range(ky, geo.p, geo.s, geo.h, geo.ho);
                    for kx in 0..geo.kw {
                        let xs = valid_range(kx, geo.p, geo.s, geo.w, geo.wo);
                        f(n, co, ci, cig, ky * geo.kw + kx, ys, xs);
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation (no kernel flip) with optional bias.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(input.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [geo.cout] {
            return Err(dim_err("conv2d", format!("bias shape {:?} != [{}]", b.shape(), geo.cout)));
        }
    }
    let (h, w, ho, wo) = (geo.h, geo.w, geo.ho, geo.wo);
    let (s, p) = (geo.s, geo.p);
    let x = input.data();
    let wt = weight.data();
    let ksz = geo.kh * geo.kw;
    let mut out = vec![T::zero(); geo.n * geo.cout * ho * wo];
    if let Some(b) = bias {
        for (i, plane) in out.chunks_mut(ho * wo).enumerate() {
            plane.fill(b.data()[i % geo.cout]);
        }
    }
    for_each_tap(&geo, |n, co, ci, cig, tap, (y0, y1), (x0, x1)| {
        let wv = wt[(co * geo.cin_g + cig) * ksz + tap];
        let (ky, kx) = (tap / geo.kw, tap % geo.kw);
        let plane = &mut out[(n * geo.cout + co) * ho * wo..][..ho * wo];
        let xin = &x[(n * geo.cin + ci) * h * w..][..h * w];
        for oy in y0..y1 {
            let iy = oy * s + ky - p;
            let row_out = &mut plane[oy * wo..(oy + 1) * wo];
            let row_in = &xin[iy * w..(iy + 1) * w];
            if s == 1 {
                let shift = kx as isize - p as isize;
                for ox in x0..x1 {
                    row_out[ox] += wv * row_in[(ox as isize + shift) as usize];
                }
            } else {
                for ox in x0..x1 {
                    row_out[ox] += wv * row_in[ox * s + kx - p];
                }
            }
        }
    });
    Tensor::new(geo.out_shape(), out)?.check_finite("conv2d")
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input<T: Real>(
    input_shape: &[usize],
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(input_shape, weight.shape(), spec)?;
    let (h, w, ho, wo) = (geo.h, geo.w, geo.ho, geo.wo);
    let (s, p) = (geo.s, geo.p);
    let wt = weight.data();
    let go = grad_out.data();
    let ksz = geo.kh * geo.kw;
    let mut gin = vec![T::zero(); geo.n * geo.cin * h * w];
    for_each_tap(&geo, |n, co, ci, cig, tap, (y0, y1), (x0, x1)| {
        let wv = wt[(co * geo.cin_g + cig) * ksz + tap];
        let (ky, kx) = (tap / geo.kw, tap % geo.kw);
        let gplane = &go[(n * geo.cout + co) * ho * wo..][..ho * wo];
        let gi = &mut gin[(n * geo.cin + ci) * h * w..][..h * w];
        for oy in y0..y1 {
            let iy = oy * s + ky - p;
            for ox in x0..x1 {
                gi[iy * w + ox * s + kx - p] += wv * gplane[oy * wo + ox];
            }
        }
    });
    Tensor::new(input_shape.to_vec(), gin)
}

/// Gradients of [`conv2d`] with respect to weight and bias.
pub fn conv2d_grad_weight<T: Real>(
    input: &Tensor<T>,
    weight_shape: &[usize],
    grad_out: &Tensor<T>,
    spec: ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let geo = ConvGeometry::new(input.shape(), weight_shape, spec)?;
    let (h, w, ho, wo) = (geo.h, geo.w, geo.ho, geo.wo);
    let (s, p) = (geo.s, geo.p);
    let x = input.data();
    let go = grad_out.data();
    let ksz = geo.kh * geo.kw;
    let mut gw = vec![T::zero(); geo.cout * geo.cin_g * ksz];
    let mut gb = vec![T::zero(); geo.cout];
    for (i, plane) in go.chunks(ho * wo).enumerate() {
        gb[i % geo.cout] += plane.iter().copied().sum::<T>();
    }
    for_each_tap(&geo, |n, co, ci, cig, tap, (y0, y1), (x0, x1)| {
        let (ky, kx) = (tap / geo.kw, tap % geo.kw);
        let gplane = &go[(n * geo.cout + co) * ho * wo..][..ho * wo];
        let xin = &x[(n * geo.cin + ci) * h * w..][..h * w];
        let mut acc = T::zero();
        for oy in y0..y1 {
            let iy = oy * s + ky - p;
            for ox in x0..x1 {
                acc += xin[iy * w + ox * s + kx - p] * gplane[oy * wo + ox];
            }
        }
        gw[(co * geo.cin_g + cig) * ksz + tap] += acc;
    });
    Ok((
        Tensor::new(weight_shape.to_vec(), gw)?,
        Tensor::new(vec![geo.cout], gb)?,
    ))
}

/// Per-channel convolution: `weight` is `[C, 1, kh, kw]`.
pub fn depthwise_conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let c = input.shape().get(1).copied().unwrap_or(0);
    conv2d(input, weight, bias, ConvSpec::new(stride, padding, c))
}

/// Causal depthwise 1D convolution over `[N, C, L]` with kernel `[C, K]`:
/// `y[t] = b + sum_k w[k] * x[t - (K-1) + k]`, zero before the sequence start.
pub fn causal_conv1d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, l) = x.dims3()?;
    let (wc, k) = w.dims2()?;
    if wc != c || b.shape() != [c] {
        return Err(dim_err(
            "causal_conv1d",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * l];
    for nc in 0..n * c {
        let ch = nc % c;
        let taps = &w.data()[ch * k..(ch + 1) * k];
        let xs = &xd[nc * l..(nc + 1) * l];
        let ys = &mut out[nc * l..(nc + 1) * l];
        for (t, y) in ys.iter_mut().enumerate() {
            let mut acc = b.data()[ch];
            for (j, &wv) in taps.iter().enumerate() {
                let back = k - 1 - j;
                if t >= back {
                    acc += wv * xs[t - back];
                }
            }
            *y = acc;
        }
    }
    Tensor::new(x.shape().to_vec(), out)?.check_finite("causal_conv1d")
}

/// Gradients of [`causal_conv1d`] for input, kernel and bias.
pub fn causal_conv1d_grads<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, l) = x.dims3()?;
    let (_, k) = w.dims2()?;
    let xd = x.data();
    let go = grad_out.data();
    let mut gx = vec![T::zero(); n * c * l];
    let mut gw = vec![T::zero(); c * k];
    let mut gb = vec![T::zero(); c];
    for nc in 0..n * c {
        let ch = nc % c;
        let xs = &xd[nc * l..(nc + 1) * l];
        let gs = &go[nc * l..(nc + 1) * l];
        for t in 0..l {
            let g = gs[t];
            gb[ch] += g;
            for j in 0..k {
                let back = k - 1 - j;
                if t >= back {
                    gw[ch * k + j] += g * xs[t - back];
                    gx[nc * l + t - back] += g * w.data()[ch * k + j];
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
        Tensor::new(vec![c], gb)?,
    ))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `x * sigmoid(x)`.
pub fn silu<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(|v| v * sigmoid_scalar(v)).check_finite("silu")
}

pub fn softplus_scalar<T: Real>(v: T) -> T {
    // log(1 + e^v) without overflow for large v
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

pub fn softplus<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(softplus_scalar).check_finite("softplus")
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err("axis", format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max subtraction).
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = split_axis(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).fold(T::neg_infinity(), |m, k| m.max(xd[idx(k)]));
            let mut z = T::zero();
            for k in 0..len {
                let e = (xd[idx(k)] - m).exp();
                out[idx(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[idx(k)] /= z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)?.check_finite("softmax")
}

/// Backward of softmax given its output `y`: `y * (g - sum(g*y))`.
pub fn softmax_grad<T: Real>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = split_axis(y.shape(), axis)?;
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: T = (0..len).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
            for k in 0..len {
                out[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)?.check_finite("matmul")
}

/// Batched `[B, m, k] x [B, k, n] -> [B, m, n]`.
pub fn bmm<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (bs, m, k) = a.dims3()?;
    let (bs2, k2, n) = b.dims3()?;
    if bs != bs2 || k != k2 {
        return Err(dim_err("bmm", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![T::zero(); bs * m * n];
    for i in 0..bs {
        matmul_into(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Tensor::new(vec![bs, m, n], out)?.check_finite("bmm")
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let shape = x.shape();
    let r = shape.len();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(dim_err("permute", format!("{perm:?} is not a permutation of rank {r}")));
    }
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; r];
    let xd = x.data();
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(xd[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

/// Swaps the two trailing axes.
pub fn transpose<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(dim_err("transpose", "rank must be at least 2"));
    }
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 1, r - 2);
    permute(x, &perm)
}

pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| dim_err("concat", "no tensors to concatenate"))?;
    let shape = first.shape();
    for p in parts {
        let ok = p.rank() == shape.len()
            && p.shape()
                .iter()
                .zip(shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok || axis >= shape.len() {
            return Err(dim_err(
                "concat",
                format!("{:?} incompatible with {shape:?} along axis {axis}", p.shape()),
            ));
        }
    }
    let (outer, _, inner) = split_axis(shape, axis)?;
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = total;
    Tensor::new(out_shape, out)
}

/// Contiguous range `[start, start + len)` along `axis`.
pub fn slice<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let (outer, alen, inner) = split_axis(x.shape(), axis)?;
    if len == 0 || start + len > alen {
        return Err(dim_err(
            "slice",
            format!("[{start}, {}) out of range for extent {alen}", start + len),
        ));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * alen + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x + y)?.check_finite("add")
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x - y)?.check_finite("sub")
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, |x, y| x * y)?.check_finite("mul")
}

pub fn scale<T: Real>(a: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    a.map(|x| x * s).check_finite("scale")
}

/// Mean over disjoint `k x k` windows.
pub fn avg_pool2d<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(dim_err("avg_pool2d", format!("{h}x{w} not divisible by {k}")));
    }
    let (ho, wo) = (h / k, w / k);
    let inv = T::c(1.0 / (k * k) as f64);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / k) * wo + xx / k] += src[y * w + xx] * inv;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest2d<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 {
        return Err(dim_err("upsample", "factor must be positive"));
    }
    let (ho, wo) = (h * k, w * k);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y / k) * w + xx / k];
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Sum over `k x k` output blocks: the adjoint of [`upsample_nearest2d`].
pub fn block_sum2d<T: Real>(g: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let pooled = avg_pool2d(g, k)?;
    scale(&pooled, T::c((k * k) as f64))
}

/// `out[..., t] = x[..., index[t]]` along the last axis.
pub fn gather_last<T: Real>(x: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>> {
    let len = *x.shape().last().expect("rank >= 1");
    if let Some(&bad) = index.iter().find(|&&i| i >= len) {
        return Err(dim_err("gather_last", format!("index {bad} >= extent {len}")));
    }
    if index.is_empty() {
        return Err(dim_err("gather_last", "empty index"));
    }
    let rows = x.numel() / len;
    let mut out = Vec::with_capacity(rows * index.len());
    for r in 0..rows {
        let row = &x.data()[r * len..(r + 1) * len];
        out.extend(index.iter().map(|&i| row[i]));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = index.len();
    Tensor::new(shape, out)
}

/// Adjoint of [`gather_last`]: accumulates `g[..., t]` into `out[..., index[t]]`.
pub fn scatter_add_last<T: Real>(g: &Tensor<T>, index: &[usize], len: usize) -> Result<Tensor<T>> {
    let glen = *g.shape().last().expect("rank >= 1");
    if glen != index.len() {
        return Err(dim_err("scatter_add_last", "index length mismatch"));
    }
    let rows = g.numel() / glen;
    let mut out = vec![T::zero(); rows * len];
    for r in 0..rows {
        for (t, &i) in index.iter().enumerate() {
            out[r * len + i] += g.data()[r * glen + t];
        }
    }
    let mut shape = g.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = len;
    Tensor::new(shape, out)
}

/// Rejects a NaN/Inf scalar result with the name of the producing op.
pub(crate) fn finite_scalar<T: Real>(v: T, op: &'static str) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { op })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_1x1_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform([2, 1, 4, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::ones([1, 1, 1, 1]);
        let b = Tensor::zeros([1]);
        let y = conv2d(&x, &w, Some(&b), ConvSpec::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_3x3_over_constant() {
        let x = Tensor::<f64>::ones([1, 1, 5, 5]);
        let w = Tensor::ones([1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, ConvSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform([1, 3, 6, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::zeros([2, 3, 3, 3]);
        let b = t(&[2], &[0.5, -1.5]);
        let y = conv2d(&x, &w, Some(&b), ConvSpec::same(3)).unwrap();
        assert!(y.data()[..36].iter().all(|&v| v == 0.5));
        assert!(y.data()[36..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::<f64>::ones([1, 2, 9, 7]);
        let w = Tensor::ones([4, 2, 3, 5]);
        let y = conv2d(&x, &w, None, ConvSpec::new(2, 1, 1)).unwrap();
        // (9 + 2 - 3)/2 + 1 = 5, (7 + 2 - 5)/2 + 1 = 3
        assert_eq!(y.shape(), &[1, 4, 5, 3]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::<f64>::ones([1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::ones([1, 3, 3, 3]), None, ConvSpec::default()).is_err());
        assert!(conv2d(&x, &Tensor::ones([1, 2, 2, 2]), None, ConvSpec::default()).is_err());
        assert!(conv2d(&x, &Tensor::ones([1, 2, 5, 5]), None, ConvSpec::default()).is_err());
    }

    #[test]
    fn conv_detects_non_finite() {
        let x = Tensor::<f64>::full([1, 1, 3, 3], 1e300);
        let w = Tensor::full([1, 1, 3, 3], 1e300);
        assert_eq!(
            conv2d(&x, &w, None, ConvSpec::default()),
            Err(Error::NonFinite { op: "conv2d" })
        );
    }

    #[test]
    fn depthwise_center_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform([1, 3, 5, 4], -1.0, 1.0, &mut rng);
        let mut w = Tensor::zeros([3, 1, 3, 3]);
        for c in 0..3 {
            w.set(&[c, 0, 1, 1], 1.0);
        }
        let y = depthwise_conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_channels_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let mut w = Tensor::<f64>::uniform([2, 1, 3, 3], -1.0, 1.0, &mut rng);
        for v in &mut w.data_mut()[9..] {
            *v = 0.0;
        }
        let b = t(&[2], &[0.0, 0.25]);
        let y = depthwise_conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        assert!(y.data()[16..].iter().all(|&v| v == 0.25));
    }

    #[test]
    fn depthwise_matches_block_diagonal_full_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 3;
        let x = Tensor::<f64>::uniform([2, c, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform([c, 1, 3, 3], -1.0, 1.0, &mut rng);
        let mut full = Tensor::zeros([c, c, 3, 3]);
        for o in 0..c {
            for ky in 0..3 {
                for kx in 0..3 {
                    full.set(&[o, o, ky, kx], w.at(&[o, 0, ky, kx]));
                }
            }
        }
        let a = depthwise_conv2d(&x, &w, None, 1, 1).unwrap();
        let b = conv2d(&x, &full, None, ConvSpec::same(3)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn activations() {
        let x = t(&[3], &[-1.0, 2.0, 0.0]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0, 0.0]);
        let s = silu(&x).unwrap();
        assert_eq!(s.data()[2], 0.0);
        let one = silu(&t(&[1], &[1.0])).unwrap().item();
        assert!((one - 0.7310585786300049).abs() < 1e-6);
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&t(&[4], &[0.3; 4]), 0).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax(&t(&[2], &[0.0, 3f64.ln()]), 0).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12 && (p.data()[1] - 0.75).abs() < 1e-12);
        let x = t(&[2, 3], &[0.1, -2.0, 3.0, 0.5, 0.5, 7.0]);
        let shifted = x.map(|v| v + 123.0);
        let a = softmax(&x, 1).unwrap();
        let b = softmax(&shifted, 1).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-7);
        // along axis 0 each column sums to one
        let c = softmax(&x, 0).unwrap();
        for j in 0..3 {
            assert!((c.at(&[0, j]) + c.at(&[1, j]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity_and_transpose_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Tensor::<f64>::uniform([3, 4], -1.0, 1.0, &mut rng);
        let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(matmul(&eye, &a).unwrap(), a);

        let b = Tensor::<f64>::uniform([4, 2], -1.0, 1.0, &mut rng);
        let lhs = transpose(&matmul(&a, &b).unwrap()).unwrap();
        let rhs = matmul(&transpose(&b).unwrap(), &transpose(&a).unwrap()).unwrap();
        // brute-force (AB)^T
        for i in 0..2 {
            for j in 0..3 {
                let want: f64 = (0..4).map(|k| a.at(&[j, k]) * b.at(&[k, i])).sum();
                assert!((lhs.at(&[i, j]) - want).abs() < 1e-14);
            }
        }
        assert!(lhs.max_abs_diff(&rhs) < 1e-14);
    }

    #[test]
    fn concat_channels() {
        let a = Tensor::<f64>::ones([1, 2, 2, 2]);
        let b = Tensor::<f64>::zeros([1, 3, 2, 2]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 5, 2, 2]);
        assert_eq!(c.sum(), 8.0);
        assert_eq!(slice(&c, 1, 0, 2).unwrap(), a);
        assert_eq!(slice(&c, 1, 2, 3).unwrap(), b);
    }

    #[test]
    fn permute_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::uniform([2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let p = permute(&x, &[2, 0, 3, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 5, 3]);
        // inverse of [2,0,3,1] is [1,3,0,2]
        assert_eq!(permute(&p, &[1, 3, 0, 2]).unwrap(), x);
        assert_eq!(transpose(&transpose(&x).unwrap()).unwrap(), x);
        assert_eq!(x.reshape([6, 20]).unwrap().reshape([2, 3, 4, 5]).unwrap(), x);
    }

    #[test]
    fn causal_conv_only_looks_back() {
        let x = t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 3], &[0.5, 0.25, 1.0]);
        let b = t(&[1], &[0.0]);
        let y = causal_conv1d(&x, &w, &b).unwrap();
        // y[t] = 0.5 x[t-2] + 0.25 x[t-1] + x[t]
        assert_eq!(y.data(), &[1.0, 2.25, 4.0, 5.75]);
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::uniform([1, 2, 4, 6], -1.0, 1.0, &mut rng);
        let y = Tensor::<f64>::uniform([1, 2, 2, 3], -1.0, 1.0, &mut rng);
        let lhs: f64 = upsample_nearest2d(&y, 2)
            .unwrap()
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = block_sum2d(&x, 2)
            .unwrap()
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gather_scatter_adjoint() {
        let x = t(&[1, 4], &[10.0, 20.0, 30.0, 40.0]);
        let g = gather_last(&x, &[3, 1, 0, 2]).unwrap();
        assert_eq!(g.data(), &[40.0, 20.0, 10.0, 30.0]);
        let back = scatter_add_last(&g, &[3, 1, 0, 2], 4).unwrap();
        assert_eq!(back, x);
    }
}
