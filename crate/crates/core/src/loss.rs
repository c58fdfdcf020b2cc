//! Training objective and fidelity metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{ConvSpec, Graph, Real, Tensor, Var};
use crate::params::fan_in_uniform;

/// Maps `[N, 3, H, W]` images to feature maps for the perceptual term.
pub trait FeatureExtractor<T: Real> {
    fn extract<'g>(&self, x: Var<'g, T>) -> Result<Var<'g, T>>;
}

/// Features are the image itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityFeatures;

impl<T: Real> FeatureExtractor<T> for IdentityFeatures {
    fn extract<'g>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x)
    }
}

/// One frozen convolution of a [`ConvStack`].
#[derive(Debug, Clone)]
pub struct FrozenConv<T: Real> {
    /// `[cout, cin, k, k]`, odd `k`, cross-correlation.
    pub weight: Tensor<T>,
    /// `[cout]`.
    pub bias: Tensor<T>,
    pub stride: usize,
}

/// Frozen convolution stack with ReLU after every layer but the last.
///
/// This is also the adapter for externally supplied weights: pass the
/// layers of a pretrained network in order, with inputs in `[0, 1]`
/// `[N, 3, H, W]` layout and padding `k / 2` per layer.
#[derive(Debug, Clone)]
pub struct ConvStack<T: Real> {
    layers: Vec<FrozenConv<T>>,
}

impl<T: Real> ConvStack<T> {
    pub fn new(layers: Vec<FrozenConv<T>>) -> Result<Self> {
        let mut cin = 3;
        for (i, l) in layers.iter().enumerate() {
            let s = l.weight.shape();
            if s.len() != 4 || s[1] != cin || s[2] % 2 == 0 || s[2] != s[3] || l.bias.shape() != [s[0]] || l.stride == 0 {
                return Err(dim_err("feature_extractor", format!("layer {i}: weight {s:?} does not chain")));
            }
            cin = s[0];
        }
        if layers.is_empty() {
            return Err(dim_err("feature_extractor", "no layers"));
        }
        Ok(Self { layers })
    }

    /// Deterministic random stub: 3→8, 8→16 (stride 2), 16→16, all 3x3.
    pub fn stub() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_f00d);
        let layers = [(3, 8, 1), (8, 16, 2), (16, 16, 1)]
            .iter()
            .map(|&(cin, cout, stride)| FrozenConv {
                weight: fan_in_uniform(&[cout, cin, 3, 3], cin * 9, &mut rng),
                bias: fan_in_uniform(&[cout], cin * 9, &mut rng),
                stride,
            })
            .collect();
        Self { layers }
    }
}

impl<T: Real> FeatureExtractor<T> for ConvStack<T> {
    fn extract<'g>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            let k = l.weight.shape()[2];
            let w = g.constant(l.weight.clone());
            let b = g.constant(l.bias.clone());
            h = h.conv2d(w, Some(b), ConvSpec::new(l.stride, k / 2, 1))?;
            if i != last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Weight of the perceptual term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_perceptual: 0.01,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_perceptual: f64) -> Result<Self> {
        if !(lambda_perceptual.is_finite() && lambda_perceptual >= 0.0) {
            return Err(Error::InvalidArgument {
                op: "loss_weights",
                detail: format!("lambda must be finite and >= 0, got {lambda_perceptual}"),
            });
        }
        Ok(Self { lambda_perceptual })
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean over elements of `E^2 / 2` for `|E| < 1`, else `|E| - 1/2`, with
/// `E = output - target`.
pub fn smooth_l1<'g, T: Real>(output: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape("smooth_l1", &output, &target)?;
    let (o, t) = (output.value(), target.value());
    let half = T::c(0.5);
    let n = T::c(o.numel() as f64);
    let total: T = o
        .data()
        .iter()
        .zip(t.data())
        .map(|(&a, &b)| {
            let e = a - b;
            if e.abs() < T::one() {
                half * e * e
            } else {
                e.abs() - half
            }
        })
        .sum();
    let v = Tensor::scalar(total / n).check_finite("smooth_l1")?;
    output.graph().record("smooth_l1", v, &[output, target], move |c| {
        let g = c.grad.item() / n;
        let d = c.inputs[0].zip_map(c.inputs[1], |a, b| {
            let e = a - b;
            g * e.max(-T::one()).min(T::one())
        })?;
        let neg = d.map(|v| -v);
        Ok(vec![Some(d), Some(neg)])
    })
}

/// Mean squared error.
pub fn mse<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape("mse", &a, &b)?;
    let d = a.sub(b)?;
    d.mul(d)?.mean()
}

/// Mean squared error between extracted features.
pub fn perceptual_loss<'g, T: Real>(
    output: Var<'g, T>,
    target: Var<'g, T>,
    fx: &dyn FeatureExtractor<T>,
) -> Result<Var<'g, T>> {
    same_shape("perceptual_loss", &output, &target)?;
    mse(fx.extract(output)?, fx.extract(target)?)
}

/// `smooth_l1 + lambda * perceptual`.
pub fn total_loss<'g, T: Real>(
    output: Var<'g, T>,
    target: Var<'g, T>,
    weights: &LossWeights,
    fx: &dyn FeatureExtractor<T>,
) -> Result<Var<'g, T>> {
    let l1 = smooth_l1(output, target)?;
    if weights.lambda_perceptual == 0.0 {
        return Ok(l1);
    }
    let p = perceptual_loss(output, target, fx)?;
    l1.add(p.scale(T::c(weights.lambda_perceptual))?)
}

/// [`total_loss`] on plain tensors.
pub fn total_loss_value<T: Real>(
    output: &Tensor<T>,
    target: &Tensor<T>,
    weights: &LossWeights,
    fx: &dyn FeatureExtractor<T>,
) -> Result<f64> {
    let g = Graph::new();
    let l = total_loss(g.constant(output.clone()), g.constant(target.clone()), weights, fx)?;
    Ok(l.value().item().as_f64())
}

fn mse_value<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(s / a.numel() as f64)
}

/// `10 log10(peak^2 / MSE)` in dB; `f64::INFINITY` when the images are equal.
pub fn psnr<T: Real>(output: &Tensor<T>, target: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse_value(output, target)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of one plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            rows[i * wo + j] = (0..n).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..n).map(|t| k[t] * rows[(i + t) * wo + j]).sum();
        }
    }
    (out, ho, wo)
}

/// Structural similarity for `[N, C, H, W]` images with data range 1:
/// Gaussian window 11 (sigma 1.5), `k1 = 0.01`, `k2 = 0.03`, valid region,
/// averaged over the map and then over all planes. Planes smaller than 11
/// pixels use the largest odd window that fits.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err("ssim", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (n, c, h, w) = a.dims4()?;
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let win = gaussian_window(size, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..n * c {
        let x: Vec<f64> = a.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b.data()[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).collect::<Vec<_>>();
        let (mx, ..) = filter_valid(&x, h, w, &win);
        let (my, ..) = filter_valid(&y, h, w, &win);
        let (sxx, ..) = filter_valid(&prod(&x, &x), h, w, &win);
        let (syy, ..) = filter_valid(&prod(&y, &y), h, w, &win);
        let (sxy, ..) = filter_valid(&prod(&x, &y), h, w, &win);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    let s = total / (n * c) as f64;
    if !s.is_finite() {
        return Err(Error::NonFinite { op: "ssim" });
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, GradCheck};
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn rand_img(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn l1_of(e: f64) -> f64 {
        let g = Graph::new();
        smooth_l1(g.leaf(t(&[1], &[e])), g.constant(t(&[1], &[0.0])))
            .unwrap()
            .value()
            .item()
    }

    fn l1_slope(e: f64) -> f64 {
        let g = Graph::new();
        let x = g.leaf(t(&[1], &[e]));
        let l = smooth_l1(x, g.constant(t(&[1], &[0.0]))).unwrap();
        g.backward(l).unwrap().get(x).unwrap().item()
    }

    #[test]
    fn smooth_l1_cases() {
        let x = rand_img([1, 3, 4, 4], 1);
        let g = Graph::new();
        assert_eq!(smooth_l1(g.constant(x.clone()), g.constant(x)).unwrap().value().item(), 0.0);
        assert_eq!(l1_of(0.5), 0.125);
        assert_eq!(l1_of(2.0), 1.5);
        assert_eq!(l1_of(-2.0), 1.5);
        let g = Graph::new();
        let two = smooth_l1(g.constant(t(&[2], &[0.5, 2.0])), g.constant(t(&[2], &[0.0, 0.0]))).unwrap();
        assert_eq!(two.value().item(), (0.125 + 1.5) / 2.0);
    }

    #[test]
    fn smooth_l1_is_c1_at_one() {
        for s in [1.0, -1.0] {
            let (left, right) = (s * (1.0 - 1e-9), s * (1.0 + 1e-9));
            assert!((l1_of(left) - 0.5).abs() < 1e-8);
            assert!((l1_of(right) - 0.5).abs() < 1e-8);
            assert_eq!(l1_of(s), 0.5);
            assert!((l1_slope(left) - s).abs() < 1e-8);
            assert!((l1_slope(right) - s).abs() < 1e-8);
        }
    }

    #[test]
    fn perceptual_cases() {
        let g = Graph::new();
        let p = perceptual_loss(g.constant(t(&[1], &[1.0])), g.constant(t(&[1], &[3.0])), &IdentityFeatures).unwrap();
        assert_eq!(p.value().item(), 4.0);
        let x = rand_img([1, 3, 8, 8], 2);
        let y = rand_img([1, 3, 8, 8], 3);
        let stub = ConvStack::stub();
        let g = Graph::new();
        let same = perceptual_loss(g.constant(x.clone()), g.constant(x.clone()), &stub).unwrap();
        assert_eq!(same.value().item(), 0.0);
        let diff = perceptual_loss(g.constant(x.clone()), g.constant(y), &stub).unwrap();
        assert!(diff.value().item() > 0.0);
        let f = stub.extract(g.constant(x)).unwrap();
        assert_eq!(f.shape(), vec![1, 16, 4, 4]);
    }

    #[test]
    fn stub_is_deterministic() {
        let a: ConvStack<f64> = ConvStack::stub();
        let b: ConvStack<f64> = ConvStack::stub();
        assert_eq!(a.layers[1].weight, b.layers[1].weight);
        assert!(ConvStack::<f64>::new(vec![]).is_err());
        let bad = FrozenConv {
            weight: Tensor::<f64>::zeros([4, 2, 3, 3]),
            bias: Tensor::zeros([4]),
            stride: 1,
        };
        assert!(ConvStack::new(vec![bad]).is_err());
    }

    #[test]
    fn total_loss_cases() {
        let x = rand_img([1, 3, 8, 8], 4);
        let y = rand_img([1, 3, 8, 8], 5);
        let stub = ConvStack::stub();
        let zero = LossWeights::new(0.0).unwrap();
        let g = Graph::new();
        let l1 = smooth_l1(g.constant(x.clone()), g.constant(y.clone())).unwrap().value().item();
        assert_eq!(total_loss_value(&x, &y, &zero, &stub).unwrap(), l1);
        assert_eq!(total_loss_value(&x, &x, &LossWeights::default(), &stub).unwrap(), 0.0);
        assert_eq!(LossWeights::default().lambda_perceptual, 0.01);
        assert!(LossWeights::new(-0.1).is_err());
        // e^2 / 2 = 0.2 and (s e)^2 = 3.0
        struct Scaled(f64);
        impl FeatureExtractor<f64> for Scaled {
            fn extract<'g>(&self, x: Var<'g, f64>) -> Result<Var<'g, f64>> {
                x.scale(self.0)
            }
        }
        let g = Graph::new();
        let o = g.constant(t(&[1], &[0.4f64.sqrt()]));
        let target = g.constant(t(&[1], &[0.0]));
        assert!((smooth_l1(o, target).unwrap().value().item() - 0.2).abs() < 1e-15);
        let fx = Scaled(7.5f64.sqrt());
        assert!((perceptual_loss(o, target, &fx).unwrap().value().item() - 3.0).abs() < 1e-14);
        let l = total_loss(o, target, &LossWeights::default(), &fx).unwrap();
        assert!((l.value().item() - 0.23).abs() < 1e-14);
    }

    #[test]
    fn total_loss_gradients() {
        let stub = ConvStack::stub();
        let inputs = vec![rand_img([1, 3, 8, 8], 6), rand_img([1, 3, 8, 8], 7)];
        let r = check_gradients(&inputs, &GradCheck::default(), |v| {
            total_loss(v[0], v[1], &LossWeights::default(), &stub)
        })
        .unwrap();
        assert!(r.checked >= 100);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn psnr_cases() {
        let x = rand_img([1, 3, 8, 8], 8);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let y = x.map(|v| v + 0.1);
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let noise = Tensor::uniform([1, 3, 8, 8], -amp, amp, &mut rng);
            let p = psnr(&x, &crate::numerics::ops::add(&x, &noise).unwrap(), 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
        assert!(psnr(&x, &Tensor::zeros([1, 3, 4, 4]), 1.0).is_err());
    }

    #[test]
    fn ssim_cases() {
        let x = rand_img([2, 3, 16, 16], 10);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let bin = x.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let inv = bin.map(|v| 1.0 - v);
        assert!(ssim(&bin, &inv).unwrap() < 0.0);
        let small = rand_img([1, 1, 6, 8], 11);
        assert!((ssim(&small, &small).unwrap() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(seed in any::<u64>()) {
            let a = rand_img([1, 3, 12, 12], seed);
            let b = rand_img([1, 3, 12, 12], seed.wrapping_add(1));
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn perceptual_non_negative(seed in any::<u64>()) {
            let g = Graph::new();
            let p = perceptual_loss(
                g.constant(rand_img([1, 3, 8, 8], seed)),
                g.constant(rand_img([1, 3, 8, 8], seed ^ 1)),
                &ConvStack::stub(),
            )
            .unwrap();
            prop_assert!(p.value().item() >= 0.0);
        }
    }
}
