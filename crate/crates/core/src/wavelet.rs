//! Orthonormal 2D Haar wavelet transform.
//!
//! For each disjoint 2x2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2    approximation
//! LH = (a - b + c - d) / 2    horizontal high-pass (vertical edges)
//! HL = (a + b - c - d) / 2    vertical high-pass (horizontal edges)
//! HH = (a - b - c + d) / 2    diagonal detail
//! ```
//!
//! The transform matrix is orthogonal, so the inverse is also the adjoint.
//! That makes the backward rule of each direction the other direction.
//! Odd extents are rejected, never padded.

use crate::error::{dim_err, Result};
use crate::numerics::{Real, Tensor, Var};

/// The four half-resolution bands of one decomposition level.
#[derive(Debug, Clone, PartialEq)]
pub struct SubBands<T: Real> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
    /// 1 for the first decomposition of an image, 2 for the decomposition of
    /// that level's LL, and so on.
    pub level: usize,
}

impl<T: Real> SubBands<T> {
    pub fn bands(&self) -> [&Tensor<T>; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    /// Sum of squared coefficients over all four bands.
    pub fn energy(&self) -> f64 {
        self.bands()
            .iter()
            .flat_map(|b| b.data())
            .map(|v| v.as_f64().powi(2))
            .sum()
    }

    /// Bands stacked along channels: `[N, 4C, h, w]` in LL, LH, HL, HH order.
    pub fn stacked(&self) -> Result<Tensor<T>> {
        crate::numerics::ops::concat(&[&self.ll, &self.lh, &self.hl, &self.hh], 1)
    }

    pub fn from_stacked(stacked: &Tensor<T>, level: usize) -> Result<Self> {
        let (_, c4, _, _) = stacked.dims4()?;
        if c4 % 4 != 0 {
            return Err(dim_err("subbands", format!("{c4} channels do not split into 4 bands")));
        }
        let c = c4 / 4;
        let band = |k| crate::numerics::ops::slice(stacked, 1, k * c, c);
        Ok(Self {
            ll: band(0)?,
            lh: band(1)?,
            hl: band(2)?,
            hh: band(3)?,
            level,
        })
    }
}

fn check_even(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err(op, format!("extents must be even, got {h}x{w}")));
    }
    Ok(())
}

/// Analysis to the stacked `[N, 4C, H/2, W/2]` layout.
pub fn haar_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    check_even("dwt2", h, w)?;
    let (ho, wo) = (h / 2, w / 2);
    let half = T::c(0.5);
    let plane = ho * wo;
    let mut out = vec![T::zero(); n * 4 * c * plane];
    for b in 0..n {
        for ch in 0..c {
            let src = &x.data()[(b * c + ch) * h * w..][..h * w];
            let band_base = |k: usize| ((b * 4 + k) * c + ch) * plane;
            let (ll, lh, hl, hh) = (band_base(0), band_base(1), band_base(2), band_base(3));
            for i in 0..ho {
                for j in 0..wo {
                    let a = src[2 * i * w + 2 * j];
                    let bb = src[2 * i * w + 2 * j + 1];
                    let cc = src[(2 * i + 1) * w + 2 * j];
                    let d = src[(2 * i + 1) * w + 2 * j + 1];
                    let o = i * wo + j;
                    // grouped so that equal neighbours cancel exactly
                    out[ll + o] = ((a + bb) + (cc + d)) * half;
                    out[lh + o] = ((a - bb) + (cc - d)) * half;
                    out[hl + o] = ((a - cc) + (bb - d)) * half;
                    out[hh + o] = ((a - bb) - (cc - d)) * half;
                }
            }
        }
    }
    Tensor::new(vec![n, 4 * c, ho, wo], out)?.check_finite("dwt2")
}

/// Synthesis from the stacked layout back to `[N, C, 2h, 2w]`.
pub fn haar_inverse<T: Real>(stacked: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c4, ho, wo) = stacked.dims4()?;
    if c4 % 4 != 0 {
        return Err(dim_err("iwt2", format!("{c4} channels do not split into 4 bands")));
    }
    let c = c4 / 4;
    let (h, w) = (2 * ho, 2 * wo);
    let half = T::c(0.5);
    let plane = ho * wo;
    let src = stacked.data();
    let mut out = vec![T::zero(); n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            let dst = &mut out[(b * c + ch) * h * w..][..h * w];
            let band_base = |k: usize| ((b * 4 + k) * c + ch) * plane;
            let (ll, lh, hl, hh) = (band_base(0), band_base(1), band_base(2), band_base(3));
            for i in 0..ho {
                for j in 0..wo {
                    let o = i * wo + j;
                    let (s, x, y, z) = (src[ll + o], src[lh + o], src[hl + o], src[hh + o]);
                    dst[2 * i * w + 2 * j] = (s + x + y + z) * half;
                    dst[2 * i * w + 2 * j + 1] = (s - x + y - z) * half;
                    dst[(2 * i + 1) * w + 2 * j] = (s + x - y - z) * half;
                    dst[(2 * i + 1) * w + 2 * j + 1] = (s - x - y + z) * half;
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)?.check_finite("iwt2")
}

/// One analysis level.
pub fn dwt2<T: Real>(image: &Tensor<T>) -> Result<SubBands<T>> {
    SubBands::from_stacked(&haar_forward(image)?, 1)
}

/// Exact inverse of [`dwt2`].
pub fn iwt2<T: Real>(bands: &SubBands<T>) -> Result<Tensor<T>> {
    let shape = bands.ll.shape();
    if bands.bands().iter().any(|b| b.shape() != shape) {
        return Err(dim_err("iwt2", "sub-bands must share one shape"));
    }
    haar_inverse(&bands.stacked()?)
}

/// `levels` analysis steps, each recursing on the previous LL.
pub fn dwt_multi<T: Real>(image: &Tensor<T>, levels: usize) -> Result<Vec<SubBands<T>>> {
    let (_, _, h, w) = image.dims4()?;
    let m = 1usize << levels.min(usize::BITS as usize - 1);
    if levels == 0 || h % m != 0 || w % m != 0 {
        return Err(dim_err(
            "dwt_multi",
            format!("{h}x{w} not divisible by 2^{levels} (levels must be >= 1)"),
        ));
    }
    let mut out: Vec<SubBands<T>> = Vec::with_capacity(levels);
    let mut current = image.clone();
    for level in 1..=levels {
        let mut bands = dwt2(&current)?;
        bands.level = level;
        current = bands.ll.clone();
        out.push(bands);
    }
    Ok(out)
}

/// Rebuilds the image from the deepest LL plus every level's detail bands.
pub fn iwt_multi<T: Real>(levels: &[SubBands<T>]) -> Result<Tensor<T>> {
    let deepest = levels
        .last()
        .ok_or_else(|| dim_err("iwt_multi", "no levels"))?;
    let mut current = deepest.ll.clone();
    for bands in levels.iter().rev() {
        current = iwt2(&SubBands {
            ll: current,
            lh: bands.lh.clone(),
            hl: bands.hl.clone(),
            hh: bands.hh.clone(),
            level: bands.level,
        })?;
    }
    Ok(current)
}

impl<'g, T: Real> Var<'g, T> {
    /// Differentiable [`haar_forward`]: `[N, C, H, W] -> [N, 4C, H/2, W/2]`.
    pub fn dwt2(self) -> Result<Self> {
        let v = haar_forward(&self.value())?;
        self.graph()
            .record("dwt2", v, &[self], |c| Ok(vec![Some(haar_inverse(c.grad)?)]))
    }

    /// Differentiable [`haar_inverse`]: `[N, 4C, h, w] -> [N, C, 2h, 2w]`.
    pub fn iwt2(self) -> Result<Self> {
        let v = haar_inverse(&self.value())?;
        self.graph()
            .record("iwt2", v, &[self], |c| Ok(vec![Some(haar_forward(c.grad)?)]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, GradCheck};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn constant_image_has_only_approximation() {
        let b = dwt2(&Tensor::<f64>::ones([1, 1, 4, 6])).unwrap();
        assert!(b.ll.data().iter().all(|&v| v == 2.0));
        for band in [&b.lh, &b.hl, &b.hh] {
            assert!(band.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_block_identity_pattern() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = dwt2(&x).unwrap();
        assert_eq!(
            (b.ll.item(), b.lh.item(), b.hl.item(), b.hh.item()),
            (1.0, 0.0, 0.0, 1.0)
        );
    }

    #[test]
    fn inverse_cases() {
        let z = Tensor::<f64>::zeros([1, 2, 3, 3]);
        let zero = SubBands {
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z.clone(),
            level: 1,
        };
        assert!(iwt2(&zero).unwrap().data().iter().all(|&v| v == 0.0));

        let z1 = Tensor::<f64>::zeros([1, 1, 1, 1]);
        let constant = SubBands {
            ll: Tensor::full([1, 1, 1, 1], 2.0),
            lh: z1.clone(),
            hl: z1.clone(),
            hh: z1,
            level: 1,
        };
        let img = iwt2(&constant).unwrap();
        assert_eq!(img.shape(), &[1, 1, 2, 2]);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn odd_extent_rejected() {
        assert!(dwt2(&Tensor::<f64>::ones([1, 1, 3, 4])).is_err());
        assert!(dwt2(&Tensor::<f64>::ones([1, 1, 4, 5])).is_err());
    }

    #[test]
    fn round_trip_precision() {
        let x = random([2, 3, 16, 10], 1);
        let back = iwt2(&dwt2(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) <= 1e-12);
        let x32: Tensor<f32> = x.cast();
        let back32 = iwt2(&dwt2(&x32).unwrap()).unwrap();
        assert!(back32.max_abs_diff(&x32) <= 1e-6);
    }

    #[test]
    fn multi_level() {
        let x = random([1, 3, 16, 8], 2);
        let one = dwt_multi(&x, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], dwt2(&x).unwrap());

        let c = dwt_multi(&Tensor::<f64>::ones([1, 1, 8, 8]), 2).unwrap();
        assert_eq!(c[1].level, 2);
        assert_eq!(c[1].ll.shape(), &[1, 1, 2, 2]);
        assert!(c[1].ll.data().iter().all(|&v| (v - 4.0).abs() < 1e-15));

        let big: Tensor<f32> = random([1, 1, 64, 64], 3).cast();
        let levels = dwt_multi(&big, 3).unwrap();
        assert_eq!(levels[2].hh.shape(), &[1, 1, 8, 8]);
        assert!(iwt_multi(&levels).unwrap().max_abs_diff(&big) <= 1e-5);

        assert!(dwt_multi(&Tensor::<f64>::ones([1, 1, 12, 12]), 3).is_err());
        assert!(dwt_multi(&Tensor::<f64>::ones([1, 1, 8, 8]), 0).is_err());
    }

    #[test]
    fn column_invariant_image_has_no_vertical_detail() {
        // I(i, j) depends on j only: rows are copies of each other
        let x = Tensor::<f64>::from_fn([1, 1, 6, 8], |k| ((k % 8) as f64).sin());
        let b = dwt2(&x).unwrap();
        assert!(b.hl.data().iter().all(|&v| v == 0.0));
        assert!(b.hh.data().iter().all(|&v| v == 0.0));
        // I(i, j) depends on i only
        let y = Tensor::<f64>::from_fn([1, 1, 6, 8], |k| ((k / 8) as f64).cos());
        let b = dwt2(&y).unwrap();
        assert!(b.lh.data().iter().all(|&v| v == 0.0));
        assert!(b.hh.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_ops_match_gradients() {
        let x = random([1, 2, 4, 6], 4);
        let r = check_gradients(&[x], &GradCheck::default(), |v| {
            let s = v[0].dwt2()?;
            let probe = s.graph().constant(Tensor::from_fn(s.shape(), |i| (i as f64 * 0.37).sin()));
            s.mul(probe)?.sum()
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-4);
        let y = random([1, 8, 2, 3], 5);
        let r = check_gradients(&[y], &GradCheck::default(), |v| {
            let s = v[0].iwt2()?;
            s.mul(s)?.sum()
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-4);
    }

    proptest! {
        #[test]
        fn perfect_reconstruction(h in 1usize..12, w in 1usize..12, c in 1usize..4, seed in any::<u64>()) {
            let x = random([1, c, 2 * h, 2 * w], seed);
            let back = iwt2(&dwt2(&x).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&x) <= 1e-12);
        }

        #[test]
        fn parseval(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let x = random([1, 2, 2 * h, 2 * w], seed);
            let e_img: f64 = x.data().iter().map(|v| v * v).sum();
            let e_bands = dwt2(&x).unwrap().energy();
            prop_assert!((e_img - e_bands).abs() / e_img <= 1e-12);
        }

        #[test]
        fn linear(a in -3.0f64..3.0, seed in any::<u64>()) {
            let x = random([1, 1, 6, 4], seed);
            let y = random([1, 1, 6, 4], seed.wrapping_add(1));
            let combo = x.zip_map(&y, |p, q| a * p + q).unwrap();
            let (bx, by, bc) = (dwt2(&x).unwrap(), dwt2(&y).unwrap(), dwt2(&combo).unwrap());
            for k in 0..4 {
                let want = bx.bands()[k].zip_map(by.bands()[k], |p, q| a * p + q).unwrap();
                prop_assert!(bc.bands()[k].max_abs_diff(&want) <= 1e-12);
            }
        }
    }
}
