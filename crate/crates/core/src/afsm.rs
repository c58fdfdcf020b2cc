//! Adaptive frequency scanning: per-sub-band traversal orders.
//!
//! LL, LH and HL are scanned row-major and column-major. HH is scanned along
//! anti-diagonals (`i + j` ascending, row ascending within a diagonal) to
//! keep spatially adjacent diagonal detail close in the sequence. Every base
//! order is also run reversed, giving four directional sequences per band.

use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::numerics::{ops, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubBandKind {
    LL,
    LH,
    HL,
    HH,
}

impl SubBandKind {
    /// Stacking order used by the wavelet module.
    pub const ALL: [SubBandKind; 4] = [Self::LL, Self::LH, Self::HL, Self::HH];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LL => "ll",
            Self::LH => "lh",
            Self::HL => "hl",
            Self::HH => "hh",
        }
    }
}

/// Base traversal patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanPattern {
    Horizontal,
    Vertical,
    AntiDiagonal,
    AntiDiagonalReversed,
}

/// A permutation of the `h * w` positions of a band: position `indices[t]`
/// is visited at step `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOrder {
    indices: Arc<[usize]>,
    h: usize,
    w: usize,
}

impl ScanOrder {
    /// Validates that `indices` is a permutation of `0..h*w`.
    pub fn new(indices: Vec<usize>, h: usize, w: usize) -> Result<Self> {
        let n = h * w;
        let mut seen = vec![false; n];
        if indices.len() != n
            || indices
                .iter()
                .any(|&i| i >= n || std::mem::replace(&mut seen[i], true))
        {
            return Err(dim_err("scan_order", format!("not a permutation of 0..{n}")));
        }
        Ok(Self {
            indices: indices.into(),
            h,
            w,
        })
    }

    pub fn pattern(p: ScanPattern, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(dim_err("scan_orders", format!("zero extent {h}x{w}")));
        }
        let indices: Vec<usize> = match p {
            ScanPattern::Horizontal => (0..h * w).collect(),
            ScanPattern::Vertical => (0..w).flat_map(|j| (0..h).map(move |i| i * w + j)).collect(),
            ScanPattern::AntiDiagonal => anti_diagonal(h, w),
            ScanPattern::AntiDiagonalReversed => {
                let mut v = anti_diagonal(h, w);
                v.reverse();
                v
            }
        };
        Ok(Self {
            indices: indices.into(),
            h,
            w,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub(crate) fn shared_indices(&self) -> Arc<[usize]> {
        Arc::clone(&self.indices)
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// The same path walked backwards.
    pub fn reversed(&self) -> Self {
        let mut v = self.indices.to_vec();
        v.reverse();
        Self {
            indices: v.into(),
            h: self.h,
            w: self.w,
        }
    }

    /// `result[order[t]] = t`.
    pub fn invert(&self) -> Self {
        let mut inv = vec![0; self.indices.len()];
        for (t, &p) in self.indices.iter().enumerate() {
            inv[p] = t;
        }
        Self {
            indices: inv.into(),
            h: self.h,
            w: self.w,
        }
    }
}

fn anti_diagonal(h: usize, w: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(h * w);
    for d in 0..h + w - 1 {
        let lo = d.saturating_sub(w - 1);
        let hi = d.min(h - 1);
        out.extend((lo..=hi).map(|i| i * w + (d - i)));
    }
    out
}

/// The two base orders for a band kind: horizontal and vertical rasters for
/// LL/LH/HL, anti-diagonal forward and backward for HH.
pub fn scan_orders(kind: SubBandKind, h: usize, w: usize) -> Result<Vec<ScanOrder>> {
    let patterns = match kind {
        SubBandKind::HH => [ScanPattern::AntiDiagonal, ScanPattern::AntiDiagonalReversed],
        _ => [ScanPattern::Horizontal, ScanPattern::Vertical],
    };
    patterns
        .iter()
        .map(|&p| ScanOrder::pattern(p, h, w))
        .collect()
}

/// Base orders plus their reversals: the four sequences scanned per band.
pub fn directional_orders(kind: SubBandKind, h: usize, w: usize) -> Result<Vec<ScanOrder>> {
    let base = scan_orders(kind, h, w)?;
    let mut out = Vec::with_capacity(4);
    for o in base {
        let r = o.reversed();
        out.push(o);
        out.push(r);
    }
    Ok(out)
}

fn check_extents(op: &'static str, shape: &[usize], order: &ScanOrder) -> Result<()> {
    if shape.len() != 4 || (shape[2], shape[3]) != order.extents() {
        return Err(dim_err(
            op,
            format!("tensor {shape:?} does not match order extents {:?}", order.extents()),
        ));
    }
    Ok(())
}

/// Flattens `[N, C, H, W]` into `[N, C, H*W]` along `order`.
pub fn apply_order<T: Real>(x: &Tensor<T>, order: &ScanOrder) -> Result<Tensor<T>> {
    check_extents("apply_order", x.shape(), order)?;
    let (n, c, h, w) = x.dims4()?;
    ops::gather_last(&x.reshape([n, c, h * w])?, order.indices())
}

/// Inverse of [`apply_order`]: `[N, C, H*W]` back to `[N, C, H, W]`.
pub fn restore_order<T: Real>(seq: &Tensor<T>, order: &ScanOrder) -> Result<Tensor<T>> {
    let (n, c, l) = seq.dims3()?;
    if l != order.len() {
        return Err(dim_err("restore_order", "sequence length mismatch"));
    }
    let (h, w) = order.extents();
    ops::gather_last(seq, order.invert().indices())?.into_reshape([n, c, h, w])
}

pub fn invert_order(order: &ScanOrder) -> ScanOrder {
    order.invert()
}

/// Element-wise mean of per-direction outputs (summed in input order).
pub fn merge_directional<T: Real>(outputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (first, rest) = outputs
        .split_first()
        .ok_or_else(|| dim_err("merge_directional", "no outputs"))?;
    let mut acc = first.clone();
    for o in rest {
        if o.shape() != acc.shape() {
            return Err(dim_err("merge_directional", "outputs differ in shape"));
        }
        acc.add_assign(o);
    }
    ops::scale(&acc, T::one() / T::c(outputs.len() as f64))
}

impl<'g, T: Real> Var<'g, T> {
    /// Differentiable [`apply_order`].
    pub fn scan_with(self, order: &ScanOrder) -> Result<Self> {
        let shape = self.shape();
        check_extents("apply_order", &shape, order)?;
        self.reshape(&[shape[0], shape[1], shape[2] * shape[3]])?
            .gather_last(order.shared_indices())
    }

    /// Differentiable [`restore_order`].
    pub fn unscan_with(self, order: &ScanOrder) -> Result<Self> {
        let shape = self.shape();
        let (h, w) = order.extents();
        if shape.len() != 3 || shape[2] != h * w {
            return Err(dim_err("restore_order", "sequence length mismatch"));
        }
        self.gather_last(order.invert().shared_indices())?
            .reshape(&[shape[0], shape[1], h, w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kind_strategy() -> impl Strategy<Value = SubBandKind> {
        prop::sample::select(SubBandKind::ALL.to_vec())
    }

    #[test]
    fn small_orders() {
        let h = scan_orders(SubBandKind::LL, 2, 2).unwrap();
        assert_eq!(h[0].indices(), &[0, 1, 2, 3]);
        assert_eq!(h[1].indices(), &[0, 2, 1, 3]);
        let d = scan_orders(SubBandKind::HH, 3, 3).unwrap();
        assert_eq!(d[0].indices(), &[0, 1, 3, 2, 4, 6, 5, 7, 8]);
        assert_eq!(d[1].indices(), &[8, 7, 5, 6, 4, 2, 3, 1, 0]);
        assert!(scan_orders(SubBandKind::LH, 0, 3).is_err());
    }

    #[test]
    fn four_directions_per_band() {
        for k in SubBandKind::ALL {
            let d = directional_orders(k, 3, 5).unwrap();
            assert_eq!(d.len(), 4);
            assert_eq!(d[1], d[0].reversed());
        }
    }

    #[test]
    fn apply_cases() {
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = ScanOrder::pattern(ScanPattern::Vertical, 2, 2).unwrap();
        assert_eq!(apply_order(&x, &v).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
        let id = ScanOrder::pattern(ScanPattern::Horizontal, 2, 2).unwrap();
        assert_eq!(apply_order(&x, &id).unwrap(), x.reshape([1, 1, 4]).unwrap());
        assert!(apply_order(&x, &ScanOrder::pattern(ScanPattern::Horizontal, 2, 3).unwrap()).is_err());
    }

    #[test]
    fn invert_cases() {
        let id = ScanOrder::pattern(ScanPattern::Horizontal, 3, 2).unwrap();
        assert_eq!(invert_order(&id), id);
        let v = ScanOrder::new(vec![0, 2, 1, 3], 2, 2).unwrap();
        assert_eq!(invert_order(&v).indices(), &[0, 2, 1, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p: Vec<usize> = (0..20).collect();
        p.shuffle(&mut rng);
        let o = ScanOrder::new(p, 4, 5).unwrap();
        assert_eq!(o.invert().invert(), o);
        assert!(ScanOrder::new(vec![0, 0, 1, 2], 2, 2).is_err());
    }

    #[test]
    fn merge_cases() {
        let x = Tensor::<f64>::from_fn([1, 1, 2, 2], |i| i as f64 - 1.5);
        assert_eq!(merge_directional(&[x.clone()]).unwrap(), x);
        assert_eq!(merge_directional(&[x.clone(), x.clone()]).unwrap(), x);
        let neg = x.map(|v| -v);
        assert!(merge_directional(&[x, neg]).unwrap().data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn orders_are_bijections(kind in kind_strategy(), h in 1usize..24, w in 1usize..24) {
            for o in directional_orders(kind, h, w).unwrap() {
                prop_assert!(ScanOrder::new(o.indices().to_vec(), h, w).is_ok());
                let inv = o.invert();
                for t in 0..o.len() {
                    prop_assert_eq!(inv.indices()[o.indices()[t]], t);
                }
            }
        }

        #[test]
        fn anti_diagonal_monotone(h in 1usize..24, w in 1usize..24) {
            let o = ScanOrder::pattern(ScanPattern::AntiDiagonal, h, w).unwrap();
            let sums: Vec<usize> = o.indices().iter().map(|&p| p / w + p % w).collect();
            prop_assert!(sums.windows(2).all(|s| s[0] <= s[1]));
        }

        #[test]
        fn apply_round_trip_preserves_values(kind in kind_strategy(), h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::uniform([2, 3, h, w], -1.0, 1.0, &mut rng);
            for o in directional_orders(kind, h, w).unwrap() {
                let seq = apply_order(&x, &o).unwrap();
                prop_assert_eq!(&restore_order(&seq, &o).unwrap(), &x);
                for slice in 0..6 {
                    let mut a: Vec<f64> = x.data()[slice * h * w..][..h * w].to_vec();
                    let mut b: Vec<f64> = seq.data()[slice * h * w..][..h * w].to_vec();
                    a.sort_by(f64::total_cmp);
                    b.sort_by(f64::total_cmp);
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}
