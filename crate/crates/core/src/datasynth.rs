//! Procedural clean images and synthetic rain/snow degradations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegradeKind {
    Rain,
    Snow,
}

impl DegradeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rain => "rain",
            Self::Snow => "snow",
        }
    }
}

impl std::str::FromStr for DegradeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rain" => Ok(Self::Rain),
            "snow" => Ok(Self::Snow),
            _ => Err(Error::Config(format!("unknown degradation kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradeSpec {
    pub kind: DegradeKind,
    /// Fraction of the maximum particle count, in `[0, 1]`.
    pub density: f64,
    /// Streak direction in degrees from the horizontal axis (rain only).
    pub angle: f64,
    /// Disc radius in pixels (snow only).
    pub particle_radius: f64,
    /// Peak opacity of a particle, in `[0, 1]`.
    pub intensity: f64,
    pub seed: u64,
}

impl DegradeSpec {
    pub fn rain(density: f64, seed: u64) -> Self {
        Self {
            kind: DegradeKind::Rain,
            density,
            angle: 80.0,
            particle_radius: 1.5,
            intensity: 0.8,
            seed,
        }
    }

    pub fn snow(density: f64, seed: u64) -> Self {
        Self {
            kind: DegradeKind::Snow,
            ..Self::rain(density, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.density) || !unit(self.intensity) {
            return Err(Error::InvalidArgument {
                op: "degrade",
                detail: format!("density {} and intensity {} must lie in [0, 1]", self.density, self.intensity),
            });
        }
        if !self.angle.is_finite() || !(self.particle_radius > 0.0 && self.particle_radius.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "degrade",
                detail: "angle must be finite and particle_radius positive".into(),
            });
        }
        Ok(())
    }
}

/// Deterministic `[1, 3, h, w]` image in `[0, 1]`: a bilinear colour
/// gradient, a few flat rectangles and a sinusoidal texture.
pub fn generate_clean<T: Real>(seed: u64, h: usize, w: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners: Vec<[f64; 3]> = (0..4).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let mut img = vec![0.0f64; 3 * h * w];
    for i in 0..h {
        let v = i as f64 / (h.max(2) - 1) as f64;
        for j in 0..w {
            let u = j as f64 / (w.max(2) - 1) as f64;
            for c in 0..3 {
                let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
                let bottom = corners[2][c] * (1.0 - u) + corners[3][c] * u;
                img[(c * h + i) * w + j] = top * (1.0 - v) + bottom * v;
            }
        }
    }
    let rects = rng.gen_range(3..7);
    for _ in 0..rects {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (rh, rw) = (rng.gen_range(1..=h.div_ceil(2)), rng.gen_range(1..=w.div_ceil(2)));
        let colour: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let alpha = rng.gen_range(0.6..1.0);
        for i in y0..(y0 + rh).min(h) {
            for j in x0..(x0 + rw).min(w) {
                for (c, &col) in colour.iter().enumerate() {
                    let p = &mut img[(c * h + i) * w + j];
                    *p = *p * (1.0 - alpha) + col * alpha;
                }
            }
        }
    }
    let (fy, fx) = (rng.gen_range(0.2..1.2), rng.gen_range(0.2..1.2));
    let phase: [f64; 3] = [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)];
    let amp = rng.gen_range(0.05..0.15);
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                let p = &mut img[(c * h + i) * w + j];
                *p = (*p + amp * (fy * i as f64 + fx * j as f64 + phase[c]).sin()).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_fn([1, 3, h, w], |k| T::c(img[k]))
}

/// Per-pixel opacity layer `[h, w]` of a rain streak field.
fn rain_layer(spec: &DegradeSpec, h: usize, w: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let len = (h as f64 / 4.0).max(2.0);
    let max_streaks = (h * w) as f64 / 8.0;
    let count = (spec.density * max_streaks).round() as usize;
    let mut layer = vec![0.0f64; h * w];
    let theta = spec.angle.to_radians();
    let put = |layer: &mut Vec<f64>, y: f64, x: f64, v: f64| {
        let (yi, xi) = (y.round(), x.round());
        if yi >= 0.0 && xi >= 0.0 && (yi as usize) < h && (xi as usize) < w {
            layer[yi as usize * w + xi as usize] += v;
        }
    };
    // streaks are drawn in generation order, so a higher density only adds
    // streaks on top of those of a lower one
    for _ in 0..count {
        let y0 = rng.gen_range(-len..h as f64);
        let x0 = rng.gen_range(-len..w as f64 + len);
        let jitter = rng.gen_range(-5.0f64..5.0).to_radians();
        let strength = rng.gen_range(0.5..1.0);
        let (dy, dx) = ((theta + jitter).sin(), (theta + jitter).cos());
        let steps = (2.0 * len) as usize;
        for s in 0..=steps {
            let t = s as f64 * 0.5;
            put(&mut layer, y0 + t * dy, x0 + t * dx, strength * 0.5);
        }
    }
    // 3-tap box blur along the mean streak direction
    let (dy, dx) = (theta.sin(), theta.cos());
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for k in [-1.0, 0.0, 1.0] {
                let (y, x) = ((i as f64 + k * dy).round(), (j as f64 + k * dx).round());
                if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                    acc += layer[y as usize * w + x as usize];
                }
            }
            out[i * w + j] = acc / 3.0;
        }
    }
    out
}

fn snow_layer(spec: &DegradeSpec, h: usize, w: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let r = spec.particle_radius;
    let max_flakes = (h * w) as f64 / (std::f64::consts::PI * r * r) * 0.5;
    let count = (spec.density * max_flakes).round() as usize;
    let mut layer = vec![0.0f64; h * w];
    for _ in 0..count {
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let rad = r * rng.gen_range(0.5..1.0);
        let strength = rng.gen_range(0.6..1.0);
        let (y0, y1) = ((cy - rad - 1.0).floor().max(0.0) as usize, ((cy + rad + 1.0).ceil() as usize).min(h));
        let (x0, x1) = ((cx - rad - 1.0).floor().max(0.0) as usize, ((cx + rad + 1.0).ceil() as usize).min(w));
        for i in y0..y1 {
            for j in x0..x1 {
                let d = ((i as f64 + 0.5 - cy).powi(2) + (j as f64 + 0.5 - cx).powi(2)).sqrt();
                // one-pixel soft edge
                let cover = (rad + 0.5 - d).clamp(0.0, 1.0);
                layer[i * w + j] += strength * cover;
            }
        }
    }
    layer
}

/// Composites bright rain streaks or snow discs over `image`
/// (`[N, 3, H, W]`, values in `[0, 1]`) toward white, clamped to `[0, 1]`.
pub fn degrade<T: Real>(image: &Tensor<T>, spec: &DegradeSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let (n, c, h, w) = image.dims4()?;
    if spec.density == 0.0 {
        return Ok(image.clone());
    }
    let layer = match spec.kind {
        DegradeKind::Rain => rain_layer(spec, h, w),
        DegradeKind::Snow => snow_layer(spec, h, w),
    };
    let plane = h * w;
    Ok(Tensor::from_fn([n, c, h, w], |k| {
        let alpha = (spec.intensity * layer[k % plane]).min(1.0);
        let v = image.data()[k].as_f64();
        T::c((v * (1.0 - alpha) + alpha).clamp(0.0, 1.0))
    }))
}

/// One clean/degraded example.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair<T: Real> {
    pub clean: Tensor<T>,
    pub degraded: Tensor<T>,
    pub spec: DegradeSpec,
    pub clean_seed: u64,
}

/// `n` deterministic pairs. Image and degradation seeds are drawn from a
/// generator seeded with `seed`, so pair `i` does not depend on `n`.
pub fn make_dataset<T: Real>(n: usize, h: usize, w: usize, template: &DegradeSpec, seed: u64) -> Result<Vec<Pair<T>>> {
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let clean_seed: u64 = rng.gen();
            let spec = DegradeSpec {
                seed: rng.gen(),
                ..template.clone()
            };
            let clean = generate_clean(clean_seed, h, w);
            let degraded = degrade(&clean, &spec)?;
            Ok(Pair {
                clean,
                degraded,
                spec,
                clean_seed,
            })
        })
        .collect()
}
