//! Synthetic polyp-like scenes: a smooth reddish background with one bright,
//! textured super-ellipse. The mask is the exact super-ellipse interior.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

use super::Sample;

/// Foreground fraction bounds every generated mask satisfies.
pub const MIN_FOREGROUND: f64 = 0.01;
pub const MAX_FOREGROUND: f64 = 0.30;
const MAX_ATTEMPTS: usize = 256;

/// Seeded lattice values, bilinearly interpolated at pixel positions.
struct ValueNoise {
    cell: f64,
    cols: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut SeededRng, h: usize, w: usize, cell: f64) -> Self {
        let rows = (h as f64 / cell).ceil() as usize + 2;
        let cols = (w as f64 / cell).ceil() as usize + 2;
        let lattice = (0..rows * cols).map(|_| rng.uniform(0.0, 1.0)).collect();
        ValueNoise { cell, cols, lattice }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        let (fy, fx) = (y as f64 / self.cell, x as f64 / self.cell);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let l = |r: usize, c: usize| self.lattice[r * self.cols + c];
        let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
        let bottom = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

#[derive(Clone, Copy, Debug)]
struct SuperEllipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    p: f64,
    cos: f64,
    sin: f64,
}

impl SuperEllipse {
    fn sample(rng: &mut SeededRng, h: usize, w: usize) -> Self {
        let m = h.min(w) as f64;
        let a = rng.uniform(0.1, 0.3) * m;
        let b = rng.uniform(0.1, 0.3) * m;
        let p = rng.uniform(1.8, 2.2);
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        // Keep the whole shape inside the frame.
        let reach = (a * a + b * b).sqrt();
        let place = |n: usize, rng: &mut SeededRng| {
            let hi = n as f64 - 1.0 - reach;
            if hi > reach {
                rng.uniform(reach, hi)
            } else {
                (n as f64 - 1.0) / 2.0
            }
        };
        let cy = place(h, rng);
        let cx = place(w, rng);
        SuperEllipse {
            cy,
            cx,
            a,
            b,
            p,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// `|u/a|^p + |v/b|^p` in the shape's rotated frame; inside iff `<= 1`.
    fn level(&self, y: usize, x: usize) -> f64 {
        let (dy, dx) = (y as f64 - self.cy, x as f64 - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).abs().powf(self.p) + (v / self.b).abs().powf(self.p)
    }
}

/// One scene as `(image (3,H,W), mask (1,H,W))`.
fn scene(rng: &mut SeededRng, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut shape = SuperEllipse::sample(rng, h, w);
    let mut mask = vec![0.0; h * w];
    for attempt in 0.. {
        for y in 0..h {
            for x in 0..w {
                mask[y * w + x] = if shape.level(y, x) <= 1.0 { 1.0 } else { 0.0 };
            }
        }
        let frac = mask.iter().sum::<f64>() / (h * w) as f64;
        // Extreme aspect ratios can make the bounds unreachable; the last
        // draw is kept rather than looping forever.
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) || attempt + 1 == MAX_ATTEMPTS {
            break;
        }
        shape = SuperEllipse::sample(rng, h, w);
    }

    let m = h.min(w) as f64;
    let coarse = ValueNoise::new(rng, h, w, (m / 3.0).max(4.0));
    let medium = ValueNoise::new(rng, h, w, (m / 8.0).max(2.0));
    let fine = ValueNoise::new(rng, h, w, 2.5);
    let plane = h * w;
    let mut image = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let n = 0.7 * coarse.at(y, x) + 0.3 * medium.at(y, x);
            let mut rgb = [0.38 + 0.26 * n, 0.13 + 0.14 * n, 0.11 + 0.10 * n];
            if mask[i] == 1.0 {
                let t = fine.at(y, x);
                // Slightly brighter toward the middle, never darker than the
                // brightest background at the rim.
                let shade = 1.0 - 0.08 * shape.level(y, x);
                rgb = [
                    shade * (0.90 + 0.10 * t),
                    shade * (0.58 + 0.28 * t),
                    shade * (0.46 + 0.24 * t),
                ];
            }
            for (c, v) in rgb.into_iter().enumerate() {
                image[c * plane + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    (image, mask)
}

/// `n` scenes of size `hw`, a pure function of `(n, hw, seed)`. Scene `i`
/// uses its own stream seeded with `seed ^ i`.
pub fn generate_synthetic_dataset<T: Scalar>(n: usize, hw: (usize, usize), seed: u64) -> Result<Vec<Sample<T>>> {
    let (h, w) = hw;
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    if h < 16 || w < 16 {
        return Err(Error::InvalidArgument(format!("image size {h}x{w} is below 16x16")));
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect::<Vec<T>>();
    (0..n)
        .map(|i| {
            let mut rng = SeededRng::for_item(seed, i as u64);
            let (image, mask) = scene(&mut rng, h, w);
            Ok(Sample {
                image: Tensor::new(Shape::new(&[3, h, w])?, cast(image))?,
                mask: Tensor::new(Shape::new(&[1, h, w])?, cast(mask))?,
                id: format!("syn_{i:05}"),
            })
        })
        .collect()
}
