//! Shapes-on-texture images and uncertainty-map corpora.

use ndarray::{Array2, Array3};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Blob,
}

/// Shape in continuous pixel coordinates (pixel `i` covers `[i, i + 1)`).
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Rectangle { y0: f64, x0: f64, y1: f64, x1: f64 },
    /// Star-shaped region `ρ(θ) = r (1 + Σ a_k sin(kθ + φ_k))`.
    Blob { cy: f64, cx: f64, r: f64, harmonics: Vec<(f64, f64)> },
}

impl Shape {
    /// Whether the centre of pixel `(y, x)` lies inside.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match self {
            Shape::Disk { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
            Shape::Rectangle { y0, x0, y1, x1 } => py >= *y0 && py < *y1 && px >= *x0 && px < *x1,
            Shape::Blob { cy, cx, r, harmonics } => {
                let (dy, dx) = (py - cy, px - cx);
                let theta = dy.atan2(dx);
                let rho = harmonics
                    .iter()
                    .enumerate()
                    .fold(1.0, |acc, (k, (a, phi))| acc + a * ((k + 2) as f64 * theta + phi).sin());
                (dy * dy + dx * dx).sqrt() <= r * rho
            }
        }
    }

    fn random(kind: ShapeKind, size: usize, rng: &mut impl Rng) -> Self {
        let s = size as f64;
        let r = rng.random_range(0.1 * s..=0.28 * s);
        let cy = rng.random_range(0.2 * s..=0.8 * s);
        let cx = rng.random_range(0.2 * s..=0.8 * s);
        match kind {
            ShapeKind::Disk => Shape::Disk { cy, cx, r },
            ShapeKind::Rectangle => {
                let hh = r * rng.random_range(0.6..=1.4);
                let hw = r * rng.random_range(0.6..=1.4);
                Shape::Rectangle {
                    y0: cy - hh,
                    x0: cx - hw,
                    y1: cy + hh,
                    x1: cx + hw,
                }
            }
            ShapeKind::Blob => Shape::Blob {
                cy,
                cx,
                r,
                harmonics: (0..3)
                    .map(|_| (rng.random_range(0.0..0.2), rng.random_range(0.0..std::f64::consts::TAU)))
                    .collect(),
            },
        }
    }
}

/// Binary union of the shapes on a `size × size` canvas.
pub fn render_shapes(size: usize, shapes: &[Shape]) -> Array2<f32> {
    Array2::from_shape_fn((size, size), |(y, x)| {
        shapes.iter().any(|s| s.contains(y, x)) as u8 as f32
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub size: usize,
    /// Inclusive range of shapes per image.
    pub shape_count: (usize, usize),
    pub kinds: Vec<ShapeKind>,
    /// Amplitude of the smooth texture noise.
    pub noise: f64,
    /// Coarse grid cells per side of the texture noise.
    pub texture_cells: usize,
    /// Inclusive foreground share bounds.
    pub occupancy: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 64,
            shape_count: (1, 2),
            kinds: vec![ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Blob],
            noise: 0.12,
            texture_cells: 6,
            occupancy: (0.05, 0.5),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Array3<f32>,
    pub mask: Array2<f32>,
    pub shapes: Vec<Shape>,
}

const MAX_ATTEMPTS: usize = 500;

fn smooth_noise(size: usize, cells: usize, rng: &mut impl Rng) -> Array2<f32> {
    let cells = cells.max(1);
    let grid = Array2::from_shape_fn((cells + 1, cells + 1), |_| rng.random_range(-1.0f32..=1.0));
    let step = size as f32 / cells as f32;
    Array2::from_shape_fn((size, size), |(y, x)| {
        let fy = (y as f32 + 0.5) / step;
        let fx = (x as f32 + 0.5) / step;
        let (y0, x0) = ((fy as usize).min(cells - 1), (fx as usize).min(cells - 1));
        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
        let a = grid[[y0, x0]] * (1.0 - tx) + grid[[y0, x0 + 1]] * tx;
        let b = grid[[y0 + 1, x0]] * (1.0 - tx) + grid[[y0 + 1, x0 + 1]] * tx;
        a * (1.0 - ty) + b * ty
    })
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn sample_one(spec: &SynthSpec, rng: &mut impl Rng) -> Option<SynthSample> {
    let n = spec.size;
    let count = rng.random_range(spec.shape_count.0..=spec.shape_count.1.max(spec.shape_count.0));
    let shapes: Vec<Shape> = (0..count)
        .map(|_| {
            let kind = *spec.kinds.choose(rng).unwrap_or(&ShapeKind::Disk);
            Shape::random(kind, n, rng)
        })
        .collect();
    let mask = render_shapes(n, &shapes);
    let share = mask.sum() as f64 / (n * n) as f64;
    if share < spec.occupancy.0 || share > spec.occupancy.1 {
        return None;
    }
    let bg = random_color(rng);
    let fg = loop {
        let c = random_color(rng);
        let d: f32 = c.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f32>() / 3.0;
        if d >= 0.3 {
            break c;
        }
    };
    let bg_tex = smooth_noise(n, spec.texture_cells, rng);
    let fg_tex = smooth_noise(n, spec.texture_cells * 2, rng);
    let amp = spec.noise as f32;
    let image = Array3::from_shape_fn((3, n, n), |(c, y, x)| {
        let v = if mask[[y, x]] > 0.5 {
            fg[c] + amp * fg_tex[[y, x]]
        } else {
            bg[c] + amp * bg_tex[[y, x]]
        };
        v.clamp(0.0, 1.0)
    });
    Some(SynthSample { image, mask, shapes })
}

/// `n` images; image `i` is drawn from seed `spec.seed + i` and redrawn
/// until its foreground share falls inside the occupancy bounds.
pub fn synth_generate(spec: &SynthSpec, n: usize) -> Result<Vec<SynthSample>> {
    if spec.size < 4 || spec.kinds.is_empty() || spec.shape_count.1 == 0 {
        return Err(Error::config("synthetic spec needs size ≥ 4, at least one shape kind and shape"));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(i as u64));
            (0..MAX_ATTEMPTS)
                .find_map(|_| sample_one(spec, &mut rng))
                .ok_or_else(|| {
                    Error::config(format!(
                        "no image within occupancy {:?} after {MAX_ATTEMPTS} draws",
                        spec.occupancy
                    ))
                })
        })
        .collect()
}

/// Uncertainty maps with an exact count of nonzero pixels: `k` is drawn
/// from `[⌈lo·N⌉, ⌊hi·N⌋]` and grown as 1 to 3 random 4-connected
/// regions. Nonzero values lie in `[0.1, 0.5]`.
pub fn uncertainty_corpus(n: usize, size: usize, occupancy: (f64, f64), seed: u64) -> Vec<Array2<f64>> {
    let total = size * size;
    let lo = ((occupancy.0 * total as f64).ceil() as usize).min(total);
    let hi = ((occupancy.1 * total as f64).floor() as usize).clamp(lo, total);
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let k = rng.random_range(lo..=hi);
            let mut map = Array2::<f64>::zeros((size, size));
            let mut placed = 0;
            let regions = rng.random_range(1..=3usize);
            let mut frontier: Vec<(usize, usize)> = Vec::new();
            let mut seeds_left = regions;
            while placed < k {
                if frontier.is_empty() || (seeds_left > 0 && placed >= k * (regions - seeds_left) / regions) {
                    frontier.push((rng.random_range(0..size), rng.random_range(0..size)));
                    seeds_left = seeds_left.saturating_sub(1);
                }
                let j = rng.random_range(0..frontier.len());
                let (y, x) = frontier.swap_remove(j);
                if map[[y, x]] != 0.0 {
                    continue;
                }
                map[[y, x]] = rng.random_range(0.1..=0.5);
                placed += 1;
                if y > 0 {
                    frontier.push((y - 1, x));
                }
                if y + 1 < size {
                    frontier.push((y + 1, x));
                }
                if x > 0 {
                    frontier.push((y, x - 1));
                }
                if x + 1 < size {
                    frontier.push((y, x + 1));
                }
            }
            map
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_binary() {
        let spec = SynthSpec { seed: 7, ..SynthSpec::default() };
        let a = synth_generate(&spec, 5).unwrap();
        let b = synth_generate(&spec, 5).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!(s.mask.iter().all(|&v| v == 0.0 || v == 1.0));
            let share = s.mask.sum() as f64 / 4096.0;
            assert!((0.05..=0.5).contains(&share));
            assert_eq!(render_shapes(64, &s.shapes), s.mask);
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let c = synth_generate(&SynthSpec { seed: 8, ..spec }, 1).unwrap();
        assert_ne!(c[0], a[0]);
    }

    #[test]
    fn centered_disk_area() {
        for r in [3.0, 8.0, 15.5, 25.0] {
            let m = render_shapes(64, &[Shape::Disk { cy: 32.0, cx: 32.0, r }]);
            let area = m.sum() as f64;
            let expect = std::f64::consts::PI * r * r;
            assert!((area - expect).abs() <= 4.0 * r, "r={r} area={area}");
        }
    }

    #[test]
    fn unreachable_occupancy_is_error() {
        let spec = SynthSpec {
            occupancy: (0.99, 1.0),
            kinds: vec![ShapeKind::Disk],
            ..SynthSpec::default()
        };
        assert!(synth_generate(&spec, 1).is_err());
    }

    #[test]
    fn corpus_occupancy_exact() {
        let maps = uncertainty_corpus(50, 64, (0.02, 0.05), 3);
        for m in &maps {
            let k = m.iter().filter(|&&v| v > 0.0).count();
            assert!((82..=204).contains(&k), "{k}");
            assert!(m.iter().all(|&v| v == 0.0 || (0.1..=0.5).contains(&v)));
        }
        assert_eq!(maps, uncertainty_corpus(50, 64, (0.02, 0.05), 3));
    }
}
