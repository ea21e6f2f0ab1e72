//! Random rotation, resized crop and photometric enhancement.
//!
//! One [`Geometry`] is drawn per sample and applied to the image with
//! bilinear sampling and to the mask with nearest-neighbour sampling, so
//! masks stay binary. Photometric changes touch the image only, and the
//! optional normalization runs last.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rotation {
    None,
    /// Multiples of 90°, exact index permutations.
    QuarterTurns,
    /// Uniform angle in `[-max, max]` degrees.
    Angle(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub rotation: Rotation,
    /// Range of the kept area fraction for the resized crop.
    pub crop_scale: (f64, f64),
    /// Enhancement factors are drawn from `[1 - x, 1 + x]`.
    pub brightness: f64,
    pub contrast: f64,
    pub sharpness: f64,
    /// Per-channel `(mean, std)`.
    pub normalize: Option<([f32; 3], [f32; 3])>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rotation: Rotation::Angle(15.0),
            crop_scale: (0.75, 1.0),
            brightness: 0.2,
            contrast: 0.2,
            sharpness: 0.2,
            normalize: None,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Output-to-source pixel mapping: resized crop of a rotated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub in_h: usize,
    pub in_w: usize,
    pub quarter_turns: u8,
    pub angle: f64,
    /// `(y0, x0, h, w)` in the rotated frame.
    pub crop: (f64, f64, f64, f64),
}

impl Geometry {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            in_h: h,
            in_w: w,
            quarter_turns: 0,
            angle: 0.0,
            crop: (0.0, 0.0, h as f64, w as f64),
        }
    }

    pub fn sample(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let mut g = Self::identity(h, w);
        match cfg.rotation {
            Rotation::None => {}
            Rotation::QuarterTurns => g.quarter_turns = rng.random_range(0..4),
            Rotation::Angle(max) if max > 0.0 => {
                g.angle = rng.random_range(-max..=max).to_radians();
            }
            Rotation::Angle(_) => {}
        }
        let (rh, rw) = g.rotated_dims();
        let (lo, hi) = cfg.crop_scale;
        let s = if hi > lo { rng.random_range(lo..=hi) } else { hi };
        if s < 1.0 {
            let side = s.sqrt();
            let (ch, cw) = (rh as f64 * side, rw as f64 * side);
            let y0 = rng.random_range(0.0..=rh as f64 - ch);
            let x0 = rng.random_range(0.0..=rw as f64 - cw);
            g.crop = (y0, x0, ch, cw);
        } else {
            g.crop = (0.0, 0.0, rh as f64, rw as f64);
        }
        g
    }

    fn rotated_dims(&self) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (self.in_w, self.in_h)
        } else {
            (self.in_h, self.in_w)
        }
    }

    pub fn out_dims(&self) -> (usize, usize) {
        self.rotated_dims()
    }

    /// Continuous source position of output pixel `(y, x)`; pixel `i`
    /// covers `[i, i + 1)`.
    pub fn source(&self, y: usize, x: usize) -> (f64, f64) {
        let (oh, ow) = self.out_dims();
        let (cy, cx, ch, cw) = self.crop;
        let mut u = cy + (y as f64 + 0.5) * ch / oh as f64;
        let mut v = cx + (x as f64 + 0.5) * cw / ow as f64;
        let (rh, rw) = self.rotated_dims();
        if self.angle != 0.0 {
            let (my, mx) = (rh as f64 / 2.0, rw as f64 / 2.0);
            let (s, c) = self.angle.sin_cos();
            let (dy, dx) = (u - my, v - mx);
            u = my + c * dy + s * dx;
            v = mx - s * dy + c * dx;
        }
        // undo counter-clockwise quarter turns one at a time
        let (mut fh, mut fw) = (rh, rw);
        for _ in 0..self.quarter_turns {
            let pre_w = fh;
            (u, v) = (v, pre_w as f64 - u);
            (fh, fw) = (fw, fh);
        }
        (u, v)
    }

    /// Nearest-neighbour resampling; out-of-frame pixels take `fill`.
    pub fn apply_nearest<T: Copy>(&self, src: &Array2<T>, fill: T) -> Array2<T> {
        let (h, w) = src.dim();
        Array2::from_shape_fn(self.out_dims(), |(y, x)| {
            let (u, v) = self.source(y, x);
            let (iy, ix) = (u.floor(), v.floor());
            if iy < 0.0 || ix < 0.0 || iy >= h as f64 || ix >= w as f64 {
                fill
            } else {
                src[[iy as usize, ix as usize]]
            }
        })
    }

    /// Bilinear resampling per channel; out-of-frame pixels become 0.
    pub fn apply_bilinear(&self, src: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = src.dim();
        let (oh, ow) = self.out_dims();
        let mut out = Array3::zeros((c, oh, ow));
        for y in 0..oh {
            for x in 0..ow {
                let (u, v) = self.source(y, x);
                if u < 0.0 || v < 0.0 || u >= h as f64 || v >= w as f64 {
                    continue;
                }
                let fy = (u - 0.5).clamp(0.0, (h - 1) as f64);
                let fx = (v - 0.5).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ty, tx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
                for ch in 0..c {
                    let a = src[[ch, y0, x0]] * (1.0 - tx) + src[[ch, y0, x1]] * tx;
                    let b = src[[ch, y1, x0]] * (1.0 - tx) + src[[ch, y1, x1]] * tx;
                    out[[ch, y, x]] = a * (1.0 - ty) + b * ty;
                }
            }
        }
        out
    }
}

fn luminance(img: &Array3<f32>) -> Array2<f32> {
    let (_, h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * img[[0, y, x]] + 0.587 * img[[1, y, x]] + 0.114 * img[[2, y, x]]
    })
}

fn blend(img: &mut Array3<f32>, base: impl Fn(usize, usize, usize) -> f32, f: f32) {
    for ((c, y, x), v) in img.indexed_iter_mut() {
        let b = base(c, y, x);
        *v = (b + f * (*v - b)).clamp(0.0, 1.0);
    }
}

pub fn adjust_brightness(img: &mut Array3<f32>, f: f32) {
    blend(img, |_, _, _| 0.0, f);
}

/// Blends towards the mean luminance.
pub fn adjust_contrast(img: &mut Array3<f32>, f: f32) {
    let m = luminance(img).mean().unwrap_or(0.0);
    blend(img, |_, _, _| m, f);
}

/// Blends towards a 3×3 smoothed copy (centre weight 5, others 1); the
/// border keeps its original values.
pub fn adjust_sharpness(img: &mut Array3<f32>, f: f32) {
    let (_, h, w) = img.dim();
    let src = img.clone();
    let smooth = |c: usize, y: usize, x: usize| {
        if y == 0 || x == 0 || y + 1 >= h || x + 1 >= w {
            return src[[c, y, x]];
        }
        let mut s = 0.0;
        for dy in 0..3 {
            for dx in 0..3 {
                let k = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                s += k * src[[c, y + dy - 1, x + dx - 1]];
            }
        }
        s / 13.0
    };
    blend(img, smooth, f);
}

pub fn normalize(img: &mut Array3<f32>, mean: [f32; 3], std: [f32; 3]) {
    for ((c, _, _), v) in img.indexed_iter_mut() {
        *v = (*v - mean[c]) / std[c];
    }
}

fn factor(rng: &mut impl Rng, spread: f64) -> Option<f32> {
    (spread > 0.0).then(|| rng.random_range(1.0 - spread..=1.0 + spread) as f32)
}

/// Augments one pair. Deterministic in `seed`; identity when disabled.
pub fn augment(
    image: &Array3<f32>,
    mask: &Array2<f32>,
    cfg: &AugmentConfig,
    seed: u64,
) -> (Array3<f32>, Array2<f32>) {
    if !cfg.enabled {
        return (image.clone(), mask.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, h, w) = image.dim();
    let geo = Geometry::sample(h, w, cfg, &mut rng);
    let mut img = geo.apply_bilinear(image);
    let m = geo.apply_nearest(mask, 0.0);
    if let Some(f) = factor(&mut rng, cfg.brightness) {
        adjust_brightness(&mut img, f);
    }
    if let Some(f) = factor(&mut rng, cfg.contrast) {
        adjust_contrast(&mut img, f);
    }
    if let Some(f) = factor(&mut rng, cfg.sharpness) {
        adjust_sharpness(&mut img, f);
    }
    if let Some((mean, std)) = cfg.normalize {
        normalize(&mut img, mean, std);
    }
    (img, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn pattern(h: usize, w: usize) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |(y, x)| (y * w + x) as f32)
    }

    #[test]
    fn disabled_is_identity() {
        let img = Array3::from_shape_fn((3, 5, 5), |(c, y, x)| (c + y * x) as f32 / 30.0);
        let m = pattern(5, 5);
        let (a, b) = augment(&img, &m, &AugmentConfig::disabled(), 3);
        assert_eq!(a, img);
        assert_eq!(b, m);
    }

    #[test]
    fn quarter_turn_is_exact_rotation() {
        let m = pattern(3, 4);
        let g = Geometry {
            quarter_turns: 1,
            ..Geometry::identity(3, 4)
        };
        let g = Geometry {
            crop: (0.0, 0.0, 4.0, 3.0),
            ..g
        };
        let r = g.apply_nearest(&m, -1.0);
        // counter-clockwise: out[i, j] = in[j, w - 1 - i]
        let expect = Array2::from_shape_fn((4, 3), |(i, j)| m[[j, 3 - i]]);
        assert_eq!(r, expect);
        let g2 = Geometry {
            quarter_turns: 2,
            ..Geometry::identity(3, 4)
        };
        let r2 = g2.apply_nearest(&m, -1.0);
        assert_eq!(r2, Array2::from_shape_fn((3, 4), |(i, j)| m[[2 - i, 3 - j]]));
    }

    #[test]
    fn identity_geometry_keeps_image() {
        let img = Array3::from_shape_fn((3, 6, 6), |(c, y, x)| (c * 36 + y * 6 + x) as f32);
        assert_eq!(Geometry::identity(6, 6).apply_bilinear(&img), img);
    }

    #[test]
    fn photometric_identities() {
        let img = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| ((c + y + 2 * x) % 5) as f32 / 5.0);
        let mut a = img.clone();
        adjust_brightness(&mut a, 1.0);
        adjust_contrast(&mut a, 1.0);
        adjust_sharpness(&mut a, 1.0);
        assert_eq!(a, img);
        let mut z = img.clone();
        adjust_contrast(&mut z, 0.0);
        let l = luminance(&img).mean().unwrap();
        assert!(z.iter().all(|&v| (v - l).abs() < 1e-6));
    }

    proptest! {
        #[test]
        fn mask_follows_index_grid(seed in any::<u64>(), n in 4usize..20, quarter in any::<bool>()) {
            let cfg = AugmentConfig {
                rotation: if quarter { Rotation::QuarterTurns } else { Rotation::Angle(30.0) },
                ..AugmentConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let geo = Geometry::sample(n, n, &cfg, &mut rng);
            let idx = Array2::from_shape_fn((n, n), |(y, x)| (y * n + x) as i64);
            let mut srng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let mask = Array2::from_shape_fn((n, n), |_| srng.random_bool(0.4) as u8 as f32);
            let moved_idx = geo.apply_nearest(&idx, -1);
            let moved = geo.apply_nearest(&mask, 0.0);
            for (i, m) in moved_idx.iter().zip(moved.iter()) {
                let expect = if *i < 0 { 0.0 } else { mask[[*i as usize / n, *i as usize % n]] };
                prop_assert_eq!(*m, expect);
            }
        }

        #[test]
        fn mask_stays_binary(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Array3::from_shape_fn((3, 12, 12), |_| rng.random::<f32>());
            let mask = Array2::from_shape_fn((12, 12), |_| rng.random_bool(0.5) as u8 as f32);
            let cfg = AugmentConfig {
                normalize: Some(([0.485, 0.456, 0.406], [0.229, 0.224, 0.225])),
                ..AugmentConfig::default()
            };
            let (a, m) = augment(&img, &mask, &cfg, seed);
            prop_assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert!(a.iter().all(|v| v.is_finite()));
            let (a2, m2) = augment(&img, &mask, &cfg, seed);
            prop_assert_eq!(a, a2);
            prop_assert_eq!(m, m2);
        }
    }
}
