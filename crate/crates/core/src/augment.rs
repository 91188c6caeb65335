//! Image container and the two augmentation families used to build the
//! parallel views of every sample.

use rand::Rng;

use crate::error::{PiciError, Result};
use crate::seed;

/// Dense `height × width × channels` image stored row-major, channel last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(PiciError::InvalidImage(format!(
                "zero-sized image {height}x{width}x{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(PiciError::InvalidImage(format!(
                "{} pixel values for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Checks the pipeline-input contract: three channels, finite values in [0, 1].
    pub fn validate_input(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(PiciError::InvalidImage(format!(
                "expected 3 channels, got {}",
                self.channels
            )));
        }
        if let Some(v) = self
            .pixels
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(PiciError::InvalidImage(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(())
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(PiciError::InvalidImage(format!(
                "crop window {h}x{w} at ({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut out = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            out.extend_from_slice(&self.pixels[start..start + w * c]);
        }
        Image::new(h, w, c, out)
    }

    /// Largest centered square.
    pub fn center_square(&self) -> Image {
        let side = self.height.min(self.width);
        let y0 = (self.height - side) / 2;
        let x0 = (self.width - side) / 2;
        self.crop(y0, x0, side, side)
            .expect("centered square always fits")
    }

    /// Bilinear resize with half-pixel centers. Same-size resizes copy exactly.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<Image> {
        if out_h == 0 || out_w == 0 {
            return Err(PiciError::InvalidImage("resize to zero area".into()));
        }
        if out_h == self.height && out_w == self.width {
            return Ok(self.clone());
        }
        let c = self.channels;
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        let axis = |dst: usize, scale: f64, len: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut out = vec![0.0; out_h * out_w * c];
        for y in 0..out_h {
            let (y0, y1, fy) = axis(y, sy, self.height);
            for x in 0..out_w {
                let (x0, x1, fx) = axis(x, sx, self.width);
                for ch in 0..c {
                    let top = self.get(y0, x0, ch) * (1.0 - fx) + self.get(y0, x1, ch) * fx;
                    let bot = self.get(y1, x0, ch) * (1.0 - fx) + self.get(y1, x1, ch) * fx;
                    out[(y * out_w + x) * c + ch] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Image::new(out_h, out_w, c, out)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentKind {
    Weak,
    Strong,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    pub target_size: usize,
    pub crop_scale_range: (f64, f64),
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    pub flip_prob: f64,
    pub blur_prob: f64,
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
}

impl AugmentPolicy {
    /// Resize and normalize only.
    pub fn weak(target_size: usize, mean: [f64; 3], std: [f64; 3]) -> Self {
        Self {
            kind: AugmentKind::Weak,
            target_size,
            crop_scale_range: (1.0, 1.0),
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            flip_prob: 0.0,
            blur_prob: 0.0,
            normalize_mean: mean,
            normalize_std: std,
        }
    }

    /// Strong family with the default distortion magnitudes.
    pub fn strong(target_size: usize, mean: [f64; 3], std: [f64; 3]) -> Self {
        Self {
            kind: AugmentKind::Strong,
            crop_scale_range: (0.5, 1.0),
            jitter_strength: 0.4,
            grayscale_prob: 0.2,
            flip_prob: 0.5,
            blur_prob: 0.5,
            ..Self::weak(target_size, mean, std)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PiciError::Config(m));
        if self.target_size == 0 {
            return bad("augment target_size must be positive".into());
        }
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop scale range ({lo}, {hi}) must lie in (0, 1]"));
        }
        if !(self.jitter_strength >= 0.0) {
            return bad("jitter strength must be non-negative".into());
        }
        for (name, p) in [
            ("grayscale_prob", self.grayscale_prob),
            ("flip_prob", self.flip_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.normalize_std.iter().any(|s| !(*s > 0.0)) {
            return bad("normalization std must be positive".into());
        }
        Ok(())
    }
}

fn normalize(mut img: Image, policy: &AugmentPolicy) -> Image {
    let c = img.channels;
    for (i, v) in img.pixels.iter_mut().enumerate() {
        let ch = i % c;
        *v = (*v - policy.normalize_mean[ch]) / policy.normalize_std[ch];
    }
    img
}

/// Resize to `target_size × target_size` and normalize per channel.
pub fn weak_augment(img: &Image, policy: &AugmentPolicy) -> Result<Image> {
    if img.height == 0 || img.width == 0 {
        return Err(PiciError::InvalidImage("zero-area image".into()));
    }
    let resized = img.resize(policy.target_size, policy.target_size)?;
    Ok(normalize(resized, policy))
}

const CROP_ATTEMPTS: usize = 10;

/// Random resized-crop window; falls back to the full image.
fn crop_window<R: Rng>(rng: &mut R, h: usize, w: usize, scale: (f64, f64)) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr_lo, lr_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * uniform(rng, scale.0, scale.1);
        let ratio = uniform(rng, lr_lo, lr_hi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let y0 = rng.gen_range(0..=h - ch);
            let x0 = rng.gen_range(0..=w - cw);
            return (y0, x0, ch, cw);
        }
    }
    (0, 0, h, w)
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn gray(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn color_jitter<R: Rng>(img: &mut Image, rng: &mut R, strength: f64) {
    let lo = (1.0 - strength).max(0.0);
    let hi = 1.0 + strength;
    let brightness = uniform(rng, lo, hi);
    let contrast = uniform(rng, lo, hi);
    let saturation = uniform(rng, lo, hi);

    for v in img.pixels.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let n = (img.height * img.width) as f64;
    let mean_gray = img
        .pixels
        .chunks_exact(3)
        .map(|p| gray(p[0], p[1], p[2]))
        .sum::<f64>()
        / n;
    for v in img.pixels.iter_mut() {
        *v = ((*v - mean_gray) * contrast + mean_gray).clamp(0.0, 1.0);
    }
    for p in img.pixels.chunks_exact_mut(3) {
        let g = gray(p[0], p[1], p[2]);
        for v in p.iter_mut() {
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }
}

fn to_grayscale(img: &mut Image) {
    for p in img.pixels.chunks_exact_mut(3) {
        let g = gray(p[0], p[1], p[2]);
        p.fill(g);
    }
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = ((img.height.min(img.width) as f64 * 0.1) / 2.0).floor().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();

    let (h, w, c) = (img.height, img.width, img.channels);
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let s: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * img.get(y, reflect(x as isize + k as isize - radius, w), ch))
                    .sum();
                tmp.set(y, x, ch, s);
            }
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let s: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * tmp.get(reflect(y as isize + k as isize - radius, h), x, ch))
                    .sum();
                out.set(y, x, ch, s);
            }
        }
    }
    out
}

/// Strong view: crop → jitter → grayscale → flip → blur → resize → normalize.
///
/// A pure function of `(img, policy, seed)`. A weak policy reduces to
/// [`weak_augment`].
pub fn strong_augment(img: &Image, policy: &AugmentPolicy, seed: u64) -> Result<Image> {
    if img.height == 0 || img.width == 0 {
        return Err(PiciError::InvalidImage("zero-area image".into()));
    }
    if policy.kind == AugmentKind::Weak {
        return weak_augment(img, policy);
    }
    let mut rng = seed::rng(seed);

    let (y0, x0, ch, cw) = crop_window(&mut rng, img.height, img.width, policy.crop_scale_range);
    let mut out = img.crop(y0, x0, ch, cw)?;

    if policy.jitter_strength > 0.0 {
        color_jitter(&mut out, &mut rng, policy.jitter_strength);
    }
    if rng.gen::<f64>() < policy.grayscale_prob {
        to_grayscale(&mut out);
    }
    if rng.gen::<f64>() < policy.flip_prob {
        out = out.flip_horizontal();
    }
    let blur_draw = rng.gen::<f64>();
    let sigma = uniform(&mut rng, 0.1, 2.0);
    if blur_draw < policy.blur_prob {
        out = gaussian_blur(&out, sigma);
    }
    let out = out.resize(policy.target_size, policy.target_size)?;
    Ok(normalize(out, policy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = seed::rng(seed);
        let px = (0..h * w * 3).map(|_| rng.gen::<f64>()).collect();
        Image::new(h, w, 3, px).unwrap()
    }

    #[test]
    fn weak_identity_at_native_size() {
        let img = random_image(224, 224, 1);
        let policy = AugmentPolicy::weak(224, [0.0; 3], [1.0; 3]);
        let out = weak_augment(&img, &policy).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn weak_output_shape() {
        let img = random_image(50, 70, 2);
        let policy = AugmentPolicy::weak(224, [0.5; 3], [0.25; 3]);
        let out = weak_augment(&img, &policy).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (224, 224, 3));
    }

    #[test]
    fn constant_image_normalizes_affinely() {
        let img = Image::filled(17, 23, 3, 0.7).unwrap();
        let policy = AugmentPolicy::weak(32, [0.2, 0.3, 0.4], [0.5, 0.25, 2.0]);
        let out = weak_augment(&img, &policy).unwrap();
        for (i, v) in out.pixels().iter().enumerate() {
            let ch = i % 3;
            let want = (0.7 - policy.normalize_mean[ch]) / policy.normalize_std[ch];
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_area_rejected() {
        assert!(Image::new(0, 4, 3, vec![]).is_err());
    }

    #[test]
    fn inert_strong_equals_weak() {
        let img = random_image(40, 40, 3);
        let weak = AugmentPolicy::weak(32, [0.4; 3], [0.2; 3]);
        let inert = AugmentPolicy {
            kind: AugmentKind::Strong,
            ..weak.clone()
        };
        for seed in 0..5 {
            assert_eq!(
                strong_augment(&img, &inert, seed).unwrap(),
                weak_augment(&img, &weak).unwrap()
            );
        }
    }

    #[test]
    fn strong_is_deterministic_per_seed() {
        let img = random_image(48, 40, 4);
        let policy = AugmentPolicy::strong(32, [0.5; 3], [0.25; 3]);
        let a = strong_augment(&img, &policy, 99).unwrap();
        let b = strong_augment(&img, &policy, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width(), a.channels()), (32, 32, 3));
        assert!(a.pixels().iter().all(|v| v.is_finite()));
        let c = strong_augment(&img, &policy, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn flip_only_policy_mirrors_and_is_an_involution() {
        let img = random_image(16, 16, 5);
        let policy = AugmentPolicy {
            kind: AugmentKind::Strong,
            flip_prob: 1.0,
            ..AugmentPolicy::weak(16, [0.0; 3], [1.0; 3])
        };
        let once = strong_augment(&img, &policy, 11).unwrap();
        assert_eq!(once, img.flip_horizontal());
        let twice = strong_augment(&once, &policy, 12).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::filled(20, 20, 3, 0.3).unwrap();
        let out = gaussian_blur(&img, 1.5);
        assert!(out.pixels().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn degenerate_crop_falls_back_to_full_image() {
        let mut rng = seed::rng(0);
        // scale 1 with a non-square aspect draw never fits a square image
        let w = crop_window(&mut rng, 10, 10, (1.0, 1.0));
        assert_eq!(w, (0, 0, 10, 10));
    }

    #[test]
    fn policy_validation() {
        let mut p = AugmentPolicy::strong(32, [0.5; 3], [0.2; 3]);
        assert!(p.validate().is_ok());
        p.flip_prob = 1.5;
        assert!(p.validate().is_err());
        let mut p = AugmentPolicy::strong(0, [0.5; 3], [0.2; 3]);
        assert!(p.validate().is_err());
        p.target_size = 8;
        p.crop_scale_range = (0.0, 1.0);
        assert!(p.validate().is_err());
    }
}
