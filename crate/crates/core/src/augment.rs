//! Stochastic image augmentation for contrastive views and fine-tuning.
//!
//! Every transform consumes a fixed number of draws from the stream whether
//! or not it fires, so enabling one transform never shifts the randomness
//! seen by the others.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::ImageGrid;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Harsh,
    Simple,
}

impl AugmentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AugmentKind::Harsh => "harsh",
            AugmentKind::Simple => "simple",
        }
    }
}

impl std::str::FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "harsh" => Ok(AugmentKind::Harsh),
            "simple" => Ok(AugmentKind::Simple),
            other => Err(Error::config(format!("unknown augmentation policy {other:?}"))),
        }
    }
}

/// Parameter ranges and firing probabilities of one augmentation policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    /// Fraction of the image area kept by the random resized crop.
    pub crop_scale: [f64; 2],
    /// Crop aspect ratio range (width / height), sampled log-uniformly.
    pub crop_ratio: [f64; 2],
    /// Additive brightness shift drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Multiplicative contrast factor about the image mean.
    pub contrast: [f64; 2],
    pub blur_sigma: [f64; 2],
    pub rotation_deg: f64,
    pub shear_deg: f64,
    /// Translation as a fraction of each side.
    pub translate: f64,
    pub p_crop: f64,
    pub p_jitter: f64,
    pub p_blur: f64,
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_rotate: f64,
    pub p_shear: f64,
    pub p_translate: f64,
}

impl AugmentPolicy {
    pub fn harsh() -> Self {
        AugmentPolicy {
            kind: AugmentKind::Harsh,
            crop_scale: [0.6, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            brightness: 0.2,
            contrast: [0.8, 1.25],
            blur_sigma: [0.1, 1.5],
            rotation_deg: 0.0,
            shear_deg: 0.0,
            translate: 0.0,
            p_crop: 1.0,
            p_jitter: 0.8,
            p_blur: 0.5,
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_rotate: 0.0,
            p_shear: 0.0,
            p_translate: 0.0,
        }
    }

    pub fn simple() -> Self {
        AugmentPolicy {
            kind: AugmentKind::Simple,
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            brightness: 0.0,
            contrast: [1.0, 1.0],
            blur_sigma: [0.0, 0.0],
            rotation_deg: 15.0,
            shear_deg: 10.0,
            translate: 0.1,
            p_crop: 0.0,
            p_jitter: 0.0,
            p_blur: 0.0,
            p_hflip: 0.5,
            p_vflip: 0.0,
            p_rotate: 0.5,
            p_shear: 0.5,
            p_translate: 0.5,
        }
    }

    pub fn for_kind(kind: AugmentKind) -> Self {
        match kind {
            AugmentKind::Harsh => Self::harsh(),
            AugmentKind::Simple => Self::simple(),
        }
    }

    /// Same ranges with every transform switched off.
    pub fn disabled(kind: AugmentKind) -> Self {
        AugmentPolicy {
            p_crop: 0.0,
            p_jitter: 0.0,
            p_blur: 0.0,
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_rotate: 0.0,
            p_shear: 0.0,
            p_translate: 0.0,
            ..Self::for_kind(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.p_crop,
            self.p_jitter,
            self.p_blur,
            self.p_hflip,
            self.p_vflip,
            self.p_rotate,
            self.p_shear,
            self.p_translate,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("augmentation probabilities must lie in [0, 1]"));
        }
        let ordered = |r: [f64; 2], lo: f64| r[0] <= r[1] && r[0] >= lo && r.iter().all(|v| v.is_finite());
        if !ordered(self.crop_scale, f64::MIN_POSITIVE) || self.crop_scale[1] > 1.0 {
            return Err(Error::config("crop_scale must be an ordered range within (0, 1]"));
        }
        if !ordered(self.crop_ratio, f64::MIN_POSITIVE) {
            return Err(Error::config("crop_ratio must be an ordered positive range"));
        }
        if !ordered(self.contrast, f64::MIN_POSITIVE) {
            return Err(Error::config("contrast must be an ordered positive range"));
        }
        if !ordered(self.blur_sigma, 0.0) {
            return Err(Error::config("blur_sigma must be an ordered non-negative range"));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("rotation_deg", self.rotation_deg),
            ("shear_deg", self.shear_deg),
            ("translate", self.translate),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.shear_deg >= 89.0 || self.translate > 1.0 {
            return Err(Error::config("shear_deg must be below 89 and translate at most 1"));
        }
        Ok(())
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::harsh()
    }
}

/// Bernoulli draw that always consumes exactly one value.
fn coin(rng: &mut Stream, p: f64) -> bool {
    let u: f64 = rng.random();
    u < p
}

fn uniform(rng: &mut Stream, r: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    r[0] + (r[1] - r[0]) * u
}

fn symmetric(rng: &mut Stream, half: f64) -> f64 {
    let u: f64 = rng.random();
    half * (2.0 * u - 1.0)
}

/// Bilinear sample at continuous pixel-centre coordinates, clamping to the
/// nearest edge pixel outside the grid.
pub fn sample_bilinear(img: &ImageGrid, y: f64, x: f64) -> f64 {
    let (h, w) = (img.height, img.width);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
    let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples the region `[y0, y0+ch) x [x0, x0+cw)` to `h x w`.
fn resample_region(img: &ImageGrid, y0: f64, x0: f64, ch: f64, cw: f64, h: usize, w: usize) -> ImageGrid {
    let (sy, sx) = (ch / h as f64, cw / w as f64);
    let mut pixels = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = y0 + (i as f64 + 0.5) * sy - 0.5;
        for j in 0..w {
            let x = x0 + (j as f64 + 0.5) * sx - 0.5;
            pixels.push(sample_bilinear(img, y, x).clamp(0.0, 1.0));
        }
    }
    ImageGrid {
        height: h,
        width: w,
        pixels,
        modality: img.modality,
    }
}

/// Bilinear resize with half-pixel alignment and edge clamping.
pub fn resize_bilinear(img: &ImageGrid, height: usize, width: usize) -> Result<ImageGrid> {
    if height == 0 || width == 0 || img.height == 0 || img.width == 0 {
        return Err(Error::config("cannot resize to or from an empty image"));
    }
    if (height, width) == (img.height, img.width) {
        return Ok(img.clone());
    }
    Ok(resample_region(img, 0.0, 0.0, img.height as f64, img.width as f64, height, width))
}

pub fn hflip(img: &ImageGrid) -> ImageGrid {
    let mut out = img.clone();
    for row in out.pixels.chunks_mut(img.width) {
        row.reverse();
    }
    out
}

pub fn vflip(img: &ImageGrid) -> ImageGrid {
    let mut out = img.clone();
    for (dst, src) in out.pixels.chunks_mut(img.width).zip(img.pixels.chunks(img.width).rev()) {
        dst.copy_from_slice(src);
    }
    out
}

fn jitter(img: &ImageGrid, brightness: f64, contrast: f64) -> ImageGrid {
    if brightness == 0.0 && contrast == 1.0 {
        return img.clone();
    }
    let mean = img.mean();
    let mut out = img.clone();
    for p in &mut out.pixels {
        *p = ((*p - mean) * contrast + mean + brightness).clamp(0.0, 1.0);
    }
    out
}

pub fn gaussian_blur(img: &ImageGrid, sigma: f64) -> ImageGrid {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let (h, w) = (img.height as isize, img.width as isize);
    let at = |buf: &[f64], r: isize, c: isize| buf[(r.clamp(0, h - 1) * w + c.clamp(0, w - 1)) as usize];
    let mut tmp = vec![0.0; img.pixels.len()];
    for r in 0..h {
        for c in 0..w {
            tmp[(r * w + c) as usize] = (-radius..=radius)
                .map(|d| kernel[(d + radius) as usize] * at(&img.pixels, r, c + d))
                .sum();
        }
    }
    let mut out = img.clone();
    for r in 0..h {
        for c in 0..w {
            out.pixels[(r * w + c) as usize] =
                (-radius..=radius).map(|d| kernel[(d + radius) as usize] * at(&tmp, r + d, c)).sum::<f64>().clamp(0.0, 1.0);
        }
    }
    out
}

fn random_resized_crop(img: &ImageGrid, policy: &AugmentPolicy, rng: &mut Stream) -> Option<ImageGrid> {
    let fire = coin(rng, policy.p_crop);
    let scale = uniform(rng, policy.crop_scale);
    let log_ratio = uniform(rng, [policy.crop_ratio[0].ln(), policy.crop_ratio[1].ln()]);
    let (uy, ux): (f64, f64) = (rng.random(), rng.random());
    if !fire {
        return None;
    }
    let (h, w) = (img.height as f64, img.width as f64);
    let area = scale * h * w;
    let ratio = log_ratio.exp();
    let cw = (area * ratio).sqrt().min(w);
    let ch = (area / ratio).sqrt().min(h);
    if cw == w && ch == h {
        return None;
    }
    let y0 = uy * (h - ch);
    let x0 = ux * (w - cw);
    Some(resample_region(img, y0, x0, ch, cw, img.height, img.width))
}

fn harsh(img: &ImageGrid, p: &AugmentPolicy, rng: &mut Stream) -> ImageGrid {
    let mut out = random_resized_crop(img, p, rng).unwrap_or_else(|| img.clone());

    let fire = coin(rng, p.p_jitter);
    let b = symmetric(rng, p.brightness);
    let c = uniform(rng, p.contrast);
    if fire {
        out = jitter(&out, b, c);
    }

    let fire = coin(rng, p.p_blur);
    let sigma = uniform(rng, p.blur_sigma);
    if fire {
        out = gaussian_blur(&out, sigma);
    }

    if coin(rng, p.p_hflip) {
        out = hflip(&out);
    }
    if coin(rng, p.p_vflip) {
        out = vflip(&out);
    }
    out
}

fn simple(img: &ImageGrid, p: &AugmentPolicy, rng: &mut Stream) -> ImageGrid {
    let flip = coin(rng, p.p_hflip);
    let rotate = coin(rng, p.p_rotate);
    let angle = symmetric(rng, p.rotation_deg).to_radians();
    let shear = coin(rng, p.p_shear);
    let shear_angle = symmetric(rng, p.shear_deg).to_radians();
    let translate = coin(rng, p.p_translate);
    let ty = symmetric(rng, p.translate) * img.height as f64;
    let tx = symmetric(rng, p.translate) * img.width as f64;

    let mut out = if flip { hflip(img) } else { img.clone() };
    if !(rotate || shear || translate) {
        return out;
    }
    let (angle, shear_angle) = (if rotate { angle } else { 0.0 }, if shear { shear_angle } else { 0.0 });
    let (ty, tx) = if translate { (ty, tx) } else { (0.0, 0.0) };
    // Forward map about the centre: p' = R * S * p + t, with S an x-shear.
    // Each output pixel is pulled back through the inverse.
    let (sin, cos) = angle.sin_cos();
    let k = shear_angle.tan();
    let src = out.clone();
    let (cy, cx) = ((img.height as f64 - 1.0) / 2.0, (img.width as f64 - 1.0) / 2.0);
    for i in 0..img.height {
        for j in 0..img.width {
            let (dy, dx) = (i as f64 - cy - ty, j as f64 - cx - tx);
            // inverse rotation
            let (ry, rx) = (-sin * dx + cos * dy, cos * dx + sin * dy);
            // inverse shear
            let (sy, sx) = (ry, rx - k * ry);
            out.pixels[i * img.width + j] = sample_bilinear(&src, sy + cy, sx + cx).clamp(0.0, 1.0);
        }
    }
    out
}

/// Applies `policy` to `image` using draws from `rng`.
pub fn apply(policy: &AugmentPolicy, image: &ImageGrid, rng: &mut Stream) -> ImageGrid {
    match policy.kind {
        AugmentKind::Harsh => harsh(image, policy, rng),
        AugmentKind::Simple => simple(image, policy, rng),
    }
}

/// Two independent draws of `policy`, each from its own sub-stream.
pub fn make_views(policy: &AugmentPolicy, image: &ImageGrid, rng: &mut Stream) -> (ImageGrid, ImageGrid) {
    let (sa, sb) = (rng.next_u64(), rng.next_u64());
    let a = apply(policy, image, &mut rng::from_seed(sa));
    let b = apply(policy, image, &mut rng::from_seed(sb));
    (a, b)
}
