//! Procedural retinal-like images with an optional planted lesion.
//!
//! OCT slices are drawn as a few curved horizontal reflectivity bands over a
//! speckled background; infrared images as a vignetted fundus with a bright
//! disc and faint vessel texture. A positive image additionally carries a
//! Gaussian blob whose peak amplitude equals the signal strength. All random
//! draws happen in the same order for both classes, so with zero signal the
//! two classes are bit-identical under a shared stream.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::records::{ImageGrid, Modality};
use crate::rng::{self, Stream};

pub const MIN_SIDE: usize = 8;

pub fn render_image(
    positive: bool,
    modality: Modality,
    signal_strength: f64,
    height: usize,
    width: usize,
    rng: &mut Stream,
) -> Result<ImageGrid> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::config(format!(
            "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
        )));
    }
    if !(signal_strength.is_finite() && signal_strength >= 0.0) {
        return Err(Error::config(format!("signal strength must be >= 0, got {signal_strength}")));
    }
    let (h, w) = (height as f64, width as f64);
    let mut px = match modality {
        Modality::Oct => oct_background(height, width, rng),
        Modality::Infrared => infrared_background(height, width, rng),
    };

    let cy = rng.random_range(0.3..0.7) * h;
    let cx = rng.random_range(0.3..0.7) * w;
    let sigma = 0.15 * h.min(w) * rng.random_range(0.8..1.2);
    if positive && signal_strength > 0.0 {
        let inv = 1.0 / (2.0 * sigma * sigma);
        for r in 0..height {
            for c in 0..width {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                px[r * width + c] += signal_strength * (-d2 * inv).exp();
            }
        }
    }

    let noise_sd = match modality {
        Modality::Oct => 0.04,
        Modality::Infrared => 0.03,
    };
    for p in px.iter_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *p = (*p + noise_sd * n).clamp(0.0, 1.0);
    }

    Ok(ImageGrid {
        height,
        width,
        pixels: px,
        modality,
    })
}

fn oct_background(height: usize, width: usize, rng: &mut Stream) -> Vec<f64> {
    let (h, w) = (height as f64, width as f64);
    let base = rng.random_range(0.30..0.40);
    let tilt = rng.random_range(-0.1..0.1);
    let curvature = rng.random_range(-0.1..0.1);
    let layers: Vec<(f64, f64, f64)> = (0..3)
        .map(|k| {
            let centre = h * (0.35 + 0.12 * k as f64 + rng.random_range(-0.04..0.04));
            let thickness = h * rng.random_range(0.025..0.045);
            let amplitude = rng.random_range(0.12..0.22);
            (centre, thickness, amplitude)
        })
        .collect();
    let mut px = vec![base; height * width];
    for c in 0..width {
        let x = c as f64 - w / 2.0;
        let offset = tilt * x + curvature * (x / w).powi(2) * h;
        for r in 0..height {
            let mut v = 0.0;
            for &(centre, thickness, amplitude) in &layers {
                let d = r as f64 - centre - offset;
                v += amplitude * (-(d * d) / (2.0 * thickness * thickness)).exp();
            }
            px[r * width + c] += v;
        }
    }
    px
}

fn infrared_background(height: usize, width: usize, rng: &mut Stream) -> Vec<f64> {
    let (h, w) = (height as f64, width as f64);
    let base = rng.random_range(0.30..0.40);
    let disc_col = if rng.random_bool(0.5) { 0.2 } else { 0.8 } * w;
    let disc_row = rng.random_range(0.4..0.6) * h;
    let disc_sigma = 0.08 * h.min(w);
    let vessels: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(1.0..3.0) * std::f64::consts::TAU / w.max(h);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (angle, freq, phase)
        })
        .collect();
    let mut px = vec![base; height * width];
    for r in 0..height {
        for c in 0..width {
            let (y, x) = (r as f64, c as f64);
            let ry = (y - h / 2.0) / (h / 2.0);
            let rx = (x - w / 2.0) / (w / 2.0);
            let mut v = -0.12 * (rx * rx + ry * ry);
            let d2 = (y - disc_row).powi(2) + (x - disc_col).powi(2);
            v += 0.2 * (-d2 / (2.0 * disc_sigma * disc_sigma)).exp();
            for &(angle, freq, phase) in &vessels {
                let t = x * angle.cos() + y * angle.sin();
                v += 0.05 * (freq * t + phase).sin();
            }
            px[r * width + c] += v;
        }
    }
    px
}

/// Recipe for a single synthetic image; rendering is a pure function of it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub positive: bool,
    pub modality: Modality,
    pub signal_strength: f64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl SyntheticImage {
    pub fn render(&self) -> ImageGrid {
        render_image(
            self.positive,
            self.modality,
            self.signal_strength,
            self.height,
            self.width,
            &mut rng::from_seed(self.seed),
        )
        .expect("synthetic image recipe validated at construction")
    }
}

/// Recipe for an OCT volume. The lesion is strongest on the mid-slice and
/// fades with a Gaussian profile across the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVolume {
    pub positive: bool,
    pub signal_strength: f64,
    pub height: usize,
    pub width: usize,
    pub n_slices: usize,
    pub seed: u64,
}

impl SyntheticVolume {
    pub fn slice_amplitude(&self, index: usize) -> f64 {
        let mid = (self.n_slices / 2) as f64;
        let spread = (self.n_slices as f64 / 4.0).max(1.0);
        let z = (index as f64 - mid) / spread;
        self.signal_strength * (-0.5 * z * z).exp()
    }

    pub fn slice(&self, index: usize) -> SyntheticImage {
        assert!(index < self.n_slices, "slice {index} out of range");
        SyntheticImage {
            positive: self.positive,
            modality: Modality::Oct,
            signal_strength: self.slice_amplitude(index),
            height: self.height,
            width: self.width,
            seed: rng::derive_seed(self.seed, "slice", index as u64),
        }
    }
}
