//! Stochastic augmentations with invertible geometric records.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{Affine, Interp, Resampler, IMAGE_FILL};
use super::raster::{BinaryMask, ImageCrop};
use crate::error::{Error, Result};

/// Sampled photometric change. Factors are stored as deltas from identity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Photometric {
    pub brightness: f64,
    pub contrast: f64,
    /// Hue rotation in turns.
    pub hue: f64,
    pub saturation: f64,
    pub grayscale: bool,
}

impl Photometric {
    pub fn is_identity(&self) -> bool {
        *self == Photometric::default()
    }
}

/// One applied augmentation. The geometric part maps an input pixel `p` to
/// `shift + R(rotation) * Z(scale, aspect) * F(vflip) * p` around the frame centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    /// Degrees, counter-clockwise.
    pub rotation: f64,
    pub vflip: bool,
    /// Translation as a fraction of (width, height).
    pub shift: (f64, f64),
    /// Kept-area fraction; the view is magnified by `1/sqrt(scale)`.
    pub scale: f64,
    /// Width/height ratio of the kept region.
    pub aspect: f64,
    pub photometric: Photometric,
    pub rng_seed: u64,
}

impl AugmentationRecord {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            vflip: false,
            shift: (0.0, 0.0),
            scale: 1.0,
            aspect: 1.0,
            photometric: Photometric::default(),
            rng_seed: 0,
        }
    }

    pub fn is_geometric_identity(&self) -> bool {
        self.rotation == 0.0
            && !self.vflip
            && self.shift == (0.0, 0.0)
            && self.scale == 1.0
            && self.aspect == 1.0
    }

    /// Forward map from input to output pixel coordinates for an `h x w` frame.
    pub fn forward_affine(&self, h: usize, w: usize) -> Result<Affine> {
        let finite = [
            self.rotation,
            self.shift.0,
            self.shift.1,
            self.scale,
            self.aspect,
        ];
        if finite.iter().any(|v| !v.is_finite()) || self.scale <= 0.0 || self.aspect <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "non-invertible augmentation record: {self:?}"
            )));
        }
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let mx = 1.0 / (self.scale * self.aspect).sqrt();
        let my = 1.0 / (self.scale / self.aspect).sqrt();
        let mut a = if self.vflip {
            Affine::vflip(h)
        } else {
            Affine::identity()
        };
        if mx != 1.0 || my != 1.0 {
            a = Affine::scaling_about(mx, my, cx, cy).then_after(&a);
        }
        if self.rotation != 0.0 {
            a = Affine::rotation_about(self.rotation, cx, cy).then_after(&a);
        }
        if self.shift != (0.0, 0.0) {
            a = Affine::translation(self.shift.0 * w as f64, self.shift.1 * h as f64)
                .then_after(&a);
        }
        Ok(a)
    }

    /// Resampler producing the augmented view from an input frame.
    pub fn forward_resampler(&self, h: usize, w: usize, interp: Interp) -> Result<Resampler> {
        let inv = self
            .forward_affine(h, w)?
            .inverse()
            .ok_or_else(|| Error::InvalidArgument("singular augmentation".into()))?;
        Ok(Resampler::new(h, w, h, w, &inv, interp))
    }

    /// Resampler pulling an augmented-frame map back into the input frame.
    pub fn inverse_resampler(&self, h: usize, w: usize) -> Result<Resampler> {
        Ok(Resampler::new(
            h,
            w,
            h,
            w,
            &self.forward_affine(h, w)?,
            Interp::Bilinear,
        ))
    }
}

/// Sampling ranges for [`apply_augmentation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Rotation drawn uniformly from `[-max_rotation, max_rotation]` degrees.
    pub max_rotation: f64,
    pub vflip_prob: f64,
    /// Shift per axis drawn from `[-max_shift, max_shift]` (fraction of the side).
    pub max_shift: f64,
    pub scale_range: (f64, f64),
    pub aspect_range: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub hue: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            max_rotation: 0.0,
            vflip_prob: 0.0,
            max_shift: 0.0,
            scale_range: (1.0, 1.0),
            aspect_range: (1.0, 1.0),
            brightness: 0.0,
            contrast: 0.0,
            hue: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
        }
    }

    /// Strong views for distillation pretraining.
    pub fn aid() -> Self {
        Self {
            max_rotation: 10.0,
            vflip_prob: 0.5,
            max_shift: 0.10,
            scale_range: (0.6, 1.0),
            aspect_range: (0.6, 1.5),
            brightness: 0.5,
            contrast: 0.2,
            hue: 0.1,
            saturation: 0.3,
            grayscale_prob: 0.2,
        }
    }

    /// Mild tuning views for small gray crops.
    pub fn scian_mild() -> Self {
        Self {
            max_rotation: 10.0,
            vflip_prob: 0.5,
            max_shift: 0.06,
            ..Self::identity()
        }
    }

    /// Mild tuning views for large RGB crops.
    pub fn hushem_mild() -> Self {
        Self {
            vflip_prob: 0.5,
            max_shift: 0.10,
            brightness: 0.5,
            contrast: 0.2,
            hue: 0.5,
            saturation: 0.3,
            grayscale_prob: 0.2,
            ..Self::identity()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(Self::identity()),
            "aid" => Some(Self::aid()),
            "scian-mild" => Some(Self::scian_mild()),
            "hushem-mild" => Some(Self::hushem_mild()),
            _ => None,
        }
    }

    /// Draws a record from a dedicated stream seeded with `seed`.
    pub fn sample(&self, seed: u64) -> AugmentationRecord {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut sym = |m: f64| if m > 0.0 { r.random_range(-m..=m) } else { 0.0 };
        let rotation = sym(self.max_rotation);
        let shift = (sym(self.max_shift), sym(self.max_shift));
        let brightness = sym(self.brightness);
        let contrast = sym(self.contrast);
        let hue = sym(self.hue);
        let saturation = sym(self.saturation);
        let mut range = |(lo, hi): (f64, f64)| if hi > lo { r.random_range(lo..=hi) } else { lo };
        let scale = range(self.scale_range);
        // aspect is sampled log-uniformly so that ratios r and 1/r are equally likely
        let (alo, ahi) = self.aspect_range;
        let aspect = range((alo.ln(), ahi.ln())).exp();
        let vflip = self.vflip_prob > 0.0 && r.random_bool(self.vflip_prob.min(1.0));
        let grayscale = self.grayscale_prob > 0.0 && r.random_bool(self.grayscale_prob.min(1.0));
        AugmentationRecord {
            rotation,
            vflip,
            shift,
            scale,
            aspect,
            photometric: Photometric {
                brightness,
                contrast,
                hue,
                saturation,
                grayscale,
            },
            rng_seed: seed,
        }
    }
}

/// Samples a record (its seed drawn from `rng`) and applies it.
pub fn apply_augmentation(
    img: &ImageCrop,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> (ImageCrop, AugmentationRecord) {
    let rec = policy.sample(rng.random());
    let out = apply_record(img, &rec).expect("sampled records are invertible");
    (out, rec)
}

/// Re-applies a recorded augmentation: photometric first, then geometry (bilinear, white fill).
pub fn apply_record(img: &ImageCrop, rec: &AugmentationRecord) -> Result<ImageCrop> {
    let img = apply_photometric(img, &rec.photometric);
    if rec.is_geometric_identity() {
        return Ok(img);
    }
    Ok(rec
        .forward_resampler(img.height(), img.width(), Interp::Bilinear)?
        .apply_image(&img, IMAGE_FILL))
}

/// Warps a mask into the augmented frame (nearest neighbour).
pub fn apply_geometric_mask(mask: &BinaryMask, rec: &AugmentationRecord) -> Result<BinaryMask> {
    if rec.is_geometric_identity() {
        return Ok(mask.clone());
    }
    Ok(rec
        .forward_resampler(mask.height(), mask.width(), Interp::Nearest)?
        .apply_mask(mask))
}

/// Maps a per-pixel map from the augmented frame back to the input frame.
/// Returns the map and the mask of input pixels whose round trip only read
/// in-frame samples (every bilinear tap landed on an augmented pixel that itself
/// came from inside the input frame); invalid pixels hold 0.
pub fn invert_geometric(
    map: &[f64],
    h: usize,
    w: usize,
    rec: &AugmentationRecord,
) -> Result<(Vec<f64>, BinaryMask)> {
    if map.len() != h * w {
        return Err(Error::Shape(format!(
            "map has {} values, frame is {h}x{w}",
            map.len()
        )));
    }
    if rec.is_geometric_identity() {
        return Ok((map.to_vec(), BinaryMask::full(h, w)));
    }
    let rs = rec.inverse_resampler(h, w)?;
    let fwd_valid: Vec<f64> = rec
        .forward_resampler(h, w, Interp::Bilinear)?
        .validity()
        .bits()
        .iter()
        .map(|&b| b as u8 as f64)
        .collect();
    let valid = rs
        .apply(&fwd_valid, 0.0)
        .into_iter()
        .map(|v| v >= 1.0 - 1e-9)
        .collect();
    Ok((rs.apply(map, 0.0), BinaryMask::new(h, w, valid)?))
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness and contrast apply to every channel; hue, saturation and
/// grayscale only to RGB crops.
pub fn apply_photometric(img: &ImageCrop, p: &Photometric) -> ImageCrop {
    if p.is_identity() {
        return img.clone();
    }
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut data: Vec<f64> = img
        .data()
        .iter()
        .map(|&v| v as f64 * (1.0 + p.brightness))
        .collect();
    if p.contrast != 0.0 {
        let mean = img.to_gray().data().iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64
            * (1.0 + p.brightness);
        for v in &mut data {
            *v = (*v - mean) * (1.0 + p.contrast) + mean;
        }
    }
    if ch == 3 {
        for px in data.chunks_mut(3) {
            let (r, g, b) = (
                px[0].clamp(0.0, 1.0),
                px[1].clamp(0.0, 1.0),
                px[2].clamp(0.0, 1.0),
            );
            let (mut hh, mut s, v) = rgb_to_hsv(r, g, b);
            hh += p.hue;
            s = (s * (1.0 + p.saturation)).clamp(0.0, 1.0);
            let (r, g, b) = hsv_to_rgb(hh, s, v);
            if p.grayscale {
                let y = 0.299 * r + 0.587 * g + 0.114 * b;
                px.copy_from_slice(&[y, y, y]);
            } else {
                px.copy_from_slice(&[r, g, b]);
            }
        }
    }
    ImageCrop::from_clamped(h, w, ch, data.into_iter().map(|v| v as f32).collect())
        .expect("same shape")
}
