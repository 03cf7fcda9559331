//! Synthetic stained sperm crops with exact ground-truth masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{BinaryMask, ImageCrop};

pub const CLASS_NAMES: [&str; 5] = ["normal", "tapered", "pyriform", "amorphous", "small"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Semi-axis along the head direction.
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Width grows by `1 + taper * u / semi_major` toward the front, so the front is the thick end.
    pub taper: f64,
    /// Fraction of the head length covered by the lighter acrosome cap at the front.
    /// The cap is a shell: the nucleus core (the head shrunk by `core_scale`) stays dark.
    pub acrosome_fraction: f64,
    pub core_scale: f64,
    pub intensity: f64,
    pub acrosome_intensity: f64,
    /// Relative radial boundary perturbation (0 = smooth outline).
    pub wobble: f64,
    pub wobble_lobes: u32,
    pub wobble_phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MidpieceSpec {
    pub length: f64,
    pub width: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailSpec {
    pub length: f64,
    pub amplitude: f64,
    pub period: f64,
    pub width: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub base: f64,
    pub texture: f64,
}

/// Everything needed to render one crop deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_id: usize,
    pub size: usize,
    pub channels: usize,
    pub head: HeadSpec,
    pub midpiece: Option<MidpieceSpec>,
    pub tail: Option<TailSpec>,
    /// Direction the head front points, degrees counter-clockwise.
    pub pose: f64,
    /// Head centre offset from the frame centre, pixels.
    pub offset: (f64, f64),
    /// Optical blur (Gaussian sigma, pixels) applied before noise.
    pub blur: f64,
    pub noise: f64,
    pub background: BackgroundSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    /// Nucleus and acrosome.
    pub head: BinaryMask,
    pub nucleus: BinaryMask,
    pub acrosome: BinaryMask,
    pub midpiece: BinaryMask,
    pub tail: BinaryMask,
    pub class_id: usize,
    pub pose: f64,
}

/// Crop geometry presets: side length and channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FramePreset {
    /// 35x35 gray.
    Scian35,
    /// 131x131 RGB.
    Hushem131,
    /// 64x64 gray.
    Desk64,
}

impl FramePreset {
    pub fn size(self) -> usize {
        match self {
            FramePreset::Scian35 => 35,
            FramePreset::Hushem131 => 131,
            FramePreset::Desk64 => 64,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            FramePreset::Hushem131 => 3,
            _ => 1,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "scian35" => Some(FramePreset::Scian35),
            "hushem131" => Some(FramePreset::Hushem131),
            "desk64" => Some(FramePreset::Desk64),
            _ => None,
        }
    }
}

/// Randomised rendering parameters for a morphology class. Head dimensions are drawn for a
/// 64 px frame and scaled to the preset.
pub fn random_spec(class_id: usize, frame: FramePreset, noise: f64, seed: u64) -> SyntheticSpec {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let s = frame.size() as f64 / 64.0;
    let mut j = |lo: f64, hi: f64| r.random_range(lo..=hi);
    let (mut a, ratio, taper, wobble) = match class_id % 5 {
        0 => (j(11.0, 12.5), j(1.5, 1.7), j(0.25, 0.35), 0.0),
        1 => (j(13.0, 14.5), j(2.3, 2.6), j(0.20, 0.30), 0.0),
        2 => (j(11.5, 13.0), j(1.6, 1.8), j(0.55, 0.70), 0.0),
        3 => (j(11.0, 12.5), j(1.6, 1.8), j(0.20, 0.30), j(0.08, 0.12)),
        _ => (j(11.0, 12.5) * 0.6, j(1.5, 1.7), j(0.25, 0.35), 0.0),
    };
    a *= s;
    let head = HeadSpec {
        semi_major: a,
        semi_minor: a / ratio,
        taper,
        acrosome_fraction: j(0.25, 0.35),
        core_scale: 0.8,
        intensity: j(0.2, 0.3),
        acrosome_intensity: j(0.5, 0.58),
        wobble,
        wobble_lobes: 3 + (j(0.0, 2.999) as u32),
        wobble_phase: j(0.0, std::f64::consts::TAU),
    };
    let width = (1.4 * s).max(1.0);
    let midpiece = MidpieceSpec {
        length: a * j(0.5, 0.7),
        width,
        intensity: j(0.28, 0.34),
    };
    let tail = TailSpec {
        length: 40.0 * s,
        amplitude: j(1.0, 2.5) * s,
        period: j(14.0, 20.0) * s,
        width: width * 0.75,
        intensity: j(0.5, 0.6),
    };
    let pose = j(-180.0, 180.0);
    let offset = (j(-2.0, 2.0) * s, j(-2.0, 2.0) * s);
    SyntheticSpec {
        class_id,
        size: frame.size(),
        channels: frame.channels(),
        head,
        midpiece: Some(midpiece),
        tail: Some(tail),
        pose,
        offset,
        blur: 0.6 * s.max(1.0),
        noise,
        background: BackgroundSpec {
            base: j(0.82, 0.9),
            texture: 0.03,
        },
        seed,
    }
}

/// Head-frame coordinates `(u, v)` of pixel `(x, y)`: `u` toward the front.
fn to_head_frame(spec: &SyntheticSpec, x: f64, y: f64) -> (f64, f64) {
    let c = (spec.size as f64 - 1.0) / 2.0;
    let (dx, dy) = (x - c - spec.offset.0, y - c - spec.offset.1);
    let (s, co) = spec.pose.to_radians().sin_cos();
    (co * dx - s * dy, s * dx + co * dy)
}

fn in_head(h: &HeadSpec, u: f64, v: f64) -> bool {
    let a = h.semi_major;
    let b = h.semi_minor * (1.0 + h.taper * (u / a).clamp(-1.0, 1.0));
    if b <= 0.0 {
        return false;
    }
    let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
    let limit = 1.0 + h.wobble * (h.wobble_lobes as f64 * v.atan2(u) + h.wobble_phase).sin();
    rho <= limit
}

/// Separable Gaussian blur with clamped borders.
fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = k.iter().sum();
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * src[y * w + at(x as isize + d, w)])
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[at(y as isize + d, h) * w + x])
                .sum::<f64>()
                / norm;
        }
    }
    out
}

/// Renders the crop and its exact masks. Errors if any head pixel would fall outside the frame.
pub fn generate_crop(spec: &SyntheticSpec) -> Result<(ImageCrop, SyntheticTruth)> {
    if spec.channels != 1 && spec.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "channels must be 1 or 3, got {}",
            spec.channels
        )));
    }
    if !(spec.noise >= 0.0) || spec.head.intensity >= spec.background.base {
        return Err(Error::InvalidArgument(
            "head must be darker than background and noise >= 0".into(),
        ));
    }
    let n = spec.size;
    // the head must fit: walk its outline in the head frame and check the frame bounds
    let reach = 1.0 + spec.head.wobble;
    for k in 0..720 {
        let t = k as f64 / 720.0 * std::f64::consts::TAU;
        let u = spec.head.semi_major * reach * t.cos();
        let v = spec.head.semi_minor * (1.0 + spec.head.taper.abs()) * reach * t.sin();
        let c = (n as f64 - 1.0) / 2.0;
        let (s, co) = spec.pose.to_radians().sin_cos();
        // inverse of to_head_frame
        let x = co * u + s * v + c + spec.offset.0;
        let y = -s * u + co * v + c + spec.offset.1;
        if x < 0.0 || y < 0.0 || x > n as f64 - 1.0 || y > n as f64 - 1.0 {
            return Err(Error::InvalidArgument(format!(
                "head exceeds the {n}x{n} frame"
            )));
        }
    }

    let h = &spec.head;
    let front_cut = h.semi_major * (1.0 - 2.0 * h.acrosome_fraction);
    let mut nucleus = BinaryMask::empty(n, n);
    let mut acrosome = BinaryMask::empty(n, n);
    let mut midpiece = BinaryMask::empty(n, n);
    let mut tail = BinaryMask::empty(n, n);
    for y in 0..n {
        for x in 0..n {
            let (u, v) = to_head_frame(spec, x as f64, y as f64);
            if in_head(h, u, v) {
                if u > front_cut && !in_head(h, u / h.core_scale, v / h.core_scale) {
                    acrosome.set(x, y, true);
                } else {
                    nucleus.set(x, y, true);
                }
                continue;
            }
            let rear = -h.semi_major;
            if let Some(m) = &spec.midpiece {
                if u <= rear + 1.0 && u >= rear - m.length && v.abs() <= m.width / 2.0 {
                    midpiece.set(x, y, true);
                    continue;
                }
            }
            if let (Some(t), Some(m)) = (&spec.tail, &spec.midpiece) {
                let start = rear - m.length;
                let s = start - u;
                if s > 0.0 && s <= t.length {
                    let centre = t.amplitude * (std::f64::consts::TAU * s / t.period).sin();
                    if (v - centre).abs() <= t.width / 2.0 {
                        tail.set(x, y, true);
                    }
                }
            }
        }
    }

    let mut r = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0fc0_ffee);
    let (fx, fy) = (r.random_range(0.05..0.2), r.random_range(0.05..0.2));
    let (p1, p2) = (
        r.random_range(0.0..std::f64::consts::TAU),
        r.random_range(0.0..std::f64::consts::TAU),
    );
    let tint: [f64; 3] = [0.95, 0.8, 1.0];
    let mut planes = vec![vec![0.0f64; n * n]; spec.channels];
    for y in 0..n {
        for x in 0..n {
            let stained = if nucleus.get(x, y) {
                Some(h.intensity)
            } else if acrosome.get(x, y) {
                Some(h.acrosome_intensity)
            } else if midpiece.get(x, y) {
                spec.midpiece.map(|m| m.intensity)
            } else if tail.get(x, y) {
                spec.tail.map(|t| t.intensity)
            } else {
                None
            };
            let bg = spec.background.base
                + spec.background.texture
                    * ((fx * x as f64 + p1).sin() * (fy * y as f64 + p2).cos());
            for (c, plane) in planes.iter_mut().enumerate() {
                plane[y * n + x] = match stained {
                    Some(v) if spec.channels == 3 => v * tint[c],
                    Some(v) => v,
                    None => bg,
                };
            }
        }
    }
    if spec.blur > 0.0 {
        for plane in &mut planes {
            *plane = gaussian_blur(plane, n, n, spec.blur);
        }
    }
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite sigma");
    let mut data = Vec::with_capacity(n * n * spec.channels);
    for i in 0..n * n {
        for plane in &planes {
            let e = if spec.noise > 0.0 {
                noise.sample(&mut r)
            } else {
                0.0
            };
            data.push((plane[i] + e).clamp(0.0, 1.0) as f32);
        }
    }
    let img = ImageCrop::new(n, n, spec.channels, data)?;
    let head = nucleus.union(&acrosome)?;
    Ok((
        img,
        SyntheticTruth {
            head,
            nucleus,
            acrosome,
            midpiece,
            tail,
            class_id: spec.class_id,
            pose: spec.pose,
        },
    ))
}
