//! Patch-wise non-local means.

use super::raster::ImageCrop;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlmParams {
    /// Odd patch side.
    pub patch: usize,
    /// Odd search-window side.
    pub search: usize,
    /// Filtering strength `h` on the [0,1] intensity scale.
    pub strength: f64,
}

impl Default for NlmParams {
    fn default() -> Self {
        Self {
            patch: 5,
            search: 11,
            strength: 0.08,
        }
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Non-local means: each pixel becomes the weighted mean of pixels in its search
/// window, weighted by `exp(-d / h^2)` where `d` is the mean squared difference
/// between the two surrounding patches (all channels). Borders reflect.
///
/// Patch distances are accumulated per search offset with an integral image,
/// so cost is `O(H * W * search^2)` independent of patch size.
pub fn nlm_denoise(img: &ImageCrop, params: &NlmParams) -> Result<ImageCrop> {
    let NlmParams {
        patch,
        search,
        strength,
    } = *params;
    if patch % 2 == 0 || search % 2 == 0 || patch == 0 || search == 0 {
        return Err(Error::InvalidArgument(format!(
            "patch ({patch}) and search ({search}) must be odd"
        )));
    }
    if !(strength > 0.0) || !strength.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "strength must be > 0, got {strength}"
        )));
    }
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let pr = (patch / 2) as isize;
    let sr = (search / 2) as isize;
    let data: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let px = |x: isize, y: isize, c: usize| data[(reflect(y, h) * w + reflect(x, w)) * ch + c];

    // padded grid covers every patch centre +- pr
    let (ph, pw) = (h + 2 * pr as usize, w + 2 * pr as usize);
    let norm = 1.0 / ((patch * patch * ch) as f64 * strength * strength);
    let mut acc = vec![0.0f64; h * w * ch];
    let mut wsum = vec![0.0f64; h * w];
    let mut diff = vec![0.0f64; ph * pw];
    let mut integral = vec![0.0f64; (ph + 1) * (pw + 1)];

    for oy in -sr..=sr {
        for ox in -sr..=sr {
            for py in 0..ph {
                let y = py as isize - pr;
                for pxi in 0..pw {
                    let x = pxi as isize - pr;
                    let mut d = 0.0;
                    for c in 0..ch {
                        let e = px(x, y, c) - px(x + ox, y + oy, c);
                        d += e * e;
                    }
                    diff[py * pw + pxi] = d;
                }
            }
            for py in 0..ph {
                let mut row = 0.0;
                for pxi in 0..pw {
                    row += diff[py * pw + pxi];
                    integral[(py + 1) * (pw + 1) + pxi + 1] =
                        integral[py * (pw + 1) + pxi + 1] + row;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    // patch centred on (x, y) spans padded rows y..y+patch
                    let (y0, x0, y1, x1) = (y, x, y + patch, x + patch);
                    let s = integral[y1 * (pw + 1) + x1]
                        - integral[y0 * (pw + 1) + x1]
                        - integral[y1 * (pw + 1) + x0]
                        + integral[y0 * (pw + 1) + x0];
                    let wgt = (-s.max(0.0) * norm).exp();
                    if wgt == 0.0 {
                        continue;
                    }
                    wsum[y * w + x] += wgt;
                    for c in 0..ch {
                        acc[(y * w + x) * ch + c] += wgt * px(x as isize + ox, y as isize + oy, c);
                    }
                }
            }
        }
    }
    let out = acc
        .iter()
        .enumerate()
        .map(|(i, a)| (a / wsum[i / ch]) as f32)
        .collect();
    ImageCrop::from_clamped(h, w, ch, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn variance(v: &[f32]) -> f64 {
        let m = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / v.len() as f64
    }

    #[test]
    fn constant_image_is_unchanged() {
        let img = ImageCrop::filled(12, 9, 1, 0.37);
        let out = nlm_denoise(&img, &NlmParams::default()).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn reduces_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Normal::new(0.0, 0.1).unwrap();
        let data = (0..32 * 32)
            .map(|_| (0.5 + n.sample(&mut rng) as f32).clamp(0.0, 1.0))
            .collect();
        let img = ImageCrop::new(32, 32, 1, data).unwrap();
        let out = nlm_denoise(&img, &NlmParams::default()).unwrap();
        assert!(variance(out.data()) < variance(img.data()));
    }

    #[test]
    fn vanishing_strength_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = (0..20 * 20).map(|_| rng.random::<f32>()).collect();
        let img = ImageCrop::new(20, 20, 1, data).unwrap();
        let p = NlmParams {
            strength: 1e-4,
            ..NlmParams::default()
        };
        let out = nlm_denoise(&img, &p).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.01);
        }
    }

    #[test]
    fn rgb_and_invalid_params() {
        let img = ImageCrop::filled(8, 8, 3, 0.2);
        assert_eq!(
            nlm_denoise(&img, &NlmParams::default()).unwrap().channels(),
            3
        );
        let bad = NlmParams {
            patch: 4,
            ..NlmParams::default()
        };
        assert!(nlm_denoise(&img, &bad).is_err());
        let bad = NlmParams {
            strength: 0.0,
            ..NlmParams::default()
        };
        assert!(nlm_denoise(&img, &bad).is_err());
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-7, 5), 1);
        assert_eq!(reflect(3, 1), 0);
    }
}
