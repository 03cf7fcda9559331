//! Geometric transforms on rasters.
//!
//! Conventions: pixel centres sit at integer `(x, y)` with `y` pointing down;
//! rotation angles are degrees, positive = counter-clockwise as displayed;
//! rotations and scalings pivot on the frame centre `((w-1)/2, (h-1)/2)`.

use super::raster::{BinaryMask, ImageCrop};

/// Fill value for out-of-frame image samples (whitened background).
pub const IMAGE_FILL: f32 = 1.0;

const FRAME_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Nearest,
    Bilinear,
}

/// Row-major 2x3 affine map `p -> A p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: [[f64; 3]; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
        }
    }

    /// Counter-clockwise (as displayed) rotation about `(cx, cy)`.
    pub fn rotation_about(angle_deg: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = angle_deg.to_radians().sin_cos();
        Self::translation(cx, cy)
            .then_after(&Self {
                m: [[c, s, 0.0], [-s, c, 0.0]],
            })
            .then_after(&Self::translation(-cx, -cy))
    }

    pub fn scaling_about(sx: f64, sy: f64, cx: f64, cy: f64) -> Self {
        Self::translation(cx, cy)
            .then_after(&Self {
                m: [[sx, 0.0, 0.0], [0.0, sy, 0.0]],
            })
            .then_after(&Self::translation(-cx, -cy))
    }

    /// Top-bottom mirror of a frame with `height` rows.
    pub fn vflip(height: usize) -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, -1.0, (height as f64) - 1.0]],
        }
    }

    /// `self ∘ inner`: applies `inner` first.
    pub fn then_after(&self, inner: &Affine) -> Affine {
        let a = &self.m;
        let b = &inner.m;
        let mut m = [[0.0; 3]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            row[0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            row[1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            row[2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Affine { m }
    }

    pub fn inverse(&self) -> Option<Affine> {
        let [[a, b, tx], [c, d, ty]] = self.m;
        let det = a * d - b * c;
        if det.abs() < 1e-12 || !det.is_finite() {
            return None;
        }
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Some(Affine {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.m[0][2],
            self.m[1][0] * x + self.m[1][1] * y + self.m[1][2],
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    idx: [u32; 4],
    w: [f64; 4],
}

/// Precomputed inverse-mapping resampler: each output pixel reads up to four
/// source pixels with fixed weights, or is marked out of frame.
///
/// Because the map is linear in the source values, [`Resampler::adjoint`]
/// gives the exact transpose used for gradients.
#[derive(Debug, Clone)]
pub struct Resampler {
    out_h: usize,
    out_w: usize,
    src_len: usize,
    taps: Vec<Option<Tap>>,
}

impl Resampler {
    /// `out_to_src` maps output pixel coordinates into source coordinates.
    pub fn new(
        src_h: usize,
        src_w: usize,
        out_h: usize,
        out_w: usize,
        out_to_src: &Affine,
        interp: Interp,
    ) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            for x in 0..out_w {
                let (sx, sy) = out_to_src.apply(x as f64, y as f64);
                taps.push(match interp {
                    Interp::Bilinear => bilinear_tap(sx, sy, src_h, src_w),
                    Interp::Nearest => nearest_tap(sx, sy, src_h, src_w),
                });
            }
        }
        Self {
            out_h,
            out_w,
            src_len: src_h * src_w,
            taps,
        }
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    /// Output pixels whose sample position fell inside the source frame.
    pub fn validity(&self) -> BinaryMask {
        BinaryMask::new(
            self.out_h,
            self.out_w,
            self.taps.iter().map(Option::is_some).collect(),
        )
        .expect("resampler dims")
    }

    /// Resamples one plane of `src_h * src_w` values.
    pub fn apply(&self, src: &[f64], fill: f64) -> Vec<f64> {
        assert_eq!(src.len(), self.src_len);
        self.taps
            .iter()
            .map(|t| match t {
                None => fill,
                Some(t) => (0..4).map(|k| t.w[k] * src[t.idx[k] as usize]).sum(),
            })
            .collect()
    }

    /// Transpose of [`Resampler::apply`] restricted to in-frame outputs.
    pub fn adjoint(&self, grad_out: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.src_len];
        for (t, go) in self.taps.iter().zip(grad_out) {
            if let Some(t) = t {
                for k in 0..4 {
                    g[t.idx[k] as usize] += t.w[k] * go;
                }
            }
        }
        g
    }

    pub fn apply_image(&self, img: &ImageCrop, fill: f32) -> ImageCrop {
        let planes: Vec<Vec<f32>> = (0..img.channels())
            .map(|c| {
                let src: Vec<f64> = img.plane(c).iter().map(|&v| v as f64).collect();
                self.apply(&src, fill as f64)
                    .into_iter()
                    .map(|v| v as f32)
                    .collect()
            })
            .collect();
        ImageCrop::from_planes(self.out_h, self.out_w, &planes).expect("resampled planes")
    }

    /// Resamples a mask; bilinear taps are thresholded at 0.5, out-of-frame is background.
    pub fn apply_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let src: Vec<f64> = mask.bits().iter().map(|&b| b as u8 as f64).collect();
        let bits = self
            .apply(&src, 0.0)
            .into_iter()
            .map(|v| v >= 0.5)
            .collect();
        BinaryMask::new(self.out_h, self.out_w, bits).expect("resampler dims")
    }
}

fn bilinear_tap(sx: f64, sy: f64, h: usize, w: usize) -> Option<Tap> {
    if !(sx >= -FRAME_TOL
        && sy >= -FRAME_TOL
        && sx <= w as f64 - 1.0 + FRAME_TOL
        && sy <= h as f64 - 1.0 + FRAME_TOL)
    {
        return None;
    }
    let sx = sx.clamp(0.0, w as f64 - 1.0);
    let sy = sy.clamp(0.0, h as f64 - 1.0);
    let x0 = (sx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (sy.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (sx - x0 as f64).clamp(0.0, 1.0);
    let fy = (sy - y0 as f64).clamp(0.0, 1.0);
    let i = |x: usize, y: usize| (y * w + x) as u32;
    Some(Tap {
        idx: [i(x0, y0), i(x1, y0), i(x0, y1), i(x1, y1)],
        w: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    })
}

fn nearest_tap(sx: f64, sy: f64, h: usize, w: usize) -> Option<Tap> {
    let (rx, ry) = ((sx + FRAME_TOL).round(), (sy + FRAME_TOL).round());
    if rx < 0.0
        || ry < 0.0
        || rx > w as f64 - 1.0
        || ry > h as f64 - 1.0
        || !rx.is_finite()
        || !ry.is_finite()
    {
        return None;
    }
    let idx = (ry as usize * w + rx as usize) as u32;
    Some(Tap {
        idx: [idx; 4],
        w: [1.0, 0.0, 0.0, 0.0],
    })
}

fn centre(h: usize, w: usize) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

/// Inverse map (output -> source) for a counter-clockwise rotation about the frame centre.
fn rotation_resampler(h: usize, w: usize, angle_deg: f64, interp: Interp) -> Resampler {
    let (cx, cy) = centre(h, w);
    let inv = Affine::rotation_about(-angle_deg, cx, cy);
    Resampler::new(h, w, h, w, &inv, interp)
}

/// Rotates about the frame centre; out-of-frame samples become white.
pub fn rotate(img: &ImageCrop, angle_deg: f64, interp: Interp) -> ImageCrop {
    if angle_deg == 0.0 {
        return img.clone();
    }
    rotation_resampler(img.height(), img.width(), angle_deg, interp).apply_image(img, IMAGE_FILL)
}

/// Nearest-neighbour mask rotation; out-of-frame is background.
pub fn rotate_mask(mask: &BinaryMask, angle_deg: f64) -> BinaryMask {
    if angle_deg == 0.0 {
        return mask.clone();
    }
    rotation_resampler(mask.height(), mask.width(), angle_deg, Interp::Nearest).apply_mask(mask)
}

/// Bilinear rotation of a scalar map; out-of-frame samples are 0.
pub fn rotate_map(values: &[f64], h: usize, w: usize, angle_deg: f64) -> Vec<f64> {
    rotation_resampler(h, w, angle_deg, Interp::Bilinear).apply(values, 0.0)
}

/// Source index for output pixel `(x, y)` after `k` quarter turns (counter-clockwise).
/// `h, w` are source dims; returns the output dims alongside.
fn rot90_src(k: usize, x: usize, y: usize, h: usize, w: usize) -> (usize, usize) {
    match k % 4 {
        0 => (x, y),
        1 => (w - 1 - y, x),
        2 => (w - 1 - x, h - 1 - y),
        _ => (y, h - 1 - x),
    }
}

fn rot90_dims(k: usize, h: usize, w: usize) -> (usize, usize) {
    if k % 2 == 1 {
        (w, h)
    } else {
        (h, w)
    }
}

/// Exact rotation by `k * 90` degrees counter-clockwise, generic over sample type.
pub fn rot90_plane<T: Copy>(
    src: &[T],
    h: usize,
    w: usize,
    channels: usize,
    k: usize,
) -> (Vec<T>, usize, usize) {
    let (oh, ow) = rot90_dims(k, h, w);
    let mut out = Vec::with_capacity(src.len());
    for y in 0..oh {
        for x in 0..ow {
            let (sx, sy) = rot90_src(k, x, y, h, w);
            let base = (sy * w + sx) * channels;
            out.extend_from_slice(&src[base..base + channels]);
        }
    }
    (out, oh, ow)
}

/// Top-bottom mirror, generic over sample type.
pub fn vflip_plane<T: Copy>(src: &[T], h: usize, w: usize, channels: usize) -> Vec<T> {
    let row = w * channels;
    let mut out = Vec::with_capacity(src.len());
    for y in (0..h).rev() {
        out.extend_from_slice(&src[y * row..(y + 1) * row]);
    }
    out
}

pub fn rot90(img: &ImageCrop, k: usize) -> ImageCrop {
    let (data, h, w) = rot90_plane(img.data(), img.height(), img.width(), img.channels(), k);
    ImageCrop::new(h, w, img.channels(), data).expect("rot90 preserves range")
}

pub fn rot90_mask(mask: &BinaryMask, k: usize) -> BinaryMask {
    let (bits, h, w) = rot90_plane(mask.bits(), mask.height(), mask.width(), 1, k);
    BinaryMask::new(h, w, bits).expect("rot90 dims")
}

pub fn vflip(img: &ImageCrop) -> ImageCrop {
    let data = vflip_plane(img.data(), img.height(), img.width(), img.channels());
    ImageCrop::new(img.height(), img.width(), img.channels(), data).expect("vflip preserves range")
}

pub fn vflip_mask(mask: &BinaryMask) -> BinaryMask {
    let bits = vflip_plane(mask.bits(), mask.height(), mask.width(), 1);
    BinaryMask::new(mask.height(), mask.width(), bits).expect("vflip dims")
}

/// 1-D resampling weights: bilinear (half-pixel centres) when upsampling,
/// exact box-area averaging when downsampling.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            if scale <= 1.0 {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, src as f64 - 1.0);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                let f = s - i0 as f64;
                if i1 == i0 || f == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - f), (i1, f)]
                }
            } else {
                let (lo, hi) = (o as f64 * scale, (o as f64 + 1.0) * scale);
                let mut taps = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < src {
                    let cover = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if cover > 0.0 {
                        taps.push((i, cover / scale));
                    }
                    i += 1;
                }
                taps
            }
        })
        .collect()
}

fn resize_plane(src: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let wx = axis_weights(w, nw);
    let wy = axis_weights(h, nh);
    let mut tmp = vec![0.0; h * nw];
    for y in 0..h {
        for (x, taps) in wx.iter().enumerate() {
            tmp[y * nw + x] = taps.iter().map(|(i, wt)| wt * src[y * w + i]).sum();
        }
    }
    let mut out = vec![0.0; nh * nw];
    for (y, taps) in wy.iter().enumerate() {
        for x in 0..nw {
            out[y * nw + x] = taps.iter().map(|(i, wt)| wt * tmp[i * nw + x]).sum();
        }
    }
    out
}

pub fn resize(img: &ImageCrop, nh: usize, nw: usize) -> ImageCrop {
    if img.height() == nh && img.width() == nw {
        return img.clone();
    }
    let planes: Vec<Vec<f32>> = (0..img.channels())
        .map(|c| {
            let src: Vec<f64> = img.plane(c).iter().map(|&v| v as f64).collect();
            resize_plane(&src, img.height(), img.width(), nh, nw)
                .into_iter()
                .map(|v| v as f32)
                .collect()
        })
        .collect();
    ImageCrop::from_planes(nh, nw, &planes).expect("resize planes")
}

/// Resizes by resampling the 0/1 indicator and thresholding at 0.5; preserves nesting.
pub fn resize_mask(mask: &BinaryMask, nh: usize, nw: usize) -> BinaryMask {
    if mask.height() == nh && mask.width() == nw {
        return mask.clone();
    }
    let src: Vec<f64> = mask.bits().iter().map(|&b| b as u8 as f64).collect();
    let bits = resize_plane(&src, mask.height(), mask.width(), nh, nw)
        .into_iter()
        .map(|v| v >= 0.5 - 1e-9)
        .collect();
    BinaryMask::new(nh, nw, bits).expect("resize dims")
}
