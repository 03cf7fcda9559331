//! Raster containers: intensity crops and binary masks.

use std::path::Path;

use crate::error::{Error, Result};

/// An `H x W x C` raster, row-major with interleaved channels, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCrop {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageCrop {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::Shape("empty raster".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "intensity {} at sample {bad} outside [0,1]",
                data[bad]
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a crop, clamping every sample into `[0, 1]` (non-finite values become 0).
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() {
                v.clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        let value = value.clamp(0.0, 1.0);
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Single-channel crop from a per-pixel function; results are clamped.
    pub fn gray_from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                data.push(if v.is_finite() {
                    v.clamp(0.0, 1.0)
                } else {
                    0.0
                });
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
        }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Writes a sample, clamping into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let idx = (y * self.width + x) * self.channels + c;
        self.data[idx] = v.clamp(0.0, 1.0);
    }

    /// Luminance (Rec. 601 weights) for RGB, a copy for gray.
    pub fn to_gray(&self) -> ImageCrop {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect();
        ImageCrop {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// One channel as a plane of `H * W` samples.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f32>]) -> Result<Self> {
        let channels = planes.len();
        let mut data = vec![0.0; height * width * channels];
        for (c, plane) in planes.iter().enumerate() {
            if plane.len() != height * width {
                return Err(Error::Shape("plane length mismatch".into()));
            }
            for (i, v) in plane.iter().enumerate() {
                data[i * channels + c] = *v;
            }
        }
        Self::from_clamped(height, width, channels, data)
    }

    pub fn same_shape(&self, other: &ImageCrop) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let color = img.color();
        if color.has_color() {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Self::new(h as usize, w as usize, 3, data)
        } else {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            let data = g.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Self::new(h as usize, w as usize, 1, data)
        }
    }

    /// Writes an 8-bit gray or RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color).map_err(
            |source| Error::Image {
                path: path.to_path_buf(),
                source,
            },
        )
    }
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One bit per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        self.check_dims(other)?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_dims(other) && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        self.check_dims(other)?;
        let mut inter = 0usize;
        let mut uni = 0usize;
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (*a && *b) as usize;
            uni += (*a || *b) as usize;
        }
        Ok(if uni == 0 {
            1.0
        } else {
            inter as f64 / uni as f64
        })
    }

    /// Mean pixel-centre position `(x, y)`, or `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)`.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// Number of rows spanned by the bounding box (0 when empty).
    pub fn bbox_height(&self) -> usize {
        self.bbox().map_or(0, |(_, y0, _, y1)| y1 - y0 + 1)
    }

    /// Keeps pixels satisfying `keep(x, y)`.
    pub fn filter(&self, keep: impl Fn(usize, usize) -> bool) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |x, y| self.get(x, y) && keep(x, y))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            bits: g.as_raw().iter().map(|&v| v >= 128).collect(),
        })
    }

    /// 0 = background, 255 = foreground.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_lengths() {
        assert!(ImageCrop::new(2, 2, 1, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(ImageCrop::new(2, 2, 1, vec![0.0, f32::NAN, 1.0, 0.5]).is_err());
        assert!(ImageCrop::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageCrop::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(BinaryMask::new(2, 2, vec![true; 3]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_levels() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageCrop::gray_from_fn(5, 7, |x, y| ((x * 7 + y * 3) % 256) as f32 / 255.0);
        let p = dir.path().join("g.png");
        img.save_png(&p).unwrap();
        assert_eq!(ImageCrop::load_png(&p).unwrap(), img);

        let rgb = ImageCrop::new(1, 2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let p = dir.path().join("c.png");
        rgb.save_png(&p).unwrap();
        assert_eq!(ImageCrop::load_png(&p).unwrap(), rgb);

        let m = BinaryMask::from_fn(4, 3, |x, y| (x + y) % 2 == 0);
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(BinaryMask::load_png(&p).unwrap(), m);
    }

    #[test]
    fn set_algebra() {
        let a = BinaryMask::from_fn(3, 3, |x, _| x == 0);
        let b = BinaryMask::from_fn(3, 3, |_, y| y == 0);
        assert_eq!(a.union(&b).unwrap().count(), 5);
        assert_eq!(a.intersection(&b).unwrap().count(), 1);
        assert_eq!(a.difference(&b).unwrap().count(), 2);
        assert!((a.iou(&b).unwrap() - 0.2).abs() < 1e-12);
        assert!(a.intersection(&b).unwrap().is_subset_of(&a));
        assert_eq!(a.bbox(), Some((0, 0, 0, 2)));
        assert_eq!(a.bbox_height(), 3);
        assert_eq!(a.centroid(), Some((0.0, 1.0)));
    }
}
