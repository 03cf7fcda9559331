//! Hierarchical pseudo-masks: a classical, prior-driven pipeline that turns a raw
//! crop into a right-facing crop plus concentric confidence masks of the head.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{
    dilate, erode, erosion_depth, fit_ellipse, kmeans_intensity, largest_component, nlm_denoise,
    otsu_threshold, rotate, rotate_mask, wrap_angle, BinaryMask, ImageCrop, Interp, NlmParams,
    IMAGE_FILL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityFlag {
    /// Otsu found no split; the whole frame was used as foreground.
    DegenerateThreshold,
    /// The nuclear segment has fewer than 10 pixels or no stable ellipse.
    TinyNucleus,
    /// Both ends of the nucleus are equally thick; right was assumed.
    AmbiguousOrientation,
    /// The eroded acrosome part vanished; the base mask is the nucleus alone.
    EmptyAcrosome,
    /// The base mask leaked outside the coarse bound and was clipped.
    ClippedBase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HpmParams {
    /// Number of hierarchy layers.
    pub h: usize,
    /// Relative bounding-box height tolerance when eroding the acrosome part.
    pub tau_h: f64,
    /// Distance cut for nuclear pixels, in semi-major axes of the darkest segment.
    pub dmax_factor: f64,
    pub nlm: NlmParams,
}

impl Default for HpmParams {
    fn default() -> Self {
        Self {
            h: 2,
            tau_h: 0.15,
            dmax_factor: 1.5,
            nlm: NlmParams::default(),
        }
    }
}

/// Concentric masks `layers[0] ⊆ layers[1] ⊆ … ⊆ bound`; `layers[0]` is the confident head.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskHierarchy {
    layers: Vec<BinaryMask>,
    bound: BinaryMask,
}

impl MaskHierarchy {
    pub fn new(layers: Vec<BinaryMask>, bound: BinaryMask) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "hierarchy needs at least one layer".into(),
            ));
        }
        if layers[0].is_empty() {
            return Err(Error::Degenerate("base layer is empty".into()));
        }
        for w in layers.windows(2) {
            if !w[0].is_subset_of(&w[1]) {
                return Err(Error::InvalidArgument(
                    "hierarchy layers are not nested".into(),
                ));
            }
        }
        if !layers.last().expect("nonempty").is_subset_of(&bound) {
            return Err(Error::InvalidArgument(
                "outer layer exceeds the bound".into(),
            ));
        }
        Ok(Self { layers, bound })
    }

    pub fn h(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[BinaryMask] {
        &self.layers
    }

    pub fn base(&self) -> &BinaryMask {
        &self.layers[0]
    }

    pub fn outer(&self) -> &BinaryMask {
        self.layers.last().expect("nonempty")
    }

    pub fn bound(&self) -> &BinaryMask {
        &self.bound
    }

    pub fn height(&self) -> usize {
        self.bound.height()
    }

    pub fn width(&self) -> usize {
        self.bound.width()
    }

    /// Per-pixel label: `Some(0)` confident foreground, `Some(1)` confident background,
    /// `None` ignored (between the base and the outer layer).
    pub fn confidence_labels(&self) -> Vec<Option<u8>> {
        let base = self.base().bits();
        let outer = self.outer().bits();
        base.iter()
            .zip(outer)
            .map(|(&b, &o)| match (b, o) {
                (true, _) => Some(0),
                (false, false) => Some(1),
                (false, true) => None,
            })
            .collect()
    }

    /// Applies the same pixel map to every layer and the bound.
    pub fn map_masks(&self, f: impl Fn(&BinaryMask) -> Result<BinaryMask>) -> Result<Self> {
        let layers = self.layers.iter().map(&f).collect::<Result<Vec<_>>>()?;
        let bound = f(&self.bound)?;
        Ok(Self { layers, bound })
    }

    /// Gray encoding: layer `i` (innermost first) as `255 - 64 i`, background 0.
    pub fn encode_levels(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.height() * self.width()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let level = 255u8.saturating_sub((64 * i).min(255) as u8);
            for (o, &b) in out.iter_mut().zip(layer.bits()) {
                if b {
                    *o = level;
                }
            }
        }
        out
    }

    /// Inverse of [`encode_levels`](Self::encode_levels); the bound is not stored in
    /// the encoding, so the outer layer doubles as the bound.
    pub fn decode_levels(height: usize, width: usize, h: usize, levels: &[u8]) -> Result<Self> {
        if levels.len() != height * width {
            return Err(Error::Shape("hierarchy encoding size".into()));
        }
        let layers = (0..h)
            .map(|i| {
                let cut = 255u8.saturating_sub((64 * i).min(255) as u8);
                BinaryMask::new(
                    height,
                    width,
                    levels.iter().map(|&v| v > 0 && v >= cut).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let bound = layers.last().expect("h >= 1").clone();
        Self::new(layers, bound)
    }

    /// Writes the level encoding as an 8-bit gray PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.encode_levels(),
            self.width() as u32,
            self.height() as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path, h: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, ht) = img.dimensions();
        Self::decode_levels(ht as usize, w as usize, h, img.as_raw())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseForeground {
    /// `m1`: largest dark component of the thresholded, denoised crop.
    pub mask: BinaryMask,
    /// `I1`: denoised crop with foreground min-max rescaled and background set to white.
    pub image: ImageCrop,
    pub degenerate: bool,
}

/// End of the nucleus that is thicker, relative to the major-axis direction `(cos θ, -sin θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadDirection {
    /// Along `+(cos θ, -sin θ)`; for θ = 0 this is image right.
    Right,
    Left,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuclearSegment {
    /// `n1`.
    pub mask: BinaryMask,
    pub direction: HeadDirection,
    /// Major-axis angle in degrees, `(-90, 90]`.
    pub theta: f64,
    pub flags: BTreeSet<QualityFlag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aligned {
    /// `I2`.
    pub image: ImageCrop,
    /// `m2`.
    pub coarse: BinaryMask,
    /// `n2`.
    pub nucleus: BinaryMask,
    /// Degrees in `(-180, 180]`.
    pub rotation_applied: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMaskResult {
    pub aligned_image: ImageCrop,
    pub hierarchy: MaskHierarchy,
    pub rotation_applied: f64,
    pub nuclear_mask: BinaryMask,
    pub quality_flags: BTreeSet<QualityFlag>,
}

impl PseudoMaskResult {
    /// Maps a source-frame mask into the aligned frame.
    pub fn to_aligned(&self, mask: &BinaryMask) -> BinaryMask {
        rotate_mask(mask, self.rotation_applied)
    }
}

pub fn coarse_foreground(img: &ImageCrop, nlm: &NlmParams) -> Result<CoarseForeground> {
    let (h, w) = (img.height(), img.width());
    let den = nlm_denoise(img, nlm)?;
    let gray = den.to_gray();
    let otsu = otsu_threshold(gray.data());
    let dark = BinaryMask::from_fn(h, w, |x, y| gray.get(x, y, 0) as f64 <= otsu.threshold);
    let mask = if otsu.degenerate {
        None
    } else {
        largest_component(&dark)
    };
    let Some(mask) = mask else {
        return Ok(CoarseForeground {
            mask: BinaryMask::full(h, w),
            image: den,
            degenerate: true,
        });
    };
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for (i, &m) in mask.bits().iter().enumerate() {
        if m {
            for &v in &den.data()[i * den.channels()..(i + 1) * den.channels()] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    let span = hi - lo;
    let ch = den.channels();
    let data = den
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !mask.bits()[i / ch] {
                IMAGE_FILL
            } else if span > 0.0 {
                (v - lo) / span
            } else {
                0.0
            }
        })
        .collect();
    Ok(CoarseForeground {
        mask,
        image: ImageCrop::from_clamped(h, w, ch, data)?,
        degenerate: false,
    })
}

/// Darkest k-means (k = 3) segment inside `m1`, with distant fragments removed,
/// its major-axis angle, and which end is thicker. Thickness is the pixel count in
/// the outer third of the segment's extent along the major axis.
pub fn nuclear_extract(
    i1: &ImageCrop,
    m1: &BinaryMask,
    dmax_factor: f64,
    seed: u64,
) -> Result<NuclearSegment> {
    let mut flags = BTreeSet::new();
    let gray = i1.to_gray();
    let dark = match kmeans_intensity(&gray, 3, seed, m1) {
        Ok(km) => km.cluster_mask(0),
        Err(Error::Degenerate(_)) => BinaryMask::empty(i1.height(), i1.width()),
        Err(e) => return Err(e),
    };
    let nucleus = match largest_component(&dark) {
        Some(comp) => {
            let (cx, cy) = comp.centroid().expect("nonempty");
            let dmax = fit_ellipse(&comp)
                .map(|e| dmax_factor * e.semi_major())
                .unwrap_or(f64::INFINITY);
            dark.filter(|x, y| (x as f64 - cx).hypot(y as f64 - cy) <= dmax)
        }
        None => dark,
    };
    if nucleus.count() < 10 {
        flags.insert(QualityFlag::TinyNucleus);
    }
    let Ok(ellipse) = fit_ellipse(&nucleus) else {
        flags.insert(QualityFlag::TinyNucleus);
        flags.insert(QualityFlag::AmbiguousOrientation);
        return Ok(NuclearSegment {
            mask: nucleus,
            direction: HeadDirection::Right,
            theta: 0.0,
            flags,
        });
    };
    let direction = thicker_end(&nucleus, ellipse.angle).unwrap_or_else(|| {
        flags.insert(QualityFlag::AmbiguousOrientation);
        HeadDirection::Right
    });
    Ok(NuclearSegment {
        mask: nucleus,
        direction,
        theta: ellipse.angle,
        flags,
    })
}

/// End of `mask` that is thicker along the axis at `theta` degrees, measured as the
/// pixel count in the outer third of the mask's extent. `None` on a tie.
pub fn thicker_end(mask: &BinaryMask, theta: f64) -> Option<HeadDirection> {
    let (sin, cos) = theta.to_radians().sin_cos();
    let proj: Vec<f64> = (0..mask.height())
        .flat_map(|y| (0..mask.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.get(x, y))
        .map(|(x, y)| x as f64 * cos - y as f64 * sin)
        .collect();
    let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let third = (hi - lo) / 3.0;
    let front = proj.iter().filter(|&&d| d >= hi - third).count();
    let back = proj.iter().filter(|&&d| d <= lo + third).count();
    match front.cmp(&back) {
        std::cmp::Ordering::Greater => Some(HeadDirection::Right),
        std::cmp::Ordering::Less => Some(HeadDirection::Left),
        std::cmp::Ordering::Equal => None,
    }
}

/// Rotates the crop and masks so the thicker end of the nucleus faces `+x`.
pub fn align_right(
    i1: &ImageCrop,
    m1: &BinaryMask,
    n1: &BinaryMask,
    theta: f64,
    direction: HeadDirection,
) -> Aligned {
    let rotation_applied = match direction {
        HeadDirection::Right => wrap_angle(-theta),
        HeadDirection::Left => wrap_angle(-theta + 180.0),
    };
    Aligned {
        image: rotate(i1, rotation_applied, Interp::Bilinear),
        coarse: rotate_mask(m1, rotation_applied),
        nucleus: rotate_mask(n1, rotation_applied),
        rotation_applied,
    }
}

/// Fuses the nucleus with the eroded front half of the coarse mask. Returns the
/// base mask and whether the acrosome part vanished.
pub fn fuse_acrosome(m2: &BinaryMask, n2: &BinaryMask, tau_h: f64) -> Result<(BinaryMask, bool)> {
    if !m2.same_dims(n2) {
        return Err(Error::Shape(
            "coarse and nuclear masks differ in size".into(),
        ));
    }
    let mut right = match m2.centroid() {
        Some((cx, _)) => m2.filter(|x, _| x as f64 >= cx),
        None => BinaryMask::empty(m2.height(), m2.width()),
    };
    let target = n2.bbox_height() as f64 * (1.0 + tau_h);
    while !right.is_empty() && right.bbox_height() as f64 > target && erosion_depth(&right) > 3 {
        right = erode(&right, 1);
    }
    let empty_acrosome = right.is_empty();
    let fused = n2.union(&right)?;
    let base = largest_component(&fused).unwrap_or(fused);
    Ok((base, empty_acrosome))
}

/// `M_i = dilate(M_0, i) ∩ bound` for `i < h`. Returns the hierarchy and whether
/// `M_0` had to be clipped to the bound.
pub fn build_hierarchy(
    m0: &BinaryMask,
    bound: &BinaryMask,
    h: usize,
) -> Result<(MaskHierarchy, bool)> {
    if h == 0 {
        return Err(Error::InvalidArgument("h must be >= 1".into()));
    }
    if !m0.same_dims(bound) {
        return Err(Error::Shape("base mask and bound differ in size".into()));
    }
    let clipped = !m0.is_subset_of(bound);
    let (base, bound) = if clipped {
        let inside = m0.intersection(bound)?;
        if inside.is_empty() {
            (m0.clone(), bound.union(m0)?)
        } else {
            (inside, bound.clone())
        }
    } else {
        (m0.clone(), bound.clone())
    };
    let layers = (0..h)
        .map(|i| dilate(&base, i).intersection(&bound))
        .collect::<Result<Vec<_>>>()?;
    Ok((MaskHierarchy::new(layers, bound)?, clipped))
}

/// Full pseudo-mask pipeline. Degenerate crops yield flagged fallbacks rather than errors.
pub fn hpm_pipeline(img: &ImageCrop, params: &HpmParams, seed: u64) -> Result<PseudoMaskResult> {
    let mut flags = BTreeSet::new();
    let fg = coarse_foreground(img, &params.nlm)?;
    if fg.degenerate {
        flags.insert(QualityFlag::DegenerateThreshold);
    }
    let seg = nuclear_extract(&fg.image, &fg.mask, params.dmax_factor, seed)?;
    flags.extend(seg.flags.iter().copied());
    let al = align_right(&fg.image, &fg.mask, &seg.mask, seg.theta, seg.direction);
    let (mut m0, empty_acrosome) = fuse_acrosome(&al.coarse, &al.nucleus, params.tau_h)?;
    if empty_acrosome {
        flags.insert(QualityFlag::EmptyAcrosome);
    }
    let mut bound = al.coarse.clone();
    if m0.is_empty() {
        flags.insert(QualityFlag::TinyNucleus);
        m0 = if bound.is_empty() {
            BinaryMask::full(img.height(), img.width())
        } else {
            bound.clone()
        };
    }
    if bound.is_empty() {
        bound = BinaryMask::full(img.height(), img.width());
    }
    let (hierarchy, clipped) = build_hierarchy(&m0, &bound, params.h)?;
    if clipped {
        flags.insert(QualityFlag::ClippedBase);
    }
    Ok(PseudoMaskResult {
        aligned_image: al.image,
        hierarchy,
        rotation_applied: al.rotation_applied,
        nuclear_mask: al.nucleus,
        quality_flags: flags,
    })
}
