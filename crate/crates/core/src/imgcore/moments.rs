//! Moment-based ellipse fitting.

use serde::{Deserialize, Serialize};

use super::raster::BinaryMask;
use crate::error::{Error, Result};

/// Ellipse with the same second-order central moments as a mask.
///
/// `major_axis` / `minor_axis` are full axis lengths in pixels; `angle` is the
/// major-axis direction in degrees, counter-clockwise as displayed, in `(-90, 90]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    pub center: (f64, f64),
    pub major_axis: f64,
    pub minor_axis: f64,
    pub angle: f64,
}

impl EllipseParams {
    pub fn semi_major(&self) -> f64 {
        self.major_axis / 2.0
    }

    pub fn semi_minor(&self) -> f64 {
        self.minor_axis / 2.0
    }

    pub fn axis_ratio(&self) -> f64 {
        self.major_axis / self.minor_axis
    }

    /// Unit vector along the major axis in image coordinates (`y` down).
    pub fn major_direction(&self) -> (f64, f64) {
        let (s, c) = self.angle.to_radians().sin_cos();
        (c, -s)
    }
}

/// Wraps an angle in degrees into `(-90, 90]`.
pub fn wrap_axis_angle(deg: f64) -> f64 {
    let mut a = deg % 180.0;
    if a <= -90.0 {
        a += 180.0;
    } else if a > 90.0 {
        a -= 180.0;
    }
    a
}

/// Wraps an angle in degrees into `(-180, 180]`.
pub fn wrap_angle(deg: f64) -> f64 {
    let mut a = deg % 360.0;
    if a <= -180.0 {
        a += 360.0;
    } else if a > 180.0 {
        a -= 360.0;
    }
    a
}

pub fn fit_ellipse(mask: &BinaryMask) -> Result<EllipseParams> {
    let n = mask.count();
    if n < 5 {
        return Err(Error::Degenerate(format!(
            "ellipse fit needs >= 5 pixels, got {n}"
        )));
    }
    let (cx, cy) = mask.centroid().expect("non-empty");
    let (mut mu20, mut mu02, mut mu11) = (0.0, 0.0, 0.0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                mu20 += dx * dx;
                mu02 += dy * dy;
                mu11 += dx * dy;
            }
        }
    }
    let nf = n as f64;
    mu20 /= nf;
    mu02 /= nf;
    mu11 /= nf;
    let half_tr = (mu20 + mu02) / 2.0;
    let disc = (((mu20 - mu02) / 2.0).powi(2) + mu11 * mu11).sqrt();
    let (l1, l2) = (half_tr + disc, half_tr - disc);
    if l2 <= 1e-9 {
        return Err(Error::Degenerate(
            "zero variance across the minor axis".into(),
        ));
    }
    // principal direction in image coords is 0.5*atan2(2 mu11, mu20 - mu02);
    // negate for the counter-clockwise display convention
    let theta_img = 0.5 * (2.0 * mu11).atan2(mu20 - mu02);
    Ok(EllipseParams {
        center: (cx, cy),
        // a solid ellipse with semi-axis A has variance A^2/4 along that axis
        major_axis: 4.0 * l1.sqrt(),
        minor_axis: 4.0 * l2.sqrt(),
        angle: wrap_axis_angle(-theta_img.to_degrees()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rasterised solid ellipse with semi-axes `a`, `b` at a CCW angle: a pixel is
    /// set when at least half of its 8x8 sub-samples fall inside.
    fn solid_ellipse(size: usize, a: f64, b: f64, angle: f64) -> BinaryMask {
        let c = (size as f64 - 1.0) / 2.0;
        let (s, co) = angle.to_radians().sin_cos();
        BinaryMask::from_fn(size, size, |x, y| {
            let mut inside = 0;
            for i in 0..8 {
                for j in 0..8 {
                    let dx = x as f64 - c + (i as f64 + 0.5) / 8.0 - 0.5;
                    let dy = y as f64 - c + (j as f64 + 0.5) / 8.0 - 0.5;
                    // rotate into the ellipse frame (undo CCW-as-displayed rotation)
                    let u = co * dx - s * dy;
                    let v = s * dx + co * dy;
                    inside += ((u / a).powi(2) + (v / b).powi(2) <= 1.0) as u32;
                }
            }
            inside >= 32
        })
    }

    #[test]
    fn axis_aligned_ellipse() {
        let e = fit_ellipse(&solid_ellipse(41, 10.0, 4.0, 0.0)).unwrap();
        assert!(e.angle.abs() <= 2.0, "{}", e.angle);
        assert!((e.axis_ratio() - 2.5).abs() <= 0.15, "{}", e.axis_ratio());
        assert!((e.semi_major() - 10.0).abs() < 0.5);
        assert!((e.center.0 - 20.0).abs() < 1e-9 && (e.center.1 - 20.0).abs() < 1e-9);
    }

    #[test]
    fn rotated_ellipse_reports_its_angle() {
        for angle in [30.0, -45.0, 75.0, 89.0] {
            let e = fit_ellipse(&solid_ellipse(41, 10.0, 4.0, angle)).unwrap();
            let err = wrap_axis_angle(e.angle - angle).abs();
            assert!(err <= 2.0, "{angle} -> {}", e.angle);
        }
    }

    #[test]
    fn circle_is_round() {
        let e = fit_ellipse(&solid_ellipse(41, 9.0, 9.0, 0.0)).unwrap();
        assert!((1.0..=1.05).contains(&e.axis_ratio()));
    }

    #[test]
    fn degenerate_masks_error() {
        assert!(fit_ellipse(&BinaryMask::from_fn(5, 5, |x, y| x == 0 && y < 3)).is_err());
        assert!(fit_ellipse(&BinaryMask::from_fn(9, 9, |_, y| y == 4)).is_err());
    }

    #[test]
    fn angle_wrapping() {
        assert_eq!(wrap_axis_angle(-90.0), 90.0);
        assert_eq!(wrap_axis_angle(135.0), -45.0);
        assert_eq!(wrap_angle(-180.0), 180.0);
        assert_eq!(wrap_angle(270.0), -90.0);
    }
}
