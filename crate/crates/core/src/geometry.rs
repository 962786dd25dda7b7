//! Rectified-stereo pinhole geometry.
//!
//! Camera frame: `x` right, `y` down, `z` forward. All projection and
//! disparity/depth conversions in the crate go through [`CameraRig`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("expected a positive value, got {0}")]
    NonPositive(f64),
    #[error("invalid camera rig: {0}")]
    InvalidRig(String),
}

/// A point in the left camera frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Subpixel image coordinate (`u` column, `v` row).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

/// Rectified stereo pair sharing intrinsics; the right camera sits
/// `baseline` meters along +x of the left one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
    pub image_w: usize,
    pub image_h: usize,
}

impl CameraRig {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        baseline: f64,
        image_w: usize,
        image_h: usize,
    ) -> Result<Self, GeometryError> {
        let rig = Self {
            fx,
            fy,
            cx,
            cy,
            baseline,
            image_w,
            image_h,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidRig(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.baseline > 0.0) {
            return Err(GeometryError::InvalidRig(format!(
                "baseline must be positive, got {}",
                self.baseline
            )));
        }
        if self.image_w == 0 || self.image_h == 0 {
            return Err(GeometryError::InvalidRig("image size must be at least 1x1".into()));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidRig("principal point must be finite".into()));
        }
        Ok(())
    }

    /// Rig for feature maps downsampled by `factor` (1, 2 or 4): intrinsics
    /// scale by `1/factor`, image size rounds up.
    pub fn rescaled(&self, factor: usize) -> Self {
        if factor <= 1 {
            return *self;
        }
        let s = 1.0 / factor as f64;
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            baseline: self.baseline,
            image_w: self.image_w.div_ceil(factor),
            image_h: self.image_h.div_ceil(factor),
        }
    }

    /// Left-image projection.
    pub fn project_to_image(&self, p: Point3) -> Result<PixelCoord, GeometryError> {
        if !(p.z > 0.0) {
            return Err(GeometryError::NonPositiveDepth(p.z));
        }
        Ok(PixelCoord {
            u: self.fx * p.x / p.z + self.cx,
            v: self.fy * p.y / p.z + self.cy,
        })
    }

    /// Right-image projection: same row, shifted left by the disparity.
    pub fn project_to_right(&self, p: Point3) -> Result<PixelCoord, GeometryError> {
        let left = self.project_to_image(p)?;
        Ok(PixelCoord {
            u: left.u - self.fx * self.baseline / p.z,
            v: left.v,
        })
    }

    pub fn depth_to_disparity(&self, z: f64) -> Result<f64, GeometryError> {
        if !(z > 0.0) {
            return Err(GeometryError::NonPositive(z));
        }
        Ok(self.fx * self.baseline / z)
    }

    pub fn disparity_to_depth(&self, d: f64) -> Result<f64, GeometryError> {
        if !(d > 0.0) {
            return Err(GeometryError::NonPositive(d));
        }
        Ok(self.fx * self.baseline / d)
    }

    /// Back-projects a left-image pixel with known depth (pseudo-LiDAR).
    pub fn unproject(&self, px: PixelCoord, z: f64) -> Result<Point3, GeometryError> {
        if !(z > 0.0) {
            return Err(GeometryError::NonPositiveDepth(z));
        }
        Ok(Point3 {
            x: (px.u - self.cx) * z / self.fx,
            y: (px.v - self.cy) * z / self.fy,
            z,
        })
    }

    fn pixel_in_bounds(&self, px: PixelCoord) -> bool {
        px.u >= 0.0 && px.u <= (self.image_w - 1) as f64 && px.v >= 0.0 && px.v <= (self.image_h - 1) as f64
    }

    /// Field-of-view test. With `require_both_cameras` the right-image
    /// projection must land in bounds too.
    pub fn in_fov_with(&self, p: Point3, require_both_cameras: bool) -> bool {
        let Ok(left) = self.project_to_image(p) else {
            return false;
        };
        if !self.pixel_in_bounds(left) {
            return false;
        }
        if require_both_cameras {
            let right = PixelCoord {
                u: left.u - self.fx * self.baseline / p.z,
                v: left.v,
            };
            return self.pixel_in_bounds(right);
        }
        true
    }

    /// [`Self::in_fov_with`] using the default (both cameras).
    pub fn in_fov(&self, p: Point3) -> bool {
        self.in_fov_with(p, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rig() -> CameraRig {
        CameraRig::new(100.0, 100.0, 50.0, 40.0, 0.5, 100, 80).unwrap()
    }

    #[test]
    fn projection_examples() {
        let r = rig();
        let c = r.project_to_image(Point3::new(0.0, 0.0, 10.0)).unwrap();
        assert_eq!((c.u, c.v), (50.0, 40.0));
        let c = r.project_to_image(Point3::new(1.0, 0.0, 10.0)).unwrap();
        assert_eq!((c.u, c.v), (60.0, 40.0));
        assert_eq!(
            r.project_to_image(Point3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::NonPositiveDepth(-1.0))
        );
    }

    #[test]
    fn right_projection_shifts_by_disparity() {
        let r = rig();
        let p = Point3::new(0.0, 0.3, 10.0);
        let right = r.project_to_right(p).unwrap();
        let left = r.project_to_image(p).unwrap();
        assert_eq!(right.u, 45.0);
        assert_eq!(right.v, left.v);

        let mut tiny = r;
        tiny.baseline = 1e-300;
        let right = tiny.project_to_right(p).unwrap();
        assert_eq!(right.u, left.u);
    }

    #[test]
    fn disparity_examples() {
        let r = rig();
        assert_eq!(r.depth_to_disparity(10.0).unwrap(), 5.0);
        let z = 7.3;
        let back = r.disparity_to_depth(r.depth_to_disparity(z).unwrap()).unwrap();
        assert!(((back - z) / z).abs() < 1e-12);
        assert!(r.depth_to_disparity(0.0).is_err());
        assert!(r.disparity_to_depth(-2.0).is_err());

        let mut prev = f64::INFINITY;
        for i in 0..200 {
            let d = r.depth_to_disparity(0.5 * 1.1f64.powi(i)).unwrap();
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn fov_examples() {
        let r = rig();
        assert!(r.in_fov(Point3::new(0.0, 0.0, 10.0)));
        assert!(!r.in_fov(Point3::new(0.0, 0.0, -1.0)));
        // u = 100*x/10 + 50 = image_w + 3 = 103 => x = 5.3
        let p = Point3::new(5.3, 0.0, 10.0);
        assert!((r.project_to_image(p).unwrap().u - 103.0).abs() < 1e-12);
        assert!(!r.in_fov_with(p, false));
    }

    #[test]
    fn right_camera_check_only_removes_points() {
        let r = rig();
        // left u = 2, right u = 2 - 5 = -3
        let p = Point3::new(-4.8, 0.0, 10.0);
        assert!(r.in_fov_with(p, false));
        assert!(!r.in_fov_with(p, true));
    }

    #[test]
    fn invalid_rigs_rejected() {
        assert!(CameraRig::new(0.0, 1.0, 0.0, 0.0, 0.5, 10, 10).is_err());
        assert!(CameraRig::new(1.0, 1.0, 0.0, 0.0, 0.0, 10, 10).is_err());
        assert!(CameraRig::new(1.0, 1.0, 0.0, 0.0, 0.5, 0, 10).is_err());
    }

    #[test]
    fn unproject_inverts_projection() {
        let r = rig();
        let p = Point3::new(-1.25, 0.75, 13.0);
        let q = r.unproject(r.project_to_image(p).unwrap(), p.z).unwrap();
        assert!((q.x - p.x).abs() < 1e-12 && (q.y - p.y).abs() < 1e-12);
    }
}
