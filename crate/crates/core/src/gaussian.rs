//! Oriented 2-D Gaussian fields built from oriented boxes.
//!
//! Everything here lives in grid coordinates (pixels divided by the stride of
//! the feature map the region is assigned to). Densities are the exponential
//! factor only, so the peak value at the mean is exactly 1.

use std::f64::consts::PI;

use crate::geometry::{obb_metrics, Obb, Point2};
use thiserror::Error;

/// Semi-axes below this many grid units are rejected.
pub const MIN_SEMI_AXIS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("degenerate Gaussian region: semi-axes ({s1:.3e}, {s2:.3e}) grid units")]
    DegenerateBox { s1: f64, s2: f64 },
    #[error("stride must be positive, got {0}")]
    InvalidStride(f64),
    #[error("IoU threshold must lie in (0, 1), got {0}")]
    InvalidIouThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianRegion {
    /// Mean, in grid units.
    pub mu: Point2,
    /// Major-axis direction in `[0, pi)`, measured from +x toward +y.
    pub alpha: f64,
    /// Squared semi-major axis.
    pub lambda1: f64,
    /// Squared semi-minor axis.
    pub lambda2: f64,
    /// Radius scale `k` of the positive ellipse.
    pub shrink: f64,
    /// Density on the shrunk ellipse, `exp(-k^2 / 2)`.
    pub thr: f64,
}

/// Shrink factor `(1 - t_iou) / 2` applied to both semi-axes.
pub fn shrink_factor(t_iou: f64) -> f64 {
    (1.0 - t_iou) / 2.0
}

/// Radii of the positive candidate ellipse.
pub fn shrunk_radii(r1: f64, r2: f64, t_iou: f64) -> (f64, f64) {
    let k = shrink_factor(t_iou);
    (k * r1, k * r2)
}

fn fold_angle(a: f64) -> f64 {
    let folded = a.rem_euclid(PI);
    if folded >= PI {
        0.0
    } else {
        folded
    }
}

/// Builds the Gaussian region of a box assigned to a feature map of the given
/// stride.
///
/// The semi-axes are half of the box's length and width, taken as the mean
/// of each pair of opposite sides; the orientation follows the longer pair,
/// with the first canonical side winning a tie.
pub fn region_from_obb(obb: &Obb, stride: f64, t_iou: f64) -> Result<GaussianRegion, GaussianError> {
    if !(stride > 0.0 && stride.is_finite()) {
        return Err(GaussianError::InvalidStride(stride));
    }
    if !(t_iou > 0.0 && t_iou < 1.0) {
        return Err(GaussianError::InvalidIouThreshold(t_iou));
    }
    let v = obb.vertices();
    let sides = obb_metrics(obb).sides;
    let first = 0.5 * (sides[0] + sides[2]);
    let second = 0.5 * (sides[1] + sides[3]);
    let (long, short, dir) = if first >= second {
        (first, second, v[1] - v[0])
    } else {
        (second, first, v[2] - v[1])
    };
    let s1 = long / 2.0 / stride;
    let s2 = short / 2.0 / stride;
    if s1 < MIN_SEMI_AXIS || s2 < MIN_SEMI_AXIS {
        return Err(GaussianError::DegenerateBox { s1, s2 });
    }
    let k = shrink_factor(t_iou);
    Ok(GaussianRegion {
        mu: obb.centroid().scale(1.0 / stride),
        alpha: fold_angle(dir.y.atan2(dir.x)),
        lambda1: s1 * s1,
        lambda2: s2 * s2,
        shrink: k,
        thr: (-0.5 * k * k).exp(),
    })
}

impl GaussianRegion {
    /// Squared Mahalanobis distance `(p - mu)^T Q L^-1 Q^T (p - mu)`.
    pub fn mahalanobis_sq(&self, p: Point2) -> f64 {
        let d = p - self.mu;
        let (s, c) = self.alpha.sin_cos();
        // Q^T d
        let u = c * d.x + s * d.y;
        let w = -s * d.x + c * d.y;
        u * u / self.lambda1 + w * w / self.lambda2
    }

    /// Unnormalised density `exp(-m / 2)`, in `(0, 1]`.
    pub fn value(&self, p: Point2) -> f64 {
        (-0.5 * self.mahalanobis_sq(p)).exp()
    }

    /// True when `p` lies strictly inside the shrunk ellipse.
    pub fn is_member(&self, p: Point2) -> bool {
        self.mahalanobis_sq(p) < self.shrink * self.shrink
    }

    pub fn semi_axes(&self) -> (f64, f64) {
        (self.lambda1.sqrt(), self.lambda2.sqrt())
    }

    /// Radii of the positive ellipse, in grid units.
    pub fn positive_radii(&self) -> (f64, f64) {
        let (s1, s2) = self.semi_axes();
        (self.shrink * s1, self.shrink * s2)
    }

    /// Covariance `Q L Q^T` as `[[c_xx, c_xy], [c_xy, c_yy]]`.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.alpha.sin_cos();
        let cxx = self.lambda1 * c * c + self.lambda2 * s * s;
        let cyy = self.lambda1 * s * s + self.lambda2 * c * c;
        let cxy = (self.lambda1 - self.lambda2) * s * c;
        [[cxx, cxy], [cxy, cyy]]
    }

    /// Axis-aligned grid-space bounding box of the positive ellipse.
    pub fn positive_extent(&self) -> (f64, f64, f64, f64) {
        let cov = self.covariance();
        let k2 = self.shrink * self.shrink;
        let hx = (k2 * cov[0][0]).sqrt();
        let hy = (k2 * cov[1][1]).sqrt();
        (self.mu.x - hx, self.mu.y - hy, self.mu.x + hx, self.mu.y + hy)
    }
}

/// Free-function form of [`GaussianRegion::value`].
pub fn gaussian_value(region: &GaussianRegion, p: Point2) -> f64 {
    region.value(p)
}
