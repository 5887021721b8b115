//! Label assignment: scale routing, oriented Gaussian heatmaps and the
//! per-cell training targets derived from them.

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::codec::{encode_at, CodecError, CODE_LEN};
use crate::gaussian::{region_from_obb, GaussianRegion};
use crate::geometry::{circumscribed_hbb, obb_metrics, Point2};
use crate::io::dota::ObbAnnotation;

/// `region_id` value of background cells.
pub const BACKGROUND: i32 = -1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignError {
    #[error("invalid assignment config: {0}")]
    InvalidConfig(String),
    #[error("annotation {index}: {reason}")]
    InvalidAnnotation { index: usize, reason: String },
    #[error("longest side {max_side:.2} px exceeds the routable limit {limit:.2} px")]
    SideOutOfRange { max_side: f64, limit: f64 },
    #[error("annotation {index}: {source}")]
    Codec { index: usize, source: CodecError },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignConfig {
    pub strides: [u32; 3],
    pub tau: f64,
    pub t_iou: f64,
    /// Side length of the square network input, in pixels.
    pub img_size: u32,
    pub num_classes: usize,
}

impl AssignConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            strides: [8, 16, 32],
            tau: 3.0,
            t_iou: 0.3,
            img_size: 800,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), AssignError> {
        let bad = |msg: String| Err(AssignError::InvalidConfig(msg));
        if self.strides[0] == 0 || !self.strides.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!(
                "strides {:?} must be positive and strictly increasing",
                self.strides
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.t_iou > 0.0 && self.t_iou < 1.0) {
            return bad(format!("t_iou must lie in (0, 1), got {}", self.t_iou));
        }
        if let Some(s) = self
            .strides
            .iter()
            .find(|&&s| self.img_size == 0 || !self.img_size.is_multiple_of(s))
        {
            return bad(format!("img_size {} is not divisible by stride {s}", self.img_size));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        Ok(())
    }

    /// Upper bounds of the first two routing ranges, in pixels.
    pub fn range_bounds(&self) -> (f64, f64) {
        let k = self.tau * 2.0 / (1.0 - self.t_iou);
        (k * self.strides[0] as f64, k * self.strides[2] as f64)
    }

    /// Largest routable side, `sqrt(2) * img_size`.
    pub fn max_routable_side(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.img_size as f64
    }

    /// Feature-map `(height, width)` at a scale.
    pub fn grid_shape(&self, scale: usize) -> (usize, usize) {
        let n = (self.img_size / self.strides[scale]) as usize;
        (n, n)
    }
}

/// Picks the scale (0, 1 or 2, indexing `cfg.strides`) for an object whose
/// longest side is `max_side` pixels.
pub fn route_scale(max_side: f64, cfg: &AssignConfig) -> Result<usize, AssignError> {
    if max_side.is_nan() || max_side <= 1.0 {
        return Err(AssignError::InvalidAnnotation {
            index: usize::MAX,
            reason: format!("longest side {max_side} px must exceed 1 px"),
        });
    }
    let limit = cfg.max_routable_side();
    if max_side > limit {
        return Err(AssignError::SideOutOfRange { max_side, limit });
    }
    let (r1, r2) = cfg.range_bounds();
    Ok(if max_side <= r1 {
        0
    } else if max_side <= r2 {
        1
    } else {
        2
    })
}

/// `log(2) / log(1 + sqrt(n))` for a region of `n` positive cells.
pub fn area_normalization(n: usize) -> f64 {
    // log2 keeps the n = 1 and n = 9 values exact.
    1.0 / (1.0 + (n.max(1) as f64).sqrt()).log2()
}

/// Targets for one feature-map scale. Arrays are indexed `[y, x]` or
/// `[y, x, channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelScale {
    pub stride: u32,
    /// Normalised Gaussian weight, 0 at background.
    pub heat: Array2<f64>,
    pub obj: Array2<f64>,
    pub obb: Array3<f64>,
    pub cls: Array3<f64>,
    pub region_id: Array2<i32>,
    /// Area normalisation factor, 1 at background.
    pub xi: Array2<f64>,
}

impl LabelScale {
    pub fn empty(stride: u32, height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            stride,
            heat: Array2::zeros((height, width)),
            obj: Array2::zeros((height, width)),
            obb: Array3::zeros((height, width, CODE_LEN)),
            cls: Array3::zeros((height, width, num_classes)),
            region_id: Array2::from_elem((height, width), BACKGROUND),
            xi: Array2::ones((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.heat.nrows()
    }

    pub fn width(&self) -> usize {
        self.heat.ncols()
    }

    pub fn is_positive(&self, y: usize, x: usize) -> bool {
        self.obj[[y, x]] > 0.5
    }

    pub fn positive_count(&self) -> usize {
        self.obj.iter().filter(|&&v| v > 0.5).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelTensorSet {
    pub num_classes: usize,
    pub scales: Vec<LabelScale>,
}

impl LabelTensorSet {
    pub fn empty(cfg: &AssignConfig) -> Self {
        let scales = (0..3)
            .map(|m| {
                let (h, w) = cfg.grid_shape(m);
                LabelScale::empty(cfg.strides[m], h, w, cfg.num_classes)
            })
            .collect();
        Self {
            num_classes: cfg.num_classes,
            scales,
        }
    }
}

struct Routed {
    scale: usize,
    region: GaussianRegion,
}

fn invalid(index: usize, reason: impl ToString) -> AssignError {
    AssignError::InvalidAnnotation {
        index,
        reason: reason.to_string(),
    }
}

fn route_annotation(index: usize, ann: &ObbAnnotation, cfg: &AssignConfig) -> Result<Routed, AssignError> {
    if ann.class_id >= cfg.num_classes {
        return Err(invalid(index, format!("class {} >= {}", ann.class_id, cfg.num_classes)));
    }
    let c = ann.obb.centroid();
    let size = cfg.img_size as f64;
    if !(0.0..=size).contains(&c.x) || !(0.0..=size).contains(&c.y) {
        return Err(invalid(
            index,
            format!("centre ({:.1}, {:.1}) outside the image", c.x, c.y),
        ));
    }
    let max_side = obb_metrics(&ann.obb).max_side;
    let scale = match route_scale(max_side, cfg) {
        Err(AssignError::InvalidAnnotation { reason, .. }) => return Err(invalid(index, reason)),
        other => other?,
    };
    let region = region_from_obb(&ann.obb, cfg.strides[scale] as f64, cfg.t_iou).map_err(|e| invalid(index, e))?;
    Ok(Routed { scale, region })
}

/// Builds the multi-scale training targets for one image.
///
/// Each object is routed to one scale and marks the cells whose density
/// exceeds its region threshold. A cell claimed by several objects keeps the
/// one with the larger raw density; exact ties stay with the lower
/// annotation index. Retained densities are then rescaled to
/// `(f - thr) / (1 - thr)` and the box/class targets and area normalisation
/// are filled in for every positive cell.
pub fn generate_heatmaps(annotations: &[ObbAnnotation], cfg: &AssignConfig) -> Result<LabelTensorSet, AssignError> {
    cfg.validate()?;
    let routed = annotations
        .iter()
        .enumerate()
        .map(|(i, a)| route_annotation(i, a, cfg))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = LabelTensorSet::empty(cfg);
    // Raw density of the current owner of each cell.
    let mut best: Vec<Array2<f64>> = out.scales.iter().map(|s| Array2::zeros(s.heat.raw_dim())).collect();

    for (idx, (ann, r)) in annotations.iter().zip(&routed).enumerate() {
        let scale = &mut out.scales[r.scale];
        let stride = scale.stride as f64;
        let (h, w) = (scale.height(), scale.width());
        let hbb = circumscribed_hbb(&ann.obb);
        let x0 = (hbb.x_min / stride).floor().max(0.0) as usize;
        let y0 = (hbb.y_min / stride).floor().max(0.0) as usize;
        let x1 = ((hbb.x_max / stride).ceil() as usize).min(w);
        let y1 = ((hbb.y_max / stride).ceil() as usize).min(h);
        let best = &mut best[r.scale];
        for y in y0..y1 {
            for x in x0..x1 {
                let f = r.region.value(Point2::new(x as f64 + 0.5, y as f64 + 0.5));
                if f > r.region.thr && f > best[[y, x]] {
                    best[[y, x]] = f;
                    scale.region_id[[y, x]] = idx as i32;
                }
            }
        }
    }

    let mut counts = vec![0usize; annotations.len()];
    for scale in &out.scales {
        for &id in scale.region_id.iter().filter(|&&id| id != BACKGROUND) {
            counts[id as usize] += 1;
        }
    }
    for (idx, &n) in counts.iter().enumerate() {
        if n == 0 {
            log::debug!("annotation {idx} produced no positive cells");
        }
    }

    for (scale, best) in out.scales.iter_mut().zip(&best) {
        let stride = scale.stride as f64;
        for y in 0..scale.height() {
            for x in 0..scale.width() {
                let id = scale.region_id[[y, x]];
                if id == BACKGROUND {
                    continue;
                }
                let idx = id as usize;
                let ann = &annotations[idx];
                let thr = routed[idx].region.thr;
                scale.heat[[y, x]] = (best[[y, x]] - thr) / (1.0 - thr);
                scale.obj[[y, x]] = 1.0;
                let code =
                    encode_at(&ann.obb, (x, y), stride).map_err(|source| AssignError::Codec { index: idx, source })?;
                for (c, v) in code.to_array().into_iter().enumerate() {
                    scale.obb[[y, x, c]] = v;
                }
                scale.cls[[y, x, ann.class_id]] = 1.0;
                scale.xi[[y, x]] = area_normalization(counts[idx]);
            }
        }
    }
    Ok(out)
}

/// Per-scale positive/negative balance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleStats {
    pub stride: u32,
    pub positives: usize,
    pub negatives: usize,
}

impl ScaleStats {
    /// Positives per negative cell; infinite when the map has no negatives.
    pub fn ratio(&self) -> f64 {
        self.positives as f64 / self.negatives as f64
    }
}

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct AssignStats {
    pub per_object_positives: Vec<usize>,
    pub per_scale: Vec<ScaleStats>,
    /// Objects that ended up with no positive cell.
    pub mismatch: usize,
    /// Counts of positive-cell weights in equal-width bins over `(0, 1]`.
    pub heat_histogram: [usize; HISTOGRAM_BINS],
}

pub fn assignment_stats(labels: &LabelTensorSet, annotations: &[ObbAnnotation]) -> AssignStats {
    let mut per_object_positives = vec![0usize; annotations.len()];
    let mut heat_histogram = [0usize; HISTOGRAM_BINS];
    let mut per_scale = Vec::with_capacity(labels.scales.len());
    for scale in &labels.scales {
        let mut positives = 0;
        for (&id, &f) in scale.region_id.iter().zip(scale.heat.iter()) {
            if id == BACKGROUND {
                continue;
            }
            positives += 1;
            if let Some(n) = per_object_positives.get_mut(id as usize) {
                *n += 1;
            }
            let bin = ((f * HISTOGRAM_BINS as f64).ceil() as usize).clamp(1, HISTOGRAM_BINS) - 1;
            heat_histogram[bin] += 1;
        }
        per_scale.push(ScaleStats {
            stride: scale.stride,
            positives,
            negatives: scale.region_id.len() - positives,
        });
    }
    AssignStats {
        mismatch: per_object_positives.iter().filter(|&&n| n == 0).count(),
        per_object_positives,
        per_scale,
        heat_histogram,
    }
}
