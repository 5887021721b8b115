//! Nine-value oriented box code: edge distances `l`, gliding ratios `s` and
//! the area ratio `ar`, measured at one feature-map cell.
//!
//! Grid cell `(x, y)` on a map of stride `S` is centred at pixel
//! `((x + 0.5) S, (y + 0.5) S)`. Edge distances are stored in grid units
//! (pixels / stride). The gliding ratios follow the HBB edges clockwise:
//!
//! * `s[0]`: top edge, from the top-left corner rightwards, over the width
//! * `s[1]`: right edge, from the top-right corner downwards, over the height
//! * `s[2]`: bottom edge, from the bottom-right corner leftwards, over the width
//! * `s[3]`: left edge, from the bottom-left corner upwards, over the height

use crate::geometry::{canonicalize_obb, circumscribed_hbb, GeometryError, Hbb, Obb, Point2};
use thiserror::Error;

pub const CODE_LEN: usize = 9;

/// Decoded boxes with an area ratio at or above this fall back to their HBB.
pub const DEFAULT_HBB_FALLBACK_AR: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("cell ({cx}, {cy}) centre ({px}, {py}) lies outside the box's HBB")]
    CellOutsideBox { cx: usize, cy: usize, px: f64, py: f64 },
    #[error("invalid code: {0}")]
    InvalidCode(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObbCode {
    pub l: [f64; 4],
    pub s: [f64; 4],
    pub ar: f64,
}

impl ObbCode {
    pub fn to_array(&self) -> [f64; CODE_LEN] {
        let mut out = [0.0; CODE_LEN];
        out[..4].copy_from_slice(&self.l);
        out[4..8].copy_from_slice(&self.s);
        out[8] = self.ar;
        out
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), CODE_LEN, "an OBB code has {CODE_LEN} components");
        Self {
            l: [v[0], v[1], v[2], v[3]],
            s: [v[4], v[5], v[6], v[7]],
            ar: v[8],
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let l_ok = self.l.iter().all(|v| v.is_finite() && *v >= 0.0)
            && self.l[0] + self.l[2] > 0.0
            && self.l[1] + self.l[3] > 0.0;
        if !l_ok {
            return Err(CodecError::InvalidCode(format!("edge distances {:?}", self.l)));
        }
        if !self.s.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(CodecError::InvalidCode(format!("gliding ratios {:?}", self.s)));
        }
        if !(self.ar > 0.0 && self.ar <= 1.0) {
            return Err(CodecError::InvalidCode(format!("area ratio {}", self.ar)));
        }
        Ok(())
    }
}

/// Pixel centre of a grid cell.
pub fn cell_center(cell: (usize, usize), stride: f64) -> Point2 {
    Point2::new((cell.0 as f64 + 0.5) * stride, (cell.1 as f64 + 0.5) * stride)
}

/// The vertex touching each HBB edge, in top/right/bottom/left order.
///
/// Ties pick the vertex that makes the gliding ratio smallest.
fn edge_vertices(obb: &Obb) -> [Point2; 4] {
    let v = obb.vertices();
    let pick = |better: &dyn Fn(&Point2, &Point2) -> bool| {
        let mut best = v[0];
        for q in &v[1..] {
            if better(q, &best) {
                best = *q;
            }
        }
        best
    };
    let top = pick(&|a, b| a.y < b.y || (a.y == b.y && a.x < b.x));
    let right = pick(&|a, b| a.x > b.x || (a.x == b.x && a.y < b.y));
    let bottom = pick(&|a, b| a.y > b.y || (a.y == b.y && a.x > b.x));
    let left = pick(&|a, b| a.x < b.x || (a.x == b.x && a.y > b.y));
    [top, right, bottom, left]
}

/// Encodes a box at a cell whose centre lies strictly inside the box's HBB.
pub fn encode_at(obb: &Obb, cell: (usize, usize), stride: f64) -> Result<ObbCode, CodecError> {
    let hbb = circumscribed_hbb(obb);
    let c = cell_center(cell, stride);
    if !hbb.contains_strictly(c) {
        return Err(CodecError::CellOutsideBox {
            cx: cell.0,
            cy: cell.1,
            px: c.x,
            py: c.y,
        });
    }
    let l = hbb.distances_from(c).map(|d| d / stride);
    let [top, right, bottom, left] = edge_vertices(obb);
    let (w, h) = (hbb.width(), hbb.height());
    let s = [
        (top.x - hbb.x_min) / w,
        (right.y - hbb.y_min) / h,
        (hbb.x_max - bottom.x) / w,
        (hbb.y_max - left.y) / h,
    ]
    .map(|v| v.clamp(0.0, 1.0));
    Ok(ObbCode {
        l,
        s,
        ar: (obb.area() / hbb.area()).min(1.0),
    })
}

/// Decodes with the default HBB fallback for near-rectangular boxes.
pub fn decode_at(code: &ObbCode, cell: (usize, usize), stride: f64) -> Result<Obb, CodecError> {
    decode_with_fallback(code, cell, stride, Some(DEFAULT_HBB_FALLBACK_AR))
}

/// Inverse of [`encode_at`].
///
/// With `Some(t)`, codes whose area ratio is at least `t` decode to their
/// HBB corners; `None` always glides the vertices, which makes decoding the
/// exact inverse of encoding.
pub fn decode_with_fallback(
    code: &ObbCode,
    cell: (usize, usize),
    stride: f64,
    hbb_fallback_ar: Option<f64>,
) -> Result<Obb, CodecError> {
    code.validate()?;
    let c = cell_center(cell, stride);
    let hbb = Hbb::from_distances(c, code.l.map(|d| d * stride))?;
    if hbb_fallback_ar.is_some_and(|t| code.ar >= t) {
        return Ok(Obb::from_hbb(&hbb));
    }
    let (w, h) = (hbb.width(), hbb.height());
    let s = &code.s;
    let raw = [
        Point2::new(hbb.x_min + s[0] * w, hbb.y_min),
        Point2::new(hbb.x_max, hbb.y_min + s[1] * h),
        Point2::new(hbb.x_max - s[2] * w, hbb.y_max),
        Point2::new(hbb.x_min, hbb.y_max - s[3] * h),
    ];
    Ok(canonicalize_obb(raw)?)
}

/// One-hot class vector.
pub fn class_code(class_id: usize, num_classes: usize) -> Vec<f64> {
    assert!(class_id < num_classes, "class {class_id} out of range {num_classes}");
    let mut v = vec![0.0; num_classes];
    v[class_id] = 1.0;
    v
}
