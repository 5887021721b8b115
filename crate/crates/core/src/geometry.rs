//! Oriented and horizontal box geometry.
//!
//! All coordinates are image pixels with the y axis pointing down. In that
//! frame a polygon with a positive shoelace sum runs clockwise on screen,
//! which is the orientation every [`Obb`] is stored in.

use thiserror::Error;

/// Minimum accepted polygon area, in squared pixels.
pub const MIN_BOX_AREA: f64 = 1e-6;

/// Clipped vertices closer than this are merged.
const MERGE_EPS: f64 = 1e-9;

/// Vertical slack used when picking the top vertex of a box.
const TOP_TIE_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box: area {area:.3e} px^2 is below {MIN_BOX_AREA:e}")]
    DegenerateBox { area: f64 },
    #[error("quadrilateral is not convex (edge turn directions disagree)")]
    NonConvex,
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("invalid edge distances {0:?}: components must be finite and non-negative with positive extent")]
    InvalidDistances([f64; 4]),
    #[error("invalid horizontal box: ({x_min}, {y_min})-({x_max}, {y_max})")]
    InvalidHbb {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn scale(self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }

    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;

    fn sub(self, other: Point2) -> Point2 {
        Point2::new(self.x - other.x, self.y - other.y)
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;

    fn add(self, other: Point2) -> Point2 {
        Point2::new(self.x + other.x, self.y + other.y)
    }
}

/// Twice the signed area; positive for clockwise-on-screen order.
fn shoelace2(poly: &[Point2]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| poly[i].cross(poly[(i + 1) % n])).sum()
}

/// Absolute area of a simple polygon.
pub fn polygon_area(poly: &[Point2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    0.5 * shoelace2(poly).abs()
}

/// An oriented box: a convex quadrilateral in canonical vertex order.
///
/// Canonical order starts at the vertex on the top edge of the circumscribed
/// horizontal box (leftmost on a tie) and runs clockwise on screen, so the
/// second vertex heads toward the right edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    vertices: [Point2; 4],
}

/// Side lengths, area and longest side of an [`Obb`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObbMetrics {
    /// `sides[j]` runs from vertex `j` to vertex `j + 1`.
    pub sides: [f64; 4],
    pub area: f64,
    pub max_side: f64,
}

impl Obb {
    /// Validates and reorders four raw vertices. See [`canonicalize_obb`].
    pub fn new(raw: [Point2; 4]) -> Result<Self, GeometryError> {
        canonicalize_obb(raw)
    }

    /// Builds a rotated rectangle centred at `(cx, cy)`. `angle` rotates the
    /// `width` axis from +x toward +y (clockwise on screen).
    pub fn from_rotated_rect(cx: f64, cy: f64, width: f64, height: f64, angle: f64) -> Result<Self, GeometryError> {
        let (s, c) = angle.sin_cos();
        let hw = width / 2.0;
        let hh = height / 2.0;
        let corner = |u: f64, v: f64| Point2::new(cx + u * c - v * s, cy + u * s + v * c);
        canonicalize_obb([corner(-hw, -hh), corner(hw, -hh), corner(hw, hh), corner(-hw, hh)])
    }

    /// Axis-aligned box as an `Obb`.
    pub fn from_hbb(hbb: &Hbb) -> Self {
        Self {
            vertices: hbb.corners(),
        }
    }

    pub fn vertices(&self) -> &[Point2; 4] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.vertices)
    }

    /// Area-weighted centroid.
    pub fn centroid(&self) -> Point2 {
        let v = &self.vertices;
        let mut a2 = 0.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for i in 0..4 {
            let p = v[i];
            let q = v[(i + 1) % 4];
            let w = p.cross(q);
            a2 += w;
            cx += (p.x + q.x) * w;
            cy += (p.y + q.y) * w;
        }
        Point2::new(cx / (3.0 * a2), cy / (3.0 * a2))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        let d = Point2::new(dx, dy);
        Self {
            vertices: self.vertices.map(|p| p + d),
        }
    }

    /// True when `p` lies inside or on the boundary.
    pub fn contains(&self, p: Point2) -> bool {
        let v = &self.vertices;
        (0..4).all(|i| (v[(i + 1) % 4] - v[i]).cross(p - v[i]) >= 0.0)
    }

    /// Horizontal extent `[x_lo, x_hi]` of the box along the line `y`.
    pub(crate) fn span_at(&self, y: f64) -> Option<(f64, f64)> {
        let v = &self.vertices;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..4 {
            let a = v[i];
            let b = v[(i + 1) % 4];
            let (y0, y1) = if a.y <= b.y { (a.y, b.y) } else { (b.y, a.y) };
            if y < y0 || y > y1 {
                continue;
            }
            if a.y == b.y {
                lo = lo.min(a.x.min(b.x));
                hi = hi.max(a.x.max(b.x));
            } else {
                let t = (y - a.y) / (b.y - a.y);
                let x = a.x + t * (b.x - a.x);
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        (lo <= hi).then_some((lo, hi))
    }
}

/// Validates four vertices and puts them in canonical order.
///
/// Rejects non-finite input, polygons with area below [`MIN_BOX_AREA`] and
/// quadrilaterals whose edge turns disagree in sign (concave or bow-tie).
pub fn canonicalize_obb(raw: [Point2; 4]) -> Result<Obb, GeometryError> {
    if !raw.iter().all(Point2::is_finite) {
        return Err(GeometryError::NonFinite);
    }
    let mut pos = false;
    let mut neg = false;
    for i in 0..4 {
        let e0 = raw[(i + 1) % 4] - raw[i];
        let e1 = raw[(i + 2) % 4] - raw[(i + 1) % 4];
        let turn = e0.cross(e1);
        pos |= turn > 0.0;
        neg |= turn < 0.0;
    }
    if pos && neg {
        return Err(GeometryError::NonConvex);
    }
    let s2 = shoelace2(&raw);
    let area = 0.5 * s2.abs();
    if area < MIN_BOX_AREA {
        return Err(GeometryError::DegenerateBox { area });
    }

    let mut v = raw;
    if s2 < 0.0 {
        v.reverse();
    }
    let y_top = v.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let start = (0..4)
        .filter(|&i| v[i].y <= y_top + TOP_TIE_EPS)
        .min_by(|&a, &b| v[a].x.total_cmp(&v[b].x))
        .unwrap_or(0);
    v.rotate_left(start);
    Ok(Obb { vertices: v })
}

/// Axis-aligned box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hbb {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Hbb {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let ok = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) && x_min < x_max && y_min < y_max;
        if !ok {
            return Err(GeometryError::InvalidHbb {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box spanned by a point and its top/right/bottom/left distances.
    pub fn from_distances(p: Point2, l: [f64; 4]) -> Result<Self, GeometryError> {
        Hbb::new(p.x - l[3], p.y - l[0], p.x + l[1], p.y + l[2])
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Corners clockwise on screen from the top-left.
    pub fn corners(&self) -> [Point2; 4] {
        [
            Point2::new(self.x_min, self.y_min),
            Point2::new(self.x_max, self.y_min),
            Point2::new(self.x_max, self.y_max),
            Point2::new(self.x_min, self.y_max),
        ]
    }

    /// Distances from `p` to the top, right, bottom and left edges. Negative
    /// when `p` lies outside on that side.
    pub fn distances_from(&self, p: Point2) -> [f64; 4] {
        [p.y - self.y_min, self.x_max - p.x, self.y_max - p.y, p.x - self.x_min]
    }

    pub fn contains_strictly(&self, p: Point2) -> bool {
        p.x > self.x_min && p.x < self.x_max && p.y > self.y_min && p.y < self.y_max
    }

    pub fn intersection_area(&self, other: &Hbb) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    pub fn enclosing(&self, other: &Hbb) -> Hbb {
        Hbb {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn iou(&self, other: &Hbb) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// GIoU for arbitrary (possibly disjoint) boxes.
    pub fn giou(&self, other: &Hbb) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        let circ = self.enclosing(other).area();
        (inter / union).clamp(0.0, 1.0) - empty_fraction(circ, union)
    }
}

/// Tight axis-aligned bounds of an oriented box.
pub fn circumscribed_hbb(obb: &Obb) -> Hbb {
    let v = obb.vertices();
    let mut h = Hbb {
        x_min: f64::INFINITY,
        y_min: f64::INFINITY,
        x_max: f64::NEG_INFINITY,
        y_max: f64::NEG_INFINITY,
    };
    for p in v {
        h.x_min = h.x_min.min(p.x);
        h.y_min = h.y_min.min(p.y);
        h.x_max = h.x_max.max(p.x);
        h.y_max = h.y_max.max(p.y);
    }
    h
}

pub fn obb_metrics(obb: &Obb) -> ObbMetrics {
    let v = obb.vertices();
    let sides = [0, 1, 2, 3].map(|j| v[j].distance(v[(j + 1) % 4]));
    ObbMetrics {
        sides,
        area: obb.area(),
        max_side: sides.iter().copied().fold(0.0, f64::max),
    }
}

/// Intermediate quantities of the distance-vector IoU/GIoU.
///
/// Both boxes share the reference point the distances are measured from, so
/// the overlap extents are sums of component-wise minima and the enclosing
/// extents sums of maxima.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceOverlap {
    pub area: f64,
    pub area_hat: f64,
    pub overlap: f64,
    pub enclosing: f64,
    pub union: f64,
}

impl DistanceOverlap {
    pub fn new(l: &[f64; 4], l_hat: &[f64; 4]) -> Result<Self, GeometryError> {
        validate_distances(l)?;
        validate_distances(l_hat)?;
        let area = (l[0] + l[2]) * (l[1] + l[3]);
        let area_hat = (l_hat[0] + l_hat[2]) * (l_hat[1] + l_hat[3]);
        let overlap = (l[0].min(l_hat[0]) + l[2].min(l_hat[2])) * (l[1].min(l_hat[1]) + l[3].min(l_hat[3]));
        let enclosing = (l[0].max(l_hat[0]) + l[2].max(l_hat[2])) * (l[1].max(l_hat[1]) + l[3].max(l_hat[3]));
        Ok(Self {
            area,
            area_hat,
            overlap,
            enclosing,
            union: area + area_hat - overlap,
        })
    }

    pub fn iou(&self) -> f64 {
        (self.overlap / self.union).clamp(0.0, 1.0)
    }

    pub fn giou(&self) -> f64 {
        self.iou() - empty_fraction(self.enclosing, self.union)
    }
}

/// Share of the enclosing box not covered by the union. Rounding can push
/// `union` a few ulps past `enclosing` for nested boxes; that reads as zero.
fn empty_fraction(enclosing: f64, union: f64) -> f64 {
    ((enclosing - union) / enclosing).max(0.0)
}

fn validate_distances(l: &[f64; 4]) -> Result<(), GeometryError> {
    let ok = l.iter().all(|v| v.is_finite() && *v >= 0.0) && l[0] + l[2] > 0.0 && l[1] + l[3] > 0.0;
    if ok {
        Ok(())
    } else {
        Err(GeometryError::InvalidDistances(*l))
    }
}

/// IoU of two horizontal boxes given by their edge distances from a shared
/// point (top, right, bottom, left).
pub fn hbb_iou(l: &[f64; 4], l_hat: &[f64; 4]) -> Result<f64, GeometryError> {
    Ok(DistanceOverlap::new(l, l_hat)?.iou())
}

/// GIoU counterpart of [`hbb_iou`], in `(-1, 1]`.
pub fn hbb_giou(l: &[f64; 4], l_hat: &[f64; 4]) -> Result<f64, GeometryError> {
    Ok(DistanceOverlap::new(l, l_hat)?.giou())
}

/// Keeps the part of `subject` on the inner side of the directed edge `a -> b`.
fn clip_half_plane(subject: &[Point2], a: Point2, b: Point2, out: &mut Vec<Point2>) {
    out.clear();
    let edge = b - a;
    let n = subject.len();
    for i in 0..n {
        let s = subject[i];
        let e = subject[(i + 1) % n];
        let ds = edge.cross(s - a);
        let de = edge.cross(e - a);
        let s_in = ds >= 0.0;
        let e_in = de >= 0.0;
        if s_in != e_in {
            let t = ds / (ds - de);
            push_merged(out, s + (e - s).scale(t));
        }
        if e_in {
            push_merged(out, e);
        }
    }
    if out.len() > 1 {
        let first = out[0];
        let last = out[out.len() - 1];
        if first.distance(last) < MERGE_EPS {
            out.pop();
        }
    }
}

fn push_merged(out: &mut Vec<Point2>, p: Point2) {
    if out.last().is_none_or(|q| q.distance(p) >= MERGE_EPS) {
        out.push(p);
    }
}

/// Intersection polygon of two oriented boxes.
pub fn intersection_polygon(a: &Obb, b: &Obb) -> Vec<Point2> {
    let mut poly: Vec<Point2> = b.vertices().to_vec();
    let mut scratch = Vec::with_capacity(8);
    let va = a.vertices();
    for i in 0..4 {
        clip_half_plane(&poly, va[i], va[(i + 1) % 4], &mut scratch);
        std::mem::swap(&mut poly, &mut scratch);
        if poly.len() < 3 {
            return Vec::new();
        }
    }
    poly
}

/// Exact IoU of two oriented boxes via convex clipping and the shoelace area.
pub fn polygon_iou(a: &Obb, b: &Obb) -> f64 {
    if a == b {
        return 1.0;
    }
    let ha = circumscribed_hbb(a);
    let hb = circumscribed_hbb(b);
    if ha.intersection_area(&hb) <= 0.0 {
        return 0.0;
    }
    let inter = polygon_area(&intersection_polygon(a, b));
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Pixel-counting IoU over a `grid x grid` lattice of sample points covering
/// the joint bounding box of both boxes.
///
/// Each lattice row is intersected with both convex boxes analytically, so a
/// row costs O(1) instead of O(grid) while counting exactly the same sample
/// points a per-pixel inside test would.
pub fn rasterized_iou(a: &Obb, b: &Obb, grid: usize) -> f64 {
    assert!(grid >= 1, "grid must be positive");
    let bounds = circumscribed_hbb(a).enclosing(&circumscribed_hbb(b));
    let dx = bounds.width() / grid as f64;
    let dy = bounds.height() / grid as f64;
    let mut count_a = 0u64;
    let mut count_b = 0u64;
    let mut count_ab = 0u64;
    // Sample x positions: x_min + (i + 0.5) dx for i in 0..grid.
    let columns = |span: Option<(f64, f64)>| -> Option<(i64, i64)> {
        let (lo, hi) = span?;
        let first = ((lo - bounds.x_min) / dx - 0.5).ceil().max(0.0) as i64;
        let last = ((hi - bounds.x_min) / dx - 0.5).floor().min(grid as f64 - 1.0) as i64;
        (first <= last).then_some((first, last))
    };
    for j in 0..grid {
        let y = bounds.y_min + (j as f64 + 0.5) * dy;
        let ca = columns(a.span_at(y));
        let cb = columns(b.span_at(y));
        if let Some((lo, hi)) = ca {
            count_a += (hi - lo + 1) as u64;
        }
        if let Some((lo, hi)) = cb {
            count_b += (hi - lo + 1) as u64;
        }
        if let (Some((la, ha)), Some((lb, hb))) = (ca, cb) {
            let lo = la.max(lb);
            let hi = ha.min(hb);
            if lo <= hi {
                count_ab += (hi - lo + 1) as u64;
            }
        }
    }
    let union = count_a + count_b - count_ab;
    if union == 0 {
        return 0.0;
    }
    count_ab as f64 / union as f64
}

/// Area of a box estimated by counting sample points on a lattice of
/// `grid x grid` over its circumscribed horizontal box.
pub fn rasterized_area(obb: &Obb, grid: usize) -> f64 {
    let h = circumscribed_hbb(obb);
    let dy = h.height() / grid as f64;
    let dx = h.width() / grid as f64;
    let mut count = 0u64;
    for j in 0..grid {
        let y = h.y_min + (j as f64 + 0.5) * dy;
        if let Some((lo, hi)) = obb.span_at(y) {
            let first = ((lo - h.x_min) / dx - 0.5).ceil().max(0.0) as i64;
            let last = ((hi - h.x_min) / dx - 0.5).floor().min(grid as f64 - 1.0) as i64;
            if first <= last {
                count += (last - first + 1) as u64;
            }
        }
    }
    count as f64 * dx * dy
}
