//! Turning prediction tensors into scored oriented boxes, and class-wise
//! rotated non-maximum suppression.

use rayon::prelude::*;

use crate::codec::{decode_with_fallback, ObbCode, CODE_LEN, DEFAULT_HBB_FALLBACK_AR};
use crate::geometry::{polygon_iou, Obb};
use crate::loss::{PredictionScale, PredictionTensorSet};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.2;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.45;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub obb: Obb,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Objectness times the best raw class score.
    ObjTimesClass,
    /// Objectness alone; the class is still the argmax.
    ObjOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub conf: f64,
    pub score_mode: ScoreMode,
    /// Area ratio at or above which a box is emitted as its HBB.
    pub hbb_fallback_ar: Option<f64>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            conf: DEFAULT_CONF_THRESHOLD,
            score_mode: ScoreMode::ObjTimesClass,
            hbb_fallback_ar: Some(DEFAULT_HBB_FALLBACK_AR),
        }
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values.enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (i, v)| if v > best.1 { (i, v) } else { best },
    )
}

/// Forces a raw prediction into the codec's valid ranges.
fn sanitize(raw: [f64; CODE_LEN]) -> ObbCode {
    let mut code = ObbCode::from_slice(&raw);
    code.l = code.l.map(|v| if v.is_finite() { v.max(1e-3) } else { 1e-3 });
    code.s = code.s.map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
    code.ar = if code.ar.is_finite() {
        code.ar.clamp(1e-6, 1.0)
    } else {
        1.0
    };
    code
}

fn decode_cell(raw: [f64; CODE_LEN], cell: (usize, usize), stride: f64, fallback: Option<f64>) -> Obb {
    let code = sanitize(raw);
    decode_with_fallback(&code, cell, stride, fallback)
        .or_else(|e| {
            log::debug!("cell {cell:?} at stride {stride}: {e}; using its HBB");
            decode_with_fallback(&code, cell, stride, Some(0.0))
        })
        .expect("a sanitized code always has a valid HBB")
}

fn decode_scale(p: &PredictionScale, cfg: &DecodeConfig) -> Vec<Detection> {
    let stride = p.stride as f64;
    let mut out = Vec::new();
    for y in 0..p.height() {
        for x in 0..p.width() {
            let obj = p.obj[[y, x]];
            let (class_id, best) = argmax(p.cls.slice(ndarray::s![y, x, ..]).iter().copied());
            let score = match cfg.score_mode {
                ScoreMode::ObjTimesClass => obj * best,
                ScoreMode::ObjOnly => obj,
            };
            if score.is_nan() || score < cfg.conf {
                continue;
            }
            let raw: [f64; CODE_LEN] = std::array::from_fn(|c| p.obb[[y, x, c]]);
            out.push(Detection {
                obb: decode_cell(raw, (x, y), stride, cfg.hbb_fallback_ar),
                class_id,
                score,
            });
        }
    }
    out
}

/// One detection per cell whose score reaches `cfg.conf`, in scale then
/// row-major order. Boxes whose glides do not form a valid quadrilateral
/// are emitted as their HBB.
pub fn decode_predictions(preds: &PredictionTensorSet, cfg: &DecodeConfig) -> Vec<Detection> {
    preds
        .scales
        .par_iter()
        .map(|s| decode_scale(s, cfg))
        .collect::<Vec<_>>()
        .concat()
}

/// Orders detections by descending score, then class, then input position.
pub fn sort_detections(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].class_id.cmp(&dets[b].class_id))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy class-wise suppression: a detection survives when its IoU with
/// every higher-ranked survivor of its class is at most `iou_thr`.
pub fn rotated_nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in sort_detections(dets) {
        let d = &dets[i];
        let clear = kept
            .iter()
            .filter(|k| k.class_id == d.class_id)
            .all(|k| polygon_iou(&k.obb, &d.obb) <= iou_thr);
        if clear {
            kept.push(d.clone());
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Hbb;

    fn square(x: f64, y: f64, side: f64) -> Obb {
        Obb::from_hbb(&Hbb::new(x, y, x + side, y + side).unwrap())
    }

    fn det(obb: Obb, class_id: usize, score: f64) -> Detection {
        Detection { obb, class_id, score }
    }

    fn one_scale(h: usize, w: usize, nc: usize) -> PredictionTensorSet {
        PredictionTensorSet {
            num_classes: nc,
            scales: vec![PredictionScale::zeros(8, h, w, nc)],
        }
    }

    #[test]
    fn below_threshold_is_empty() {
        let mut p = one_scale(4, 4, 2);
        p.scales[0].obj.fill(0.1);
        p.scales[0].cls.fill(1.0);
        assert!(decode_predictions(&p, &DecodeConfig::default()).is_empty());
    }

    #[test]
    fn product_score() {
        let mut p = one_scale(4, 4, 3);
        let s = &mut p.scales[0];
        s.obj[[1, 2]] = 0.9;
        s.cls[[1, 2, 1]] = 0.8;
        s.cls[[1, 2, 2]] = 0.3;
        for c in 0..4 {
            s.obb[[1, 2, c]] = 1.0;
        }
        s.obb[[1, 2, 8]] = 1.0;
        let dets = decode_predictions(&p, &DecodeConfig::default());
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 1);
        assert!((dets[0].score - 0.72).abs() < 1e-12);
        // cell (2, 1) at stride 8 is centred on (20, 12)
        let v = dets[0].obb.vertices();
        assert_eq!((v[0].x, v[0].y), (12.0, 4.0));
        assert_eq!((v[2].x, v[2].y), (28.0, 20.0));

        let obj_only = DecodeConfig {
            score_mode: ScoreMode::ObjOnly,
            ..DecodeConfig::default()
        };
        assert_eq!(decode_predictions(&p, &obj_only)[0].score, 0.9);
    }

    #[test]
    fn invalid_codes_still_decode() {
        let mut p = one_scale(2, 2, 1);
        p.scales[0].obj.fill(0.9);
        p.scales[0].cls.fill(0.9);
        p.scales[0].obb.fill(f64::NAN);
        p.scales[0].obb[[0, 0, 4]] = 1.0;
        p.scales[0].obb[[0, 0, 6]] = 1.0;
        p.scales[0].obb[[0, 0, 8]] = 0.5;
        assert_eq!(decode_predictions(&p, &DecodeConfig::default()).len(), 4);
    }

    #[test]
    fn nms_basics() {
        let a = det(square(0.0, 0.0, 10.0), 0, 0.9);
        let b = det(square(0.0, 0.0, 10.0), 0, 0.8);
        let kept = rotated_nms(&[b.clone(), a.clone()], 0.45);
        assert_eq!(kept, vec![a.clone()]);

        let far = det(square(50.0, 0.0, 10.0), 0, 0.8);
        let other_class = det(square(0.0, 0.0, 10.0), 1, 0.7);
        let kept = rotated_nms(&[far.clone(), other_class.clone(), a.clone()], 0.45);
        assert_eq!(kept, vec![a, far, other_class]);
    }

    #[test]
    fn equal_scores_prefer_lower_class_then_input_order() {
        let x = det(square(0.0, 0.0, 10.0), 1, 0.5);
        let y = det(square(20.0, 0.0, 10.0), 0, 0.5);
        let z = det(square(40.0, 0.0, 10.0), 0, 0.5);
        let order = sort_detections(&[x, y, z]);
        assert_eq!(order, vec![1, 2, 0]);
    }
}
