//! Average precision of oriented detections against ground truth.
//!
//! Matching is per class and per image: detections are visited in
//! descending score order and each takes the unmatched ground-truth box of
//! its class with the highest IoU at or above the threshold. Boxes flagged
//! difficult never count as ground truth; a detection whose only match is a
//! difficult box is ignored rather than counted as a false positive.

use rayon::prelude::*;

use crate::decode::Detection;
use crate::geometry::polygon_iou;
use crate::io::dota::ObbAnnotation;

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Copy)]
pub struct ImageEval<'a> {
    pub detections: &'a [Detection],
    pub ground_truth: &'a [ObbAnnotation],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEval {
    pub class_id: usize,
    pub gt_count: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `None` for classes without ground truth.
    pub ap: Option<f64>,
    /// `(recall, precision)` after each counted detection.
    pub pr: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub iou_thr: f64,
    pub classes: Vec<ClassEval>,
    /// Mean AP over classes with ground truth; `None` when there are none.
    pub map: Option<f64>,
}

impl EvalReport {
    pub fn tp(&self) -> usize {
        self.classes.iter().map(|c| c.tp).sum()
    }

    pub fn fp(&self) -> usize {
        self.classes.iter().map(|c| c.fp).sum()
    }

    pub fn fn_(&self) -> usize {
        self.classes.iter().map(|c| c.fn_).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Area under the monotone precision envelope, summed over the recall
/// steps of `pr`.
pub fn envelope_ap(pr: &[(f64, f64)]) -> f64 {
    let mut prec: Vec<f64> = pr.iter().map(|p| p.1).collect();
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(r, _), &p) in pr.iter().zip(&prec) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// Outcome of every detection of `class_id`, in the order they were visited,
/// together with that order as `(image, index)` pairs.
pub fn match_class(images: &[ImageEval], class_id: usize, iou_thr: f64) -> Vec<((usize, usize), Outcome)> {
    let mut order: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| {
            im.detections
                .iter()
                .enumerate()
                .filter(|(_, d)| d.class_id == class_id)
                .map(move |(j, _)| (i, j))
        })
        .collect();
    // stable: equal scores keep image then input order
    order.sort_by(|a, b| {
        let sa = images[a.0].detections[a.1].score;
        let sb = images[b.0].detections[b.1].score;
        sb.total_cmp(&sa)
    });

    let mut matched: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.ground_truth.len()]).collect();
    order
        .into_iter()
        .map(|(i, j)| {
            let det = &images[i].detections[j];
            let mut best: Option<(usize, f64)> = None;
            let mut hits_difficult = false;
            for (g, gt) in images[i].ground_truth.iter().enumerate() {
                if gt.class_id != class_id {
                    continue;
                }
                let iou = polygon_iou(&det.obb, &gt.obb);
                if iou < iou_thr {
                    continue;
                }
                if gt.difficult {
                    hits_difficult = true;
                } else if !matched[i][g] && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            let outcome = match best {
                Some((g, _)) => {
                    matched[i][g] = true;
                    Outcome::TruePositive
                }
                None if hits_difficult => Outcome::Ignored,
                None => Outcome::FalsePositive,
            };
            ((i, j), outcome)
        })
        .collect()
}

fn eval_class(images: &[ImageEval], class_id: usize, iou_thr: f64) -> ClassEval {
    let gt_count = images
        .iter()
        .flat_map(|im| im.ground_truth)
        .filter(|g| g.class_id == class_id && !g.difficult)
        .count();
    let outcomes = match_class(images, class_id, iou_thr);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut pr = Vec::new();
    for (_, o) in outcomes {
        match o {
            Outcome::TruePositive => tp += 1,
            Outcome::FalsePositive => fp += 1,
            Outcome::Ignored => continue,
        }
        if gt_count > 0 {
            pr.push((tp as f64 / gt_count as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    ClassEval {
        class_id,
        gt_count,
        tp,
        fp,
        fn_: gt_count - tp,
        ap: (gt_count > 0).then(|| envelope_ap(&pr)),
        pr,
    }
}

/// Per-class AP and mAP over a set of images.
pub fn average_precision(images: &[ImageEval], num_classes: usize, iou_thr: f64) -> EvalReport {
    let classes: Vec<ClassEval> = (0..num_classes)
        .into_par_iter()
        .map(|c| eval_class(images, c, iou_thr))
        .collect();
    let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    let map = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
    EvalReport { iou_thr, classes, map }
}

/// [`average_precision`] for a single image.
pub fn average_precision_single(
    detections: &[Detection],
    ground_truth: &[ObbAnnotation],
    num_classes: usize,
    iou_thr: f64,
) -> EvalReport {
    average_precision(
        &[ImageEval {
            detections,
            ground_truth,
        }],
        num_classes,
        iou_thr,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Hbb, Obb};

    fn square(x: f64, side: f64) -> Obb {
        Obb::from_hbb(&Hbb::new(x, 0.0, x + side, side).unwrap())
    }

    fn gt(obb: Obb, class_id: usize, difficult: bool) -> ObbAnnotation {
        ObbAnnotation {
            obb,
            class_id,
            difficult,
        }
    }

    fn det(obb: Obb, class_id: usize, score: f64) -> Detection {
        Detection { obb, class_id, score }
    }

    #[test]
    fn perfect_detections() {
        let gts = vec![gt(square(0.0, 10.0), 0, false), gt(square(20.0, 10.0), 1, false)];
        let dets = vec![det(square(0.0, 10.0), 0, 0.3), det(square(20.0, 10.0), 1, 0.9)];
        let r = average_precision_single(&dets, &gts, 3, 0.5);
        assert_eq!(r.classes[0].ap, Some(1.0));
        assert_eq!(r.classes[1].ap, Some(1.0));
        assert_eq!(r.classes[2].ap, None);
        assert_eq!(r.map, Some(1.0));
    }

    #[test]
    fn no_detections() {
        let gts = vec![gt(square(0.0, 10.0), 0, false)];
        let r = average_precision_single(&[], &gts, 1, 0.5);
        assert_eq!(r.classes[0].ap, Some(0.0));
        assert_eq!(r.fn_(), 1);
        assert_eq!(average_precision_single(&[], &[], 2, 0.5).map, None);
    }

    #[test]
    fn hand_computed_curve() {
        // TP, FP, TP over 2 GT: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
        let gts = vec![gt(square(0.0, 10.0), 0, false), gt(square(20.0, 10.0), 0, false)];
        let dets = vec![
            det(square(0.0, 10.0), 0, 0.9),
            det(square(50.0, 10.0), 0, 0.8),
            det(square(20.0, 10.0), 0, 0.7),
        ];
        let r = average_precision_single(&dets, &gts, 1, 0.5);
        let ap = r.classes[0].ap.unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!((r.tp(), r.fp(), r.fn_()), (2, 1, 0));
    }

    #[test]
    fn duplicate_is_false_positive() {
        let gts = vec![gt(square(0.0, 10.0), 0, false)];
        let dets = vec![det(square(0.0, 10.0), 0, 0.9), det(square(0.5, 10.0), 0, 0.8)];
        let r = average_precision_single(&dets, &gts, 1, 0.5);
        assert_eq!((r.tp(), r.fp()), (1, 1));
        assert_eq!(r.classes[0].ap, Some(1.0));
    }

    #[test]
    fn difficult_boxes_are_ignored() {
        let gts = vec![gt(square(0.0, 10.0), 0, false), gt(square(20.0, 10.0), 0, true)];
        let dets = vec![det(square(20.0, 10.0), 0, 0.95), det(square(0.0, 10.0), 0, 0.9)];
        let r = average_precision_single(&dets, &gts, 1, 0.5);
        assert_eq!(r.classes[0].gt_count, 1);
        assert_eq!((r.tp(), r.fp()), (1, 0));
        assert_eq!(r.classes[0].ap, Some(1.0));
    }

    #[test]
    fn takes_best_unmatched_overlap() {
        // the detection overlaps both GT; the better overlap is already
        // taken, so it falls to the other one
        let gts = vec![gt(square(0.0, 10.0), 0, false), gt(square(3.0, 10.0), 0, false)];
        let dets = vec![det(square(0.0, 10.0), 0, 0.9), det(square(1.0, 10.0), 0, 0.8)];
        let r = average_precision_single(&dets, &gts, 1, 0.5);
        assert_eq!((r.tp(), r.fp()), (2, 0));
    }
}
