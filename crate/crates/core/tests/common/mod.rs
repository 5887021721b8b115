//! Reference implementations and scene generators shared by the integration
//! tests. The references are deliberately naive so they can serve as
//! oracles for the optimised library code.
#![allow(dead_code)]

use gghl::assign::{route_scale, AssignConfig};
use gghl::decode::Detection;
use gghl::geometry::{circumscribed_hbb, polygon_iou, Obb};
use gghl::io::dota::ObbAnnotation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest distance between vertices with the same canonical index.
pub fn max_vertex_distance(a: &Obb, b: &Obb) -> f64 {
    a.vertices()
        .iter()
        .zip(b.vertices())
        .map(|(p, q)| p.distance(*q))
        .fold(0.0, f64::max)
}

/// [`max_vertex_distance`] minimised over cyclic relabelings of `b`, so two
/// boxes whose canonical starting vertices differ still compare by shape.
pub fn cyclic_vertex_distance(a: &Obb, b: &Obb) -> f64 {
    let (va, vb) = (a.vertices(), b.vertices());
    (0..4)
        .map(|k| (0..4).map(|i| va[i].distance(vb[(i + k) % 4])).fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min)
}

/// Greedy NMS written as repeated arg-max over the still-alive set: take the
/// best remaining detection, then kill everything of its class that
/// overlaps it by more than `thr`.
pub fn brute_force_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if !alive[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let (di, db) = (&dets[i], &dets[b]);
                    let better = di.score > db.score || (di.score == db.score && di.class_id < db.class_id);
                    Some(if better { i } else { b })
                }
            };
        }
        let Some(b) = best else { break };
        alive[b] = false;
        for i in 0..dets.len() {
            if alive[i] && dets[i].class_id == dets[b].class_id && polygon_iou(&dets[b].obb, &dets[i].obb) > thr {
                alive[i] = false;
            }
        }
        kept.push(dets[b].clone());
    }
    kept
}

/// Per-class AP from a full IoU table, computing the envelope at every
/// recall step by scanning all later points. Returns `None` for classes
/// without non-difficult ground truth.
pub fn brute_force_ap(
    images: &[(Vec<Detection>, Vec<ObbAnnotation>)],
    num_classes: usize,
    thr: f64,
) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|c| {
            let npos = images
                .iter()
                .flat_map(|(_, g)| g)
                .filter(|g| g.class_id == c && !g.difficult)
                .count();
            if npos == 0 {
                return None;
            }
            let mut dets: Vec<(f64, usize, usize)> = Vec::new();
            for (i, (d, _)) in images.iter().enumerate() {
                for (j, det) in d.iter().enumerate() {
                    if det.class_id == c {
                        dets.push((det.score, i, j));
                    }
                }
            }
            dets.sort_by(|a, b| b.0.total_cmp(&a.0));
            let ious: Vec<Vec<Vec<f64>>> = images
                .iter()
                .map(|(d, g)| {
                    d.iter()
                        .map(|det| g.iter().map(|gt| polygon_iou(&det.obb, &gt.obb)).collect())
                        .collect()
                })
                .collect();
            let mut taken: Vec<Vec<bool>> = images.iter().map(|(_, g)| vec![false; g.len()]).collect();
            let mut flags: Vec<bool> = Vec::new();
            for &(_, i, j) in &dets {
                let gts = &images[i].1;
                let mut best = None;
                let mut best_iou = thr;
                let mut difficult_hit = false;
                for (g, gt) in gts.iter().enumerate() {
                    let iou = ious[i][j][g];
                    if gt.class_id != c || iou < thr {
                        continue;
                    }
                    if gt.difficult {
                        difficult_hit = true;
                        continue;
                    }
                    if !taken[i][g] && (best.is_none() || iou > best_iou) {
                        best = Some(g);
                        best_iou = iou;
                    }
                }
                match best {
                    Some(g) => {
                        taken[i][g] = true;
                        flags.push(true);
                    }
                    None if difficult_hit => {}
                    None => flags.push(false),
                }
            }
            let mut points = Vec::new();
            let mut tp = 0;
            for (k, &f) in flags.iter().enumerate() {
                tp += f as usize;
                points.push((tp as f64 / npos as f64, tp as f64 / (k + 1) as f64));
            }
            let mut ap = 0.0;
            let mut prev = 0.0;
            for k in 0..points.len() {
                let envelope = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
                ap += (points[k].0 - prev) * envelope;
                prev = points[k].0;
            }
            Some(ap)
        })
        .collect()
}

/// Detections packed into a small region so that many pairs overlap. A few
/// scores are repeated to exercise tie handling.
pub fn crowded_detections(rng: &mut ChaCha8Rng, n: usize, num_classes: usize) -> Vec<Detection> {
    let mut out: Vec<Detection> = Vec::with_capacity(n);
    for _ in 0..n {
        let w = rng.random_range(10.0..40.0);
        let h = rng.random_range(10.0..40.0);
        let cx = rng.random_range(40.0..120.0);
        let cy = rng.random_range(40.0..120.0);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let score = if !out.is_empty() && rng.random_bool(0.1) {
            out[rng.random_range(0..out.len())].score
        } else {
            rng.random_range(0.0..1.0)
        };
        out.push(Detection {
            obb: Obb::from_rotated_rect(cx, cy, w, h, theta).unwrap(),
            class_id: rng.random_range(0..num_classes),
            score,
        });
    }
    out
}

/// Side a box needs at stride `stride` so that its positive ellipse holds a
/// disk of radius `sqrt(2)/2` cells, which always contains a cell centre.
pub fn guaranteed_min_side(stride: f64, t_iou: f64) -> f64 {
    let k = (1.0 - t_iou) / 2.0;
    std::f64::consts::SQRT_2 / 2.0 * 2.0 * stride / k * 1.001
}

/// Pairwise disjoint boxes spanning all three scales, each large enough in
/// both sides to own at least one positive cell at its routed scale.
pub fn well_posed_scene(rng: &mut ChaCha8Rng, cfg: &AssignConfig, n: usize) -> Vec<ObbAnnotation> {
    let size = cfg.img_size as f64;
    let mut out: Vec<ObbAnnotation> = Vec::new();
    let mut attempts = 0;
    while out.len() < n && attempts < 2000 {
        attempts += 1;
        let long = rng.random_range(36.0..size * 0.6);
        let m = route_scale(long, cfg).unwrap();
        let min_side = guaranteed_min_side(cfg.strides[m] as f64, cfg.t_iou);
        if min_side > long {
            continue;
        }
        let short = rng.random_range(min_side..=long);
        let half_diag = (long * long + short * short).sqrt() / 2.0;
        let cx = rng.random_range(half_diag..size - half_diag);
        let cy = rng.random_range(half_diag..size - half_diag);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let obb = Obb::from_rotated_rect(cx, cy, long, short, theta).unwrap();
        let hbb = circumscribed_hbb(&obb);
        if out
            .iter()
            .any(|a| circumscribed_hbb(&a.obb).intersection_area(&hbb) > 0.0)
        {
            continue;
        }
        out.push(ObbAnnotation {
            obb,
            class_id: rng.random_range(0..cfg.num_classes),
            difficult: false,
        });
    }
    out
}
