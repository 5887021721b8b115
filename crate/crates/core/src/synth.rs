//! Seeded synthetic scenes, label sets and predictions for tests, benchmarks
//! and the gradient check.

use rand::Rng;

use crate::assign::{AssignConfig, LabelScale, LabelTensorSet};
use crate::codec::CODE_LEN;
use crate::geometry::Obb;
use crate::io::dota::ObbAnnotation;
use crate::loss::{PredictionTensorSet, PROB_EPS};

/// A rotated rectangle with sides in `[min_side, max_side]`, centred inside
/// `[margin, extent - margin]` on both axes.
pub fn random_obb<R: Rng>(rng: &mut R, min_side: f64, max_side: f64, extent: f64, margin: f64) -> Obb {
    loop {
        let w = rng.random_range(min_side..=max_side);
        let h = rng.random_range(min_side..=max_side);
        let cx = rng.random_range(margin..=extent - margin);
        let cy = rng.random_range(margin..=extent - margin);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        if let Ok(obb) = Obb::from_rotated_rect(cx, cy, w, h, theta) {
            return obb;
        }
    }
}

/// `n` objects with sides between 8 px and a quarter of the image, fully
/// inside the image.
pub fn random_scene<R: Rng>(rng: &mut R, cfg: &AssignConfig, n: usize) -> Vec<ObbAnnotation> {
    let size = cfg.img_size as f64;
    let max_side = (size / 4.0).max(9.0);
    (0..n)
        .map(|_| ObbAnnotation {
            obb: random_obb(rng, 8.0, max_side, size, max_side * 0.75),
            class_id: rng.random_range(0..cfg.num_classes),
            difficult: false,
        })
        .collect()
}

/// Label tensors filled independently per cell, without an underlying
/// scene. Each cell is positive with probability `positive_rate`; positive
/// cells get a random heat, box code, class and area factor.
pub fn random_label_set<R: Rng>(
    rng: &mut R,
    shapes: &[(u32, usize, usize)],
    num_classes: usize,
    positive_rate: f64,
) -> LabelTensorSet {
    let mut next_id = 0;
    let scales = shapes
        .iter()
        .map(|&(stride, h, w)| {
            let mut s = LabelScale::empty(stride, h, w, num_classes);
            for y in 0..h {
                for x in 0..w {
                    if !rng.random_bool(positive_rate) {
                        continue;
                    }
                    s.obj[[y, x]] = 1.0;
                    s.heat[[y, x]] = rng.random_range(0.05..=1.0);
                    for c in 0..4 {
                        s.obb[[y, x, c]] = rng.random_range(0.2..4.0);
                    }
                    for c in 4..8 {
                        s.obb[[y, x, c]] = rng.random_range(0.0..1.0);
                    }
                    s.obb[[y, x, 8]] = rng.random_range(0.3..=1.0);
                    s.cls[[y, x, rng.random_range(0..num_classes)]] = 1.0;
                    s.region_id[[y, x]] = next_id;
                    s.xi[[y, x]] = rng.random_range(0.2..=1.0);
                    next_id += 1;
                }
            }
            s
        })
        .collect();
    LabelTensorSet { num_classes, scales }
}

/// Predictions drawn away from every clamp and branch boundary's
/// neighbourhood only by chance: objectness and class scores in
/// `[0.02, 0.98]`, distances in `[0.2, 4)`, glides in `[0, 1)`, area ratio
/// in `[0.3, 1]`.
pub fn random_predictions<R: Rng>(rng: &mut R, labels: &LabelTensorSet) -> PredictionTensorSet {
    let mut preds = PredictionTensorSet::zeros_like(labels);
    for p in &mut preds.scales {
        p.obj.mapv_inplace(|_| rng.random_range(0.02..=0.98));
        p.cls.mapv_inplace(|_| rng.random_range(0.02..=0.98));
        for ((_, _, c), v) in p.obb.indexed_iter_mut() {
            *v = match c {
                0..4 => rng.random_range(0.2..4.0),
                4..8 => rng.random_range(0.0..1.0),
                _ => rng.random_range(0.3..=1.0),
            };
        }
    }
    preds
}

/// Predictions that agree with the labels: objectness and class scores at
/// the clamp limits, box codes copied at positive cells.
pub fn perfect_predictions(labels: &LabelTensorSet) -> PredictionTensorSet {
    let mut preds = PredictionTensorSet::zeros_like(labels);
    for (p, l) in preds.scales.iter_mut().zip(&labels.scales) {
        p.obj
            .zip_mut_with(&l.obj, |o, &t| *o = if t > 0.5 { 1.0 - PROB_EPS } else { PROB_EPS });
        p.cls
            .zip_mut_with(&l.cls, |o, &t| *o = if t > 0.5 { 1.0 - PROB_EPS } else { PROB_EPS });
        p.obb.assign(&l.obb);
        debug_assert_eq!(p.obb.dim().2, CODE_LEN);
    }
    preds
}
