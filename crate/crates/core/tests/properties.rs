mod common;

use gghl::assign::{route_scale, AssignConfig};
use gghl::codec::{cell_center, decode_with_fallback, encode_at};
use gghl::decode::{rotated_nms, Detection};
use gghl::eval::average_precision_single;
use gghl::geometry::{canonicalize_obb, circumscribed_hbb, hbb_giou, hbb_iou, polygon_iou, Hbb, Obb};
use gghl::io::dota::ObbAnnotation;
use gghl::io::tensor_file::TensorFile;
use gghl::loss::{total_loss, LossConfig};
use gghl::synth::{random_label_set, random_predictions};
use proptest::prelude::*;

fn obb_strategy() -> impl Strategy<Value = Obb> {
    (
        10.0..190.0f64,
        10.0..190.0f64,
        1.0..80.0f64,
        1.0..80.0f64,
        0.0..std::f64::consts::PI,
    )
        .prop_map(|(cx, cy, w, h, t)| Obb::from_rotated_rect(cx, cy, w, h, t).unwrap())
}

fn distances() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(0.0..10.0f64).prop_filter("non-empty box", |l| l[0] + l[2] > 1e-3 && l[1] + l[3] > 1e-3)
}

fn detections() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((obb_strategy(), 0..3usize, 0.0..1.0f64), 0..40).prop_map(|v| {
        v.into_iter()
            .map(|(obb, class_id, score)| Detection { obb, class_id, score })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in obb_strategy(), b in obb_strategy()) {
        let ab = polygon_iou(&a, &b);
        prop_assert!((ab - polygon_iou(&b, &a)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(polygon_iou(&a, &a), 1.0);
    }

    #[test]
    fn axis_aligned_iou_matches_box_formula(
        x in 0.0..50.0f64, y in 0.0..50.0f64, w in 1.0..40.0f64, h in 1.0..40.0f64,
        x2 in 0.0..50.0f64, y2 in 0.0..50.0f64, w2 in 1.0..40.0f64, h2 in 1.0..40.0f64,
    ) {
        let a = Hbb::new(x, y, x + w, y + h).unwrap();
        let b = Hbb::new(x2, y2, x2 + w2, y2 + h2).unwrap();
        let got = polygon_iou(&Obb::from_hbb(&a), &Obb::from_hbb(&b));
        prop_assert!((got - a.iou(&b)).abs() < 1e-12);
    }

    #[test]
    fn canonical_order_ignores_input_order(obb in obb_strategy(), shift in 0..4usize, reverse in any::<bool>()) {
        let mut raw = *obb.vertices();
        raw.rotate_left(shift);
        if reverse {
            raw.reverse();
        }
        let again = canonicalize_obb(raw).unwrap();
        prop_assert_eq!(&again, &obb);
        prop_assert_eq!(canonicalize_obb(*again.vertices()).unwrap(), again);
    }

    #[test]
    fn giou_never_exceeds_iou(l in distances(), lh in distances()) {
        let iou = hbb_iou(&l, &lh).unwrap();
        let giou = hbb_giou(&l, &lh).unwrap();
        prop_assert!(giou <= iou);
        prop_assert!(giou > -1.0);
    }

    #[test]
    fn codec_roundtrip_at_interior_cells(obb in obb_strategy(), fx in 0.0..1.0f64, fy in 0.0..1.0f64) {
        let stride = 8.0;
        let h = circumscribed_hbb(&obb);
        let cell = (
            ((h.x_min + fx * h.width()) / stride) as usize,
            ((h.y_min + fy * h.height()) / stride) as usize,
        );
        prop_assume!(h.contains_strictly(cell_center(cell, stride)));
        let code = encode_at(&obb, cell, stride).unwrap();
        prop_assert!(code.validate().is_ok());
        let back = decode_with_fallback(&code, cell, stride, None).unwrap();
        prop_assert!(common::max_vertex_distance(&obb, &back) < 1e-9);
        // moving box and cell together by whole cells leaves the code unchanged
        let moved = encode_at(&obb.translate(2.0 * stride, 3.0 * stride), (cell.0 + 2, cell.1 + 3), stride).unwrap();
        for (a, b) in code.to_array().iter().zip(moved.to_array()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn routing_is_monotone(a in 1.01..1131.0f64, b in 1.01..1131.0f64) {
        let cfg = AssignConfig::new(1);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(route_scale(lo, &cfg).unwrap() <= route_scale(hi, &cfg).unwrap());
    }

    #[test]
    fn nms_output_is_clean_and_stable(dets in detections(), thr in 0.1..0.9f64) {
        let kept = rotated_nms(&dets, thr);
        prop_assert_eq!(rotated_nms(&kept, thr), kept.clone());
        prop_assert_eq!(&kept, &common::brute_force_nms(&dets, thr));
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(dets.contains(a));
            for b in &kept[i + 1..] {
                prop_assert!(a.score >= b.score);
                if a.class_id == b.class_id {
                    prop_assert!(polygon_iou(&a.obb, &b.obb) <= thr);
                }
            }
        }
    }

    #[test]
    fn ap_depends_only_on_score_order(
        dets in detections(),
        gt in prop::collection::vec((obb_strategy(), 0..3usize), 1..15),
    ) {
        let gt: Vec<ObbAnnotation> = gt
            .into_iter()
            .map(|(obb, class_id)| ObbAnnotation { obb, class_id, difficult: false })
            .collect();
        let base = average_precision_single(&dets, &gt, 3, 0.5);
        let squashed: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { score: d.score.powi(3) * 0.5 + 0.1, ..d.clone() })
            .collect();
        let other = average_precision_single(&squashed, &gt, 3, 0.5);
        prop_assert_eq!(&base.classes, &other.classes);
        let brute = common::brute_force_ap(&[(dets, gt)], 3, 0.5);
        for (c, b) in base.classes.iter().zip(brute) {
            match (c.ap, b) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_is_finite_and_non_negative(seed in any::<u64>(), gamma in 0.0..3.0f64, rate in 0.0..0.6f64) {
        let mut r = common::rng(seed);
        let labels = random_label_set(&mut r, &[(8, 6, 6), (16, 3, 3)], 2, rate);
        let preds = random_predictions(&mut r, &labels);
        let cfg = LossConfig { gamma, ..LossConfig::default() };
        let b = total_loss(&labels, &preds, &cfg).unwrap();
        prop_assert!(b.total.is_finite() && b.total >= 0.0);
        prop_assert!((b.total - (b.obj_pos + b.obj_neg + b.obb + b.cls)).abs() < 1e-9 * b.total.max(1.0));
        let per_scale: f64 = b.per_scale.iter().map(|p| p.total()).sum();
        prop_assert!((b.total - per_scale).abs() < 1e-9 * b.total.max(1.0));
    }

    #[test]
    fn tensor_file_round_trip(seed in any::<u64>()) {
        let labels = random_label_set(&mut common::rng(seed), &[(8, 5, 7), (16, 3, 4), (32, 2, 2)], 4, 0.3);
        let tf = labels.to_tensor_file();
        let back = TensorFile::from_bytes(&tf.to_bytes().unwrap()).unwrap();
        // values pass through f32
        for (a, b) in tf.scales.iter().zip(&back.scales) {
            prop_assert_eq!(a.stride, b.stride);
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert_eq!(*y, *x as f32 as f64);
            }
        }
    }
}
