mod common;

use gghl::assign::{
    area_normalization, assignment_stats, generate_heatmaps, route_scale, AssignConfig, LabelTensorSet, BACKGROUND,
};
use gghl::decode::{decode_predictions, rotated_nms, DecodeConfig};
use gghl::gaussian::region_from_obb;
use gghl::geometry::{obb_metrics, Obb, Point2};
use gghl::io::dota::ObbAnnotation;
use gghl::io::render::heatmap_png_bytes;
use gghl::io::tensor_file::{read_labels, TensorFile};
use gghl::loss::{finite_diff_check, joint_log_likelihood, total_loss, LossConfig};
use gghl::synth::{perfect_predictions, random_label_set, random_predictions, random_scene};

use common::rng;

fn ann(obb: Obb, class_id: usize) -> ObbAnnotation {
    ObbAnnotation {
        obb,
        class_id,
        difficult: false,
    }
}

/// Owner of every cell recomputed over the whole grid: the annotation with
/// the largest density above its threshold, lowest index on ties.
fn reference_owners(anns: &[ObbAnnotation], cfg: &AssignConfig) -> Vec<ndarray::Array2<i32>> {
    (0..3)
        .map(|m| {
            let (h, w) = cfg.grid_shape(m);
            let stride = cfg.strides[m] as f64;
            ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
                let p = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                let mut owner = (BACKGROUND, 0.0);
                for (i, a) in anns.iter().enumerate() {
                    if route_scale(obb_metrics(&a.obb).max_side, cfg).unwrap() != m {
                        continue;
                    }
                    let r = region_from_obb(&a.obb, stride, cfg.t_iou).unwrap();
                    let f = r.value(p);
                    if f > r.thr && f > owner.1 {
                        owner = (i as i32, f);
                    }
                }
                owner.0
            })
        })
        .collect()
}

#[test]
fn ownership_matches_whole_grid_reference() {
    let cfg = AssignConfig::new(15);
    for seed in 0..5 {
        let scene = random_scene(&mut rng(seed), &cfg, 30);
        let labels = generate_heatmaps(&scene, &cfg).unwrap();
        let owners = reference_owners(&scene, &cfg);
        let mut counts = vec![0usize; scene.len()];
        for (s, o) in labels.scales.iter().zip(&owners) {
            assert_eq!(s.region_id, *o);
            for &id in o.iter().filter(|&&id| id != BACKGROUND) {
                counts[id as usize] += 1;
            }
        }
        let stats = assignment_stats(&labels, &scene);
        assert_eq!(stats.per_object_positives, counts);
        assert_eq!(stats.mismatch, counts.iter().filter(|&&n| n == 0).count());
        for s in &labels.scales {
            for ((y, x), &id) in s.region_id.indexed_iter() {
                if id == BACKGROUND {
                    assert_eq!((s.obj[[y, x]], s.heat[[y, x]], s.xi[[y, x]]), (0.0, 0.0, 1.0));
                } else {
                    assert_eq!(s.xi[[y, x]], area_normalization(counts[id as usize]));
                    assert!(s.heat[[y, x]] > 0.0 && s.heat[[y, x]] <= 1.0);
                    assert_eq!(s.cls[[y, x, scene[id as usize].class_id]], 1.0);
                }
            }
        }
    }
}

#[test]
fn identical_boxes_go_to_the_lower_index() {
    let cfg = AssignConfig::new(2);
    let obb = Obb::from_rotated_rect(200.0, 200.0, 60.0, 40.0, 0.3).unwrap();
    let scene = [ann(obb, 1), ann(obb, 0)];
    let labels = generate_heatmaps(&scene, &cfg).unwrap();
    let stats = assignment_stats(&labels, &scene);
    assert!(stats.per_object_positives[0] > 0);
    assert_eq!(stats.per_object_positives[1], 0);
    assert_eq!(stats.mismatch, 1);
}

#[test]
fn overlap_goes_to_the_denser_region() {
    let cfg = AssignConfig::new(2);
    let a = Obb::from_rotated_rect(200.0, 200.0, 60.0, 50.0, 0.0).unwrap();
    let b = Obb::from_rotated_rect(212.0, 200.0, 60.0, 50.0, 0.0).unwrap();
    let scene = [ann(a, 0), ann(b, 1)];
    let labels = generate_heatmaps(&scene, &cfg).unwrap();
    let s = &labels.scales[0];
    // cell centres at x = 196 and 212 px: the first sits 4 px from a's centre
    // and 16 px from b's; the second is on b's centre
    assert_eq!(s.region_id[[24, 24]], 0);
    assert_eq!(s.region_id[[24, 26]], 1);
    assert_eq!(s.region_id, reference_owners(&scene, &cfg)[0]);
}

#[test]
fn same_result_on_any_thread_count() {
    let cfg = AssignConfig::new(15);
    let scene = random_scene(&mut rng(3), &cfg, 40);
    let lcfg = LossConfig::default();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let labels = generate_heatmaps(&scene, &cfg).unwrap();
            let preds = random_predictions(&mut rng(4), &labels);
            let loss = total_loss(&labels, &preds, &lcfg).unwrap().total;
            let dets = decode_predictions(&preds, &DecodeConfig::default());
            (labels, loss.to_bits(), dets)
        })
    };
    let one = run(1);
    for threads in [2, 4, 7] {
        assert!(run(threads) == one);
    }
}

/// Intensity-weighted second moments of a grayscale image.
fn moments(pixels: &[u8], width: usize) -> (f64, f64, f64) {
    let (mut m0, mut mx, mut my) = (0.0, 0.0, 0.0);
    for (i, &p) in pixels.iter().enumerate() {
        let (x, y) = ((i % width) as f64, (i / width) as f64);
        m0 += p as f64;
        mx += p as f64 * x;
        my += p as f64 * y;
    }
    let (cx, cy) = (mx / m0, my / m0);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (i, &p) in pixels.iter().enumerate() {
        let (dx, dy) = ((i % width) as f64 - cx, (i / width) as f64 - cy);
        sxx += p as f64 * dx * dx;
        syy += p as f64 * dy * dy;
        sxy += p as f64 * dx * dy;
    }
    (sxx / m0, syy / m0, sxy / m0)
}

#[test]
fn rendered_heatmap_follows_the_box_shape() {
    // a weight that depends on the Mahalanobis distance alone has covariance
    // proportional to the region's, so the principal axes of the rendered
    // map follow the box: same direction, axis ratio equal to the side ratio
    let cfg = AssignConfig {
        img_size: 1600,
        t_iou: 0.1,
        ..AssignConfig::new(1)
    };
    let theta = 0.5;
    let obb = Obb::from_rotated_rect(800.0, 800.0, 1000.0, 500.0, theta).unwrap();
    let labels = generate_heatmaps(&[ann(obb, 0)], &cfg).unwrap();
    let heat = &labels.scales[2].heat;
    let bytes = heatmap_png_bytes(heat).unwrap();
    let mut reader = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    let (sxx, syy, sxy) = moments(&buf[..info.buffer_size()], info.width as usize);
    let mean = (sxx + syy) / 2.0;
    let diff = (((sxx - syy) / 2.0).powi(2) + sxy * sxy).sqrt();
    let ratio = ((mean + diff) / (mean - diff)).sqrt();
    assert!((ratio / 2.0 - 1.0).abs() < 0.1, "axis ratio {ratio}");
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    assert!((angle - theta).abs() < 0.05, "angle {angle}");
}

#[test]
fn golden_file_layout() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden/scene.gghl");
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"GGHLTENS");
    assert_eq!(u16::from_le_bytes([bytes[8], bytes[9]]), 1);
    assert_eq!(bytes[10], 3);
    // three scales of 16, 8 and 4 cells square, 13 + 2 channels, f32 payload
    let header = 11 + 3 * (2 + 4 + 4 + 4);
    let payload = (16 * 16 + 8 * 8 + 4 * 4) * 15 * 4;
    assert_eq!(bytes.len(), header + payload);
    let tf = TensorFile::from_bytes(&bytes).unwrap();
    let strides: Vec<u32> = tf.scales.iter().map(|s| s.stride).collect();
    assert_eq!(strides, [8, 16, 32]);
    let labels: LabelTensorSet = read_labels(&path).unwrap();
    assert_eq!(labels.num_classes, 2);
    let positives: usize = labels.scales.iter().map(|s| s.positive_count()).sum();
    assert_eq!(positives, 5);
}

#[test]
fn perfect_predictions_decode_to_the_scene() {
    let cfg = AssignConfig::new(3);
    let scene = common::well_posed_scene(&mut rng(21), &cfg, 10);
    let labels = generate_heatmaps(&scene, &cfg).unwrap();
    let exact = DecodeConfig {
        hbb_fallback_ar: None,
        ..DecodeConfig::default()
    };
    let dets = rotated_nms(&decode_predictions(&perfect_predictions(&labels), &exact), 0.45);
    assert_eq!(dets.len(), scene.len());
    for a in &scene {
        assert!(dets
            .iter()
            .any(|d| d.class_id == a.class_id && common::max_vertex_distance(&a.obb, &d.obb) < 1e-9));
    }
}

fn squared_error_sum(labels: &LabelTensorSet, preds: &gghl::loss::PredictionTensorSet) -> f64 {
    let mut total = 0.0;
    for (l, p) in labels.scales.iter().zip(&preds.scales) {
        for ((y, x), &id) in l.region_id.indexed_iter() {
            if id != BACKGROUND {
                total += (0..9)
                    .map(|c| (l.obb[[y, x, c]] - p.obb[[y, x, c]]).powi(2))
                    .sum::<f64>();
            }
        }
    }
    total
}

#[test]
fn likelihood_sigma_doubling() {
    // only the Gaussian box term depends on sigma:
    // ll(s) - ll(2s) = n ln 2 - 3 E / (8 s^2)
    let labels = random_label_set(&mut rng(8), &[(8, 12, 12), (16, 6, 6)], 3, 0.4);
    let npos: usize = labels.scales.iter().map(|s| s.positive_count()).sum();
    for seed in 0..10 {
        let preds = random_predictions(&mut rng(80 + seed), &labels);
        let e = squared_error_sum(&labels, &preds);
        let sigma = 0.8;
        let diff = joint_log_likelihood(&labels, &preds, sigma).unwrap()
            - joint_log_likelihood(&labels, &preds, 2.0 * sigma).unwrap();
        let expected = npos as f64 * std::f64::consts::LN_2 - 3.0 * e / (8.0 * sigma * sigma);
        assert!(
            (diff - expected).abs() < 1e-9 * expected.abs().max(1.0),
            "{diff} vs {expected}"
        );
    }
}

#[test]
fn likelihood_form_offset_is_the_gaussian_normaliser() {
    let labels = random_label_set(&mut rng(9), &[(8, 10, 10)], 2, 0.3);
    let npos = labels.scales[0].positive_count() as f64;
    let preds = random_predictions(&mut rng(90), &labels);
    let sigma = std::f64::consts::FRAC_1_SQRT_2;
    let sum = total_loss(&labels, &preds, &LossConfig::likelihood_form())
        .unwrap()
        .total
        + joint_log_likelihood(&labels, &preds, sigma).unwrap();
    let expected = npos * -(std::f64::consts::PI.sqrt().ln());
    assert!((sum - expected).abs() < 1e-9);
}

#[test]
fn finite_difference_error_shrinks_with_the_step() {
    // central differences are second order until round-off takes over
    let labels = random_label_set(&mut rng(12), &[(8, 8, 8)], 3, 0.4);
    let preds = random_predictions(&mut rng(13), &labels);
    let cfg = LossConfig::default();
    let err = |h: f64| finite_diff_check(&labels, &preds, &cfg, h).unwrap().max_abs_error;
    let (coarse, mid) = (err(1e-3), err(1e-4));
    assert!(mid < coarse / 20.0, "{coarse:e} -> {mid:e}");
    assert!(err(1e-5) < 1e-6);
}
