mod common;

use std::collections::BTreeSet;

use nalgebra::{Quaternion, Vector3};
use proptest::prelude::*;
use psimap::eval::*;
use psimap::raster::NO_INSTANCE;
use psimap::types::{Surfel, IGNORE_LABEL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::pq::counting_oracle;

const N: u32 = NO_INSTANCE;

fn image(w: usize, ids: Vec<u32>, classes: Vec<u32>) -> PanopticImage {
    let h = ids.len() / w;
    PanopticImage::new(w, h, ids, classes).unwrap()
}

fn assert_matches_oracle(pred: &PanopticImage, gt: &PanopticImage) -> PanopticResult {
    let r = panoptic_quality(pred, gt).unwrap();
    let oracle = counting_oracle(pred, gt);
    assert_eq!(r.per_class.keys().copied().collect::<Vec<_>>(), oracle.keys().copied().collect::<Vec<_>>());
    for (c, (pq, sq, rq)) in oracle {
        let q = r.per_class[&c];
        assert!((q.pq - pq).abs() <= 1e-10, "class {c} pq {} vs {pq}", q.pq);
        assert!((q.sq - sq).abs() <= 1e-10);
        assert!((q.rq - rq).abs() <= 1e-10);
        assert!((q.pq - q.sq * q.rq).abs() <= 1e-10);
    }
    r
}

#[test]
fn identical_images_score_one() {
    let ids = vec![0, 0, 1, 1, N, 2, 2, 2];
    let classes = vec![0, 0, 1, 1, IGNORE_LABEL, 1, 1, 1];
    let gt = image(4, ids.clone(), classes.clone());
    let r = assert_matches_oracle(&gt, &gt);
    assert_eq!((r.pq, r.sq, r.rq), (1.0, 1.0, 1.0));
    assert_eq!(r.miou, 1.0);
    assert_eq!(r.mcov, 1.0);
}

#[test]
fn exact_half_overlap_does_not_match() {
    // gt instance: 8 pixels; prediction covers exactly 4 of them and nothing else
    let gt = image(4, vec![0; 8], vec![0; 8]);
    let pred = image(4, vec![0, 0, 0, 0, N, N, N, N], vec![0, 0, 0, 0, IGNORE_LABEL, IGNORE_LABEL, IGNORE_LABEL, IGNORE_LABEL]);
    let r = assert_matches_oracle(&pred, &gt);
    assert_eq!(r.pq, 0.0);
    assert_eq!(r.rq, 0.0);
    let q = r.per_class[&0];
    assert_eq!((q.tp, q.fp, q.fn_), (0, 1, 1));
    assert!(r.matches.is_empty());
}

#[test]
fn iou_point_eight_match_plus_a_miss() {
    // gt A: pixels 0..10, gt B: 10..15, both class 1
    // pred covers 0..8 of A (IoU 0.8) and misses B
    let mut gt_ids = vec![0; 10];
    gt_ids.extend([1; 5]);
    let gt = image(5, gt_ids, vec![1; 15]);
    let mut pred_ids = vec![7; 8];
    pred_ids.extend([N; 7]);
    let mut pred_cls = vec![1; 8];
    pred_cls.extend([IGNORE_LABEL; 7]);
    let pred = image(5, pred_ids, pred_cls);
    let r = assert_matches_oracle(&pred, &gt);
    // one TP at 0.8, one FN: SQ 0.8, RQ 1 / 1.5, PQ 0.8 / 1.5
    assert!((r.sq - 0.8).abs() < 1e-12);
    assert!((r.rq - 1.0 / 1.5).abs() < 1e-12);
    assert!((r.pq - 0.8 / 1.5).abs() < 1e-12);
    assert_eq!(r.matches.len(), 1);
    assert_eq!((r.matches[0].pred, r.matches[0].gt), (7, 0));
}

#[test]
fn void_pixels_are_excluded() {
    // a prediction that spills into void pixels still matches perfectly
    let gt = image(4, vec![0, 0, N, N], vec![2, 2, IGNORE_LABEL, IGNORE_LABEL]);
    let pred = image(4, vec![5, 5, 5, 5], vec![2, 2, 2, 2]);
    let r = assert_matches_oracle(&pred, &gt);
    assert_eq!(r.pq, 1.0);
}

#[test]
fn class_mismatch_is_never_a_match() {
    let gt = image(2, vec![0, 0], vec![0, 0]);
    let pred = image(2, vec![0, 0], vec![1, 1]);
    let r = assert_matches_oracle(&pred, &gt);
    assert_eq!(r.pq, 0.0);
    assert_eq!(r.per_class.len(), 2);
}

fn random_pair(seed: u64, w: usize, h: usize) -> (PanopticImage, PanopticImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = w * h;
    // blocky gt so that some IoUs exceed 0.5
    let gt_ids: Vec<u32> = (0..n).map(|p| ((p % w) / 3 + 4 * ((p / w) / 3)) as u32 % 6).collect();
    let gt_cls: Vec<u32> = (0..n)
        .map(|p| if rng.random::<f64>() < 0.05 { IGNORE_LABEL } else { gt_ids[p] % 3 })
        .collect();
    let pred_ids: Vec<u32> = gt_ids
        .iter()
        .map(|&g| match rng.random_range(0..10) {
            0 => N,
            1 | 2 => rng.random_range(0..6),
            _ => g + 10,
        })
        .collect();
    let pred_cls: Vec<u32> = pred_ids
        .iter()
        .map(|&i| if i == N { IGNORE_LABEL } else if i >= 10 { (i - 10) % 3 } else { i % 3 })
        .collect();
    (image(w, pred_ids, pred_cls), image(w, gt_ids, gt_cls))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pq_matches_the_counting_oracle(seed in 0u64..10_000) {
        let (pred, gt) = random_pair(seed, 12, 9);
        assert_matches_oracle(&pred, &gt);
    }

    #[test]
    fn metrics_ignore_prediction_id_permutations(seed in 0u64..10_000, shift in 1u32..1000) {
        let (pred, gt) = random_pair(seed, 12, 9);
        let relabeled = PanopticImage {
            ids: pred.ids.iter().map(|&i| if i == N { N } else { (i * 7919 + shift) % 100_003 }).collect(),
            ..pred.clone()
        };
        let a = panoptic_quality(&pred, &gt).unwrap();
        let b = panoptic_quality(&relabeled, &gt).unwrap();
        prop_assert!((a.pq - b.pq).abs() < 1e-12);
        prop_assert!((a.sq - b.sq).abs() < 1e-12);
        prop_assert!((a.rq - b.rq).abs() < 1e-12);
        prop_assert_eq!(a.miou, b.miou);
        prop_assert!((a.mcov - b.mcov).abs() < 1e-12);
        prop_assert!((a.mwcov - b.mwcov).abs() < 1e-12);
    }

    #[test]
    fn accumulated_pq_factorizes(seeds in prop::collection::vec(0u64..10_000, 1..4)) {
        let mut acc = PanopticAccumulator::default();
        for s in seeds {
            let (p, g) = random_pair(s, 10, 10);
            acc.add(&p, &g).unwrap();
        }
        let r = acc.finish();
        for q in r.per_class.values() {
            prop_assert!((q.pq - q.sq * q.rq).abs() <= 1e-10);
            prop_assert!((0.0..=1.0).contains(&q.pq));
        }
    }
}

#[test]
fn miou_and_macc_hand_case() {
    let gt = [0, 0, 0, 1, 1, IGNORE_LABEL];
    let pred = [0, 0, 1, 1, 0, 1];
    // class 0: tp 2, gt 3, pred 3 -> IoU 2/4, acc 2/3
    // class 1: tp 1, gt 2, pred 2 -> IoU 1/3, acc 1/2
    assert!((miou(&pred, &gt) - (0.5 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!((macc(&pred, &gt) - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-12);
}

#[test]
fn coverage_hand_case() {
    let g1 = vec![true, true, true, true, false, false];
    let g2 = vec![false, false, false, false, true, true];
    let p1 = vec![true, true, false, false, false, false];
    let p2 = vec![false, false, false, true, true, true];
    let (m, w) = coverage(&[p1, p2], &[g1, g2]);
    // g1 best: max(2/4, 1/6) = 0.5; g2 best: 2/3
    assert!((m - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!((w - (0.5 * 4.0 + 2.0 / 3.0 * 2.0) / 6.0).abs() < 1e-12);
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>() * 0.2) * scale)
        .collect()
}

#[test]
fn identical_clouds_are_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_cloud(&mut rng, 500, 1.0);
    let r = geom_metrics(&a, &a, 0.05).unwrap();
    assert_eq!((r.accuracy, r.completeness, r.chamfer_l1), (0.0, 0.0, 0.0));
    assert_eq!(r.fscore, 1.0);
}

#[test]
fn rigid_shift_gives_the_offset() {
    // a sparse grid so the nearest neighbour of a shifted point is its own source
    let gt: Vec<Vector3<f64>> = (0..400)
        .map(|i| Vector3::new((i % 20) as f64 * 0.1, (i / 20) as f64 * 0.1, 0.0))
        .collect();
    let pred: Vec<Vector3<f64>> = gt.iter().map(|p| p + Vector3::new(0.01, 0.0, 0.0)).collect();
    let r = geom_metrics(&pred, &gt, 0.05).unwrap();
    assert!((r.accuracy - 0.01).abs() < 1e-12);
    assert!((r.completeness - 0.01).abs() < 1e-12);
    assert_eq!((r.precision, r.recall, r.fscore), (1.0, 1.0, 1.0));
}

#[test]
fn swapping_clouds_swaps_accuracy_and_completeness() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_cloud(&mut rng, 700, 1.0);
    let b = random_cloud(&mut rng, 400, 1.1);
    let ab = geom_metrics(&a, &b, 0.05).unwrap();
    let ba = geom_metrics(&b, &a, 0.05).unwrap();
    assert_eq!(ab.accuracy, ba.completeness);
    assert_eq!(ab.completeness, ba.accuracy);
    assert_eq!(ab.precision, ba.recall);
    assert_eq!(ab.chamfer_l1, ba.chamfer_l1);
}

#[test]
fn grid_search_matches_brute_force_above_the_cutoff() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dst = random_cloud(&mut rng, 6000, 2.0);
    let mut src = random_cloud(&mut rng, 800, 2.0);
    // include points well outside the grid
    src.extend((0..50).map(|i| Vector3::new(-3.0 - i as f64 * 0.1, 5.0, 1.0)));
    let a = nearest_distances_grid(&src, &dst);
    let b = nearest_distances_brute(&src, &dst);
    assert_eq!(a, b);
    assert_eq!(nearest_distances(&src, &dst), b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn grid_equals_brute(seed in 0u64..1000, n in 1usize..300, m in 1usize..300, scale in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dst = random_cloud(&mut rng, n, scale);
        let src = random_cloud(&mut rng, m, scale * 1.5);
        prop_assert_eq!(nearest_distances_grid(&src, &dst), nearest_distances_brute(&src, &dst));
    }
}

#[test]
fn surfel_samples_stay_on_their_ellipse() {
    let s = Surfel::new(
        Vector3::new(1.0, 2.0, 3.0),
        Quaternion::new(0.9, 0.1, 0.3, -0.2).normalize(),
        [0.3, 0.1],
        0.9,
        Vector3::zeros(),
        vec![],
        vec![],
    )
    .unwrap();
    let faint = Surfel {
        opacity: 0.1,
        center: Vector3::new(50.0, 0.0, 0.0),
        ..s.clone()
    };
    let pts = sample_surfels(&[s.clone(), faint], 2000, 0.5, 4);
    assert_eq!(pts.len(), 2000);
    let r = psimap::types::rotation_matrix(&s.rotation);
    for p in &pts {
        let d = p - s.center;
        let (u, v, w) = (d.dot(&r.column(0)), d.dot(&r.column(1)), d.dot(&r.column(2)));
        assert!(w.abs() < 1e-12);
        assert!((u / 0.3).powi(2) + (v / 0.1).powi(2) <= 1.0 + 1e-9);
    }
    assert_eq!(sample_surfels(&[s], 100, 0.5, 4), sample_surfels(&[pts_surfel()], 100, 0.5, 4));
}

fn pts_surfel() -> Surfel {
    Surfel::new(
        Vector3::new(1.0, 2.0, 3.0),
        Quaternion::new(0.9, 0.1, 0.3, -0.2).normalize(),
        [0.3, 0.1],
        0.9,
        Vector3::zeros(),
        vec![],
        vec![],
    )
    .unwrap()
}

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        trajectory: Trajectory {
            views: 6,
            width: 40,
            height_px: 30,
            focal: 38.0,
            ..Trajectory::default()
        },
        spacing: 0.1,
        cloud_points: 2000,
        seed,
        ..SyntheticSpec::default()
    }
}

#[test]
fn synthetic_scene_is_deterministic() {
    let a = make_synthetic_scene(&small_spec(7)).unwrap();
    let b = make_synthetic_scene(&small_spec(7)).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_eq!(a.cloud, b.cloud);
    assert_eq!(a.truth, b.truth);
    let c = make_synthetic_scene(&small_spec(8)).unwrap();
    assert_ne!(a.frames, c.frames);
}

#[test]
fn synthetic_truth_agrees_with_the_geometry() {
    let clean = SyntheticSpec {
        noise: LabelNoise {
            dropout: 0.0,
            boundary_flip: 0.0,
        },
        ..small_spec(1)
    };
    let scene = make_synthetic_scene(&clean).unwrap();
    assert_eq!(scene.cameras.len(), 6);
    assert_eq!(scene.held_out_indices(), vec![3]);
    for (f, t) in scene.frames.iter().zip(&scene.truth) {
        let t = &t.panoptic;
        // without noise every pseudo-label mask equals its clean segment
        for m in &f.instances {
            let ids: BTreeSet<u32> = m.mask.iter().zip(&t.ids).filter(|(b, _)| **b).map(|(_, &i)| i).collect();
            assert_eq!(ids.len(), 1);
            let id = *ids.iter().next().unwrap();
            let seg: Vec<bool> = t.ids.iter().map(|&i| i == id).collect();
            assert_eq!(m.mask, seg);
            assert_eq!(m.class_id, clean.objects[id as usize].class_id);
        }
        for (p, &id) in t.ids.iter().enumerate() {
            if id == N {
                assert_eq!(t.classes[p], IGNORE_LABEL);
            } else {
                assert_eq!(t.classes[p], clean.objects[id as usize].class_id);
                assert_eq!(f.semantic[p], t.classes[p]);
            }
        }
    }
    // every ground-truth cloud point lies on an object face
    for p in &scene.cloud.points {
        let on_face = clean.objects.iter().any(|o| {
            let d: Vec<f64> = (0..3).map(|k| (p[k] - o.center[k]).abs() - 0.5 * o.size[k]).collect();
            d.iter().all(|&x| x <= 1e-9) && d.iter().any(|&x| x.abs() <= 1e-9)
        });
        assert!(on_face, "{p:?} is off every box");
    }
}

#[test]
fn pseudo_labels_are_noisy_but_close() {
    let scene = make_synthetic_scene(&small_spec(2)).unwrap();
    let mut flipped = 0usize;
    let mut total = 0usize;
    for (f, t) in scene.frames.iter().zip(&scene.truth) {
        for (p, &c) in f.semantic.iter().enumerate() {
            if t.panoptic.classes[p] != IGNORE_LABEL {
                total += 1;
                flipped += (c != t.panoptic.classes[p]) as usize;
            }
        }
    }
    let rate = flipped as f64 / total as f64;
    assert!(rate > 0.0 && rate < 0.3, "label disagreement {rate}");
}
