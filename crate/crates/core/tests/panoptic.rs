use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use proptest::prelude::*;
use psimap::panoptic::*;
use psimap::raster::NO_INSTANCE;
use psimap::types::Surfel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C: usize = 4;

fn scene(seed: u64, n: usize, nq: usize) -> (Vec<InstanceQuery>, Vec<Surfel>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let queries = (0..nq)
        .map(|_| {
            let a = Matrix3::from_fn(|_, _| rng.random_range(-0.5..0.5));
            let cov = a * a.transpose() + Matrix3::identity() * 0.05;
            let mean = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let feat = (0..C).map(|_| rng.random_range(-1.0..1.0)).collect();
            InstanceQuery::new(feat, mean, cov, 3)
        })
        .collect();
    let surfels = (0..n)
        .map(|_| {
            Surfel::new(
                Vector3::from_fn(|_, _| rng.random_range(-1.5..1.5)),
                Quaternion::identity(),
                [0.1, 0.1],
                0.5,
                Vector3::zeros(),
                vec![],
                (0..C).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        })
        .collect();
    (queries, surfels)
}

fn mask() -> impl Strategy<Value = Mask3D> {
    prop::collection::vec(0usize..40, 0..30).prop_map(Mask3D::new)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignments_are_distributions(seed in 0u64..10_000, n in 1usize..40, nq in 1usize..6, dead in prop::collection::vec(any::<bool>(), 6)) {
        let (mut qs, surfels) = scene(seed, n, nq);
        for (q, &d) in qs.iter_mut().zip(&dead) {
            q.alive = !d;
        }
        let any_alive = qs.iter().any(|q| q.alive);
        let a = assign_labels(&qs, &surfels);
        prop_assert_eq!(a.probs.len(), n * nq);
        for (i, row) in a.probs.chunks(nq).enumerate() {
            let s: f64 = row.iter().sum();
            if any_alive {
                prop_assert!((s - 1.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(s, 0.0);
                prop_assert_eq!(a.ids[i], NO_INSTANCE);
                continue;
            }
            for (k, &p) in row.iter().enumerate() {
                prop_assert!((0.0..=1.0).contains(&p));
                if !qs[k].alive {
                    prop_assert_eq!(p, 0.0);
                }
            }
            // the argmax of the attention is the argmax of the softmax
            let id = a.ids[i] as usize;
            prop_assert!(qs[id].alive);
            let best = row.iter().cloned().fold(0.0, f64::max);
            prop_assert_eq!(row[id], best);
            let direct = attention_map(&qs[id].feature, &qs[id], &surfels[i]);
            for k in (0..nq).filter(|&k| qs[k].alive) {
                prop_assert!(attention_map(&qs[k].feature, &qs[k], &surfels[i]) <= direct);
            }
        }
    }

    #[test]
    fn rigid_motion_leaves_labels_unchanged(seed in 0u64..10_000, axis in prop::array::uniform3(-3.0f64..3.0), t in prop::array::uniform3(-5.0f64..5.0)) {
        let (qs, surfels) = scene(seed, 30, 4);
        let r = Rotation3::from_scaled_axis(Vector3::from(axis));
        let t = Vector3::from(t);
        let moved_q: Vec<InstanceQuery> = qs
            .iter()
            .map(|q| InstanceQuery { mean: r * q.mean + t, cov: r.matrix() * q.cov * r.matrix().transpose(), ..q.clone() })
            .collect();
        let rq = *UnitQuaternion::from_rotation_matrix(&r).quaternion();
        let moved_s: Vec<Surfel> = surfels
            .iter()
            .map(|s| Surfel { center: r * s.center + t, rotation: rq * s.rotation, ..s.clone() })
            .collect();
        let a = assign_labels(&qs, &surfels);
        let b = assign_labels(&moved_q, &moved_s);
        for (x, y) in a.probs.iter().zip(&b.probs) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn iom_identities(a in mask(), b in mask()) {
        let ab = iom(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        if !a.is_empty() {
            prop_assert_eq!(iom(&a, &a), 1.0);
            let union = Mask3D::new(a.members.iter().chain(&b.members).copied().collect());
            prop_assert_eq!(iom(&a, &union), 1.0);
        }
        // |A & B| is symmetric
        let ba = iom(&b, &a);
        prop_assert!((ab * a.len() as f64 - ba * b.len() as f64).abs() < 1e-9);
        let inter = a.members.iter().filter(|x| b.members.contains(x)).count();
        prop_assert_eq!(a.intersection_len(&b), inter);
    }

    #[test]
    fn duplicate_pruning_is_idempotent(masks in prop::collection::vec(mask(), 1..7), tau in 0.3f64..1.0) {
        let mut qs: Vec<InstanceQuery> = (0..masks.len())
            .map(|_| InstanceQuery::new(vec![0.0; C], Vector3::zeros(), Matrix3::identity(), 2))
            .collect();
        let first = prune_duplicates(&mut qs, &masks, tau, 1);
        for e in &first {
            prop_assert_eq!(e.reason, PruneReason::Duplicate);
            prop_assert!(e.iom.unwrap() >= tau);
            let kept = e.kept.unwrap();
            prop_assert!(qs[kept].alive || first.iter().any(|o| o.query == kept));
        }
        let alive: Vec<usize> = (0..qs.len()).filter(|&k| qs[k].alive).collect();
        prop_assert!(!alive.is_empty());
        for &i in &alive {
            for &j in &alive {
                if i != j {
                    prop_assert!(iom(&masks[i], &masks[j]) < tau);
                }
            }
        }
        let second = prune_duplicates(&mut qs, &masks, tau, 2);
        prop_assert!(second.is_empty());
    }

    #[test]
    fn useless_pruning_keeps_the_busiest(matches in prop::collection::vec(0u64..10, 1..8)) {
        let mut qs: Vec<InstanceQuery> = (0..matches.len())
            .map(|_| InstanceQuery::new(vec![0.0; C], Vector3::zeros(), Matrix3::identity(), 2))
            .collect();
        let events = prune_useless(&mut qs, &matches, 10, 0.3, 5);
        prop_assert!(qs.iter().any(|q| q.alive));
        let busiest = matches.iter().copied().max().unwrap();
        prop_assert!(qs.iter().zip(&matches).any(|(q, &m)| q.alive && m == busiest));
        for e in events {
            prop_assert!(matches[e.query] < 3);
        }
    }
}
