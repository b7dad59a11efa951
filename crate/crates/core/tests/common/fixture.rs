use nalgebra::{Matrix3, Quaternion, Vector3};
use psimap::losses::{Model, PipelineConfig};
use psimap::panoptic::{AttentionWeights, InstanceQuery};
use psimap::raster::RasterConfig;
use psimap::sogmm::{SogmmComponent, SogmmConfig, SogmmModel};
use psimap::types::{Camera, FrameBundle, InstanceMask, Plane, SceneMap, Surfel, IGNORE_LABEL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEM: usize = 3;
const INS: usize = 4;

pub fn smooth_config() -> PipelineConfig {
    // no alpha cutoff, no early stop and a footprint covering the whole image,
    // so the loss is differentiable everywhere along the probes
    PipelineConfig {
        raster: RasterConfig {
            chi2: 1e4,
            alpha_min: 0.0,
            transmittance_min: 0.0,
            ..RasterConfig::default()
        },
        weights: Default::default(),
        detach_label_centers: false,
    }
}

/// 20 surfels, 3 queries, 16x16 image.
pub fn fixture(seed: u64) -> (Model, SogmmModel, FrameBundle) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = Camera::look_at(
        Vector3::zeros(),
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(0.0, -1.0, 0.0),
        16.0,
        16,
        16,
        0.1,
        50.0,
    )
    .unwrap();
    let mut surfels = Vec::new();
    for i in 0..20 {
        let depth = 2.0 + 0.07 * i as f64;
        let q = Quaternion::new(
            1.0,
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.5..0.5),
        );
        surfels.push(
            Surfel::new(
                Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), depth),
                q.normalize(),
                [rng.random_range(0.15..0.35), rng.random_range(0.1..0.25)],
                rng.random_range(0.25..0.6),
                Vector3::new(rng.random(), rng.random(), rng.random()),
                (0..SEM).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..INS).map(|_| rng.random_range(-1.5..1.5)).collect(),
            )
            .unwrap(),
        );
    }
    let queries: Vec<InstanceQuery> = (0..3)
        .map(|k| {
            let mut q = InstanceQuery::new(
                (0..INS).map(|_| rng.random_range(-1.5..1.5)).collect(),
                Vector3::new(-0.3 + 0.3 * k as f64, rng.random_range(-0.2..0.2), 2.6),
                Matrix3::from_diagonal(&Vector3::new(0.3, 0.25, 0.5)) + Matrix3::repeat(0.02),
                SEM,
            );
            q.alive = true;
            q
        })
        .collect();
    let scene = SceneMap {
        surfels,
        vocabulary: (0..SEM).map(|c| format!("c{c}")).collect(),
        queries,
    };
    let attention = AttentionWeights::new(INS, 3, 2, seed).unwrap();
    let comp = |z: f64, x: f64| {
        SogmmComponent::new(
            0.5,
            Vector3::new(x, 0.0, z),
            Matrix3::from_diagonal(&Vector3::new(0.2, 0.2, 0.002)),
            Some(Vector3::zeros()),
        )
        .unwrap()
    };
    let sogmm = SogmmModel {
        components: vec![comp(2.4, -0.2), comp(3.0, 0.3)],
        config: SogmmConfig::default(),
        log_likelihood: vec![],
    };
    let n = 256;
    let rgb = Plane::from_data(16, 16, 3, (0..3 * n).map(|_| rng.random()).collect()).unwrap();
    let semantic: Vec<u32> = (0..n)
        .map(|p| if p % 7 == 0 { IGNORE_LABEL } else { (p % 16 / 6) as u32 })
        .collect();
    let instances = vec![
        InstanceMask {
            class_id: 0,
            mask: (0..n).map(|p| p % 16 < 7 && p / 16 < 10).collect(),
        },
        InstanceMask {
            class_id: 2,
            mask: (0..n).map(|p| p % 16 >= 9 && p / 16 > 4).collect(),
        },
    ];
    let frame = FrameBundle::new(camera, rgb, semantic, instances, SEM).unwrap();
    (Model { scene, attention }, sogmm, frame)
}
