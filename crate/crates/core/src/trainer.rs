//! Joint optimization of surfels, queries and attention weights.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{evaluate, Gradients, LossReport, Model, ParamClass, PipelineConfig};
use crate::panoptic::{
    prune_duplicates, prune_useless, regularize_cov, AttentionWeights, InstanceQuery, Mask3D, PruneEvent,
};
use crate::raster::{render, RasterConfig, Targets};
use crate::sogmm::{init_surfels, InitConfig, SogmmModel};
use crate::types::{validate_scene, FrameBundle, SceneMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub features: f64,
    pub queries: f64,
    pub attention: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            features: 2.5e-3,
            queries: 1e-3,
            attention: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn for_class(&self, class: ParamClass) -> f64 {
        match class {
            ParamClass::Position => self.position,
            ParamClass::Rotation => self.rotation,
            ParamClass::Scale => self.scale,
            ParamClass::Opacity => self.opacity,
            ParamClass::Color => self.color,
            ParamClass::SemFeature | ParamClass::InsFeature => self.features,
            ParamClass::QueryFeature | ParamClass::QueryMean | ParamClass::QueryCov => self.queries,
            ParamClass::WQ | ParamClass::WK | ParamClass::WV => self.attention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameOrder {
    Sequential,
    /// Reshuffled every epoch from the run seed.
    Shuffled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub prune_start: usize,
    pub prune_interval: usize,
    pub min_assign_rate: f64,
    pub tau_iom: f64,
    pub seed: u64,
    pub order: FrameOrder,
    pub pipeline: PipelineConfig,
    /// Eigenvalue floor for query covariances.
    pub cov_floor: f64,
    /// Std-dev of the noise seeded into all-zero instance features.
    pub ins_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            prune_start: 100,
            prune_interval: 100,
            min_assign_rate: 0.05,
            tau_iom: 0.8,
            seed: 0,
            order: FrameOrder::Shuffled,
            pipeline: PipelineConfig::default(),
            cov_floor: 1e-4,
            ins_noise: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be positive"));
        }
        if self.prune_interval == 0 {
            return Err(Error::invalid("prune_interval must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::invalid("optimizer moments must lie in [0, 1) with eps > 0"));
        }
        Ok(())
    }
}

/// Settings for building the initial model from a fitted SOGMM and a first frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelInit {
    pub samples_per_component: usize,
    pub ins_dim: usize,
    pub head_dim: usize,
    pub bands: usize,
    /// Queries per pseudo-label instance in the first frame.
    pub queries_per_instance: f64,
    pub seed: u64,
}

impl Default for ModelInit {
    fn default() -> Self {
        ModelInit {
            samples_per_component: 64,
            ins_dim: 16,
            head_dim: 16,
            bands: 6,
            queries_per_instance: 1.5,
            seed: 0,
        }
    }
}

/// Surfels from the SOGMM, queries from the first frame's instance masks.
pub fn build_model(sogmm: &SogmmModel, first: &FrameBundle, vocabulary: Vec<String>, init: &ModelInit) -> Result<Model> {
    let surfels = init_surfels(
        sogmm,
        &InitConfig {
            samples_per_component: init.samples_per_component,
            sem_dim: vocabulary.len(),
            ins_dim: init.ins_dim,
            seed: init.seed,
        },
    )?;
    let mut scene = SceneMap {
        surfels,
        vocabulary,
        queries: vec![],
    };
    scene.queries = init_queries(&scene, first, init.ins_dim, init.queries_per_instance, init.seed)?;
    let attention = AttentionWeights::new(init.ins_dim, init.head_dim, init.bands, init.seed)?;
    Ok(Model { scene, attention })
}

/// One query per `1 / per_instance` of each first-frame mask, placed on the
/// visible surfels that project into the mask.
pub fn init_queries(
    scene: &SceneMap,
    frame: &FrameBundle,
    channels: usize,
    per_instance: f64,
    seed: u64,
) -> Result<Vec<InstanceQuery>> {
    let masks = &frame.instances;
    if masks.is_empty() {
        return Ok(vec![]);
    }
    if !(per_instance > 0.0) {
        return Err(Error::invalid("queries_per_instance must be positive"));
    }
    let cam = &frame.camera;
    let depth_cfg = RasterConfig {
        targets: Targets {
            color: false,
            depth: true,
            normal: false,
            semantic: false,
            instance: false,
        },
        ..RasterConfig::default()
    };
    let depth = render(&scene.surfels, None, cam, &depth_cfg)
        .depth
        .expect("depth requested");
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut members: Vec<Vec<Vector3<f64>>> = vec![vec![]; masks.len()];
    let mut visible = Vec::new();
    for s in &scene.surfels {
        let pc = cam.to_camera(&s.center);
        if pc.z <= cam.near || pc.z >= cam.far {
            continue;
        }
        let (px, py) = cam.project(&pc);
        if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
            continue;
        }
        let p = py as usize * w + px as usize;
        let d = depth.data[p];
        if d > 0.0 && pc.z > d * 1.05 + 1e-3 {
            continue;
        }
        visible.push(s.center);
        for (k, m) in masks.iter().enumerate() {
            if m.mask[p] {
                members[k].push(s.center);
            }
        }
    }
    let count = (per_instance * masks.len() as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let normal = Normal::new(0.0, 0.1).expect("valid std-dev");
    let num_classes = scene.vocabulary.len();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let k = i % masks.len();
        let pts = if members[k].is_empty() { &visible } else { &members[k] };
        let (mean, cov) = moments(pts);
        let jitter = if i >= masks.len() {
            Vector3::from_fn(|_, _| normal.sample(&mut rng)) * cov.trace().sqrt() * 0.5
        } else {
            Vector3::zeros()
        };
        let feature = (0..channels).map(|_| normal.sample(&mut rng)).collect();
        let mut q = InstanceQuery::new(feature, mean + jitter, regularize_cov(&cov, 1e-3), num_classes);
        if let Some(l) = q.class_logits.get_mut(masks[k].class_id as usize) {
            *l = 1.0;
        }
        out.push(q);
    }
    Ok(out)
}

fn moments(pts: &[Vector3<f64>]) -> (Vector3<f64>, Matrix3<f64>) {
    if pts.is_empty() {
        return (Vector3::zeros(), Matrix3::identity());
    }
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<Vector3<f64>>() / n;
    let cov = pts.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Matrix3<f64>>() / n;
    (mean, cov)
}

/// First and second moment estimates of one parameter class.
#[derive(Debug, Clone, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    kind: &'static str,
    seed: u64,
    step: u64,
    frame: usize,
    alive_queries: usize,
    loss: &'a LossReport,
}

#[derive(Serialize)]
struct EventRecord<'a> {
    kind: &'static str,
    seed: u64,
    #[serde(flatten)]
    event: &'a PruneEvent,
}

/// Optimizer state around a [`Model`].
///
/// Opacities are optimized as logits and scales in log space; the surfels
/// always hold the activated values.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub sogmm: SogmmModel,
    pub cfg: TrainConfig,
    pub step: u64,
    /// JSON lines, one per step or prune event.
    pub log: Vec<String>,
    pub events: Vec<PruneEvent>,
    opacity_logit: Vec<f64>,
    log_scale: Vec<[f64; 2]>,
    moments: Vec<Moments>,
    /// Matched flags per query for the trailing steps.
    history: VecDeque<Vec<bool>>,
    /// Per query, matches per class during the current epoch.
    votes: Vec<Vec<u64>>,
    refined: Vec<f64>,
}

impl Trainer {
    pub fn new(mut model: Model, sogmm: SogmmModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let bad = validate_scene(&model.scene);
        if let Some(v) = bad.first() {
            return Err(Error::invalid(format!("initial scene: {v}")));
        }
        let surfels = &mut model.scene.surfels;
        // zero instance features make every similarity 0.5 with zero gradient
        if surfels.iter().all(|s| s.ins.iter().all(|&v| v == 0.0)) && cfg.ins_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f1ea);
            let normal = Normal::new(0.0, cfg.ins_noise).map_err(|e| Error::invalid(e.to_string()))?;
            for s in surfels.iter_mut() {
                for v in s.ins.iter_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        let opacity_logit = surfels
            .iter()
            .map(|s| {
                let o = s.opacity.clamp(1e-6, 1.0 - 1e-6);
                (o / (1.0 - o)).ln()
            })
            .collect();
        let log_scale = surfels.iter().map(|s| [s.scales[0].ln(), s.scales[1].ln()]).collect();
        let moments = ParamClass::ALL
            .iter()
            .map(|&c| Moments {
                m: vec![0.0; model.count(c)],
                v: vec![0.0; model.count(c)],
            })
            .collect();
        let nq = model.scene.queries.len();
        let classes = model.scene.vocabulary.len();
        Ok(Trainer {
            model,
            sogmm,
            cfg,
            step: 0,
            log: vec![],
            events: vec![],
            opacity_logit,
            log_scale,
            moments,
            history: VecDeque::new(),
            votes: vec![vec![0; classes]; nq],
            refined: vec![],
        })
    }

    /// One forward/backward pass on `frame` followed by a parameter update.
    pub fn train_step(&mut self, frame: &FrameBundle, frame_index: usize) -> Result<LossReport> {
        let eval = evaluate(&self.model, &self.sogmm, frame, &self.cfg.pipeline, None, true)?;
        let grads = eval.grads.expect("gradients requested");
        if let Some(class) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient(class.name().into()));
        }
        self.step += 1;
        self.apply(&grads);
        self.refined = eval.refined;

        let matched: Vec<bool> = eval.assignment.iter().map(Option::is_some).collect();
        for (k, m) in eval.assignment.iter().enumerate() {
            if let Some(g) = m {
                let q = &mut self.model.scene.queries[k];
                q.assign_count += 1;
                let class = frame.instances[*g].class_id as usize;
                if let Some(v) = self.votes[k].get_mut(class) {
                    *v += 1;
                }
            }
        }
        self.history.push_back(matched);
        while self.history.len() > self.cfg.prune_interval {
            self.history.pop_front();
        }

        let bad = validate_scene(&self.model.scene);
        if let Some(v) = bad.first() {
            return Err(Error::InvalidState(format!("after step {}: {v}", self.step)));
        }
        let record = StepRecord {
            kind: "step",
            seed: self.cfg.seed,
            step: self.step,
            frame: frame_index,
            alive_queries: self.model.scene.alive_queries().count(),
            loss: &eval.report,
        };
        self.log.push(serde_json::to_string(&record)?);

        let s = self.step as usize;
        if s >= self.cfg.prune_start && (s - self.cfg.prune_start) % self.cfg.prune_interval == 0 {
            self.prune()?;
        }
        Ok(eval.report)
    }

    fn prune(&mut self) -> Result<()> {
        let nq = self.model.scene.queries.len();
        let mut window = vec![0u64; nq];
        for row in &self.history {
            for (w, &m) in window.iter_mut().zip(row) {
                *w += m as u64;
            }
        }
        let frames = self.history.len() as u64;
        let queries = &mut self.model.scene.queries;
        let mut events = Vec::new();
        if self.refined.len() == nq * self.model.attention.channels {
            let masks = Mask3D::from_claims(
                queries,
                &self.refined,
                self.model.attention.channels,
                &self.model.scene.surfels,
            );
            events.extend(prune_duplicates(queries, &masks, self.cfg.tau_iom, self.step));
        }
        events.extend(prune_useless(queries, &window, frames, self.cfg.min_assign_rate, self.step));
        for e in &events {
            let rec = EventRecord {
                kind: "prune",
                seed: self.cfg.seed,
                event: e,
            };
            self.log.push(serde_json::to_string(&rec)?);
        }
        self.events.extend(events);
        Ok(())
    }

    /// Re-votes query classes and drops dead queries.
    pub fn end_epoch(&mut self) {
        for (q, votes) in self.model.scene.queries.iter_mut().zip(&self.votes) {
            if votes.iter().any(|&v| v > 0) {
                q.class_logits = votes.iter().map(|&v| v as f64).collect();
            }
        }
        let keep: Vec<bool> = self.model.scene.queries.iter().map(|q| q.alive).collect();
        if keep.iter().all(|&k| k) {
            self.votes.iter_mut().for_each(|v| v.fill(0));
            return;
        }
        let c = self.model.attention.channels;
        let filter = |v: &[f64], stride: usize| -> Vec<f64> {
            v.chunks(stride)
                .zip(&keep)
                .filter(|(_, &k)| k)
                .flat_map(|(x, _)| x.iter().copied())
                .collect()
        };
        for (class, stride) in [
            (ParamClass::QueryFeature, c),
            (ParamClass::QueryMean, 3),
            (ParamClass::QueryCov, 6),
        ] {
            let m = &mut self.moments[class_slot(class)];
            if stride > 0 {
                m.m = filter(&m.m, stride);
                m.v = filter(&m.v, stride);
            }
        }
        let mut it = keep.iter();
        self.model.scene.queries.retain(|_| *it.next().unwrap());
        let n = self.model.scene.queries.len();
        self.votes = vec![vec![0; self.model.scene.vocabulary.len()]; n];
        for row in self.history.iter_mut() {
            let mut it = keep.iter();
            row.retain(|_| *it.next().unwrap());
        }
        self.refined.clear();
    }

    fn apply(&mut self, g: &Gradients) {
        let t = self.step as i32;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = self.cfg.lr;
        let update = |m: &mut Moments, x: &mut [f64], g: &[f64], rate: f64| {
            for i in 0..x.len() {
                m.m[i] = b1 * m.m[i] + (1.0 - b1) * g[i];
                m.v[i] = b2 * m.v[i] + (1.0 - b2) * g[i] * g[i];
                x[i] -= rate * (m.m[i] / c1) / ((m.v[i] / c2).sqrt() + eps);
            }
        };

        for class in ParamClass::ALL {
            let n = self.model.count(class);
            if n == 0 {
                continue;
            }
            let mut grad = g.values(class);
            let mut x: Vec<f64> = match class {
                ParamClass::Opacity => {
                    for (gi, s) in grad.iter_mut().zip(&self.model.scene.surfels) {
                        *gi *= s.opacity * (1.0 - s.opacity);
                    }
                    self.opacity_logit.clone()
                }
                ParamClass::Scale => {
                    for (i, gi) in grad.iter_mut().enumerate() {
                        *gi *= self.model.scene.surfels[i / 2].scales[i % 2];
                    }
                    self.log_scale.iter().flatten().copied().collect()
                }
                _ => (0..n).map(|i| self.model.get(class, i)).collect(),
            };
            update(&mut self.moments[class_slot(class)], &mut x, &grad, lr.for_class(class));
            match class {
                ParamClass::Opacity => {
                    self.opacity_logit = x;
                    for (s, l) in self.model.scene.surfels.iter_mut().zip(&self.opacity_logit) {
                        s.opacity = 1.0 / (1.0 + (-l).exp());
                    }
                }
                ParamClass::Scale => {
                    for (i, (s, ls)) in self.model.scene.surfels.iter_mut().zip(x.chunks(2)).enumerate() {
                        let l = [ls[0].max(-20.0), ls[1].max(-20.0)];
                        self.log_scale[i] = l;
                        s.scales = [l[0].exp(), l[1].exp()];
                    }
                }
                _ => {
                    for (i, v) in x.into_iter().enumerate() {
                        self.model.set(class, i, v);
                    }
                }
            }
        }

        let floor = self.cfg.cov_floor;
        for s in self.model.scene.surfels.iter_mut() {
            let n = s.rotation.norm();
            if n > 0.0 && n.is_finite() {
                s.rotation /= n;
            }
            s.color = s.color.map(|c| c.clamp(0.0, 1.0));
        }
        for q in self.model.scene.queries.iter_mut() {
            q.cov = regularize_cov(&q.cov, floor);
        }
    }
}

fn class_slot(class: ParamClass) -> usize {
    ParamClass::ALL.iter().position(|&c| c == class).expect("listed class")
}

/// Final model plus the training log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<String>,
    pub events: Vec<PruneEvent>,
    pub final_loss: Option<LossReport>,
}

/// Runs `cfg.steps` updates, cycling through `frames` one epoch at a time.
/// Zero steps return the model untouched.
pub fn train(model: Model, sogmm: SogmmModel, frames: &[FrameBundle], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.steps == 0 {
        return Ok(TrainOutcome {
            model,
            log: vec![],
            events: vec![],
            final_loss: None,
        });
    }
    if frames.is_empty() {
        return Err(Error::invalid("no training frames"));
    }
    let mut trainer = Trainer::new(model, sogmm, cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut last = None;
    let mut done = 0;
    while done < cfg.steps {
        if cfg.order == FrameOrder::Shuffled {
            order.shuffle(&mut rng);
        }
        for &f in &order {
            if done == cfg.steps {
                break;
            }
            last = Some(trainer.train_step(&frames[f], f)?);
            done += 1;
        }
        trainer.end_epoch();
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log: trainer.log,
        events: trainer.events,
        final_loss: last,
    })
}
