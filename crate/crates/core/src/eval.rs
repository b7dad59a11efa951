//! Panoptic and geometric metrics, synthetic scenes and held-out evaluation.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Model;
use crate::panoptic::{assign_labels_with, build_keys_values, cross_attention_update, frustum_select, LabelAssignment};
use crate::raster::{argmax_ids, render, InstanceInput, RasterConfig, Targets, NO_INSTANCE};
use crate::types::{
    quaternion_from_matrix, Camera, FrameBundle, InstanceMask, PointCloud, Surfel, IGNORE_LABEL,
};

/// Instance ids plus per-pixel classes; [`IGNORE_LABEL`] classes are void.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanopticImage {
    pub width: usize,
    pub height: usize,
    /// [`NO_INSTANCE`] marks pixels that belong to no segment.
    pub ids: Vec<u32>,
    pub classes: Vec<u32>,
}

impl PanopticImage {
    pub fn new(width: usize, height: usize, ids: Vec<u32>, classes: Vec<u32>) -> Result<Self> {
        if ids.len() != width * height || classes.len() != width * height {
            return Err(Error::invalid("panoptic image planes do not match its size"));
        }
        Ok(PanopticImage {
            width,
            height,
            ids,
            classes,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassQuality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMatch {
    pub class: u32,
    pub pred: u32,
    pub gt: u32,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PanopticResult {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub per_class: BTreeMap<u32, ClassQuality>,
    pub miou: f64,
    pub macc: f64,
    pub mcov: f64,
    pub mwcov: f64,
    pub matches: Vec<SegmentMatch>,
}

#[derive(Debug, Clone, Copy, Default)]
struct ClassCounts {
    iou_sum: f64,
    tp: usize,
    fp: usize,
    fn_: usize,
}

/// Sums PQ counts, class confusions and coverage over several images.
#[derive(Debug, Clone, Default)]
pub struct PanopticAccumulator {
    counts: BTreeMap<u32, ClassCounts>,
    /// `(gt class, pred class) -> pixels` over non-void gt pixels.
    confusion: BTreeMap<(u32, u32), u64>,
    /// `(best IoU, gt pixel count)` per gt instance.
    coverage: Vec<(f64, u64)>,
    matches: Vec<SegmentMatch>,
}

/// Segment key: instance id and class, so a segment never mixes classes.
type Seg = (u32, u32);

fn segments(ids: &[u32], classes: &[u32], void: &[bool]) -> HashMap<Seg, u64> {
    let mut out = HashMap::new();
    for p in 0..ids.len() {
        if void[p] || ids[p] == NO_INSTANCE || classes[p] == IGNORE_LABEL {
            continue;
        }
        *out.entry((ids[p], classes[p])).or_insert(0) += 1;
    }
    out
}

impl PanopticAccumulator {
    pub fn add(&mut self, pred: &PanopticImage, gt: &PanopticImage) -> Result<()> {
        if pred.ids.len() != gt.ids.len() {
            return Err(Error::invalid("prediction and ground truth differ in size"));
        }
        let void: Vec<bool> = gt.classes.iter().map(|&c| c == IGNORE_LABEL).collect();
        let ps = segments(&pred.ids, &pred.classes, &void);
        let gs = segments(&gt.ids, &gt.classes, &void);
        let mut inter: HashMap<(Seg, Seg), u64> = HashMap::new();
        for p in 0..gt.ids.len() {
            if void[p] || gt.ids[p] == NO_INSTANCE || pred.ids[p] == NO_INSTANCE || pred.classes[p] == IGNORE_LABEL {
                continue;
            }
            *inter
                .entry(((pred.ids[p], pred.classes[p]), (gt.ids[p], gt.classes[p])))
                .or_insert(0) += 1;
        }
        let mut matched_p = HashMap::new();
        let mut matched_g = HashMap::new();
        let mut pairs: Vec<(&(Seg, Seg), &u64)> = inter.iter().collect();
        pairs.sort_unstable();
        for (&(pk, gk), &i) in pairs {
            if pk.1 != gk.1 {
                continue;
            }
            let union = ps[&pk] + gs[&gk] - i;
            let iou = i as f64 / union as f64;
            // IoU > 0.5 makes the match unique
            if iou > 0.5 {
                matched_p.insert(pk, iou);
                matched_g.insert(gk, iou);
                self.matches.push(SegmentMatch {
                    class: gk.1,
                    pred: pk.0,
                    gt: gk.0,
                    iou,
                });
                let c = self.counts.entry(gk.1).or_default();
                c.iou_sum += iou;
                c.tp += 1;
            }
        }
        for pk in ps.keys() {
            if !matched_p.contains_key(pk) {
                self.counts.entry(pk.1).or_default().fp += 1;
            }
        }
        for gk in gs.keys() {
            if !matched_g.contains_key(gk) {
                self.counts.entry(gk.1).or_default().fn_ += 1;
            }
        }

        for p in 0..gt.classes.len() {
            if !void[p] {
                *self.confusion.entry((gt.classes[p], pred.classes[p])).or_insert(0) += 1;
            }
        }

        // coverage ignores classes: best IoU of any prediction per gt instance
        let mut pred_area: HashMap<u32, u64> = HashMap::new();
        let mut gt_area: HashMap<u32, u64> = HashMap::new();
        let mut overlap: HashMap<(u32, u32), u64> = HashMap::new();
        for p in 0..gt.ids.len() {
            if void[p] {
                continue;
            }
            if pred.ids[p] != NO_INSTANCE {
                *pred_area.entry(pred.ids[p]).or_insert(0) += 1;
            }
            if gt.ids[p] != NO_INSTANCE {
                *gt_area.entry(gt.ids[p]).or_insert(0) += 1;
                if pred.ids[p] != NO_INSTANCE {
                    *overlap.entry((gt.ids[p], pred.ids[p])).or_insert(0) += 1;
                }
            }
        }
        let mut gids: Vec<_> = gt_area.iter().collect();
        gids.sort_unstable();
        for (&g, &area) in gids {
            let best = overlap
                .iter()
                .filter(|((gg, _), _)| *gg == g)
                .map(|((_, pp), &i)| i as f64 / (area + pred_area[pp] - i) as f64)
                .fold(0.0, f64::max);
            self.coverage.push((best, area));
        }
        Ok(())
    }

    pub fn finish(&self) -> PanopticResult {
        let mut per_class = BTreeMap::new();
        for (&class, c) in &self.counts {
            let denom = c.tp as f64 + 0.5 * c.fp as f64 + 0.5 * c.fn_ as f64;
            let sq = if c.tp > 0 { c.iou_sum / c.tp as f64 } else { 0.0 };
            let rq = if denom > 0.0 { c.tp as f64 / denom } else { 0.0 };
            let pq = if denom > 0.0 { c.iou_sum / denom } else { 0.0 };
            debug_assert!((pq - sq * rq).abs() <= 1e-8);
            per_class.insert(
                class,
                ClassQuality {
                    pq,
                    sq,
                    rq,
                    tp: c.tp,
                    fp: c.fp,
                    fn_: c.fn_,
                },
            );
        }
        let mean = |f: fn(&ClassQuality) -> f64| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.values().map(f).sum::<f64>() / per_class.len() as f64
            }
        };
        let (miou, macc) = confusion_means(&self.confusion);
        let mcov = if self.coverage.is_empty() {
            0.0
        } else {
            self.coverage.iter().map(|c| c.0).sum::<f64>() / self.coverage.len() as f64
        };
        let total: u64 = self.coverage.iter().map(|c| c.1).sum();
        let mwcov = if total == 0 {
            0.0
        } else {
            self.coverage.iter().map(|c| c.0 * c.1 as f64).sum::<f64>() / total as f64
        };
        PanopticResult {
            pq: mean(|c| c.pq),
            sq: mean(|c| c.sq),
            rq: mean(|c| c.rq),
            per_class,
            miou,
            macc,
            mcov,
            mwcov,
            matches: self.matches.clone(),
        }
    }
}

/// PQ, SQ and RQ of one image pair, plus the class and coverage metrics.
pub fn panoptic_quality(pred: &PanopticImage, gt: &PanopticImage) -> Result<PanopticResult> {
    let mut acc = PanopticAccumulator::default();
    acc.add(pred, gt)?;
    Ok(acc.finish())
}

fn confusion_means(conf: &BTreeMap<(u32, u32), u64>) -> (f64, f64) {
    let mut tp: BTreeMap<u32, u64> = BTreeMap::new();
    let mut gt_n: BTreeMap<u32, u64> = BTreeMap::new();
    let mut pred_n: BTreeMap<u32, u64> = BTreeMap::new();
    for (&(g, p), &n) in conf {
        *gt_n.entry(g).or_insert(0) += n;
        if p != IGNORE_LABEL {
            *pred_n.entry(p).or_insert(0) += n;
        }
        if g == p {
            *tp.entry(g).or_insert(0) += n;
        }
    }
    if gt_n.is_empty() {
        return (0.0, 0.0);
    }
    let mut iou = 0.0;
    let mut acc = 0.0;
    for (&c, &g) in &gt_n {
        let t = tp.get(&c).copied().unwrap_or(0) as f64;
        let p = pred_n.get(&c).copied().unwrap_or(0) as f64;
        iou += t / (g as f64 + p - t);
        acc += t / g as f64;
    }
    let k = gt_n.len() as f64;
    (iou / k, acc / k)
}

/// Mean IoU over the classes present in `gt`; void pixels are skipped.
pub fn miou(pred: &[u32], gt: &[u32]) -> f64 {
    confusion_means(&confusion(pred, gt)).0
}

/// Mean per-class pixel accuracy over the classes present in `gt`.
pub fn macc(pred: &[u32], gt: &[u32]) -> f64 {
    confusion_means(&confusion(pred, gt)).1
}

fn confusion(pred: &[u32], gt: &[u32]) -> BTreeMap<(u32, u32), u64> {
    let mut conf = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        if g != IGNORE_LABEL {
            *conf.entry((g, p)).or_insert(0) += 1;
        }
    }
    conf
}

/// `(mCov, mW-Cov)`: best IoU per gt instance, plain and size weighted.
pub fn coverage(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> (f64, f64) {
    if gt.is_empty() {
        return (0.0, 0.0);
    }
    let mut plain = 0.0;
    let mut weighted = 0.0;
    let mut total = 0.0;
    for g in gt {
        let area = g.iter().filter(|&&b| b).count() as f64;
        let best = pred
            .iter()
            .map(|p| {
                let i = p.iter().zip(g).filter(|(a, b)| **a && **b).count() as f64;
                let u = p.iter().zip(g).filter(|(a, b)| **a || **b).count() as f64;
                if u > 0.0 {
                    i / u
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max);
        plain += best;
        weighted += best * area;
        total += area;
    }
    (plain / gt.len() as f64, if total > 0.0 { weighted / total } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeomResult {
    pub accuracy: f64,
    pub completeness: f64,
    pub chamfer_l1: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub tau: f64,
}

/// Exhaustive nearest distance from each `src` point into `dst`.
pub fn nearest_distances_brute(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Vec<f64> {
    src.par_iter()
        .map(|p| dst.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
        .collect()
}

/// Nearest distances through a uniform hash grid over `dst`.
pub fn nearest_distances_grid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Vec<f64> {
    if dst.is_empty() {
        return vec![f64::INFINITY; src.len()];
    }
    let mut lo = dst[0];
    let mut hi = dst[0];
    for p in dst {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let ext = (hi - lo).max().max(1e-9);
    let cell = (ext / (dst.len() as f64).cbrt()).max(1e-9);
    let key = |p: &Vector3<f64>| -> [i64; 3] {
        [
            ((p.x - lo.x) / cell).floor() as i64,
            ((p.y - lo.y) / cell).floor() as i64,
            ((p.z - lo.z) / cell).floor() as i64,
        ]
    };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in dst.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let span = ((hi - lo) / cell).map(|v| v.ceil() as i64 + 1);
    let max_ring = span.max() + 2;
    src.par_iter()
        .map(|p| {
            let k = key(p);
            let mut best = f64::INFINITY;
            let mut ring = 0i64;
            loop {
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            if let Some(list) = grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                                for &j in list {
                                    best = best.min((p - dst[j]).norm_squared());
                                }
                            }
                        }
                    }
                }
                // every unvisited cell lies at least `ring * cell` away
                if (best.is_finite() && best.sqrt() <= ring as f64 * cell) || ring > max_ring + far_rings(p, &lo, &hi, cell) {
                    break;
                }
                ring += 1;
            }
            best.sqrt()
        })
        .collect()
}

/// Extra rings needed to reach the grid from a query point outside it.
fn far_rings(p: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>, cell: f64) -> i64 {
    let out = (lo - p).sup(&(p - hi)).sup(&Vector3::zeros());
    (out.max() / cell).ceil() as i64
}

/// Up to this many points on either side the exhaustive search is used.
const BRUTE_LIMIT: usize = 5000;

pub fn nearest_distances(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Vec<f64> {
    if dst.len() <= BRUTE_LIMIT && src.len() <= BRUTE_LIMIT {
        nearest_distances_brute(src, dst)
    } else {
        nearest_distances_grid(src, dst)
    }
}

/// Accuracy (pred to gt), completeness (gt to pred), Chamfer-L1 and F-score at `tau`.
pub fn geom_metrics(pred: &[Vector3<f64>], gt: &[Vector3<f64>], tau: f64) -> Result<GeomResult> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::invalid("geometry metrics need non-empty point sets"));
    }
    let d_pred = nearest_distances(pred, gt);
    let d_gt = nearest_distances(gt, pred);
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let frac = |d: &[f64]| d.iter().filter(|&&x| x < tau).count() as f64 / d.len() as f64;
    let accuracy = mean(&d_pred);
    let completeness = mean(&d_gt);
    let precision = frac(&d_pred);
    let recall = frac(&d_gt);
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(GeomResult {
        accuracy,
        completeness,
        chamfer_l1: 0.5 * (accuracy + completeness),
        precision,
        recall,
        fscore,
        tau,
    })
}

/// Points drawn from surfels with probability proportional to their area,
/// uniform within each surfel's one-sigma ellipse.
pub fn sample_surfels(surfels: &[Surfel], count: usize, min_opacity: f64, seed: u64) -> Vec<Vector3<f64>> {
    let kept: Vec<&Surfel> = surfels.iter().filter(|s| s.opacity >= min_opacity).collect();
    if kept.is_empty() || count == 0 {
        return vec![];
    }
    let mut cdf = Vec::with_capacity(kept.len());
    let mut acc = 0.0;
    for s in &kept {
        acc += s.scales[0] * s.scales[1];
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let r = rng.random::<f64>() * acc;
            let i = cdf.partition_point(|&c| c < r).min(kept.len() - 1);
            let s = kept[i];
            let rho = rng.random::<f64>().sqrt();
            let th = rng.random::<f64>() * std::f64::consts::TAU;
            let rot = crate::types::rotation_matrix(&s.rotation);
            s.center
                + rot.column(0) * (rho * th.cos() * s.scales[0])
                + rot.column(1) * (rho * th.sin() * s.scales[1])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub class_id: u32,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelNoise {
    /// Probability of dropping a whole instance mask in a frame.
    pub dropout: f64,
    /// Probability of flipping each mask boundary pixel.
    pub boundary_flip: f64,
}

impl Default for LabelNoise {
    fn default() -> Self {
        LabelNoise {
            dropout: 0.1,
            boundary_flip: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Trajectory {
    pub views: usize,
    pub radius: f64,
    pub height: f64,
    pub focal: f64,
    pub width: u32,
    pub height_px: u32,
    /// Every `held_out_every`-th view is held out (0 disables).
    pub held_out_every: usize,
}

impl Default for Trajectory {
    fn default() -> Self {
        Trajectory {
            views: 24,
            radius: 3.0,
            height: 1.8,
            focal: 90.0,
            width: 96,
            height_px: 72,
            held_out_every: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub objects: Vec<BoxObject>,
    pub vocabulary: Vec<String>,
    pub noise: LabelNoise,
    pub trajectory: Trajectory,
    /// Surfel grid spacing on box faces.
    pub spacing: f64,
    pub cloud_points: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            objects: vec![
                BoxObject {
                    center: [-0.9, 0.0, 0.3],
                    size: [0.6, 0.6, 0.6],
                    class_id: 0,
                    color: [0.85, 0.25, 0.2],
                },
                BoxObject {
                    center: [0.6, -0.5, 0.25],
                    size: [0.8, 0.5, 0.5],
                    class_id: 1,
                    color: [0.2, 0.7, 0.3],
                },
                BoxObject {
                    center: [0.3, 0.8, 0.4],
                    size: [0.5, 0.5, 0.8],
                    class_id: 2,
                    color: [0.25, 0.35, 0.9],
                },
            ],
            vocabulary: vec!["cube".into(), "crate".into(), "pillar".into()],
            noise: LabelNoise::default(),
            trajectory: Trajectory::default(),
            spacing: 0.05,
            cloud_points: 20000,
            seed: 0,
        }
    }
}

/// Clean panoptic labels of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthView {
    pub panoptic: PanopticImage,
}

/// Rendered synthetic dataset with exact labels and noisy pseudo-labels.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SyntheticSpec,
    pub surfels: Vec<Surfel>,
    /// Object index of every ground-truth surfel.
    pub object_ids: Vec<u32>,
    pub cameras: Vec<Camera>,
    pub held_out: Vec<bool>,
    /// Frames with noisy pseudo-labels, one per camera.
    pub frames: Vec<FrameBundle>,
    pub truth: Vec<GroundTruthView>,
    pub cloud: PointCloud,
}

impl SyntheticScene {
    pub fn train_frames(&self) -> Vec<FrameBundle> {
        self.frames
            .iter()
            .zip(&self.held_out)
            .filter(|(_, &h)| !h)
            .map(|(f, _)| f.clone())
            .collect()
    }

    pub fn held_out_indices(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.held_out[i]).collect()
    }
}

/// Visible faces of an axis-aligned box: the top and four sides.
fn box_faces(b: &BoxObject) -> Vec<(Vector3<f64>, Vector3<f64>, Vector3<f64>, [f64; 2])> {
    let c = Vector3::from(b.center);
    let h = Vector3::from(b.size) * 0.5;
    let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
    vec![
        (c + z * h.z, x, y, [h.x, h.y]),
        (c + x * h.x, y, z, [h.y, h.z]),
        (c - x * h.x, -y, z, [h.y, h.z]),
        (c + y * h.y, -x, z, [h.x, h.z]),
        (c - y * h.y, x, z, [h.x, h.z]),
    ]
}

/// Box scene on a void background, orbit cameras and labels from the renderer.
pub fn make_synthetic_scene(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    if spec.objects.is_empty() {
        return Err(Error::invalid("synthetic scene needs at least one object"));
    }
    if spec.spacing <= 0.0 {
        return Err(Error::invalid("surfel spacing must be positive"));
    }
    let nc = spec.vocabulary.len();
    if let Some(o) = spec.objects.iter().find(|o| o.class_id as usize >= nc) {
        return Err(Error::invalid(format!("object class {} outside vocabulary", o.class_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut surfels = Vec::new();
    let mut object_ids = Vec::new();
    let mut points = Vec::new();
    let mut intensities = Vec::new();
    let face_area: Vec<Vec<f64>> = spec
        .objects
        .iter()
        .map(|b| box_faces(b).iter().map(|f| 4.0 * f.3[0] * f.3[1]).collect())
        .collect();
    let total_area: f64 = face_area.iter().flatten().sum();
    for (k, b) in spec.objects.iter().enumerate() {
        let color = Vector3::from(b.color);
        let gray = 0.299 * color.x + 0.587 * color.y + 0.114 * color.z;
        for (fi, (fc, tu, tv, half)) in box_faces(b).into_iter().enumerate() {
            let n = tu.cross(&tv);
            let rotation = quaternion_from_matrix(&Matrix3::from_columns(&[tu, tv, n]));
            let nu = (2.0 * half[0] / spec.spacing).round().max(1.0) as usize;
            let nv = (2.0 * half[1] / spec.spacing).round().max(1.0) as usize;
            let (du, dv) = (2.0 * half[0] / nu as f64, 2.0 * half[1] / nv as f64);
            for i in 0..nu {
                for j in 0..nv {
                    let a = -half[0] + (i as f64 + 0.5) * du;
                    let bb = -half[1] + (j as f64 + 0.5) * dv;
                    let mut sem = vec![0.0; nc];
                    sem[b.class_id as usize] = 1.0;
                    surfels.push(Surfel {
                        center: fc + tu * a + tv * bb,
                        rotation,
                        scales: [0.75 * du, 0.75 * dv],
                        opacity: 0.99,
                        color,
                        sem,
                        ins: vec![],
                    });
                    object_ids.push(k as u32);
                }
            }
            let share = face_area[k][fi] / total_area;
            let count = (share * spec.cloud_points as f64).round() as usize;
            for _ in 0..count {
                let a = rng.random_range(-half[0]..half[0]);
                let bb = rng.random_range(-half[1]..half[1]);
                points.push(fc + tu * a + tv * bb);
                intensities.push(gray);
            }
        }
    }
    let cloud = PointCloud::new(points, intensities)?;

    let t = &spec.trajectory;
    if t.views == 0 {
        return Err(Error::invalid("trajectory needs at least one view"));
    }
    let objects = spec.objects.len();
    let probs: Vec<f64> = object_ids
        .iter()
        .flat_map(|&k| (0..objects).map(move |j| if j == k as usize { 1.0 } else { 0.0 }))
        .collect();
    let rcfg = RasterConfig {
        targets: Targets {
            color: true,
            depth: false,
            normal: false,
            semantic: false,
            instance: true,
        },
        ..RasterConfig::default()
    };
    let mut cameras = Vec::new();
    let mut frames = Vec::new();
    let mut truth = Vec::new();
    let mut held_out = Vec::new();
    for v in 0..t.views {
        let th = std::f64::consts::TAU * v as f64 / t.views as f64;
        let wobble = 0.15 * t.height * (3.0 * th).sin();
        let eye = Vector3::new(t.radius * th.cos(), t.radius * th.sin(), t.height + wobble);
        let cam = Camera::look_at(
            eye,
            Vector3::new(0.0, 0.0, 0.3),
            Vector3::z(),
            t.focal,
            t.width,
            t.height_px,
            0.05,
            50.0,
        )?;
        let out = render(
            &surfels,
            Some(InstanceInput {
                channels: objects,
                probs: &probs,
            }),
            &cam,
            &rcfg,
        );
        let rgb = out.color.expect("color requested");
        let inst = out.instance.expect("instance requested");
        let ids: Vec<u32> = argmax_ids(&inst)
            .into_iter()
            .enumerate()
            .map(|(p, id)| if out.opacity.data[p] >= 0.5 { id } else { NO_INSTANCE })
            .collect();
        let classes: Vec<u32> = ids
            .iter()
            .map(|&id| {
                if id == NO_INSTANCE {
                    IGNORE_LABEL
                } else {
                    spec.objects[id as usize].class_id
                }
            })
            .collect();
        let (w, h) = (t.width as usize, t.height_px as usize);
        let mut masks = Vec::new();
        for (k, o) in spec.objects.iter().enumerate() {
            let clean: Vec<bool> = ids.iter().map(|&id| id == k as u32).collect();
            if !clean.iter().any(|&b| b) || rng.random::<f64>() < spec.noise.dropout {
                continue;
            }
            let mut noisy = clean.clone();
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let edge = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dx, dy)| {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && clean[ny as usize * w + nx as usize] != clean[p]
                    });
                    if edge && rng.random::<f64>() < spec.noise.boundary_flip {
                        noisy[p] = !clean[p];
                    }
                }
            }
            masks.push(InstanceMask {
                class_id: o.class_id,
                mask: noisy,
            });
        }
        let mut semantic = vec![IGNORE_LABEL; w * h];
        for m in &masks {
            for (s, &b) in semantic.iter_mut().zip(&m.mask) {
                if b {
                    *s = m.class_id;
                }
            }
        }
        frames.push(FrameBundle::new(cam.clone(), rgb, semantic, masks, nc)?);
        truth.push(GroundTruthView {
            panoptic: PanopticImage::new(w, h, ids, classes)?,
        });
        held_out.push(t.held_out_every > 0 && v % t.held_out_every == t.held_out_every - 1);
        cameras.push(cam);
    }
    Ok(SyntheticScene {
        spec: spec.clone(),
        surfels,
        object_ids,
        cameras,
        held_out,
        frames,
        truth,
        cloud,
    })
}

/// Street-like benchmark scene: elongated, translucent surfels layered along
/// the view direction, with a forward-looking camera.
pub fn make_street_scene(count: usize, width: u32, height: u32, sem_dim: usize, seed: u64) -> Result<(Vec<Surfel>, Camera)> {
    let camera = Camera::look_at(
        Vector3::new(0.0, 0.0, 1.6),
        Vector3::new(0.0, 30.0, 1.2),
        Vector3::z(),
        0.8 * width as f64,
        width,
        height,
        0.1,
        200.0,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let y = rng.random_range(3.0..40.0);
        let kind = i % 3;
        // road markings, facades and overhead wires
        let (center, normal, along) = match kind {
            0 => (
                Vector3::new(rng.random_range(-6.0..6.0), y, rng.random_range(0.0..0.2)),
                Vector3::z(),
                Vector3::new(rng.random_range(-0.3..0.3), 1.0, 0.0),
            ),
            1 => {
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                (
                    Vector3::new(side * rng.random_range(4.0..8.0), y, rng.random_range(0.0..6.0)),
                    Vector3::new(-side, 0.0, 0.0),
                    Vector3::new(0.0, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                )
            }
            _ => (
                Vector3::new(rng.random_range(-5.0..5.0), y, rng.random_range(3.0..6.0)),
                Vector3::new(0.0, 1.0, rng.random_range(-0.3..0.3)),
                Vector3::new(1.0, 0.0, rng.random_range(-0.5..0.5)),
            ),
        };
        let n = normal.normalize();
        let tu = (along - n * along.dot(&n)).normalize();
        let tv = n.cross(&tu);
        let rot = Matrix3::from_columns(&[tu, tv, n]);
        let long = rng.random_range(0.6..2.5);
        let aspect = rng.random_range(5.0..9.0);
        let mut sem = vec![0.0; sem_dim];
        for v in sem.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        if sem_dim > 0 {
            sem[kind % sem_dim] += 3.0;
        }
        out.push(Surfel {
            center,
            rotation: quaternion_from_matrix(&rot),
            scales: [long, long / aspect],
            opacity: rng.random_range(0.15..0.5),
            color: Vector3::new(rng.random(), rng.random(), rng.random()),
            sem,
            ins: vec![],
        });
    }
    Ok((out, camera))
}

/// Per-view model prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPrediction {
    pub panoptic: PanopticImage,
    /// Semantic argmax per pixel, [`IGNORE_LABEL`] where nothing renders.
    pub semantic: Vec<u32>,
}

/// Surfel label distributions for `camera`, with queries refined by the
/// surfels in its frustum.
pub fn label_view(model: &Model, camera: &Camera) -> LabelAssignment {
    let scene = &model.scene;
    let att = &model.attention;
    let selected = frustum_select(&scene.surfels, camera);
    let (keys, values) = build_keys_values(&scene.surfels, &selected, att);
    let feats: Vec<f64> = scene.queries.iter().flat_map(|q| q.feature.iter().copied()).collect();
    let (refined, _) = cross_attention_update(&feats, &keys, &values, att);
    assign_labels_with(&scene.queries, &refined, att.channels, &scene.surfels)
}

/// Renders instance ids, query classes and semantic argmax for one camera.
pub fn predict_view(model: &Model, camera: &Camera, raster: &RasterConfig) -> ViewPrediction {
    let scene = &model.scene;
    let surfels = &scene.surfels;
    let labels = label_view(model, camera);
    let cfg = RasterConfig {
        targets: Targets {
            color: false,
            depth: false,
            normal: false,
            semantic: true,
            instance: !scene.queries.is_empty(),
        },
        ..raster.clone()
    };
    let instance = (!scene.queries.is_empty()).then(|| labels.input());
    let out = render(surfels, instance, camera, &cfg);
    let n = camera.pixel_count();
    let covered: Vec<bool> = out.opacity.data.iter().map(|&o| o >= 0.5).collect();
    let ids: Vec<u32> = match &out.instance {
        Some(p) => argmax_ids(p)
            .into_iter()
            .zip(&covered)
            .map(|(id, &c)| if c { id } else { NO_INSTANCE })
            .collect(),
        None => vec![NO_INSTANCE; n],
    };
    let classes: Vec<u32> = ids
        .iter()
        .map(|&id| {
            if id == NO_INSTANCE {
                IGNORE_LABEL
            } else {
                scene.queries[id as usize].class_id().unwrap_or(IGNORE_LABEL)
            }
        })
        .collect();
    let semantic: Vec<u32> = match &out.semantic {
        Some(p) if p.channels > 0 => (0..n)
            .map(|i| {
                if !covered[i] {
                    return IGNORE_LABEL;
                }
                let px = p.at(i);
                let mut best = 0;
                for (c, &v) in px.iter().enumerate() {
                    if v > px[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect(),
        _ => vec![IGNORE_LABEL; n],
    };
    ViewPrediction {
        panoptic: PanopticImage {
            width: camera.width as usize,
            height: camera.height as usize,
            ids,
            classes,
        },
        semantic,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub panoptic: PanopticResult,
    pub geometry: GeomResult,
    pub views: usize,
}

/// Panoptic metrics over the given views (mIoU/mAcc from the semantic
/// plane) and geometry against `gt_cloud`.
pub fn evaluate_views(
    model: &Model,
    cameras: &[Camera],
    truth: &[PanopticImage],
    gt_cloud: &[Vector3<f64>],
    raster: &RasterConfig,
    tau: f64,
    seed: u64,
) -> Result<EvalReport> {
    if cameras.len() != truth.len() {
        return Err(Error::invalid("one ground-truth image per camera is required"));
    }
    let mut acc = PanopticAccumulator::default();
    let mut sem_conf = BTreeMap::new();
    for (cam, gt) in cameras.iter().zip(truth) {
        let pred = predict_view(model, cam, raster);
        acc.add(&pred.panoptic, gt)?;
        for (&p, &g) in pred.semantic.iter().zip(&gt.classes) {
            if g != IGNORE_LABEL {
                *sem_conf.entry((g, p)).or_insert(0u64) += 1;
            }
        }
    }
    let mut panoptic = acc.finish();
    let (miou, macc) = confusion_means(&sem_conf);
    panoptic.miou = miou;
    panoptic.macc = macc;
    let pts = sample_surfels(&model.scene.surfels, gt_cloud.len().max(1), 0.5, seed);
    let geometry = geom_metrics(&pts, gt_cloud, tau)?;
    Ok(EvalReport {
        panoptic,
        geometry,
        views: cameras.len(),
    })
}
