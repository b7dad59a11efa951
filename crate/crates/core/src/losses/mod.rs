//! Training losses, Hungarian matching, analytic gradients and a
//! finite-difference verifier.
//!
//! Pixel losses are mean-reduced over pixels and surfel losses over surfels.
//! Every loss comes with a `*_grad` twin returning the gradient with respect
//! to its direct inputs; [`pipeline`] chains them through the renderer and the
//! attention stages.

mod backward;
mod fd;
mod hungarian;
mod params;
mod pipeline;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::numeric::NeumaierSum;
use crate::sogmm::SogmmModel;
use crate::types::{rotation_matrix, Plane, Surfel, IGNORE_LABEL};

pub use backward::{raster_backward, rotation_backward, RasterGrads};
pub use fd::{finite_diff_check, sample_coordinates, FdReport};
pub use hungarian::{hungarian, hungarian_match, Assignment, NO_MATCH_COST};
pub use params::{Gradients, Model, ParamClass};
pub use pipeline::{evaluate, Evaluation, PipelineConfig};

/// Lower/upper clamp for probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// SSIM share inside the photometric loss.
    pub lambda_s: f64,
    /// Normal-alignment weight inside the geometric loss.
    pub lambda_n: f64,
    pub rgb: f64,
    pub geo: f64,
    pub ins: f64,
    pub sem: f64,
    pub iso: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 0.2,
            lambda_n: 0.1,
            rgb: 1.0,
            geo: 0.5,
            ins: 1.0,
            sem: 0.5,
            iso: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub rgb: f64,
    pub geo: f64,
    pub ins: f64,
    pub sem: f64,
    pub iso: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub parts: LossParts,
    pub total: f64,
    pub weights: LossWeights,
    /// `(query, gt mask)` pairs used by the instance loss.
    pub matches: Vec<(usize, usize)>,
}

impl LossReport {
    /// Weighted terms in the order rgb, geo, ins, sem, iso.
    pub fn contributions(&self) -> [f64; 5] {
        let (p, w) = (&self.parts, &self.weights);
        [w.rgb * p.rgb, w.geo * p.geo, w.ins * p.ins, w.sem * p.sem, w.iso * p.iso]
    }
}

pub fn total_loss(parts: LossParts, weights: &LossWeights, matches: Vec<(usize, usize)>) -> LossReport {
    let mut r = LossReport {
        parts,
        total: 0.0,
        weights: *weights,
        matches,
    };
    r.total = NeumaierSum::sum(r.contributions());
    r
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable zero-padded Gaussian blur of a single-channel `w x h` image.
fn blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = ssim_kernel();
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn channel(p: &Plane, c: usize) -> Vec<f64> {
    p.data.iter().skip(c).step_by(p.channels).copied().collect()
}

/// Mean SSIM over pixels and channels, with its gradient on `x` when asked.
pub fn ssim(x: &Plane, y: &Plane, grad: bool) -> (f64, Option<Vec<f64>>) {
    let (w, h, ch) = (x.width, x.height, x.channels);
    let n = (w * h * ch) as f64;
    let mut total = NeumaierSum::default();
    let mut g = grad.then(|| vec![0.0; x.data.len()]);
    for c in 0..ch {
        let xs = channel(x, c);
        let ys = channel(y, c);
        let mx = blur(&xs, w, h);
        let my = blur(&ys, w, h);
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
        let pxx = blur(&xx, w, h);
        let pyy = blur(&yy, w, h);
        let pxy = blur(&xy, w, h);
        let mut d_mu = vec![0.0; w * h];
        let mut d_pxx = vec![0.0; w * h];
        let mut d_pxy = vec![0.0; w * h];
        for i in 0..w * h {
            let a1 = 2.0 * mx[i] * my[i] + SSIM_C1;
            let a2 = 2.0 * (pxy[i] - mx[i] * my[i]) + SSIM_C2;
            let b1 = mx[i] * mx[i] + my[i] * my[i] + SSIM_C1;
            let b2 = (pxx[i] - mx[i] * mx[i]) + (pyy[i] - my[i] * my[i]) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total.add(s);
            if grad {
                let bb = b1 * b2;
                d_mu[i] = (2.0 * my[i] * (a2 - a1) - s * 2.0 * mx[i] * (b2 - b1)) / bb / n;
                d_pxy[i] = 2.0 * a1 / bb / n;
                d_pxx[i] = -s / b2 / n;
            }
        }
        if let Some(g) = g.as_mut() {
            let bm = blur(&d_mu, w, h);
            let bxx = blur(&d_pxx, w, h);
            let bxy = blur(&d_pxy, w, h);
            for i in 0..w * h {
                g[i * ch + c] = bm[i] + 2.0 * xs[i] * bxx[i] + ys[i] * bxy[i];
            }
        }
    }
    (total.value() / n, g)
}

/// `(1 - lambda_s) * L1 + lambda_s * (1 - SSIM)`.
pub fn loss_rgb(rendered: &Plane, gt: &Plane, lambda_s: f64) -> f64 {
    loss_rgb_grad(rendered, gt, lambda_s, false).0
}

pub fn loss_rgb_grad(rendered: &Plane, gt: &Plane, lambda_s: f64, grad: bool) -> (f64, Option<Vec<f64>>) {
    let n = rendered.data.len() as f64;
    let l1 = NeumaierSum::sum(rendered.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs())) / n;
    let (s, sg) = if lambda_s > 0.0 {
        ssim(rendered, gt, grad)
    } else {
        (1.0, None)
    };
    let loss = (1.0 - lambda_s) * l1 + lambda_s * (1.0 - s);
    let g = grad.then(|| {
        let mut g: Vec<f64> = rendered
            .data
            .iter()
            .zip(&gt.data)
            .map(|(a, b)| (1.0 - lambda_s) * sign(a - b) / n)
            .collect();
        if let Some(sg) = sg {
            for (gv, s) in g.iter_mut().zip(sg) {
                *gv -= lambda_s * s;
            }
        }
        g
    });
    (loss, g)
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-surfel gradients of a surfel-wise loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfelGrads {
    pub center: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub scales: Vec<[f64; 2]>,
}

/// Mean over surfels of plane drift plus `lambda_n` times normal misalignment,
/// each surfel paired with its nearest component.
pub fn loss_geo(surfels: &[Surfel], model: &SogmmModel, lambda_n: f64) -> f64 {
    loss_geo_grad(surfels, model, lambda_n, false).0
}

pub fn loss_geo_grad(
    surfels: &[Surfel],
    model: &SogmmModel,
    lambda_n: f64,
    grad: bool,
) -> (f64, Option<SurfelGrads>) {
    if surfels.is_empty() || model.is_empty() {
        return (0.0, grad.then(|| zero_surfel_grads(surfels.len())));
    }
    let n = surfels.len() as f64;
    let mut acc = NeumaierSum::default();
    let mut g = grad.then(|| zero_surfel_grads(surfels.len()));
    for (i, s) in surfels.iter().enumerate() {
        let comp = &model.components[model.nearest_component(&s.center)];
        let nk = comp.normal();
        let off = (s.center - comp.mean).dot(&nk);
        let r = rotation_matrix(&s.rotation);
        let normal = r.column(2).into_owned();
        let cos = normal.dot(&nk);
        acc.add(off.abs() + lambda_n * (1.0 - cos.abs()));
        if let Some(g) = g.as_mut() {
            g.center[i] = nk * (sign(off) / n);
            let mut dr = nalgebra::Matrix3::zeros();
            dr.set_column(2, &(nk * (-lambda_n * sign(cos) / n)));
            g.rotation[i] = rotation_backward(&s.rotation, &dr);
        }
    }
    (acc.value() / n, g)
}

fn zero_surfel_grads(n: usize) -> SurfelGrads {
    SurfelGrads {
        center: vec![Vector3::zeros(); n],
        rotation: vec![[0.0; 4]; n],
        scales: vec![[0.0; 2]; n],
    }
}

/// Mean of `(s1 - s2)^2`.
pub fn loss_iso(surfels: &[Surfel]) -> f64 {
    loss_iso_grad(surfels, false).0
}

pub fn loss_iso_grad(surfels: &[Surfel], grad: bool) -> (f64, Option<Vec<[f64; 2]>>) {
    if surfels.is_empty() {
        return (0.0, grad.then(Vec::new));
    }
    let n = surfels.len() as f64;
    let v = NeumaierSum::sum(surfels.iter().map(|s| (s.scales[0] - s.scales[1]).powi(2))) / n;
    let g = grad.then(|| {
        surfels
            .iter()
            .map(|s| {
                let d = 2.0 * (s.scales[0] - s.scales[1]) / n;
                [d, -d]
            })
            .collect()
    });
    (v, g)
}

/// `1 - 2 sum(p g) / (sum p + sum g)`; 0 when both masks are empty.
pub fn dice_loss(pred: &[f64], gt: &[bool]) -> f64 {
    let (inter, sp, sg) = dice_sums(pred, gt);
    if sp + sg == 0.0 {
        0.0
    } else {
        1.0 - 2.0 * inter / (sp + sg)
    }
}

fn dice_sums(pred: &[f64], gt: &[bool]) -> (f64, f64, f64) {
    let mut inter = NeumaierSum::default();
    let mut sp = NeumaierSum::default();
    let mut sg = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        sp.add(p);
        if g {
            inter.add(p);
            sg += 1;
        }
    }
    (inter.value(), sp.value(), sg as f64)
}

/// Mean binary cross-entropy with clamped probabilities.
pub fn bce_loss(pred: &[f64], gt: &[bool]) -> f64 {
    let n = pred.len().max(1) as f64;
    NeumaierSum::sum(pred.iter().zip(gt).map(|(&p, &g)| {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        if g {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        }
    })) / n
}

/// BCE against an all-background mask.
pub fn bce_empty(pred: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    NeumaierSum::sum(pred.iter().map(|&p| -(1.0 - p.clamp(PROB_EPS, 1.0 - PROB_EPS)).ln())) / n
}

/// Dice + BCE for one predicted/gt pair; also the matching cost.
pub fn mask_cost(pred: &[f64], gt: &[bool]) -> f64 {
    dice_loss(pred, gt) + bce_loss(pred, gt)
}

fn add_mask_cost_grad(pred: &[f64], gt: &[bool], out: &mut [f64]) {
    let n = pred.len().max(1) as f64;
    let (inter, sp, sg) = dice_sums(pred, gt);
    let den = sp + sg;
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        let gv = if g { 1.0 } else { 0.0 };
        if den > 0.0 {
            out[i] -= 2.0 * (gv * den - inter) / (den * den);
        }
        out[i] += bce_grad(p, g) / n;
    }
}

#[inline]
fn bce_grad(p: f64, g: bool) -> f64 {
    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
        0.0
    } else if g {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

/// Predicted query masks: channel `k` of the instance plane for each `k`.
pub fn query_masks(instance: &Plane, queries: &[usize]) -> Vec<Vec<f64>> {
    queries.iter().map(|&k| channel(instance, k)).collect()
}

/// Matching cost matrix `queries x gt` of Dice + BCE.
pub fn match_costs(pred: &[Vec<f64>], gt: &[Vec<bool>]) -> Vec<Vec<f64>> {
    pred.iter()
        .map(|p| gt.iter().map(|g| mask_cost(p, g)).collect())
        .collect()
}

/// Sum over matched pairs of Dice + BCE plus BCE against empty for every
/// unmatched prediction. `assignment[k]` is the gt index matched to `pred[k]`.
pub fn loss_ins(pred: &[Vec<f64>], gt: &[Vec<bool>], assignment: &[Option<usize>]) -> f64 {
    loss_ins_grad(pred, gt, assignment, false).0
}

pub fn loss_ins_grad(
    pred: &[Vec<f64>],
    gt: &[Vec<bool>],
    assignment: &[Option<usize>],
    grad: bool,
) -> (f64, Option<Vec<Vec<f64>>>) {
    let mut acc = NeumaierSum::default();
    let mut g = grad.then(|| pred.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>());
    for (k, p) in pred.iter().enumerate() {
        match assignment[k] {
            Some(j) => {
                acc.add(mask_cost(p, &gt[j]));
                if let Some(g) = g.as_mut() {
                    add_mask_cost_grad(p, &gt[j], &mut g[k]);
                }
            }
            None => {
                acc.add(bce_empty(p));
                if let Some(g) = g.as_mut() {
                    let n = p.len().max(1) as f64;
                    for (o, &v) in g[k].iter_mut().zip(p) {
                        *o += bce_grad(v, false) / n;
                    }
                }
            }
        }
    }
    (acc.value(), g)
}

/// Mean cross-entropy of the softmaxed semantic plane over labeled pixels.
pub fn loss_sem(rendered: &Plane, gt: &[u32]) -> f64 {
    loss_sem_grad(rendered, gt, false).0
}

pub fn loss_sem_grad(rendered: &Plane, gt: &[u32], grad: bool) -> (f64, Option<Vec<f64>>) {
    let c = rendered.channels;
    let labeled = gt.iter().filter(|&&l| l != IGNORE_LABEL && (l as usize) < c).count();
    let mut g = grad.then(|| vec![0.0; rendered.data.len()]);
    if labeled == 0 {
        return (0.0, g);
    }
    let n = labeled as f64;
    let mut acc = NeumaierSum::default();
    let mut prob = vec![0.0; c];
    for (i, &label) in gt.iter().enumerate() {
        if label == IGNORE_LABEL || label as usize >= c {
            continue;
        }
        crate::numeric::softmax_into(rendered.at(i), &mut prob);
        let py = prob[label as usize];
        acc.add(-py.clamp(PROB_EPS, 1.0 - PROB_EPS).ln());
        if let Some(g) = g.as_mut() {
            if py > PROB_EPS && py < 1.0 - PROB_EPS {
                for k in 0..c {
                    let onehot = if k == label as usize { 1.0 } else { 0.0 };
                    g[i * c + k] = (prob[k] - onehot) / n;
                }
            }
        }
    }
    (acc.value() / n, g)
}
