//! Self-organizing Gaussian mixture over a point cloud.
//!
//! The mixture is grown top-down: a node is split along its principal axis
//! while it is not planar enough, then the leaves are refined jointly with a
//! few EM iterations. Each component doubles as a local plane prior whose
//! normal is the eigenvector of the smallest covariance eigenvalue.

use std::f64::consts::PI;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::NeumaierSum;
use crate::types::{quaternion_from_matrix, PointCloud, Surfel};

/// Relative size of the covariance regularizer: `eps = REG_SCALE * trace`.
pub const REG_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SogmmConfig {
    /// Largest accepted `lambda_2 / lambda_0` for a leaf to count as planar.
    pub planarity_threshold: f64,
    pub min_points: usize,
    pub max_depth: usize,
    pub em_iters: usize,
    /// Observing camera positions used to orient normals; may be empty.
    pub viewpoints: Vec<Vector3<f64>>,
}

impl Default for SogmmConfig {
    fn default() -> Self {
        SogmmConfig {
            planarity_threshold: 0.02,
            min_points: 20,
            max_depth: 10,
            em_iters: 5,
            viewpoints: Vec::new(),
        }
    }
}

/// Eigen decomposition of a component covariance, eigenvalues descending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenFrame {
    pub values: [f64; 3],
    /// `vectors[i]` belongs to `values[i]`; `(v0, v1, v2)` is right-handed.
    pub vectors: [Vector3<f64>; 3],
}

impl EigenFrame {
    pub fn normal(&self) -> Vector3<f64> {
        self.vectors[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SogmmComponent {
    pub weight: f64,
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub frame: EigenFrame,
    pub intensity_mean: f64,
    pub intensity_var: f64,
    cov_inv: Matrix3<f64>,
    log_norm: f64,
}

impl SogmmComponent {
    /// Builds a component and caches its eigen frame and Gaussian normalizer.
    pub fn new(
        weight: f64,
        mean: Vector3<f64>,
        cov: Matrix3<f64>,
        orient_toward: Option<Vector3<f64>>,
    ) -> Result<Self> {
        let frame = eigen_frame(&cov, orient_toward.map(|c| c - mean))?;
        let det = cov.determinant();
        let cov_inv = cov
            .try_inverse()
            .filter(|_| det > 0.0)
            .ok_or_else(|| Error::invalid("component covariance is singular"))?;
        Ok(SogmmComponent {
            weight,
            mean,
            cov,
            frame,
            intensity_mean: 0.0,
            intensity_var: 0.0,
            cov_inv,
            log_norm: -1.5 * (2.0 * PI).ln() - 0.5 * det.ln(),
        })
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.frame.normal()
    }

    pub fn log_pdf(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.mean;
        self.log_norm - 0.5 * d.dot(&(self.cov_inv * d))
    }

    pub fn pdf(&self, p: &Vector3<f64>) -> f64 {
        self.log_pdf(p).exp()
    }

    /// Local coordinates of `p` in this component's eigen frame.
    pub fn to_tangent(&self, p: &Vector3<f64>, g: f64) -> TangentCoords {
        let d = p - self.mean;
        TangentCoords {
            u: d.dot(&self.frame.vectors[0]),
            v: d.dot(&self.frame.vectors[1]),
            w: d.dot(&self.frame.vectors[2]),
            g,
        }
    }

    pub fn plane_distance(&self, p: &Vector3<f64>) -> f64 {
        plane_distance(p, self)
    }
}

/// Coordinates of a world point in a component frame, plus its intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentCoords {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub g: f64,
}

impl TangentCoords {
    /// The augmented 4-vector `[u, v, 0, g]` with the normal offset dropped.
    pub fn augmented(&self) -> [f64; 4] {
        [self.u, self.v, 0.0, self.g]
    }

    pub fn to_world(&self, component: &SogmmComponent) -> Vector3<f64> {
        let [v0, v1, v2] = component.frame.vectors;
        component.mean + v0 * self.u + v1 * self.v + v2 * self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SogmmModel {
    pub components: Vec<SogmmComponent>,
    pub config: SogmmConfig,
    /// Data log-likelihood before EM and after each EM iteration.
    pub log_likelihood: Vec<f64>,
}

impl SogmmModel {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn density(&self, p: &Vector3<f64>) -> f64 {
        self.components.iter().map(|c| c.weight * c.pdf(p)).sum()
    }

    pub fn log_density(&self, p: &Vector3<f64>) -> f64 {
        log_sum_exp(self.components.iter().map(|c| c.weight.ln() + c.log_pdf(p)))
    }

    /// Index of the component with the largest responsibility for `p`;
    /// ties go to the lowest index.
    pub fn nearest_component(&self, p: &Vector3<f64>) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, c) in self.components.iter().enumerate() {
            let s = c.weight.ln() + c.log_pdf(p);
            if s > best_score {
                best = k;
                best_score = s;
            }
        }
        best
    }

    pub fn data_log_likelihood(&self, cloud: &PointCloud) -> f64 {
        let terms: Vec<f64> = cloud
            .points
            .par_iter()
            .map(|p| self.log_density(p))
            .collect();
        NeumaierSum::sum(terms)
    }
}

/// `|(mu - mean_k) . n_k|`: drift of a point off the component plane.
pub fn plane_distance(mu: &Vector3<f64>, component: &SogmmComponent) -> f64 {
    (mu - component.mean).dot(&component.normal()).abs()
}

pub fn to_tangent(component: &SogmmComponent, p: &Vector3<f64>, g: f64) -> TangentCoords {
    component.to_tangent(p, g)
}

fn orient(v: Vector3<f64>, reference: Option<Vector3<f64>>) -> Vector3<f64> {
    if let Some(r) = reference {
        let d = v.dot(&r);
        if d > 0.0 {
            return v;
        } else if d < 0.0 {
            return -v;
        }
    }
    let k = v.iamax();
    if v[k] < 0.0 {
        -v
    } else {
        v
    }
}

/// Eigen frame of a symmetric PSD covariance.
///
/// The normal `v2` points toward `orient_toward` when given (and not
/// perpendicular), otherwise its largest-magnitude coordinate is positive.
/// `v0` follows the largest-coordinate rule and `v1 = v2 x v0`.
pub fn eigen_frame(cov: &Matrix3<f64>, orient_toward: Option<Vector3<f64>>) -> Result<EigenFrame> {
    if !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("covariance has non-finite entries"));
    }
    let scale = cov.abs().max().max(1.0);
    if (cov - cov.transpose()).abs().max() > 1e-10 * scale {
        return Err(Error::invalid("covariance is not symmetric"));
    }
    let eig = SymmetricEigen::new(*cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.map(|i| eig.eigenvalues[i].max(0.0));
    let v0 = orient(eig.eigenvectors.column(order[0]).normalize(), None);
    let n = orient(eig.eigenvectors.column(order[2]).normalize(), orient_toward);
    let v1 = n.cross(&v0).normalize();
    Ok(EigenFrame {
        values,
        vectors: [v0, v1, n],
    })
}

fn mean_and_scatter(points: &[Vector3<f64>], idx: &[usize]) -> (Vector3<f64>, Matrix3<f64>) {
    let n = idx.len() as f64;
    let mean = idx.iter().fold(Vector3::zeros(), |a, &i| a + points[i]) / n;
    let cov = idx.iter().fold(Matrix3::zeros(), |a, &i| {
        let d = points[i] - mean;
        a + d * d.transpose()
    }) / n;
    (mean, cov)
}

fn regularizer(cov: &Matrix3<f64>) -> f64 {
    (REG_SCALE * cov.trace()).max(1e-15)
}

/// Clamps eigenvalues of a symmetric matrix from below.
fn floor_eigenvalues(cov: &Matrix3<f64>, floor: f64) -> Matrix3<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let m = eig.eigenvectors * Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (m + m.transpose()) * 0.5
}

struct Leaf {
    indices: Vec<usize>,
}

fn split_tree(points: &[Vector3<f64>], cfg: &SogmmConfig) -> Result<Vec<Leaf>> {
    let mut leaves = Vec::new();
    let mut stack = vec![((0..points.len()).collect::<Vec<_>>(), 0usize)];
    while let Some((idx, depth)) = stack.pop() {
        let (mean, cov) = mean_and_scatter(points, &idx);
        let reg = cov + Matrix3::identity() * regularizer(&cov);
        let frame = eigen_frame(&reg, None)?;
        let ratio = frame.values[2] / frame.values[0];
        let splittable =
            ratio > cfg.planarity_threshold && idx.len() >= 2 * cfg.min_points && depth < cfg.max_depth;
        if splittable {
            let axis = frame.vectors[0];
            let (left, right): (Vec<usize>, Vec<usize>) =
                idx.iter().partition(|&&i| (points[i] - mean).dot(&axis) < 0.0);
            if !left.is_empty() && !right.is_empty() {
                // right pushed first so the left subtree is emitted first
                stack.push((right, depth + 1));
                stack.push((left, depth + 1));
                continue;
            }
        }
        leaves.push(Leaf { indices: idx });
    }
    Ok(leaves)
}

fn log_sum_exp(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Fits the mixture: recursive planarity splitting, then `em_iters` rounds of EM.
pub fn fit_sogmm(cloud: &PointCloud, cfg: &SogmmConfig) -> Result<SogmmModel> {
    let n = cloud.len();
    if n == 0 || n < cfg.min_points {
        return Err(Error::invalid(format!(
            "point cloud has {n} points, need at least {}",
            cfg.min_points.max(1)
        )));
    }
    if !(cfg.planarity_threshold >= 0.0) {
        return Err(Error::invalid("planarity threshold must be non-negative"));
    }
    let points = &cloud.points;
    let orient_toward = if cfg.viewpoints.is_empty() {
        None
    } else {
        Some(cfg.viewpoints.iter().sum::<Vector3<f64>>() / cfg.viewpoints.len() as f64)
    };

    let leaves = split_tree(points, cfg)?;
    let mut floors = Vec::with_capacity(leaves.len());
    let mut components = Vec::with_capacity(leaves.len());
    for leaf in &leaves {
        let (mean, cov) = mean_and_scatter(points, &leaf.indices);
        let eps = regularizer(&cov);
        floors.push(eps);
        components.push(SogmmComponent::new(
            leaf.indices.len() as f64 / n as f64,
            mean,
            cov + Matrix3::identity() * eps,
            orient_toward,
        )?);
    }

    let mut model = SogmmModel {
        components,
        config: cfg.clone(),
        log_likelihood: Vec::new(),
    };
    model.log_likelihood.push(model.data_log_likelihood(cloud));

    for _ in 0..cfg.em_iters {
        let resp = responsibilities(&model, points);
        let k = model.components.len();
        let mut next = Vec::with_capacity(k);
        for (j, comp) in model.components.iter().enumerate() {
            let mut nk = NeumaierSum::default();
            let mut sum = Vector3::zeros();
            for (i, p) in points.iter().enumerate() {
                let r = resp[i * k + j];
                nk.add(r);
                sum += p * r;
            }
            let nk = nk.value();
            if nk <= 1e-12 * n as f64 {
                next.push(comp.clone());
                continue;
            }
            let mean = sum / nk;
            let mut scatter = Matrix3::zeros();
            for (i, p) in points.iter().enumerate() {
                let d = p - mean;
                scatter += d * d.transpose() * resp[i * k + j];
            }
            let cov = floor_eigenvalues(&(scatter / nk), floors[j]);
            let mut c = SogmmComponent::new(nk / n as f64, mean, cov, orient_toward)?;
            c.intensity_mean = comp.intensity_mean;
            next.push(c);
        }
        model.components = next;
        model.log_likelihood.push(model.data_log_likelihood(cloud));
    }

    // drop components that lost all support and renormalize the weights
    let keep: Vec<bool> = model
        .components
        .iter()
        .map(|c| c.weight > 1e-12)
        .collect();
    if keep.iter().any(|k| !k) {
        let mut i = 0;
        model.components.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        let total: f64 = model.components.iter().map(|c| c.weight).sum();
        for c in &mut model.components {
            c.weight /= total;
        }
    }

    assign_intensity_stats(&mut model, cloud);
    Ok(model)
}

/// Row-major `n x K` responsibilities.
fn responsibilities(model: &SogmmModel, points: &[Vector3<f64>]) -> Vec<f64> {
    let k = model.components.len();
    let rows: Vec<Vec<f64>> = points
        .par_iter()
        .map(|p| {
            let logs: Vec<f64> = model
                .components
                .iter()
                .map(|c| c.weight.ln() + c.log_pdf(p))
                .collect();
            let lse = log_sum_exp(logs.iter().cloned());
            logs.iter().map(|l| (l - lse).exp()).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(points.len() * k);
    for r in rows {
        out.extend(r);
    }
    out
}

fn assign_intensity_stats(model: &mut SogmmModel, cloud: &PointCloud) {
    let k = model.components.len();
    let resp = responsibilities(model, &cloud.points);
    for j in 0..k {
        let (mut w, mut m, mut m2) = (0.0, 0.0, 0.0);
        for (i, g) in cloud.intensities.iter().enumerate() {
            let r = resp[i * k + j];
            w += r;
            m += r * g;
            m2 += r * g * g;
        }
        let c = &mut model.components[j];
        if w > 0.0 {
            c.intensity_mean = m / w;
            c.intensity_var = (m2 / w - c.intensity_mean * c.intensity_mean).max(0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub samples_per_component: usize,
    pub sem_dim: usize,
    pub ins_dim: usize,
    pub seed: u64,
}

/// Seeds surfels on the component planes.
///
/// Centers are drawn from each component's in-plane Gaussian with the normal
/// offset forced to zero; the surfel frame is the component eigen frame and
/// the scales are `sqrt(lambda) / sqrt(samples)`.
pub fn init_surfels(model: &SogmmModel, cfg: &InitConfig) -> Result<Vec<Surfel>> {
    if cfg.samples_per_component == 0 {
        return Err(Error::invalid("samples_per_component must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shrink = (cfg.samples_per_component as f64).sqrt();
    let mut out = Vec::with_capacity(model.len() * cfg.samples_per_component);
    for comp in &model.components {
        let [v0, v1, n] = comp.frame.vectors;
        let [l0, l1, _] = comp.frame.values;
        let rot = Matrix3::from_columns(&[v0, v1, n]);
        let rotation = quaternion_from_matrix(&rot);
        let gray = comp.intensity_mean.clamp(0.0, 1.0);
        let scales = [
            (l0.sqrt() / shrink).max(1e-9),
            (l1.sqrt() / shrink).max(1e-9),
        ];
        for _ in 0..cfg.samples_per_component {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let coords = TangentCoords {
                u: a * l0.sqrt(),
                v: b * l1.sqrt(),
                w: 0.0,
                g: gray,
            };
            out.push(Surfel {
                center: coords.to_world(comp),
                rotation,
                scales,
                opacity: 0.5,
                color: Vector3::repeat(gray),
                sem: vec![0.0; cfg.sem_dim],
                ins: vec![0.0; cfg.ins_dim],
            });
        }
    }
    Ok(out)
}
