//! Instance queries, distance-aware label assignment, frustum-local
//! cross-attention and query pruning.
//!
//! A query pairs a feature vector with a 3D Gaussian. Its affinity to a
//! surfel is `A = sigmoid(f_q . f_g) * exp(-m^T Sigma^-1 m / 2)` with `m` the
//! offset from the query mean, and each surfel's instance label is the softmax
//! of `A` over the alive queries.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::sigmoid;
use crate::raster::{render, InstanceInput, RasterConfig, NO_INSTANCE};
use crate::types::{Camera, Plane, Surfel};

/// `sqrt` of the 99% quantile of chi-square with two degrees of freedom.
pub const CONFIDENCE_99_2D: f64 = 3.03;

/// Chi-square 99% quantile with three degrees of freedom.
pub const CHI2_99_3D: f64 = 11.34;

/// Largest affinity gap below the best query at which a surfel is still claimed.
pub const CLAIM_MARGIN: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceQuery {
    pub feature: Vec<f64>,
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    /// One score per class; the query's class is the argmax.
    pub class_logits: Vec<f64>,
    /// Number of frames in which the query was matched to a pseudo label.
    pub assign_count: u64,
    pub alive: bool,
}

impl InstanceQuery {
    pub fn new(feature: Vec<f64>, mean: Vector3<f64>, cov: Matrix3<f64>, num_classes: usize) -> Self {
        InstanceQuery {
            feature,
            mean,
            cov,
            class_logits: vec![0.0; num_classes],
            assign_count: 0,
            alive: true,
        }
    }

    /// Argmax class, lowest index on ties; `None` without classes.
    pub fn class_id(&self) -> Option<u32> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.class_logits.iter().enumerate() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| i as u32)
    }
}

/// Symmetrizes `cov` and raises its eigenvalues to at least `floor`.
pub fn regularize_cov(cov: &Matrix3<f64>, floor: f64) -> Matrix3<f64> {
    let sym = 0.5 * (cov + cov.transpose());
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| if v.is_finite() { v.max(floor) } else { floor });
    let out = eig.eigenvectors * Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose();
    0.5 * (out + out.transpose())
}

/// Learnable attention projections plus the fixed positional map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    /// Feature width `C`.
    pub channels: usize,
    /// Head dimension `d`.
    pub head_dim: usize,
    /// Frequency bands per axis of the positional encoding.
    pub bands: usize,
    /// `C x d`, row-major.
    pub w_q: Vec<f64>,
    /// `C x d`, row-major.
    pub w_k: Vec<f64>,
    /// `C x C`, row-major.
    pub w_v: Vec<f64>,
    /// Fixed `6 * bands x C` map from the sinusoidal code to feature space.
    pub pos_proj: Vec<f64>,
}

impl AttentionWeights {
    /// Random projections with variance `1 / C`, identity `W_V`.
    pub fn new(channels: usize, head_dim: usize, bands: usize, seed: u64) -> Result<Self> {
        if channels == 0 || head_dim == 0 {
            return Err(Error::invalid("attention dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect()
        };
        let std = 1.0 / (channels as f64).sqrt();
        let w_q = draw(channels * head_dim, std);
        let w_k = draw(channels * head_dim, std);
        let enc = 6 * bands;
        let pos_proj = draw(enc * channels, if enc > 0 { 1.0 / (enc as f64).sqrt() } else { 0.0 });
        let mut w_v = vec![0.0; channels * channels];
        for i in 0..channels {
            w_v[i * channels + i] = 1.0;
        }
        Ok(AttentionWeights {
            channels,
            head_dim,
            bands,
            w_q,
            w_k,
            w_v,
            pos_proj,
        })
    }

    pub fn encoding_dim(&self) -> usize {
        6 * self.bands
    }

    /// `psi(p)`: sinusoidal code of each coordinate mapped to `C` channels.
    pub fn positional(&self, p: &Vector3<f64>) -> Vec<f64> {
        let code = sinusoidal(p, self.bands);
        let c = self.channels;
        let mut out = vec![0.0; c];
        for (e, &v) in code.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.pos_proj[e * c..(e + 1) * c]) {
                *o += v * w;
            }
        }
        out
    }

    /// Adds `J_psi(p)^T g` to `dp` for an upstream gradient `g` on `psi(p)`.
    pub fn positional_backward(&self, p: &Vector3<f64>, g: &[f64], dp: &mut Vector3<f64>) {
        let c = self.channels;
        let mut e = 0;
        for axis in 0..3 {
            for b in 0..self.bands {
                let f = std::f64::consts::PI * (1u64 << b) as f64;
                let (s, co) = (f * p[axis]).sin_cos();
                let gs = dot(g, &self.pos_proj[e * c..(e + 1) * c]);
                let gc = dot(g, &self.pos_proj[(e + 1) * c..(e + 2) * c]);
                dp[axis] += gs * f * co - gc * f * s;
                e += 2;
            }
        }
    }
}

/// `[sin(2^b pi x), cos(2^b pi x)]` for each axis and band.
pub fn sinusoidal(p: &Vector3<f64>, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * bands);
    for axis in 0..3 {
        for b in 0..bands {
            let (s, c) = (std::f64::consts::PI * (1u64 << b) as f64 * p[axis]).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn feature_similarity(f_q: &[f64], f_g: &[f64]) -> f64 {
    sigmoid(dot(f_q, f_g))
}

/// Ratio of the query density at `p` to its density at the query mean.
pub fn geometric_affinity(query: &InstanceQuery, p: &Vector3<f64>) -> f64 {
    match query.cov.try_inverse() {
        Some(inv) => {
            let m = p - query.mean;
            (-0.5 * m.dot(&(inv * m))).exp()
        }
        None => 0.0,
    }
}

pub fn attention_map(f_q: &[f64], query: &InstanceQuery, surfel: &Surfel) -> f64 {
    feature_similarity(f_q, &surfel.ins) * geometric_affinity(query, &surfel.center)
}

/// Per-surfel label distributions over all queries (dead queries get 0).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelAssignment {
    pub channels: usize,
    /// Row-major `surfels x channels`.
    pub probs: Vec<f64>,
    /// Argmax query per surfel, lowest index on ties.
    pub ids: Vec<u32>,
}

impl LabelAssignment {
    pub fn input(&self) -> InstanceInput<'_> {
        InstanceInput {
            channels: self.channels,
            probs: &self.probs,
        }
    }
}

struct QueryGeom {
    inv: Matrix3<f64>,
}

fn query_geometry(queries: &[InstanceQuery]) -> Vec<Option<QueryGeom>> {
    queries
        .iter()
        .map(|q| {
            if !q.alive {
                return None;
            }
            q.cov.try_inverse().map(|inv| QueryGeom { inv })
        })
        .collect()
}

/// Labels using the queries' stored features.
pub fn assign_labels(queries: &[InstanceQuery], surfels: &[Surfel]) -> LabelAssignment {
    let c = queries.first().map_or(0, |q| q.feature.len());
    let feats: Vec<f64> = queries.iter().flat_map(|q| q.feature.iter().copied()).collect();
    assign_labels_with(queries, &feats, c, surfels)
}

/// Labels using per-query features `features` (`queries x c`, row-major),
/// typically the attention-refined ones.
pub fn assign_labels_with(queries: &[InstanceQuery], features: &[f64], c: usize, surfels: &[Surfel]) -> LabelAssignment {
    let n = queries.len();
    let geom = query_geometry(queries);
    let rows: Vec<(Vec<f64>, u32)> = surfels
        .par_iter()
        .map(|s| {
            let mut a = vec![f64::NEG_INFINITY; n];
            for k in 0..n {
                if let Some(g) = &geom[k] {
                    let m = s.center - queries[k].mean;
                    let d = (-0.5 * m.dot(&(g.inv * m))).exp();
                    a[k] = sigmoid(dot(&features[k * c..(k + 1) * c], &s.ins)) * d;
                }
            }
            let probs = softmax_alive(&a);
            let id = argmax_first(&a);
            (probs, id)
        })
        .collect();
    let mut probs = Vec::with_capacity(surfels.len() * n);
    let mut ids = Vec::with_capacity(surfels.len());
    for (p, id) in rows {
        probs.extend(p);
        ids.push(id);
    }
    LabelAssignment { channels: n, probs, ids }
}

/// Softmax over finite entries; `-inf` entries get probability 0.
fn softmax_alive(a: &[f64]) -> Vec<f64> {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![0.0; a.len()];
    }
    let mut out: Vec<f64> = a.iter().map(|&v| if v.is_finite() { (v - m).exp() } else { 0.0 }).collect();
    let z: f64 = out.iter().sum();
    for o in &mut out {
        *o /= z;
    }
    out
}

fn argmax_first(a: &[f64]) -> u32 {
    let mut best = NO_INSTANCE;
    let mut bv = f64::NEG_INFINITY;
    for (k, &v) in a.iter().enumerate() {
        if v.is_finite() && v > bv {
            bv = v;
            best = k as u32;
        }
    }
    best
}

/// Gradients of a label assignment with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignGrads {
    /// `queries x c`.
    pub features: Vec<f64>,
    /// `surfels x c`, gradient on the surfel instance features.
    pub surfel_ins: Vec<f64>,
    pub surfel_center: Vec<Vector3<f64>>,
    pub query_mean: Vec<Vector3<f64>>,
    pub query_cov: Vec<Matrix3<f64>>,
}

/// Back-propagates `d_probs` (`surfels x queries`) through [`assign_labels_with`].
pub fn assign_labels_backward(
    queries: &[InstanceQuery],
    features: &[f64],
    c: usize,
    surfels: &[Surfel],
    labels: &LabelAssignment,
    d_probs: &[f64],
) -> AssignGrads {
    let n = queries.len();
    let geom = query_geometry(queries);
    struct Local {
        features: Vec<f64>,
        mean: Vec<Vector3<f64>>,
        cov: Vec<Matrix3<f64>>,
    }
    let per_surfel: Vec<(Vec<f64>, Vector3<f64>, Option<Local>)> = surfels
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let dl = &d_probs[i * n..(i + 1) * n];
            let l = &labels.probs[i * n..(i + 1) * n];
            let mut d_ins = vec![0.0; c];
            let mut d_center = Vector3::zeros();
            if dl.iter().all(|&v| v == 0.0) {
                return (d_ins, d_center, None);
            }
            let dot_ld: f64 = l.iter().zip(dl).map(|(a, b)| a * b).sum();
            let mut local = Local {
                features: vec![0.0; n * c],
                mean: vec![Vector3::zeros(); n],
                cov: vec![Matrix3::zeros(); n],
            };
            for k in 0..n {
                let Some(g) = &geom[k] else { continue };
                let da = l[k] * (dl[k] - dot_ld);
                let fq = &features[k * c..(k + 1) * c];
                let sim = sigmoid(dot(fq, &s.ins));
                let m = s.center - queries[k].mean;
                let pm = g.inv * m;
                let d = (-0.5 * m.dot(&pm)).exp();
                let dz = da * d * sim * (1.0 - sim);
                for j in 0..c {
                    local.features[k * c + j] += dz * s.ins[j];
                    d_ins[j] += dz * fq[j];
                }
                let dd = da * sim;
                let dm = -dd * d * pm;
                d_center += dm;
                local.mean[k] -= dm;
                local.cov[k] += (0.5 * dd * d) * pm * pm.transpose();
            }
            (d_ins, d_center, Some(local))
        })
        .collect();

    let mut out = AssignGrads {
        features: vec![0.0; n * c],
        surfel_ins: Vec::with_capacity(surfels.len() * c),
        surfel_center: Vec::with_capacity(surfels.len()),
        query_mean: vec![Vector3::zeros(); n],
        query_cov: vec![Matrix3::zeros(); n],
    };
    for (d_ins, d_center, local) in per_surfel {
        out.surfel_ins.extend(d_ins);
        out.surfel_center.push(d_center);
        if let Some(l) = local {
            for (o, v) in out.features.iter_mut().zip(&l.features) {
                *o += v;
            }
            for k in 0..n {
                out.query_mean[k] += l.mean[k];
                out.query_cov[k] += l.cov[k];
            }
        }
    }
    out
}

/// Camera frustum as six inward-facing planes plus its corner points.
#[derive(Debug, Clone)]
pub struct Frustum {
    /// `(n, d)` with `n . x + d >= 0` inside, `|n| = 1`.
    pub planes: [(Vector3<f64>, f64); 6],
    /// Near corners then far corners, in world space.
    pub corners: [Vector3<f64>; 8],
}

impl Frustum {
    pub fn from_camera(camera: &Camera) -> Self {
        let (w, h) = (camera.width as f64, camera.height as f64);
        let pix = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
        let rt = camera.rotation.transpose();
        let origin = camera.center();
        let mut corners = [Vector3::zeros(); 8];
        for (i, &(x, y)) in pix.iter().enumerate() {
            let r = camera.pixel_ray(x, y);
            corners[i] = origin + rt * (r * camera.near);
            corners[i + 4] = origin + rt * (r * camera.far);
        }
        let axis = rt * Vector3::z();
        let inside = origin + rt * (camera.pixel_ray(camera.cx, camera.cy) * (0.5 * (camera.near + camera.far)));
        let mut planes = [(Vector3::zeros(), 0.0); 6];
        planes[0] = (axis, -axis.dot(&(origin + axis * camera.near)));
        planes[1] = (-axis, axis.dot(&(origin + axis * camera.far)));
        for i in 0..4 {
            let a = corners[i + 4] - origin;
            let b = corners[(i + 1) % 4 + 4] - origin;
            let mut n = a.cross(&b).normalize();
            if n.dot(&(inside - origin)) < 0.0 {
                n = -n;
            }
            planes[2 + i] = (n, -n.dot(&origin));
        }
        Frustum { planes, corners }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.planes.iter().all(|(n, d)| n.dot(p) + d >= 0.0)
    }

    /// Euclidean distance from `p` to the frustum (0 inside).
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        if self.contains(p) {
            return 0.0;
        }
        const FACES: [[usize; 4]; 6] = [
            [0, 1, 2, 3],
            [4, 5, 6, 7],
            [0, 1, 5, 4],
            [1, 2, 6, 5],
            [2, 3, 7, 6],
            [3, 0, 4, 7],
        ];
        let mut best = f64::INFINITY;
        for face in FACES {
            let v: Vec<Vector3<f64>> = face.iter().map(|&i| self.corners[i]).collect();
            for k in 0..4 {
                best = best.min(segment_distance(p, &v[k], &v[(k + 1) % 4]));
            }
            // interior of the face
            let n = (v[1] - v[0]).cross(&(v[2] - v[0]));
            let nn = n.norm();
            if nn == 0.0 {
                continue;
            }
            let n = n / nn;
            let dist = (p - v[0]).dot(&n);
            let q = p - n * dist;
            let mut sign = 0.0;
            let mut inside = true;
            for k in 0..4 {
                let e = v[(k + 1) % 4] - v[k];
                let s = e.cross(&(q - v[k])).dot(&n);
                if s != 0.0 {
                    if sign == 0.0 {
                        sign = s.signum();
                    } else if s.signum() != sign {
                        inside = false;
                    }
                }
            }
            if inside {
                best = best.min(dist.abs());
            }
        }
        best
    }
}

fn segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let l2 = ab.norm_squared();
    let t = if l2 > 0.0 { ((p - a).dot(&ab) / l2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

/// Surfels whose 99% confidence disc may reach into the view frustum.
pub fn frustum_select(surfels: &[Surfel], camera: &Camera) -> Vec<usize> {
    let f = Frustum::from_camera(camera);
    surfels
        .par_iter()
        .enumerate()
        .filter(|(_, s)| {
            let r = CONFIDENCE_99_2D * s.scales[0].max(s.scales[1]);
            f.distance(&s.center) <= r
        })
        .map(|(i, _)| i)
        .collect()
}

/// Keys `f_j + psi(mu_j)` and values `f_j`, both `selected x C`, row-major.
pub fn build_keys_values(surfels: &[Surfel], selected: &[usize], weights: &AttentionWeights) -> (Vec<f64>, Vec<f64>) {
    let c = weights.channels;
    let mut keys = Vec::with_capacity(selected.len() * c);
    let mut values = Vec::with_capacity(selected.len() * c);
    for &j in selected {
        let s = &surfels[j];
        let psi = weights.positional(&s.center);
        keys.extend(s.ins.iter().zip(&psi).map(|(f, p)| f + p));
        values.extend_from_slice(&s.ins);
    }
    (keys, values)
}

/// Intermediate values of one cross-attention pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    pub num_keys: usize,
    /// `queries x d`.
    pub q_proj: Vec<f64>,
    /// `keys x d`.
    pub k_proj: Vec<f64>,
    /// `queries x keys` softmax weights.
    pub attn: Vec<f64>,
    /// `keys x C`.
    pub v_proj: Vec<f64>,
}

/// `Q'_i = softmax_j((f_i W_Q)(K_j W_K)^T / sqrt(d)) (V_j W_V)`.
///
/// With no keys the query features are returned unchanged.
pub fn cross_attention_update(
    query_feats: &[f64],
    keys: &[f64],
    values: &[f64],
    weights: &AttentionWeights,
) -> (Vec<f64>, AttentionCache) {
    let c = weights.channels;
    let d = weights.head_dim;
    let nq = query_feats.len() / c;
    let nk = keys.len() / c;
    if nk == 0 {
        log::debug!("cross-attention skipped: no surfels in view");
        return (
            query_feats.to_vec(),
            AttentionCache {
                num_keys: 0,
                q_proj: vec![],
                k_proj: vec![],
                attn: vec![],
                v_proj: vec![],
            },
        );
    }
    let q_proj = matmul(query_feats, &weights.w_q, nq, c, d);
    let k_proj = matmul(keys, &weights.w_k, nk, c, d);
    let v_proj = matmul(values, &weights.w_v, nk, c, c);
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = vec![0.0; nq * nk];
    let mut out = vec![0.0; nq * c];
    for i in 0..nq {
        let qi = &q_proj[i * d..(i + 1) * d];
        let row = &mut attn[i * nk..(i + 1) * nk];
        for (j, e) in row.iter_mut().enumerate() {
            *e = dot(qi, &k_proj[j * d..(j + 1) * d]) * scale;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for e in row.iter_mut() {
            *e = (*e - m).exp();
            z += *e;
        }
        for e in row.iter_mut() {
            *e /= z;
        }
        let o = &mut out[i * c..(i + 1) * c];
        for (j, &a) in row.iter().enumerate() {
            for (ov, vv) in o.iter_mut().zip(&v_proj[j * c..(j + 1) * c]) {
                *ov += a * vv;
            }
        }
    }
    (
        out,
        AttentionCache {
            num_keys: nk,
            q_proj,
            k_proj,
            attn,
            v_proj,
        },
    )
}

/// `a (n x k) * b (k x m)`, row-major.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (ov, bv) in o.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *ov += av * bv;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub query_feats: Vec<f64>,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
}

/// Back-propagates `d_out` (`queries x C`) through [`cross_attention_update`].
pub fn cross_attention_backward(
    query_feats: &[f64],
    keys: &[f64],
    values: &[f64],
    weights: &AttentionWeights,
    cache: &AttentionCache,
    d_out: &[f64],
) -> AttentionGrads {
    let c = weights.channels;
    let d = weights.head_dim;
    let nq = query_feats.len() / c;
    let nk = cache.num_keys;
    let mut g = AttentionGrads {
        query_feats: vec![0.0; nq * c],
        keys: vec![0.0; nk * c],
        values: vec![0.0; nk * c],
        w_q: vec![0.0; c * d],
        w_k: vec![0.0; c * d],
        w_v: vec![0.0; c * c],
    };
    if nk == 0 {
        g.query_feats.copy_from_slice(d_out);
        return g;
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut d_vproj = vec![0.0; nk * c];
    let mut d_qproj = vec![0.0; nq * d];
    let mut d_kproj = vec![0.0; nk * d];
    let mut da = vec![0.0; nk];
    for i in 0..nq {
        let dout = &d_out[i * c..(i + 1) * c];
        let a = &cache.attn[i * nk..(i + 1) * nk];
        for j in 0..nk {
            let vj = &cache.v_proj[j * c..(j + 1) * c];
            da[j] = dot(dout, vj);
            for (dv, o) in d_vproj[j * c..(j + 1) * c].iter_mut().zip(dout) {
                *dv += a[j] * o;
            }
        }
        let s: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
        let qi = &cache.q_proj[i * d..(i + 1) * d];
        for j in 0..nk {
            let de = a[j] * (da[j] - s) * scale;
            if de == 0.0 {
                continue;
            }
            let kj = &cache.k_proj[j * d..(j + 1) * d];
            for t in 0..d {
                d_qproj[i * d + t] += de * kj[t];
                d_kproj[j * d + t] += de * qi[t];
            }
        }
    }
    // x (n x c) W (c x m): dW += x^T dy, dx = dy W^T
    let back = |x: &[f64], dy: &[f64], w: &[f64], n: usize, m: usize, dw: &mut [f64], dx: &mut [f64]| {
        for r in 0..n {
            let xr = &x[r * c..(r + 1) * c];
            let dyr = &dy[r * m..(r + 1) * m];
            for p in 0..c {
                let wp = &w[p * m..(p + 1) * m];
                dx[r * c + p] += dot(dyr, wp);
                let xv = xr[p];
                if xv != 0.0 {
                    for (dwv, dyv) in dw[p * m..(p + 1) * m].iter_mut().zip(dyr) {
                        *dwv += xv * dyv;
                    }
                }
            }
        }
    };
    back(query_feats, &d_qproj, &weights.w_q, nq, d, &mut g.w_q, &mut g.query_feats);
    back(keys, &d_kproj, &weights.w_k, nk, d, &mut g.w_k, &mut g.keys);
    back(values, &d_vproj, &weights.w_v, nk, c, &mut g.w_v, &mut g.values);
    g
}

/// Renders the blended instance distribution and its argmax id image.
pub fn render_instance_map(
    surfels: &[Surfel],
    camera: &Camera,
    labels: &LabelAssignment,
    cfg: &RasterConfig,
) -> (Plane, Vec<u32>) {
    let cfg = RasterConfig {
        targets: crate::raster::Targets {
            color: false,
            depth: false,
            normal: false,
            semantic: false,
            instance: true,
        },
        ..cfg.clone()
    };
    let out = render(surfels, Some(labels.input()), camera, &cfg);
    let plane = out
        .instance
        .unwrap_or_else(|| Plane::new(camera.width as usize, camera.height as usize, labels.channels));
    let ids = out
        .instance_ids
        .unwrap_or_else(|| vec![NO_INSTANCE; camera.pixel_count()]);
    (plane, ids)
}

/// A query's 3D mask: sorted surfel indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Mask3D {
    pub members: Vec<usize>,
}

impl Mask3D {
    pub fn new(mut members: Vec<usize>) -> Self {
        members.sort_unstable();
        members.dedup();
        Mask3D { members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn intersection_len(&self, other: &Mask3D) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.members.len() && j < other.members.len() {
            match self.members[i].cmp(&other.members[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    /// Surfels whose argmax label is `k`, one mask per query.
    pub fn from_argmax(ids: &[u32], queries: usize) -> Vec<Mask3D> {
        let mut out = vec![Vec::new(); queries];
        for (i, &id) in ids.iter().enumerate() {
            if (id as usize) < queries {
                out[id as usize].push(i);
            }
        }
        out.into_iter().map(|members| Mask3D { members }).collect()
    }

    /// Surfels each alive query claims: affinity above the value of a neutral
    /// feature at the 99% ellipsoid boundary, and label probability within
    /// `exp(-CLAIM_MARGIN)` of the surfel's most likely query.
    pub fn from_claims(queries: &[InstanceQuery], features: &[f64], c: usize, surfels: &[Surfel]) -> Vec<Mask3D> {
        let threshold = 0.5 * (-0.5 * CHI2_99_3D).exp();
        let geom = query_geometry(queries);
        let n = queries.len();
        let claims: Vec<Vec<usize>> = surfels
            .par_iter()
            .map(|s| {
                let a: Vec<f64> = (0..n)
                    .map(|k| match &geom[k] {
                        Some(g) => {
                            let m = s.center - queries[k].mean;
                            sigmoid(dot(&features[k * c..(k + 1) * c], &s.ins)) * (-0.5 * m.dot(&(g.inv * m))).exp()
                        }
                        None => f64::NEG_INFINITY,
                    })
                    .collect();
                let best = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (0..n)
                    .filter(|&k| a[k] >= threshold && a[k] >= best - CLAIM_MARGIN)
                    .collect()
            })
            .collect();
        let mut out = vec![Vec::new(); n];
        for (i, ks) in claims.iter().enumerate() {
            for &k in ks {
                out[k].push(i);
            }
        }
        out.into_iter().map(|members| Mask3D { members }).collect()
    }
}

/// `|M_i & M_j| / |M_i|`; 0 when `M_i` is empty.
pub fn iom(m_i: &Mask3D, m_j: &Mask3D) -> f64 {
    if m_i.is_empty() {
        return 0.0;
    }
    m_i.intersection_len(m_j) as f64 / m_i.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneReason {
    Useless,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PruneEvent {
    pub step: u64,
    pub query: usize,
    pub reason: PruneReason,
    /// Overlap that triggered a duplicate prune.
    pub iom: Option<f64>,
    /// The query kept in its place.
    pub kept: Option<usize>,
}

/// Kills alive queries matched in fewer than `min_assign_rate` of the last
/// `frames` frames. The most-matched query always survives.
pub fn prune_useless(
    queries: &mut [InstanceQuery],
    window_matches: &[u64],
    frames: u64,
    min_assign_rate: f64,
    step: u64,
) -> Vec<PruneEvent> {
    if frames == 0 {
        return vec![];
    }
    let alive: Vec<usize> = (0..queries.len()).filter(|&k| queries[k].alive).collect();
    let Some(&keep) = alive
        .iter()
        .max_by(|&&a, &&b| window_matches[a].cmp(&window_matches[b]).then(b.cmp(&a)))
    else {
        return vec![];
    };
    let mut events = Vec::new();
    for k in alive {
        let rate = window_matches[k] as f64 / frames as f64;
        if k != keep && rate < min_assign_rate {
            queries[k].alive = false;
            events.push(PruneEvent {
                step,
                query: k,
                reason: PruneReason::Useless,
                iom: None,
                kept: None,
            });
        }
    }
    events
}

/// For pairs with `iom >= tau`, kills the query with the smaller mask.
/// Pairs are visited in descending overlap; dead queries are skipped.
pub fn prune_duplicates(queries: &mut [InstanceQuery], masks: &[Mask3D], tau: f64, step: u64) -> Vec<PruneEvent> {
    let n = queries.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j || !queries[i].alive || !queries[j].alive || masks[i].is_empty() {
                continue;
            }
            let v = iom(&masks[i], &masks[j]);
            if v >= tau {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut events = Vec::new();
    for (v, i, j) in pairs {
        if !queries[i].alive || !queries[j].alive {
            continue;
        }
        let (kill, keep) = match masks[i].len().cmp(&masks[j].len()) {
            std::cmp::Ordering::Less => (i, j),
            std::cmp::Ordering::Greater => (j, i),
            std::cmp::Ordering::Equal => (i.max(j), i.min(j)),
        };
        queries[kill].alive = false;
        events.push(PruneEvent {
            step,
            query: kill,
            reason: PruneReason::Duplicate,
            iom: Some(v),
            kept: Some(keep),
        });
    }
    events
}
