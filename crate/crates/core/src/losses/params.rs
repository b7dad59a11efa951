use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::panoptic::AttentionWeights;
use crate::types::SceneMap;

/// Everything the optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub scene: SceneMap,
    pub attention: AttentionWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Position,
    Rotation,
    Scale,
    Opacity,
    Color,
    SemFeature,
    InsFeature,
    QueryFeature,
    QueryMean,
    QueryCov,
    WQ,
    WK,
    WV,
}

/// Unique entries of a symmetric 3x3 matrix: xx, yy, zz, xy, xz, yz.
pub(crate) const SYM_INDEX: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];

impl ParamClass {
    pub const ALL: [ParamClass; 13] = [
        ParamClass::Position,
        ParamClass::Rotation,
        ParamClass::Scale,
        ParamClass::Opacity,
        ParamClass::Color,
        ParamClass::SemFeature,
        ParamClass::InsFeature,
        ParamClass::QueryFeature,
        ParamClass::QueryMean,
        ParamClass::QueryCov,
        ParamClass::WQ,
        ParamClass::WK,
        ParamClass::WV,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Position => "position",
            ParamClass::Rotation => "rotation",
            ParamClass::Scale => "scale",
            ParamClass::Opacity => "opacity",
            ParamClass::Color => "color",
            ParamClass::SemFeature => "sem_feature",
            ParamClass::InsFeature => "ins_feature",
            ParamClass::QueryFeature => "query_feature",
            ParamClass::QueryMean => "query_mean",
            ParamClass::QueryCov => "query_cov",
            ParamClass::WQ => "w_q",
            ParamClass::WK => "w_k",
            ParamClass::WV => "w_v",
        }
    }
}

impl Model {
    /// Number of scalar coordinates in a parameter class.
    pub fn count(&self, class: ParamClass) -> usize {
        let s = &self.scene;
        let n = s.surfels.len();
        let q = s.queries.len();
        match class {
            ParamClass::Position | ParamClass::Color => 3 * n,
            ParamClass::Rotation => 4 * n,
            ParamClass::Scale => 2 * n,
            ParamClass::Opacity => n,
            ParamClass::SemFeature => n * s.sem_dim(),
            ParamClass::InsFeature => n * s.surfels.first().map_or(0, |x| x.ins.len()),
            ParamClass::QueryFeature => s.queries.iter().map(|x| x.feature.len()).sum(),
            ParamClass::QueryMean => 3 * q,
            ParamClass::QueryCov => 6 * q,
            ParamClass::WQ => self.attention.w_q.len(),
            ParamClass::WK => self.attention.w_k.len(),
            ParamClass::WV => self.attention.w_v.len(),
        }
    }

    pub fn get(&self, class: ParamClass, i: usize) -> f64 {
        let s = &self.scene;
        match class {
            ParamClass::Position => s.surfels[i / 3].center[i % 3],
            ParamClass::Rotation => quat_get(&s.surfels[i / 4].rotation, i % 4),
            ParamClass::Scale => s.surfels[i / 2].scales[i % 2],
            ParamClass::Opacity => s.surfels[i].opacity,
            ParamClass::Color => s.surfels[i / 3].color[i % 3],
            ParamClass::SemFeature => {
                let d = s.sem_dim();
                s.surfels[i / d].sem[i % d]
            }
            ParamClass::InsFeature => {
                let d = s.surfels[0].ins.len();
                s.surfels[i / d].ins[i % d]
            }
            ParamClass::QueryFeature => {
                let d = s.queries[0].feature.len();
                s.queries[i / d].feature[i % d]
            }
            ParamClass::QueryMean => s.queries[i / 3].mean[i % 3],
            ParamClass::QueryCov => s.queries[i / 6].cov[SYM_INDEX[i % 6]],
            ParamClass::WQ => self.attention.w_q[i],
            ParamClass::WK => self.attention.w_k[i],
            ParamClass::WV => self.attention.w_v[i],
        }
    }

    /// Writes one coordinate; symmetric covariance entries are set in pairs.
    pub fn set(&mut self, class: ParamClass, i: usize, v: f64) {
        let s = &mut self.scene;
        match class {
            ParamClass::Position => s.surfels[i / 3].center[i % 3] = v,
            ParamClass::Rotation => quat_set(&mut s.surfels[i / 4].rotation, i % 4, v),
            ParamClass::Scale => s.surfels[i / 2].scales[i % 2] = v,
            ParamClass::Opacity => s.surfels[i].opacity = v,
            ParamClass::Color => s.surfels[i / 3].color[i % 3] = v,
            ParamClass::SemFeature => {
                let d = s.surfels[0].sem.len();
                s.surfels[i / d].sem[i % d] = v;
            }
            ParamClass::InsFeature => {
                let d = s.surfels[0].ins.len();
                s.surfels[i / d].ins[i % d] = v;
            }
            ParamClass::QueryFeature => {
                let d = s.queries[0].feature.len();
                s.queries[i / d].feature[i % d] = v;
            }
            ParamClass::QueryMean => s.queries[i / 3].mean[i % 3] = v,
            ParamClass::QueryCov => {
                let (a, b) = SYM_INDEX[i % 6];
                let cov = &mut s.queries[i / 6].cov;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
            ParamClass::WQ => self.attention.w_q[i] = v,
            ParamClass::WK => self.attention.w_k[i] = v,
            ParamClass::WV => self.attention.w_v[i] = v,
        }
    }
}

fn quat_get(q: &nalgebra::Quaternion<f64>, i: usize) -> f64 {
    [q.w, q.i, q.j, q.k][i]
}

fn quat_set(q: &mut nalgebra::Quaternion<f64>, i: usize, v: f64) {
    match i {
        0 => q.w = v,
        1 => q.i = v,
        2 => q.j = v,
        _ => q.k = v,
    }
}

/// Gradient of the total loss for every parameter class.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub position: Vec<Vector3<f64>>,
    /// `(w, x, y, z)` order.
    pub rotation: Vec<[f64; 4]>,
    pub scales: Vec<[f64; 2]>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    /// `surfels x C_sem`.
    pub sem: Vec<f64>,
    /// `surfels x C_ins`.
    pub ins: Vec<f64>,
    /// `queries x C_ins`.
    pub query_feature: Vec<f64>,
    pub query_mean: Vec<Vector3<f64>>,
    /// Unique covariance entries in xx, yy, zz, xy, xz, yz order.
    pub query_cov: Vec<[f64; 6]>,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
}

impl Gradients {
    pub fn zeros(model: &Model) -> Self {
        let s = &model.scene;
        let n = s.surfels.len();
        let q = s.queries.len();
        Gradients {
            position: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            scales: vec![[0.0; 2]; n],
            opacity: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            sem: vec![0.0; model.count(ParamClass::SemFeature)],
            ins: vec![0.0; model.count(ParamClass::InsFeature)],
            query_feature: vec![0.0; model.count(ParamClass::QueryFeature)],
            query_mean: vec![Vector3::zeros(); q],
            query_cov: vec![[0.0; 6]; q],
            w_q: vec![0.0; model.attention.w_q.len()],
            w_k: vec![0.0; model.attention.w_k.len()],
            w_v: vec![0.0; model.attention.w_v.len()],
        }
    }

    pub fn get(&self, class: ParamClass, i: usize) -> f64 {
        match class {
            ParamClass::Position => self.position[i / 3][i % 3],
            ParamClass::Rotation => self.rotation[i / 4][i % 4],
            ParamClass::Scale => self.scales[i / 2][i % 2],
            ParamClass::Opacity => self.opacity[i],
            ParamClass::Color => self.color[i / 3][i % 3],
            ParamClass::SemFeature => self.sem[i],
            ParamClass::InsFeature => self.ins[i],
            ParamClass::QueryFeature => self.query_feature[i],
            ParamClass::QueryMean => self.query_mean[i / 3][i % 3],
            ParamClass::QueryCov => self.query_cov[i / 6][i % 6],
            ParamClass::WQ => self.w_q[i],
            ParamClass::WK => self.w_k[i],
            ParamClass::WV => self.w_v[i],
        }
    }

    /// Flat view of one class.
    pub fn values(&self, class: ParamClass) -> Vec<f64> {
        match class {
            ParamClass::Position => self.position.iter().flat_map(|v| v.iter().copied()).collect(),
            ParamClass::Rotation => self.rotation.iter().flatten().copied().collect(),
            ParamClass::Scale => self.scales.iter().flatten().copied().collect(),
            ParamClass::Opacity => self.opacity.clone(),
            ParamClass::Color => self.color.iter().flat_map(|v| v.iter().copied()).collect(),
            ParamClass::SemFeature => self.sem.clone(),
            ParamClass::InsFeature => self.ins.clone(),
            ParamClass::QueryFeature => self.query_feature.clone(),
            ParamClass::QueryMean => self.query_mean.iter().flat_map(|v| v.iter().copied()).collect(),
            ParamClass::QueryCov => self.query_cov.iter().flatten().copied().collect(),
            ParamClass::WQ => self.w_q.clone(),
            ParamClass::WK => self.w_k.clone(),
            ParamClass::WV => self.w_v.clone(),
        }
    }

    /// First class holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<ParamClass> {
        ParamClass::ALL
            .into_iter()
            .find(|&c| self.values(c).iter().any(|v| !v.is_finite()))
    }
}
