//! Shared domain values: surfels, cameras, point clouds, frames and the scene map.
//!
//! Everything here is a plain value with validated constructors. Rendering and
//! learning logic live in the other modules.

use std::fmt;

use nalgebra::{Matrix3, Quaternion, Vector3};

use crate::error::{Error, Result};
use crate::panoptic::InstanceQuery;

/// Class id used for unlabeled pixels in semantic planes.
pub const IGNORE_LABEL: u32 = u32::MAX;

const QUAT_UNIT_TOL: f64 = 1e-6;

/// A flat elliptical Gaussian in world space.
///
/// `opacity` is the post-activation value in `[0, 1]`; the trainer keeps the
/// pre-activation logit privately.
#[derive(Debug, Clone, PartialEq)]
pub struct Surfel {
    pub center: Vector3<f64>,
    /// Unit quaternion; its rotation maps the local x/y/z axes to `t_u`, `t_v`, `n`.
    pub rotation: Quaternion<f64>,
    pub scales: [f64; 2],
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub sem: Vec<f64>,
    pub ins: Vec<f64>,
}

impl Surfel {
    pub fn new(
        center: Vector3<f64>,
        rotation: Quaternion<f64>,
        scales: [f64; 2],
        opacity: f64,
        color: Vector3<f64>,
        sem: Vec<f64>,
        ins: Vec<f64>,
    ) -> Result<Self> {
        let s = Surfel {
            center,
            rotation,
            scales,
            opacity,
            color,
            sem,
            ins,
        };
        let v = surfel_violations(0, &s);
        if let Some(first) = v.first() {
            return Err(Error::invalid(first.to_string()));
        }
        Ok(s)
    }

    /// World-space surfel frame; errors on a degenerate quaternion.
    pub fn frame(&self) -> Result<TangentFrame> {
        tangent_frame(self)
    }
}

/// Orthonormal right-handed frame of a surfel: tangent axes and normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentFrame {
    pub t_u: Vector3<f64>,
    pub t_v: Vector3<f64>,
    pub normal: Vector3<f64>,
}

/// Rotation matrix of a (not necessarily unit) quaternion `(w, x, y, z)`.
///
/// The quaternion is normalized first, so any non-zero scaling is ignored.
pub fn rotation_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion for a proper rotation matrix (Shepperd's method).
pub fn quaternion_from_matrix(m: &Matrix3<f64>) -> Quaternion<f64> {
    let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Quaternion::new(
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        Quaternion::new(
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        )
    };
    q / q.norm()
}

pub fn tangent_frame(surfel: &Surfel) -> Result<TangentFrame> {
    let n = surfel.rotation.norm();
    if !n.is_finite() || n < 1e-12 {
        return Err(Error::invalid(format!(
            "degenerate rotation quaternion (norm {n})"
        )));
    }
    let r = rotation_matrix(&surfel.rotation);
    Ok(TangentFrame {
        t_u: r.column(0).into_owned(),
        t_v: r.column(1).into_owned(),
        normal: r.column(2).into_owned(),
    })
}

/// Pinhole camera. Camera space is x right, y down, z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation: `x_cam = rotation * x_world + translation`.
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(near > 0.0 && near < far) {
            return Err(Error::invalid("clip depths must satisfy 0 < near < far"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image size must be non-zero"));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if ortho > 1e-6 || rotation.determinant() < 0.0 {
            return Err(Error::invalid("camera rotation is not a proper rotation"));
        }
        Ok(Camera {
            rotation,
            translation,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near,
            far,
        })
    }

    /// Camera at `eye` looking at `target`, principal point at the image center.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::invalid("eye and target coincide"));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::invalid("up vector is parallel to the view direction"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(
            rotation,
            translation,
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            near,
            far,
        )
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a camera-space point (pixel centers sit at `i + 0.5`).
    pub fn project(&self, p_cam: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// Camera-space ray through a pixel position, normalized to `z = 1`.
    pub fn pixel_ray(&self, px: f64, py: f64) -> Vector3<f64> {
        Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub intensities: Vec<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, intensities: Vec<f64>) -> Result<Self> {
        if points.len() != intensities.len() {
            return Err(Error::invalid(format!(
                "{} points but {} intensities",
                points.len(),
                intensities.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("point {i} is not finite")));
        }
        if let Some(i) = intensities.iter().position(|g| !g.is_finite()) {
            return Err(Error::invalid(format!("intensity {i} is not finite")));
        }
        Ok(PointCloud {
            points,
            intensities,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Row-major multi-channel image of `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Plane::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Plane {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "plane data has {} samples, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Plane {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    #[inline]
    pub fn at(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// One pseudo-ground-truth instance mask with its semantic class.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub class_id: u32,
    pub mask: Vec<bool>,
}

/// A training view: camera, RGB image and 2D pseudo-labels.
///
/// Instance masks may overlap; nothing here enforces disjointness.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub camera: Camera,
    pub rgb: Plane,
    /// Per-pixel class ids; [`IGNORE_LABEL`] marks unlabeled pixels.
    pub semantic: Vec<u32>,
    pub instances: Vec<InstanceMask>,
}

impl FrameBundle {
    pub fn new(
        camera: Camera,
        rgb: Plane,
        semantic: Vec<u32>,
        instances: Vec<InstanceMask>,
        num_classes: usize,
    ) -> Result<Self> {
        let (w, h) = (camera.width as usize, camera.height as usize);
        if rgb.width != w || rgb.height != h || rgb.channels != 3 {
            return Err(Error::invalid("rgb plane does not match camera size"));
        }
        if semantic.len() != w * h {
            return Err(Error::invalid("semantic plane does not match camera size"));
        }
        if let Some(c) = semantic
            .iter()
            .find(|&&c| c != IGNORE_LABEL && c as usize >= num_classes)
        {
            return Err(Error::invalid(format!("class id {c} outside vocabulary")));
        }
        for (k, m) in instances.iter().enumerate() {
            if m.mask.len() != w * h {
                return Err(Error::invalid(format!("instance mask {k} has wrong size")));
            }
            if m.class_id as usize >= num_classes {
                return Err(Error::invalid(format!(
                    "instance mask {k} has class {} outside vocabulary",
                    m.class_id
                )));
            }
        }
        Ok(FrameBundle {
            camera,
            rgb,
            semantic,
            instances,
        })
    }
}

/// The reconstructed map: surfels, class vocabulary and instance queries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneMap {
    pub surfels: Vec<Surfel>,
    pub vocabulary: Vec<String>,
    pub queries: Vec<InstanceQuery>,
}

impl SceneMap {
    pub fn sem_dim(&self) -> usize {
        self.surfels.first().map_or(self.vocabulary.len(), |s| s.sem.len())
    }

    pub fn ins_dim(&self) -> usize {
        self.surfels
            .first()
            .map(|s| s.ins.len())
            .or_else(|| self.queries.first().map(|q| q.feature.len()))
            .unwrap_or(0)
    }

    pub fn alive_queries(&self) -> impl Iterator<Item = (usize, &InstanceQuery)> {
        self.queries.iter().enumerate().filter(|(_, q)| q.alive)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationTarget {
    Surfel(usize),
    Query(usize),
}

/// One broken invariant found by [`validate_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub target: ViolationTarget,
    pub field: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.target {
            ViolationTarget::Surfel(i) => write!(f, "surfel {i}: {}: {}", self.field, self.detail),
            ViolationTarget::Query(i) => write!(f, "query {i}: {}: {}", self.field, self.detail),
        }
    }
}

fn surfel_violations(i: usize, s: &Surfel) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: &'static str, detail: String| {
        out.push(Violation {
            target: ViolationTarget::Surfel(i),
            field,
            detail,
        })
    };
    if !s.center.iter().all(|c| c.is_finite()) {
        push("center", "non-finite coordinate".into());
    }
    let qn = s.rotation.norm();
    if !qn.is_finite() || (qn - 1.0).abs() > QUAT_UNIT_TOL {
        push("rotation", format!("quaternion norm {qn} is not 1"));
    }
    if !s.scales.iter().all(|v| v.is_finite() && *v > 0.0) {
        push("scale", format!("scales {:?} must be positive", s.scales));
    }
    if !(0.0..=1.0).contains(&s.opacity) {
        push("opacity", format!("{} outside [0, 1]", s.opacity));
    }
    if !s.color.iter().all(|c| (0.0..=1.0).contains(c)) {
        push("color", format!("{:?} outside [0, 1]", s.color.as_slice()));
    }
    if !s.sem.iter().chain(s.ins.iter()).all(|v| v.is_finite()) {
        push("features", "non-finite feature entry".into());
    }
    out
}

/// Lists every invariant violation in the scene; empty iff the scene is valid.
pub fn validate_scene(scene: &SceneMap) -> Vec<Violation> {
    let mut out = Vec::new();
    let sem_dim = scene.surfels.first().map(|s| s.sem.len());
    let ins_dim = scene.surfels.first().map(|s| s.ins.len());
    for (i, s) in scene.surfels.iter().enumerate() {
        out.extend(surfel_violations(i, s));
        if Some(s.sem.len()) != sem_dim {
            out.push(Violation {
                target: ViolationTarget::Surfel(i),
                field: "sem",
                detail: format!("dimension {} differs from {:?}", s.sem.len(), sem_dim),
            });
        }
        if Some(s.ins.len()) != ins_dim {
            out.push(Violation {
                target: ViolationTarget::Surfel(i),
                field: "ins",
                detail: format!("dimension {} differs from {:?}", s.ins.len(), ins_dim),
            });
        }
    }
    for (k, q) in scene.queries.iter().enumerate() {
        if let Some(d) = ins_dim {
            if q.feature.len() != d {
                out.push(Violation {
                    target: ViolationTarget::Query(k),
                    field: "feature",
                    detail: format!("dimension {} differs from {d}", q.feature.len()),
                });
            }
        }
        let asym = (q.cov - q.cov.transpose()).abs().max();
        let spd = nalgebra::Cholesky::new(q.cov).is_some();
        if asym > 1e-10 || !spd {
            out.push(Violation {
                target: ViolationTarget::Query(k),
                field: "cov",
                detail: "covariance is not symmetric positive definite".into(),
            });
        }
        if !q.mean.iter().all(|c| c.is_finite()) {
            out.push(Violation {
                target: ViolationTarget::Query(k),
                field: "mean",
                detail: "non-finite coordinate".into(),
            });
        }
    }
    out
}
