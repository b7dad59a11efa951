use nalgebra::{Matrix2x3, Matrix3, Vector3};

use crate::types::{rotation_matrix, Camera, Surfel};

/// Screen-space footprint of one surfel for one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSurfel {
    /// Index of the source surfel in the scene.
    pub index: usize,
    /// Projected center in pixels.
    pub center: [f64; 2],
    /// Projected covariance `[s11, s12, s22]` in pixel^2.
    pub cov: [f64; 3],
    /// Camera-space depth of the surfel center.
    pub depth: f64,
    /// Inverse homography: pixel `(x, y, 1)` maps to `(u, v, 1) / z` where
    /// `(u, v)` are tangent coordinates in units of the scales and `z` the
    /// camera depth of the ray/plane intersection.
    pub homography_inv: Matrix3<f64>,
    pub opacity: f64,
    /// Camera-facing world normal.
    pub normal: Vector3<f64>,
    /// Largest `u^2 + v^2` that still yields `alpha >= alpha_min`.
    pub r2_max: f64,
}

/// Ray/plane sample of a surfel at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSample {
    pub u: f64,
    pub v: f64,
    /// Camera depth of the intersection.
    pub z: f64,
}

impl ProjectedSurfel {
    /// Maps a pixel position to tangent coordinates through the homography.
    /// `None` when the ray misses the plane in front of the camera.
    #[inline]
    pub fn local(&self, px: f64, py: f64) -> Option<LocalSample> {
        let m = &self.homography_inv;
        let hz = m[(2, 0)] * px + m[(2, 1)] * py + m[(2, 2)];
        if !(hz > 0.0) || !hz.is_finite() {
            return None;
        }
        let inv = 1.0 / hz;
        Some(LocalSample {
            u: (m[(0, 0)] * px + m[(0, 1)] * py + m[(0, 2)]) * inv,
            v: (m[(1, 0)] * px + m[(1, 1)] * py + m[(1, 2)]) * inv,
            z: inv,
        })
    }

    /// Whether a pixel lies inside the `chi2` ellipse of the projected covariance.
    #[inline]
    pub fn in_support(&self, px: f64, py: f64, chi2: f64) -> bool {
        let [a, b, c] = self.cov;
        let dx = px - self.center[0];
        let dy = py - self.center[1];
        dx * dx * c - 2.0 * dx * dy * b + dy * dy * a <= chi2 * (a * c - b * b)
    }

    /// Half extents `(dx, dy)` of the axis-aligned box of the `chi2` ellipse.
    pub fn aabb_extent(&self, chi2: f64) -> (f64, f64) {
        ((chi2 * self.cov[0]).sqrt(), (chi2 * self.cov[2]).sqrt())
    }

    pub fn max_eigenvalue(&self) -> f64 {
        let [a, b, c] = self.cov;
        let mid = 0.5 * (a + c);
        let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        mid + rad
    }
}

/// `alpha = o * exp(-(u^2 + v^2) / 2)`, zero below `alpha_min`.
#[inline]
pub fn alpha_from_local(opacity: f64, u: f64, v: f64, alpha_min: f64) -> f64 {
    let a = opacity * (-0.5 * (u * u + v * v)).exp();
    if a < alpha_min {
        0.0
    } else {
        a
    }
}

/// Opacity contribution of a projected surfel at a pixel position.
pub fn evaluate_alpha(p: &ProjectedSurfel, px: f64, py: f64, alpha_min: f64) -> f64 {
    match p.local(px, py) {
        Some(s) => alpha_from_local(p.opacity, s.u, s.v, alpha_min),
        None => 0.0,
    }
}

/// Projects a surfel, returning `None` when it is culled.
///
/// Culled when the center depth is outside `(near, far)`, the surfel plane
/// passes through the camera center, or its support box misses every pixel.
pub fn project_surfel(
    surfel: &Surfel,
    index: usize,
    camera: &Camera,
    chi2: f64,
    alpha_min: f64,
) -> Option<ProjectedSurfel> {
    let c = camera.to_camera(&surfel.center);
    if !(c.z > camera.near && c.z < camera.far) {
        return None;
    }
    let r = camera.rotation * rotation_matrix(&surfel.rotation);
    let a_u = r.column(0) * surfel.scales[0];
    let a_v = r.column(1) * surfel.scales[1];
    let k = Matrix3::new(camera.fx, 0.0, camera.cx, 0.0, camera.fy, camera.cy, 0.0, 0.0, 1.0);
    let h = k * Matrix3::from_columns(&[a_u, a_v, c]);
    let det = h.determinant();
    let scale = h.column(0).norm() * h.column(1).norm() * h.column(2).norm();
    if !(det.abs() > 1e-12 * scale) {
        return None;
    }
    let homography_inv = h.try_inverse()?;

    let inv_z = 1.0 / c.z;
    let j = Matrix2x3::new(
        camera.fx * inv_z,
        0.0,
        -camera.fx * c.x * inv_z * inv_z,
        0.0,
        camera.fy * inv_z,
        -camera.fy * c.y * inv_z * inv_z,
    );
    let ju = j * a_u;
    let jv = j * a_v;
    let cov = [
        ju.x * ju.x + jv.x * jv.x,
        ju.x * ju.y + jv.x * jv.y,
        ju.y * ju.y + jv.y * jv.y,
    ];
    if !cov.iter().all(|v| v.is_finite()) {
        return None;
    }

    let mut normal = rotation_matrix(&surfel.rotation).column(2).into_owned();
    if normal.dot(&(camera.center() - surfel.center)) < 0.0 {
        normal = -normal;
    }
    let r2_max = if surfel.opacity > alpha_min && alpha_min > 0.0 {
        2.0 * (surfel.opacity / alpha_min).ln()
    } else if alpha_min <= 0.0 {
        f64::INFINITY
    } else {
        return None;
    };

    let p = ProjectedSurfel {
        index,
        center: [camera.fx * c.x * inv_z + camera.cx, camera.fy * c.y * inv_z + camera.cy],
        cov,
        depth: c.z,
        homography_inv,
        opacity: surfel.opacity,
        normal,
        r2_max,
    };
    let (dx, dy) = p.aabb_extent(chi2);
    pixel_rect(p.center, dx, dy, camera.width as usize, camera.height as usize)?;
    Some(p)
}

/// Inclusive pixel range `(x0, x1, y0, y1)` whose centers fall in the box
/// `center +- (dx, dy)`; `None` if empty after clipping to the image.
pub fn pixel_rect(
    center: [f64; 2],
    dx: f64,
    dy: f64,
    width: usize,
    height: usize,
) -> Option<(usize, usize, usize, usize)> {
    if !(dx.is_finite() && dy.is_finite()) {
        return None;
    }
    let x0 = (center[0] - dx - 0.5).ceil().max(0.0);
    let x1 = (center[0] + dx - 0.5).floor().min(width as f64 - 1.0);
    let y0 = (center[1] - dy - 0.5).ceil().max(0.0);
    let y1 = (center[1] + dy - 0.5).floor().min(height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}
