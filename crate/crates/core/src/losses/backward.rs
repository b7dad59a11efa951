use nalgebra::{Matrix3, Quaternion, Vector3};
use rayon::prelude::*;

use crate::raster::{ForwardCache, InstanceInput};
use crate::types::{rotation_matrix, Camera, Surfel};

/// Gradient on a (possibly unnormalized) quaternion from a gradient on its
/// rotation matrix.
pub fn rotation_backward(q: &Quaternion<f64>, dr: &Matrix3<f64>) -> [f64; 4] {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    let g = |r: usize, c: usize| dr[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1) + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let dot = w * dw + x * dx + y * dy + z * dz;
    [(dw - w * dot) / n, (dx - x * dot) / n, (dy - y * dot) / n, (dz - z * dot) / n]
}

/// Per-surfel gradients of the rendered planes.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrads {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub scales: Vec<[f64; 2]>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    /// `surfels x C_sem`.
    pub sem: Vec<f64>,
    /// `surfels x channels` on the blended instance distributions.
    pub ins_probs: Vec<f64>,
}

/// Camera-space surfel geometry for the ray/plane intersection.
struct SlotGeom {
    c: Vector3<f64>,
    tu: Vector3<f64>,
    tv: Vector3<f64>,
    n: Vector3<f64>,
    s: [f64; 2],
}

// per-slot accumulator layout
const D_C: usize = 0;
const D_TU: usize = 3;
const D_TV: usize = 6;
const D_S: usize = 9;
const D_O: usize = 11;
const D_COL: usize = 12;
const D_FEAT: usize = 15;

/// Back-propagates plane gradients through blending, alpha evaluation and the
/// ray/plane intersection. Contributors outside the cached traces receive no
/// gradient; Top-K selection is treated as constant.
#[allow(clippy::too_many_arguments)]
pub fn raster_backward(
    surfels: &[Surfel],
    instance: Option<InstanceInput<'_>>,
    camera: &Camera,
    background: [f64; 3],
    cache: &ForwardCache,
    d_color: Option<&[f64]>,
    d_sem: Option<&[f64]>,
    d_ins: Option<&[f64]>,
) -> RasterGrads {
    let sd = cache.sem_dim;
    let id = cache.ins_dim;
    let stride = D_FEAT + sd + id;
    let width = camera.width as usize;
    let geoms: Vec<SlotGeom> = cache
        .projected
        .iter()
        .map(|p| {
            let s = &surfels[p.index];
            let r = camera.rotation * rotation_matrix(&s.rotation);
            let tu = r.column(0).into_owned();
            let tv = r.column(1).into_owned();
            SlotGeom {
                c: camera.to_camera(&s.center),
                tu,
                tv,
                n: tu.cross(&tv),
                s: s.scales,
            }
        })
        .collect();
    let grid = &cache.grid;

    let tiles: Vec<Vec<f64>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &grid.lists[t];
            let traces = &cache.tiles[t];
            let mut acc = vec![0.0; list.len() * stride];
            if list.is_empty() {
                return acc;
            }
            // slot -> position in this tile's list
            let pos_of = |slot: u32| list.binary_search_by(|&s| cmp_slot(cache, s, slot)).expect("slot in tile");
            let (x0, x1, y0, _) = grid.tile_bounds(t);
            let tw = x1 - x0;
            for (l, px) in traces.iter().enumerate() {
                if px.contribs.is_empty() {
                    continue;
                }
                let (x, y) = (x0 + l % tw, y0 + l / tw);
                let g = y * width + x;
                let gc = d_color.map(|d| [d[g * 3], d[g * 3 + 1], d[g * 3 + 2]]);
                let gs = d_sem.map(|d| &d[g * sd..(g + 1) * sd]);
                let gi = d_ins.map(|d| &d[g * id..(g + 1) * id]);
                let ray = Vector3::new(
                    (x as f64 + 0.5 - camera.cx) / camera.fx,
                    (y as f64 + 0.5 - camera.cy) / camera.fy,
                    1.0,
                );
                let mut behind = gc.map_or(0.0, |c| c[0] * background[0] + c[1] * background[1] + c[2] * background[2]);
                for c in px.contribs.iter().rev() {
                    let slot = c.slot as usize;
                    let s = &surfels[cache.projected[slot].index];
                    let mut xv = 0.0;
                    if let Some(gc) = gc {
                        xv += gc[0] * s.color.x + gc[1] * s.color.y + gc[2] * s.color.z;
                    }
                    if c.selected {
                        if let Some(gs) = gs {
                            xv += dot(gs, &s.sem[..sd]);
                        }
                        if let (Some(gi), Some(inp)) = (gi, instance) {
                            let src = cache.projected[slot].index;
                            xv += dot(gi, &inp.probs[src * id..(src + 1) * id]);
                        }
                    }
                    let w = c.alpha * c.transmittance;
                    let d_alpha = c.transmittance * (xv - behind);
                    behind = xv * c.alpha + (1.0 - c.alpha) * behind;

                    let a = &mut acc[pos_of(c.slot) * stride..][..stride];
                    if let Some(gc) = gc {
                        for ch in 0..3 {
                            a[D_COL + ch] += w * gc[ch];
                        }
                    }
                    if c.selected {
                        if let Some(gs) = gs {
                            for (o, v) in a[D_FEAT..D_FEAT + sd].iter_mut().zip(gs) {
                                *o += w * v;
                            }
                        }
                        if let Some(gi) = gi {
                            for (o, v) in a[D_FEAT + sd..].iter_mut().zip(gi) {
                                *o += w * v;
                            }
                        }
                    }
                    a[D_O] += d_alpha * c.gauss;
                    let du = -d_alpha * c.alpha * c.u;
                    let dv = -d_alpha * c.alpha * c.v;
                    ray_plane_backward(&geoms[slot], &ray, du, dv, a);
                }
            }
            acc
        })
        .collect();

    let np = cache.projected.len();
    let mut slots = vec![0.0; np * stride];
    for (t, acc) in tiles.iter().enumerate() {
        for (p, &slot) in grid.lists[t].iter().enumerate() {
            let dst = &mut slots[slot as usize * stride..][..stride];
            for (o, v) in dst.iter_mut().zip(&acc[p * stride..(p + 1) * stride]) {
                *o += v;
            }
        }
    }

    let n = surfels.len();
    let mut out = RasterGrads {
        position: vec![Vector3::zeros(); n],
        rotation: vec![[0.0; 4]; n],
        scales: vec![[0.0; 2]; n],
        opacity: vec![0.0; n],
        color: vec![Vector3::zeros(); n],
        sem: vec![0.0; n * sd],
        ins_probs: vec![0.0; n * id],
    };
    let rt = camera.rotation.transpose();
    for (slot, p) in cache.projected.iter().enumerate() {
        let a = &slots[slot * stride..(slot + 1) * stride];
        let i = p.index;
        let v3 = |o: usize| Vector3::new(a[o], a[o + 1], a[o + 2]);
        out.position[i] = rt * v3(D_C);
        let mut dr = Matrix3::zeros();
        dr.set_column(0, &(rt * v3(D_TU)));
        dr.set_column(1, &(rt * v3(D_TV)));
        out.rotation[i] = rotation_backward(&surfels[i].rotation, &dr);
        out.scales[i] = [a[D_S], a[D_S + 1]];
        out.opacity[i] = a[D_O];
        out.color[i] = v3(D_COL);
        out.sem[i * sd..(i + 1) * sd].copy_from_slice(&a[D_FEAT..D_FEAT + sd]);
        out.ins_probs[i * id..(i + 1) * id].copy_from_slice(&a[D_FEAT + sd..]);
    }
    out
}

fn cmp_slot(cache: &ForwardCache, a: u32, b: u32) -> std::cmp::Ordering {
    let (pa, pb) = (&cache.projected[a as usize], &cache.projected[b as usize]);
    pa.depth.total_cmp(&pb.depth).then(pa.index.cmp(&pb.index))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Chains `(du, dv)` through `u = (lambda r - c) . t_u / s_1` (and likewise
/// for `v`) with `lambda = (c . n) / (r . n)`, `n = t_u x t_v`.
fn ray_plane_backward(g: &SlotGeom, ray: &Vector3<f64>, du: f64, dv: f64, acc: &mut [f64]) {
    let rn = ray.dot(&g.n);
    let lambda = g.c.dot(&g.n) / rn;
    let delta = ray * lambda - g.c;
    let u = delta.dot(&g.tu) / g.s[0];
    let v = delta.dot(&g.tv) / g.s[1];
    acc[D_S] -= du * u / g.s[0];
    acc[D_S + 1] -= dv * v / g.s[1];
    let d_delta = g.tu * (du / g.s[0]) + g.tv * (dv / g.s[1]);
    let mut d_tu = delta * (du / g.s[0]);
    let mut d_tv = delta * (dv / g.s[1]);
    let d_lambda = d_delta.dot(ray);
    let d_c = -d_delta + g.n * (d_lambda / rn);
    let d_n = (g.c - ray * lambda) * (d_lambda / rn);
    d_tu += g.tv.cross(&d_n);
    d_tv += d_n.cross(&g.tu);
    for k in 0..3 {
        acc[D_C + k] += d_c[k];
        acc[D_TU + k] += d_tu[k];
        acc[D_TV + k] += d_tv[k];
    }
}
