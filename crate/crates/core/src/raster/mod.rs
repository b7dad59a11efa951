//! Tile-based forward renderer for surfels.
//!
//! Surfels are projected, binned into screen tiles (bounding circle or
//! covariance AABB), depth sorted per tile and alpha blended front to back.
//! Feature and label planes can be blended fully or restricted to the K
//! highest-weight contributors of each pixel.

mod binning;
mod kernel;
mod project;

pub mod bench;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::types::{Camera, Plane, Surfel};

pub use binning::{bin, bin_aabb, bin_circle, footprint, tile_range, Binning, TileGrid};
pub use kernel::{Contribution, PixelTrace};
pub use project::{alpha_from_local, evaluate_alpha, pixel_rect, project_surfel, LocalSample, ProjectedSurfel};

/// Sentinel for pixels without any instance evidence.
pub const NO_INSTANCE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blending {
    Full,
    /// Feature and label planes accumulate only the K largest weights per pixel.
    TopK(usize),
}

/// Which output planes to produce. Accumulated opacity is always produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Targets {
    pub color: bool,
    pub depth: bool,
    pub normal: bool,
    pub semantic: bool,
    pub instance: bool,
}

impl Default for Targets {
    fn default() -> Self {
        Targets {
            color: true,
            depth: true,
            normal: true,
            semantic: true,
            instance: true,
        }
    }
}

impl Targets {
    pub fn features_only() -> Self {
        Targets {
            color: false,
            depth: false,
            normal: false,
            semantic: true,
            instance: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Confidence threshold for the footprint ellipse (9 = 3 sigma).
    pub chi2: f64,
    pub alpha_min: f64,
    pub transmittance_min: f64,
    pub background: [f64; 3],
    pub binning: Binning,
    pub blending: Blending,
    pub targets: Targets,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            tile_size: 16,
            chi2: 9.0,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            background: [0.0; 3],
            binning: Binning::Aabb,
            blending: Blending::Full,
            targets: Targets::default(),
        }
    }
}

/// Per-surfel instance label distributions to blend into the instance plane.
#[derive(Debug, Clone, Copy)]
pub struct InstanceInput<'a> {
    pub channels: usize,
    /// Row-major `surfels x channels`.
    pub probs: &'a [f64],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderStats {
    /// Surfel/tile assignments made by binning.
    pub tile_assignments: u64,
    pub nonempty_tiles: u64,
    /// Surfel/tile pairs whose features were accumulated by at least one
    /// pixel of the tile; equals `tile_assignments` under full blending.
    pub rendered_pairs: u64,
    /// Sum over pixels of color-blended contributors.
    pub blended: u64,
    /// Sum over pixels of feature-blended contributors.
    pub feature_blended: u64,
    pub projected: u64,
}

impl RenderStats {
    pub fn rn_per_tile(&self) -> f64 {
        if self.nonempty_tiles == 0 {
            0.0
        } else {
            self.rendered_pairs as f64 / self.nonempty_tiles as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderTargets {
    pub width: usize,
    pub height: usize,
    pub color: Option<Plane>,
    /// Intersection depth of the dominant (largest weight) contributor.
    pub depth: Option<Plane>,
    /// Weight-normalized expected depth.
    pub depth_expected: Option<Plane>,
    pub normal: Option<Plane>,
    pub semantic: Option<Plane>,
    /// Blended label distribution, one channel per query.
    pub instance: Option<Plane>,
    pub instance_ids: Option<Vec<u32>>,
    pub opacity: Plane,
    pub blend_count: Vec<u32>,
    pub stats: RenderStats,
}

/// Forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub projected: Vec<ProjectedSurfel>,
    pub grid: TileGrid,
    /// One trace per tile, pixels in row-major order within the tile.
    pub tiles: Vec<Vec<PixelTrace>>,
    pub sem_dim: usize,
    pub ins_dim: usize,
}

pub fn project_all(surfels: &[Surfel], camera: &Camera, cfg: &RasterConfig) -> Vec<ProjectedSurfel> {
    surfels
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| project_surfel(s, i, camera, cfg.chi2, cfg.alpha_min))
        .collect()
}

/// Renders the requested target planes.
pub fn render(
    surfels: &[Surfel],
    instance: Option<InstanceInput<'_>>,
    camera: &Camera,
    cfg: &RasterConfig,
) -> RenderTargets {
    render_impl(surfels, instance, camera, cfg, false).0
}

/// Renders and keeps per-pixel contributor traces for differentiation.
pub fn render_traced(
    surfels: &[Surfel],
    instance: Option<InstanceInput<'_>>,
    camera: &Camera,
    cfg: &RasterConfig,
) -> (RenderTargets, ForwardCache) {
    let (t, c) = render_impl(surfels, instance, camera, cfg, true);
    (t, c.expect("trace requested"))
}

fn render_impl(
    surfels: &[Surfel],
    instance: Option<InstanceInput<'_>>,
    camera: &Camera,
    cfg: &RasterConfig,
    trace: bool,
) -> (RenderTargets, Option<ForwardCache>) {
    let width = camera.width as usize;
    let height = camera.height as usize;
    let projected = project_all(surfels, camera, cfg);
    let grid = bin(&projected, cfg.binning, cfg.chi2, cfg.tile_size, width, height);

    let sem_dim = if cfg.targets.semantic {
        surfels.first().map_or(0, |s| s.sem.len())
    } else {
        0
    };
    let ins_dim = match (cfg.targets.instance, instance) {
        (true, Some(inp)) => inp.channels,
        _ => 0,
    };
    let feat_dim = sem_dim + ins_dim;
    let colors: Vec<[f64; 3]> = projected
        .iter()
        .map(|p| {
            let c = surfels[p.index].color;
            [c.x, c.y, c.z]
        })
        .collect();
    let mut feats = Vec::with_capacity(projected.len() * feat_dim);
    if feat_dim > 0 {
        for p in &projected {
            feats.extend_from_slice(&surfels[p.index].sem[..sem_dim]);
            if let Some(inp) = instance.filter(|_| ins_dim > 0) {
                feats.extend_from_slice(&inp.probs[p.index * ins_dim..(p.index + 1) * ins_dim]);
            }
        }
    }
    let shading = kernel::Shading {
        projected: &projected,
        colors: &colors,
        feats: &feats,
        feat_dim,
        cfg,
    };

    let outs: Vec<kernel::TileOut> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| kernel::shade_tile(&shading, &grid, t, trace))
        .collect();

    let n = width * height;
    let tg = &cfg.targets;
    let mut color = tg.color.then(|| Plane::new(width, height, 3));
    let mut depth = tg.depth.then(|| Plane::new(width, height, 1));
    let mut depth_expected = tg.depth.then(|| Plane::new(width, height, 1));
    let mut normal = tg.normal.then(|| Plane::new(width, height, 3));
    let mut semantic = (tg.semantic && sem_dim > 0).then(|| Plane::new(width, height, sem_dim));
    let mut inst = (ins_dim > 0).then(|| Plane::new(width, height, ins_dim));
    let mut opacity = Plane::new(width, height, 1);
    let mut blend_count = vec![0u32; n];
    let mut stats = RenderStats {
        tile_assignments: grid.rn_total,
        nonempty_tiles: grid.nonempty_tiles() as u64,
        projected: projected.len() as u64,
        ..Default::default()
    };
    let mut traces = Vec::with_capacity(if trace { outs.len() } else { 0 });

    for (t, out) in outs.into_iter().enumerate() {
        let (x0, x1, y0, y1) = grid.tile_bounds(t);
        let tw = x1 - x0;
        stats.rendered_pairs += out.rendered_pairs;
        stats.blended += out.blended;
        stats.feature_blended += out.feature_blended;
        for ly in 0..(y1 - y0) {
            for lx in 0..tw {
                let l = ly * tw + lx;
                let g = (y0 + ly) * width + (x0 + lx);
                if let Some(c) = color.as_mut() {
                    c.data[g * 3..g * 3 + 3].copy_from_slice(&out.color[l * 3..l * 3 + 3]);
                }
                if let Some(d) = depth.as_mut() {
                    d.data[g] = out.depth[l];
                }
                if let Some(d) = depth_expected.as_mut() {
                    d.data[g] = out.depth_expected[l];
                }
                if let Some(nm) = normal.as_mut() {
                    nm.data[g * 3..g * 3 + 3].copy_from_slice(&out.normal[l * 3..l * 3 + 3]);
                }
                let f = &out.feat[l * feat_dim..(l + 1) * feat_dim];
                if let Some(s) = semantic.as_mut() {
                    s.data[g * sem_dim..(g + 1) * sem_dim].copy_from_slice(&f[..sem_dim]);
                }
                if let Some(s) = inst.as_mut() {
                    s.data[g * ins_dim..(g + 1) * ins_dim].copy_from_slice(&f[sem_dim..]);
                }
                opacity.data[g] = out.opacity[l];
                blend_count[g] = out.count[l];
            }
        }
        if trace {
            traces.push(out.traces);
        }
    }
    if !matches!(cfg.blending, Blending::TopK(_)) {
        stats.rendered_pairs = stats.tile_assignments;
    }
    let instance_ids = inst.as_ref().map(argmax_ids);

    let targets = RenderTargets {
        width,
        height,
        color,
        depth,
        depth_expected,
        normal,
        semantic,
        instance: inst,
        instance_ids,
        opacity,
        blend_count,
        stats,
    };
    let cache = trace.then(|| ForwardCache {
        projected,
        grid,
        tiles: traces,
        sem_dim,
        ins_dim,
    });
    (targets, cache)
}

/// Per-pixel argmax over channels; ties go to the lowest channel, all-zero
/// pixels get [`NO_INSTANCE`].
pub fn argmax_ids(plane: &Plane) -> Vec<u32> {
    (0..plane.pixel_count())
        .map(|i| {
            let px = plane.at(i);
            let mut best = NO_INSTANCE;
            let mut best_v = 0.0;
            for (k, &v) in px.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = k as u32;
                }
            }
            best
        })
        .collect()
}
