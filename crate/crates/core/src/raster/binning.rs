//! Tile binning: which projected surfels may touch which screen tiles.

use serde::{Deserialize, Serialize};

use super::project::{pixel_rect, ProjectedSurfel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binning {
    /// Bounding square of the disc of radius `sqrt(chi2 * lambda_max)`.
    Circle,
    /// Axis-aligned box from the diagonal of the projected covariance.
    Aabb,
}

/// Per-tile depth-sorted surfel lists plus assignment counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub width: usize,
    pub height: usize,
    /// Indices into the projected list, sorted by `(depth, surfel index)`.
    pub lists: Vec<Vec<u32>>,
    /// Total surfel/tile assignments.
    pub rn_total: u64,
    /// Mean assignments per non-empty tile.
    pub rn_per_tile: f64,
}

impl TileGrid {
    pub fn tile_bounds(&self, t: usize) -> (usize, usize, usize, usize) {
        let tx = t % self.tiles_x;
        let ty = t / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (
            x0,
            (x0 + self.tile_size).min(self.width),
            y0,
            (y0 + self.tile_size).min(self.height),
        )
    }

    pub fn nonempty_tiles(&self) -> usize {
        self.lists.iter().filter(|l| !l.is_empty()).count()
    }
}

/// Half extents of a surfel's binning footprint under a policy.
pub fn footprint(p: &ProjectedSurfel, binning: Binning, chi2: f64) -> (f64, f64) {
    match binning {
        Binning::Circle => {
            let r = (chi2 * p.max_eigenvalue()).sqrt();
            (r, r)
        }
        Binning::Aabb => p.aabb_extent(chi2),
    }
}

/// Inclusive tile range `(tx0, tx1, ty0, ty1)` touched by a surfel.
pub fn tile_range(
    p: &ProjectedSurfel,
    binning: Binning,
    chi2: f64,
    tile_size: usize,
    width: usize,
    height: usize,
) -> Option<(usize, usize, usize, usize)> {
    let (dx, dy) = footprint(p, binning, chi2);
    let (x0, x1, y0, y1) = pixel_rect(p.center, dx, dy, width, height)?;
    Some((x0 / tile_size, x1 / tile_size, y0 / tile_size, y1 / tile_size))
}

pub fn bin(
    projected: &[ProjectedSurfel],
    binning: Binning,
    chi2: f64,
    tile_size: usize,
    width: usize,
    height: usize,
) -> TileGrid {
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (i, p) in projected.iter().enumerate() {
        if let Some((tx0, tx1, ty0, ty1)) = tile_range(p, binning, chi2, tile_size, width, height) {
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    lists[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
    }
    for list in &mut lists {
        list.sort_by(|&a, &b| {
            let (pa, pb) = (&projected[a as usize], &projected[b as usize]);
            pa.depth.total_cmp(&pb.depth).then(pa.index.cmp(&pb.index))
        });
    }
    let rn_total: u64 = lists.iter().map(|l| l.len() as u64).sum();
    let nonempty = lists.iter().filter(|l| !l.is_empty()).count();
    TileGrid {
        tile_size,
        tiles_x,
        tiles_y,
        width,
        height,
        lists,
        rn_total,
        rn_per_tile: if nonempty > 0 {
            rn_total as f64 / nonempty as f64
        } else {
            0.0
        },
    }
}

pub fn bin_circle(projected: &[ProjectedSurfel], chi2: f64, tile_size: usize, width: usize, height: usize) -> TileGrid {
    bin(projected, Binning::Circle, chi2, tile_size, width, height)
}

pub fn bin_aabb(projected: &[ProjectedSurfel], chi2: f64, tile_size: usize, width: usize, height: usize) -> TileGrid {
    bin(projected, Binning::Aabb, chi2, tile_size, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    fn placed(center: [f64; 2], cov: [f64; 3]) -> ProjectedSurfel {
        ProjectedSurfel {
            index: 0,
            center,
            cov,
            depth: 1.0,
            homography_inv: Matrix3::identity(),
            opacity: 1.0,
            normal: Vector3::z(),
            r2_max: 11.0,
        }
    }

    fn tiles(grid: &TileGrid) -> Vec<usize> {
        (0..grid.lists.len()).filter(|&t| !grid.lists[t].is_empty()).collect()
    }

    #[test]
    fn isotropic_sets_are_equal() {
        let p = vec![placed([70.3, 41.9], [36.0, 0.0, 36.0])];
        let c = bin_circle(&p, 9.0, 16, 256, 256);
        let a = bin_aabb(&p, 9.0, 16, 256, 256);
        assert_eq!(tiles(&c), tiles(&a));
        assert_eq!(c.rn_total, a.rn_total);
    }

    #[test]
    fn elongated_uses_fewer_tiles() {
        // sigma_x = 20, sigma_y = 1: box 120 x 6 px against a 120 x 120 square
        let p = vec![placed([128.0, 128.0], [400.0, 0.0, 1.0])];
        let c = bin_circle(&p, 9.0, 16, 256, 256);
        let a = bin_aabb(&p, 9.0, 16, 256, 256);
        // enumerate tiles touched by each rectangle directly
        let count = |dx: f64, dy: f64| {
            let mut n = 0;
            for ty in 0..16 {
                for tx in 0..16 {
                    let (x0, x1) = (tx as f64 * 16.0, tx as f64 * 16.0 + 15.0);
                    let (y0, y1) = (ty as f64 * 16.0, ty as f64 * 16.0 + 15.0);
                    let hit_x = x1 + 0.5 >= 128.0 - dx && x0 + 0.5 <= 128.0 + dx;
                    let hit_y = y1 + 0.5 >= 128.0 - dy && y0 + 0.5 <= 128.0 + dy;
                    n += (hit_x && hit_y) as u64;
                }
            }
            n
        };
        assert_eq!(a.rn_total, count(60.0, 3.0));
        assert_eq!(c.rn_total, count(60.0, 60.0));
        assert!(a.rn_total < c.rn_total);
    }

    #[test]
    fn lists_sorted_by_depth_then_index() {
        let mut p = vec![
            placed([8.0, 8.0], [4.0, 0.0, 4.0]),
            placed([8.0, 8.0], [4.0, 0.0, 4.0]),
            placed([8.0, 8.0], [4.0, 0.0, 4.0]),
        ];
        p[0].depth = 3.0;
        p[0].index = 0;
        p[1].depth = 1.0;
        p[1].index = 5;
        p[2].depth = 1.0;
        p[2].index = 2;
        let g = bin_aabb(&p, 9.0, 16, 16, 16);
        assert_eq!(g.lists[0], vec![2, 1, 0]);
        assert_eq!(g.rn_per_tile, 3.0);
    }
}
