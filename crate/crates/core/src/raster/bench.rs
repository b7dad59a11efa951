//! Ablation harness over the binning and blending options.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{render, Binning, Blending, InstanceInput, RasterConfig};
use crate::error::{Error, Result};
use crate::types::{Camera, Surfel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub warmup: usize,
    pub top_k: usize,
    /// Worker threads; `None` uses the current pool.
    pub threads: Option<usize>,
    /// Shared settings; binning and blending are overridden per row.
    pub raster: RasterConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repetitions: 10,
            warmup: 1,
            top_k: 16,
            threads: None,
            raster: RasterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub binning: Binning,
    pub blending: Blending,
    pub time_ms: f64,
    pub fps: f64,
    pub rn_total: u64,
    pub rn_per_tile: f64,
    /// Raw binning assignments, before any selection.
    pub tile_assignments: u64,
    pub samples_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub width: u32,
    pub height: u32,
    pub surfels: usize,
    pub threads: usize,
    pub repetitions: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,binning,blending,time_ms,fps,rn_total,rn_per_tile,tile_assignments\n");
        for r in &self.rows {
            let blend = match r.blending {
                Blending::Full => "full".to_string(),
                Blending::TopK(k) => format!("topk{k}"),
            };
            let bin = match r.binning {
                Binning::Circle => "circle",
                Binning::Aabb => "aabb",
            };
            s.push_str(&format!(
                "{},{},{},{:.4},{:.2},{},{:.2},{}\n",
                r.name, bin, blend, r.time_ms, r.fps, r.rn_total, r.rn_per_tile, r.tile_assignments
            ));
        }
        s
    }
}

/// The four ablation rows: baseline, precise tiles, top-k, both.
pub fn ablation_grid(top_k: usize) -> [(&'static str, Binning, Blending); 4] {
    [
        ("baseline", Binning::Circle, Blending::Full),
        ("precise-tile", Binning::Aabb, Blending::Full),
        ("top-k", Binning::Circle, Blending::TopK(top_k)),
        ("full-method", Binning::Aabb, Blending::TopK(top_k)),
    ]
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn bench_render(
    surfels: &[Surfel],
    instance: Option<InstanceInput<'_>>,
    camera: &Camera,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if cfg.repetitions == 0 {
        return Err(Error::invalid("repetitions must be positive"));
    }
    let run = || {
        let mut rows = Vec::with_capacity(4);
        for (name, binning, blending) in ablation_grid(cfg.top_k) {
            let rc = RasterConfig {
                binning,
                blending,
                ..cfg.raster.clone()
            };
            for _ in 0..cfg.warmup {
                render(surfels, instance, camera, &rc);
            }
            let mut samples = Vec::with_capacity(cfg.repetitions);
            let mut stats = None;
            for _ in 0..cfg.repetitions {
                let start = Instant::now();
                let out = render(surfels, instance, camera, &rc);
                samples.push(start.elapsed().as_secs_f64() * 1e3);
                match &stats {
                    None => stats = Some(out.stats),
                    Some(s) => debug_assert_eq!(s, &out.stats),
                }
            }
            let stats = stats.unwrap_or_default();
            let time_ms = median(&samples);
            rows.push(BenchRow {
                name: name.to_string(),
                binning,
                blending,
                time_ms,
                fps: if time_ms > 0.0 { 1e3 / time_ms } else { 0.0 },
                rn_total: stats.rendered_pairs,
                rn_per_tile: stats.rn_per_tile(),
                tile_assignments: stats.tile_assignments,
                samples_ms: samples,
            });
        }
        BenchReport {
            width: camera.width,
            height: camera.height,
            surfels: surfels.len(),
            threads: rayon::current_num_threads(),
            repetitions: cfg.repetitions,
            rows,
        }
    };
    match cfg.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidState(e.to_string()))?;
            Ok(pool.install(run))
        }
        None => Ok(run()),
    }
}
