use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use psimap::eval::{evaluate_views, label_view, make_synthetic_scene};
use psimap::io::{
    colorize_ids, label_plane, read_checkpoint, read_dataset, read_ply, read_sogmm, write_checkpoint,
    write_dataset, write_plane, write_ppm, write_sogmm, CameraRecord, Dataset,
};
use psimap::losses::Model;
use psimap::raster::bench::{bench_render, BenchConfig};
use psimap::raster::{render, RasterConfig};
use psimap::sogmm::fit_sogmm;
use psimap::trainer::{build_model, train};
use psimap::{Camera, Plane};
use serde_json::{json, Value};

use crate::config::RunConfig;

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg.out_dir.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("run_config.toml"), cfg.to_toml()?)?;
    Ok(out)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn write_png(path: &Path, plane: &Plane) -> Result<()> {
    let color = match plane.channels {
        3 => image::ColorType::Rgb8,
        1 => image::ColorType::L8,
        c => bail!("cannot write a {c}-channel plane as PNG"),
    };
    let bytes: Vec<u8> = plane.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, plane.width as u32, plane.height as u32, color)?;
    Ok(())
}

fn write_image(dir: &Path, name: &str, plane: &Plane, png: bool) -> Result<()> {
    write_ppm(&dir.join(format!("{name}.ppm")), plane)?;
    if png {
        write_png(&dir.join(format!("{name}.png")), plane)?;
    }
    Ok(())
}

pub fn fit_sogmm_cmd(cfg: &RunConfig) -> Result<Value> {
    let ply = RunConfig::require(&cfg.inputs.ply, "ply")?;
    let cloud = read_ply(ply).with_context(|| format!("reading {}", ply.display()))?;
    info!("fitting SOGMM to {} points", cloud.len());
    let model = fit_sogmm(&cloud, &cfg.sogmm.to_config(vec![]))?;
    let out = prepare_out(cfg)?;
    write_sogmm(&out.join("sogmm.json"), &model)?;
    let summary = json!({
        "points": cloud.len(),
        "components": model.len(),
        "log_likelihood": model.log_likelihood,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn synth_cmd(cfg: &RunConfig) -> Result<Value> {
    let scene = make_synthetic_scene(&cfg.synth)?;
    let out = prepare_out(cfg)?;
    let data = Dataset::from_synthetic(&scene);
    write_dataset(out, &data)?;
    let summary = json!({
        "frames": data.frames.len(),
        "held_out": data.held_out_indices(),
        "cloud_points": data.cloud.len(),
        "objects": cfg.synth.objects.len(),
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn train_cmd(cfg: &RunConfig) -> Result<Value> {
    let dir = RunConfig::require(&cfg.inputs.dataset, "dataset")?;
    let data = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    let frames = data.train_frames();
    let Some(first) = frames.first() else {
        bail!("dataset has no training frames");
    };
    let sogmm = match &cfg.inputs.sogmm {
        Some(p) => read_sogmm(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let views = data.frames.iter().map(|f| f.camera.center()).collect();
            fit_sogmm(&data.cloud, &cfg.sogmm.to_config(views))?
        }
    };
    info!("{} components, {} training frames", sogmm.len(), frames.len());
    let model = build_model(&sogmm, first, data.vocabulary.clone(), &cfg.init)?;
    let outcome = train(model, sogmm.clone(), &frames, &cfg.train)?;
    let out = prepare_out(cfg)?;
    write_checkpoint(&out.join("checkpoint.json"), &outcome.model)?;
    write_sogmm(&out.join("sogmm.json"), &sogmm)?;
    let mut log = outcome.log.join("\n");
    if !log.is_empty() {
        log.push('\n');
    }
    fs::write(out.join("train_log.jsonl"), log)?;
    let scene = &outcome.model.scene;
    let summary = json!({
        "steps": cfg.train.steps,
        "surfels": scene.surfels.len(),
        "queries": scene.queries.len(),
        "alive_queries": scene.alive_queries().count(),
        "prune_events": outcome.events,
        "final_loss": outcome.final_loss,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn resolve_camera(cfg: &RunConfig) -> Result<Camera> {
    if let Some(p) = &cfg.inputs.camera {
        let rec: CameraRecord = serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)?;
        return Ok(rec.to_camera()?);
    }
    if let Some(v) = cfg.inputs.view {
        let dir = RunConfig::require(&cfg.inputs.dataset, "dataset")?;
        let data = read_dataset(dir)?;
        return match data.frames.get(v) {
            Some(f) => Ok(f.camera.clone()),
            None => bail!("view {v} outside the dataset's {} frames", data.frames.len()),
        };
    }
    cfg.camera.to_camera()
}

fn render_model(model: &Model, camera: &Camera, raster: &RasterConfig) -> psimap::raster::RenderTargets {
    let labels = (!model.scene.queries.is_empty()).then(|| label_view(model, camera));
    let mut rc = raster.clone();
    rc.targets.instance &= labels.is_some();
    render(&model.scene.surfels, labels.as_ref().map(|l| l.input()), camera, &rc)
}

pub fn render_cmd(cfg: &RunConfig) -> Result<Value> {
    let ckpt = RunConfig::require(&cfg.inputs.checkpoint, "checkpoint")?;
    let model = read_checkpoint(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let camera = resolve_camera(cfg)?;
    let out_planes = render_model(&model, &camera, &cfg.render.raster);
    let out = prepare_out(cfg)?;
    let png = cfg.render.png;
    let (w, h) = (out_planes.width, out_planes.height);
    if let Some(c) = &out_planes.color {
        write_plane(&out.join("color.plane"), c)?;
        write_image(out, "color", c, png)?;
    }
    if let Some(d) = &out_planes.depth {
        write_plane(&out.join("depth.plane"), d)?;
    }
    if let Some(d) = &out_planes.depth_expected {
        write_plane(&out.join("depth_expected.plane"), d)?;
    }
    if let Some(n) = &out_planes.normal {
        write_plane(&out.join("normal.plane"), n)?;
        let vis = Plane {
            data: n.data.iter().map(|v| 0.5 * (v + 1.0)).collect(),
            ..n.clone()
        };
        write_image(out, "normal", &vis, png)?;
    }
    if let Some(s) = &out_planes.semantic {
        write_plane(&out.join("semantic.plane"), s)?;
    }
    if let Some(i) = &out_planes.instance {
        write_plane(&out.join("instance.plane"), i)?;
    }
    if let Some(ids) = &out_planes.instance_ids {
        write_plane(&out.join("instance_ids.plane"), &label_plane(w, h, ids))?;
        write_image(out, "instance_ids", &colorize_ids(w, h, ids), png)?;
    }
    write_plane(&out.join("opacity.plane"), &out_planes.opacity)?;
    write_image(out, "opacity", &out_planes.opacity, png)?;
    let summary = json!({
        "width": w,
        "height": h,
        "binning": cfg.render.raster.binning,
        "blending": cfg.render.raster.blending,
        "stats": out_planes.stats,
        "rn_per_tile": out_planes.stats.rn_per_tile(),
    });
    write_json(&out.join("stats.json"), &summary)?;
    Ok(summary)
}

pub fn bench_cmd(cfg: &RunConfig) -> Result<Value> {
    let ckpt = RunConfig::require(&cfg.inputs.checkpoint, "checkpoint")?;
    let model = read_checkpoint(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let camera = resolve_camera(cfg)?;
    let labels = (!model.scene.queries.is_empty()).then(|| label_view(&model, &camera));
    let b = &cfg.bench;
    let mut raster = b.raster.clone();
    raster.targets.instance &= labels.is_some();
    let bc = BenchConfig {
        repetitions: b.repetitions,
        warmup: b.warmup,
        top_k: b.top_k,
        threads: None,
        raster,
    };
    let report = bench_render(&model.scene.surfels, labels.as_ref().map(|l| l.input()), &camera, &bc)?;
    let out = prepare_out(cfg)?;
    write_json(&out.join("bench.json"), &report)?;
    fs::write(out.join("bench.csv"), report.to_csv())?;
    Ok(serde_json::to_value(&report)?)
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<Value> {
    let ckpt = RunConfig::require(&cfg.inputs.checkpoint, "checkpoint")?;
    let dir = RunConfig::require(&cfg.inputs.dataset, "dataset")?;
    let model = read_checkpoint(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let data = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    let mut views: Vec<usize> = data
        .held_out_indices()
        .into_iter()
        .filter(|&i| data.truth[i].is_some())
        .collect();
    if views.is_empty() {
        views = (0..data.frames.len()).filter(|&i| data.truth[i].is_some()).collect();
    }
    if views.is_empty() {
        bail!("dataset has no views with ground-truth labels");
    }
    let cameras: Vec<Camera> = views.iter().map(|&i| data.frames[i].camera.clone()).collect();
    let truth: Vec<_> = views.iter().filter_map(|&i| data.truth[i].clone()).collect();
    let e = &cfg.eval;
    let report = evaluate_views(&model, &cameras, &truth, &data.cloud.points, &e.raster, e.tau, cfg.seed)?;
    let out = prepare_out(cfg)?;
    let value = json!({
        "views": views,
        "panoptic": report.panoptic,
        "geometry": report.geometry,
    });
    write_json(&out.join("eval.json"), &value)?;
    Ok(value)
}
