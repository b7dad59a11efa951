use serde::{Deserialize, Serialize};

use super::params::{Gradients, Model, SYM_INDEX};
use super::{
    hungarian_match, loss_geo_grad, loss_ins_grad, loss_iso_grad, loss_rgb_grad, loss_sem_grad, match_costs,
    query_masks, raster_backward, total_loss, LossParts, LossReport, LossWeights,
};
use crate::error::{Error, Result};
use crate::panoptic::{
    assign_labels_backward, assign_labels_with, build_keys_values, cross_attention_backward, cross_attention_update,
    frustum_select, LabelAssignment,
};
use crate::raster::{render_traced, RasterConfig, RenderTargets, Targets};
use crate::sogmm::SogmmModel;
use crate::types::FrameBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub raster: RasterConfig,
    pub weights: LossWeights,
    /// Drop the label-assignment gradient on surfel centers. Left in, it pulls
    /// surfels toward their query mean and off the surface.
    pub detach_label_centers: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            raster: RasterConfig::default(),
            weights: LossWeights::default(),
            detach_label_centers: true,
        }
    }
}

/// Forward results of one frame, plus gradients when requested.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: LossReport,
    pub grads: Option<Gradients>,
    pub labels: LabelAssignment,
    /// Attention-refined query features, `queries x C`.
    pub refined: Vec<f64>,
    pub targets: RenderTargets,
    /// Gt mask matched to each query (dead queries are `None`).
    pub assignment: Vec<Option<usize>>,
}

/// Runs attention, label assignment, rendering and all losses for one frame.
///
/// `fixed` pins the query/mask matching instead of solving it, which keeps
/// the loss a smooth function for finite differences.
pub fn evaluate(
    model: &Model,
    sogmm: &SogmmModel,
    frame: &FrameBundle,
    cfg: &PipelineConfig,
    fixed: Option<&[Option<usize>]>,
    want_grads: bool,
) -> Result<Evaluation> {
    let scene = &model.scene;
    let surfels = &scene.surfels;
    let camera = &frame.camera;
    let att = &model.attention;
    let c = att.channels;
    let nq = scene.queries.len();
    if surfels.iter().any(|s| s.ins.len() != c) || scene.queries.iter().any(|q| q.feature.len() != c) {
        return Err(Error::invalid("instance feature width differs from the attention width"));
    }

    let selected = frustum_select(surfels, camera);
    let (keys, values) = build_keys_values(surfels, &selected, att);
    let query_feats: Vec<f64> = scene.queries.iter().flat_map(|q| q.feature.iter().copied()).collect();
    let (refined, att_cache) = cross_attention_update(&query_feats, &keys, &values, att);
    let labels = assign_labels_with(&scene.queries, &refined, c, surfels);

    let rcfg = RasterConfig {
        targets: Targets {
            color: true,
            depth: false,
            normal: false,
            semantic: true,
            instance: true,
        },
        ..cfg.raster.clone()
    };
    let instance = (nq > 0).then(|| labels.input());
    let (targets, fcache) = render_traced(surfels, instance, camera, &rcfg);
    let w = &cfg.weights;

    let color = targets.color.as_ref().expect("color requested");
    let (l_rgb, g_rgb) = loss_rgb_grad(color, &frame.rgb, w.lambda_s, want_grads);
    let (l_sem, g_sem) = match &targets.semantic {
        Some(p) => loss_sem_grad(p, &frame.semantic, want_grads),
        None => (0.0, None),
    };

    let alive: Vec<usize> = (0..nq).filter(|&k| scene.queries[k].alive).collect();
    let gt: Vec<Vec<bool>> = frame.instances.iter().map(|m| m.mask.clone()).collect();
    let (l_ins, g_ins, assignment) = match &targets.instance {
        Some(plane) if !alive.is_empty() => {
            let pred = query_masks(plane, &alive);
            let asg: Vec<Option<usize>> = match fixed {
                Some(f) => alive.iter().map(|&k| f[k]).collect(),
                None => hungarian_match(&match_costs(&pred, &gt))?.rows,
            };
            let (l, g) = loss_ins_grad(&pred, &gt, &asg, want_grads);
            let mut per_query = vec![None; nq];
            for (i, &k) in alive.iter().enumerate() {
                per_query[k] = asg[i];
            }
            let plane_grad = g.map(|g| {
                let mut d = vec![0.0; plane.data.len()];
                for (i, &k) in alive.iter().enumerate() {
                    for (p, v) in g[i].iter().enumerate() {
                        d[p * nq + k] = *v;
                    }
                }
                d
            });
            (l, plane_grad, per_query)
        }
        _ => (0.0, None, vec![None; nq]),
    };
    let (l_geo, g_geo) = loss_geo_grad(surfels, sogmm, w.lambda_n, want_grads);
    let (l_iso, g_iso) = loss_iso_grad(surfels, want_grads);

    let matches: Vec<(usize, usize)> = assignment
        .iter()
        .enumerate()
        .filter_map(|(k, m)| m.map(|m| (k, m)))
        .collect();
    let report = total_loss(
        LossParts {
            rgb: l_rgb,
            geo: l_geo,
            ins: l_ins,
            sem: l_sem,
            iso: l_iso,
        },
        w,
        matches,
    );

    let grads = if want_grads {
        let scale = |g: Option<Vec<f64>>, k: f64| g.map(|v| v.into_iter().map(|x| x * k).collect::<Vec<f64>>());
        let d_color = scale(g_rgb, w.rgb);
        let d_sem = scale(g_sem, w.sem);
        let d_ins = scale(g_ins, w.ins);
        let rg = raster_backward(
            surfels,
            instance,
            camera,
            rcfg.background,
            &fcache,
            d_color.as_deref(),
            d_sem.as_deref(),
            d_ins.as_deref(),
        );
        let mut g = Gradients::zeros(model);
        g.position.clone_from(&rg.position);
        g.rotation.clone_from(&rg.rotation);
        g.scales.clone_from(&rg.scales);
        g.opacity.clone_from(&rg.opacity);
        g.color.clone_from(&rg.color);
        let sd = fcache.sem_dim;
        if sd == scene.sem_dim() {
            g.sem.clone_from(&rg.sem);
        }

        if nq > 0 && fcache.ins_dim == nq {
            let ag = assign_labels_backward(&scene.queries, &refined, c, surfels, &labels, &rg.ins_probs);
            for (o, v) in g.ins.iter_mut().zip(&ag.surfel_ins) {
                *o += v;
            }
            if !cfg.detach_label_centers {
                for (o, v) in g.position.iter_mut().zip(&ag.surfel_center) {
                    *o += v;
                }
            }
            for k in 0..nq {
                g.query_mean[k] += ag.query_mean[k];
                let gc = &ag.query_cov[k];
                for (e, &(a, b)) in SYM_INDEX.iter().enumerate() {
                    g.query_cov[k][e] += if a == b { gc[(a, a)] } else { gc[(a, b)] + gc[(b, a)] };
                }
            }
            let atg = cross_attention_backward(&query_feats, &keys, &values, att, &att_cache, &ag.features);
            for (o, v) in g.query_feature.iter_mut().zip(&atg.query_feats) {
                *o += v;
            }
            for (r, &j) in selected.iter().enumerate() {
                let dk = &atg.keys[r * c..(r + 1) * c];
                let dv = &atg.values[r * c..(r + 1) * c];
                for t in 0..c {
                    g.ins[j * c + t] += dk[t] + dv[t];
                }
                if att_cache.num_keys > 0 {
                    att.positional_backward(&surfels[j].center, dk, &mut g.position[j]);
                }
            }
            g.w_q = atg.w_q;
            g.w_k = atg.w_k;
            g.w_v = atg.w_v;
        }

        if let Some(gg) = g_geo {
            for i in 0..surfels.len() {
                g.position[i] += gg.center[i] * w.geo;
                for k in 0..4 {
                    g.rotation[i][k] += gg.rotation[i][k] * w.geo;
                }
            }
        }
        if let Some(gi) = g_iso {
            for (o, v) in g.scales.iter_mut().zip(gi) {
                o[0] += v[0] * w.iso;
                o[1] += v[1] * w.iso;
            }
        }
        Some(g)
    } else {
        None
    };

    Ok(Evaluation {
        report,
        grads,
        labels,
        refined,
        targets,
        assignment,
    })
}
