use super::{Blending, ProjectedSurfel, RasterConfig, TileGrid};

/// One blended contributor of one pixel, in depth order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    /// Index into the projected list.
    pub slot: u32,
    pub alpha: f64,
    /// `exp(-(u^2 + v^2) / 2)`, so that `alpha = opacity * gauss`.
    pub gauss: f64,
    pub u: f64,
    pub v: f64,
    /// Camera depth of the ray/plane intersection.
    pub depth: f64,
    /// Transmittance in front of this contributor.
    pub transmittance: f64,
    /// Whether the contributor is part of the feature blend.
    pub selected: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PixelTrace {
    pub contribs: Vec<Contribution>,
    pub final_transmittance: f64,
}

pub(crate) struct Shading<'a> {
    pub projected: &'a [ProjectedSurfel],
    pub colors: &'a [[f64; 3]],
    pub feats: &'a [f64],
    pub feat_dim: usize,
    pub cfg: &'a RasterConfig,
}

pub(crate) struct TileOut {
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub depth_expected: Vec<f64>,
    pub normal: Vec<f64>,
    pub feat: Vec<f64>,
    pub opacity: Vec<f64>,
    pub count: Vec<u32>,
    pub rendered_pairs: u64,
    pub blended: u64,
    pub feature_blended: u64,
    pub traces: Vec<PixelTrace>,
}

#[derive(Clone, Copy)]
struct Candidate {
    pos: u32,
    c: Contribution,
    w: f64,
}

/// Top-k bookkeeping when no trace is kept.
#[derive(Clone, Copy)]
struct Lean {
    w: f64,
    pos: u32,
    slot: u32,
}

/// Larger weight first, earlier contributor on ties.
#[inline]
fn heavier(wi: f64, pi: u32, wj: f64, pj: u32) -> std::cmp::Ordering {
    wj.total_cmp(&wi).then(pi.cmp(&pj))
}

pub(crate) fn shade_tile(sh: &Shading<'_>, grid: &TileGrid, t: usize, trace: bool) -> TileOut {
    let cfg = sh.cfg;
    let fd = sh.feat_dim;
    let list = &grid.lists[t];
    let (x0, x1, y0, y1) = grid.tile_bounds(t);
    let tw = x1 - x0;
    let n = tw * (y1 - y0);
    let want_color = cfg.targets.color;
    let want_geom = cfg.targets.depth || cfg.targets.normal;
    let topk = match cfg.blending {
        Blending::TopK(k) => Some(k),
        Blending::Full => None,
    };
    let keep = trace || topk.is_some();

    let mut out = TileOut {
        color: vec![0.0; n * 3],
        depth: vec![0.0; n],
        depth_expected: vec![0.0; n],
        normal: vec![0.0; n * 3],
        feat: vec![0.0; n * fd],
        opacity: vec![0.0; n],
        count: vec![0; n],
        rendered_pairs: list.len() as u64,
        blended: 0,
        feature_blended: 0,
        traces: Vec::with_capacity(if trace { n } else { 0 }),
    };
    let mut used = vec![false; if topk.is_some() { list.len() } else { 0 }];
    let mut cands: Vec<Candidate> = Vec::new();
    let mut lean: Vec<Lean> = Vec::new();
    let mut scratch: Vec<f64> = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    // support boxes, slightly padded, stored contiguously for the per-pixel scan
    let boxes: Vec<[f64; 4]> = list
        .iter()
        .map(|&slot| {
            let p = &sh.projected[slot as usize];
            let (dx, dy) = p.aabb_extent(cfg.chi2);
            let (dx, dy) = (dx * (1.0 + 1e-9) + 1e-9, dy * (1.0 + 1e-9) + 1e-9);
            [p.center[0] - dx, p.center[0] + dx, p.center[1] - dy, p.center[1] + dy]
        })
        .collect();
    // positions whose box spans the current row, in depth order
    let mut row: Vec<u32> = Vec::with_capacity(list.len());

    for l in 0..n {
        let px = (x0 + l % tw) as f64 + 0.5;
        let py = (y0 + l / tw) as f64 + 0.5;
        if l % tw == 0 {
            row.clear();
            row.extend((0..list.len() as u32).filter(|&i| {
                let b = &boxes[i as usize];
                py >= b[2] && py <= b[3]
            }));
        }
        cands.clear();
        lean.clear();
        let mut tr = 1.0;
        let mut color = [0.0; 3];
        let mut normal = [0.0; 3];
        let mut best_w = -1.0;
        let mut dom_depth = 0.0;
        let mut exp_depth = 0.0;
        let mut count = 0u32;
        let feat = &mut out.feat[l * fd..(l + 1) * fd];

        for &pos in &row {
            let pos = pos as usize;
            let b = &boxes[pos];
            if px < b[0] || px > b[1] {
                continue;
            }
            let slot = list[pos];
            let p = &sh.projected[slot as usize];
            if !p.in_support(px, py, cfg.chi2) {
                continue;
            }
            let Some(s) = p.local(px, py) else { continue };
            let r2 = s.u * s.u + s.v * s.v;
            if r2 > p.r2_max {
                continue;
            }
            let g = (-0.5 * r2).exp();
            let a = p.opacity * g;
            if a < cfg.alpha_min {
                continue;
            }
            let w = a * tr;
            if want_color {
                let c = &sh.colors[slot as usize];
                color[0] += w * c[0];
                color[1] += w * c[1];
                color[2] += w * c[2];
            }
            if want_geom {
                if w > best_w {
                    best_w = w;
                    dom_depth = s.z;
                }
                exp_depth += w * s.z;
                normal[0] += w * p.normal.x;
                normal[1] += w * p.normal.y;
                normal[2] += w * p.normal.z;
            }
            if topk.is_none() && fd > 0 {
                let f = &sh.feats[slot as usize * fd..(slot as usize + 1) * fd];
                for (o, v) in feat.iter_mut().zip(f) {
                    *o += w * v;
                }
            }
            if keep && !trace {
                lean.push(Lean {
                    w,
                    pos: pos as u32,
                    slot,
                });
            } else if keep {
                cands.push(Candidate {
                    pos: pos as u32,
                    w,
                    c: Contribution {
                        slot,
                        alpha: a,
                        gauss: g,
                        u: s.u,
                        v: s.v,
                        depth: s.z,
                        transmittance: tr,
                        selected: topk.is_none(),
                    },
                });
            }
            count += 1;
            tr *= 1.0 - a;
            if tr < cfg.transmittance_min {
                break;
            }
        }

        if let (Some(k), false) = (topk, trace) {
            // k-th largest weight; ties at the threshold go to the earliest contributors
            let (thr, mut ties) = if lean.len() > k && k > 0 {
                scratch.clear();
                scratch.extend(lean.iter().map(|c| c.w));
                let (above, &mut thr, _) = scratch.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
                let strict = above.iter().filter(|w| w.total_cmp(&thr).is_gt()).count();
                (thr, k - strict)
            } else if lean.len() > k {
                (f64::INFINITY, 0)
            } else {
                (f64::NEG_INFINITY, usize::MAX)
            };
            let mut taken = 0u64;
            for c in &lean {
                match c.w.total_cmp(&thr) {
                    std::cmp::Ordering::Less => continue,
                    std::cmp::Ordering::Equal if ties == 0 => continue,
                    std::cmp::Ordering::Equal => ties -= 1,
                    std::cmp::Ordering::Greater => {}
                }
                taken += 1;
                used[c.pos as usize] = true;
                if fd > 0 {
                    let s = c.slot as usize;
                    for (o, v) in feat.iter_mut().zip(&sh.feats[s * fd..(s + 1) * fd]) {
                        *o += c.w * v;
                    }
                }
            }
            out.feature_blended += taken;
        } else if let Some(k) = topk {
            if cands.len() > k {
                order.clear();
                order.extend(0..cands.len());
                let cmp = |&i: &usize, &j: &usize| heavier(cands[i].w, i as u32, cands[j].w, j as u32);
                if k > 0 {
                    order.select_nth_unstable_by(k - 1, cmp);
                }
                for &i in &order[..k] {
                    cands[i].c.selected = true;
                }
            } else {
                for c in cands.iter_mut() {
                    c.c.selected = true;
                }
            }
            let mut nsel = 0u64;
            for c in cands.iter().filter(|c| c.c.selected) {
                nsel += 1;
                used[c.pos as usize] = true;
                if fd > 0 {
                    let s = c.c.slot as usize;
                    for (o, v) in feat.iter_mut().zip(&sh.feats[s * fd..(s + 1) * fd]) {
                        *o += c.w * v;
                    }
                }
            }
            out.feature_blended += nsel;
        } else {
            out.feature_blended += count as u64;
        }

        if want_color {
            for ch in 0..3 {
                out.color[l * 3 + ch] = color[ch] + tr * cfg.background[ch];
            }
        }
        if want_geom {
            let acc = 1.0 - tr;
            out.depth[l] = dom_depth;
            out.depth_expected[l] = if acc > 0.0 { exp_depth / acc } else { 0.0 };
            let nn = (normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2]).sqrt();
            if nn > 0.0 {
                for ch in 0..3 {
                    out.normal[l * 3 + ch] = normal[ch] / nn;
                }
            }
        }
        out.opacity[l] = 1.0 - tr;
        out.count[l] = count;
        out.blended += count as u64;
        if trace {
            out.traces.push(PixelTrace {
                contribs: cands.iter().map(|c| c.c).collect(),
                final_transmittance: tr,
            });
        }
    }
    if topk.is_some() {
        out.rendered_pairs = used.iter().filter(|&&u| u).count() as u64;
    }
    out
}
