use std::collections::{BTreeMap, BTreeSet};

use psimap::eval::PanopticImage;
use psimap::raster::NO_INSTANCE as N;
use psimap::types::IGNORE_LABEL;

/// PQ/SQ/RQ from explicit pixel sets, written independently of the library.
pub fn counting_oracle(pred: &PanopticImage, gt: &PanopticImage) -> BTreeMap<u32, (f64, f64, f64)> {
    let n = gt.ids.len();
    let seg_pixels = |img: &PanopticImage| {
        let mut m: BTreeMap<(u32, u32), BTreeSet<usize>> = BTreeMap::new();
        for p in 0..n {
            if gt.classes[p] == IGNORE_LABEL || img.ids[p] == N || img.classes[p] == IGNORE_LABEL {
                continue;
            }
            m.entry((img.ids[p], img.classes[p])).or_default().insert(p);
        }
        m
    };
    let ps = seg_pixels(pred);
    let gs = seg_pixels(gt);
    let classes: BTreeSet<u32> = ps.keys().chain(gs.keys()).map(|k| k.1).collect();
    let mut out = BTreeMap::new();
    for c in classes {
        let mut tp = 0.0;
        let mut iou_sum = 0.0;
        let mut matched_p = BTreeSet::new();
        let mut matched_g = BTreeSet::new();
        for (gk, g) in gs.iter().filter(|(k, _)| k.1 == c) {
            for (pk, p) in ps.iter().filter(|(k, _)| k.1 == c) {
                let i = p.intersection(g).count() as f64;
                let u = p.union(g).count() as f64;
                if i / u > 0.5 {
                    tp += 1.0;
                    iou_sum += i / u;
                    matched_p.insert(*pk);
                    matched_g.insert(*gk);
                }
            }
        }
        let fp = ps.keys().filter(|k| k.1 == c && !matched_p.contains(k)).count() as f64;
        let fn_ = gs.keys().filter(|k| k.1 == c && !matched_g.contains(k)).count() as f64;
        let denom = tp + 0.5 * fp + 0.5 * fn_;
        let sq = if tp > 0.0 { iou_sum / tp } else { 0.0 };
        let rq = tp / denom;
        out.insert(c, (iou_sum / denom, sq, rq));
    }
    out
}
