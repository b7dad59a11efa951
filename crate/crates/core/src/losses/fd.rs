use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Gradients, Model, ParamClass};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel: f64,
    /// `(class, worst relative error, coordinates checked)`.
    pub per_class: Vec<(ParamClass, f64, usize)>,
    /// `(class, index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(ParamClass, usize, f64, f64)>,
}

/// Picks at least `min_total` coordinates, spread over every non-empty class.
pub fn sample_coordinates(model: &Model, min_total: usize, seed: u64) -> Vec<(ParamClass, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<(ParamClass, usize)> = ParamClass::ALL
        .into_iter()
        .map(|c| (c, model.count(c)))
        .filter(|&(_, n)| n > 0)
        .collect();
    if classes.is_empty() {
        return vec![];
    }
    let per = min_total.div_ceil(classes.len());
    let mut out = Vec::new();
    let mut short = 0;
    for &(c, n) in &classes {
        let take = per.min(n);
        short += per - take;
        out.extend(sample(&mut rng, n, take).into_iter().map(|i| (c, i)));
    }
    // classes smaller than their share hand the remainder to the others
    for &(c, n) in &classes {
        if short == 0 {
            break;
        }
        let taken: Vec<usize> = out.iter().filter(|(k, _)| *k == c).map(|&(_, i)| i).collect();
        let free: Vec<usize> = (0..n).filter(|i| !taken.contains(i)).collect();
        let extra = short.min(free.len());
        out.extend(sample(&mut rng, free.len(), extra).into_iter().map(|j| (c, free[j])));
        short -= extra;
    }
    out.sort();
    out
}

/// Central differences of `loss` at each coordinate, compared with `grads`.
/// The relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(loss: F, model: &Model, grads: &Gradients, h: f64, coords: &[(ParamClass, usize)]) -> FdReport
where
    F: Fn(&Model) -> f64,
{
    let mut work = model.clone();
    let mut report = FdReport {
        max_rel: 0.0,
        per_class: vec![],
        worst: None,
    };
    for &(class, i) in coords {
        let x = model.get(class, i);
        work.set(class, i, x + h);
        let fp = loss(&work);
        work.set(class, i, x - h);
        let fm = loss(&work);
        work.set(class, i, x);
        let num = (fp - fm) / (2.0 * h);
        let ana = grads.get(class, i);
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
        match report.per_class.iter_mut().find(|e| e.0 == class) {
            Some(e) => {
                e.1 = e.1.max(rel);
                e.2 += 1;
            }
            None => report.per_class.push((class, rel, 1)),
        }
        if rel > report.max_rel || report.worst.is_none() {
            report.max_rel = report.max_rel.max(rel);
            report.worst = Some((class, i, ana, num));
        }
    }
    report
}
