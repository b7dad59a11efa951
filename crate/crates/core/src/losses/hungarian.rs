use crate::error::{Error, Result};

/// Cost charged for each row or column left unmatched by [`hungarian_match`].
pub const NO_MATCH_COST: f64 = 1.0;

/// Row-to-column assignment of a cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `rows[i]` is the column matched to row `i`.
    pub rows: Vec<Option<usize>>,
    pub total: f64,
}

impl Assignment {
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|c| (i, c)))
            .collect()
    }
}

fn check(cost: &[Vec<f64>]) -> Result<usize> {
    let m = cost.first().map_or(0, |r| r.len());
    for r in cost {
        if r.len() != m {
            return Err(Error::invalid("cost matrix rows differ in length"));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cost matrix has non-finite entries"));
        }
    }
    Ok(m)
}

/// Minimum-cost assignment matching every row (if rows <= columns) or every
/// column (otherwise). Shortest augmenting paths with potentials, O(n^2 m).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let m = check(cost)?;
    let n = cost.len();
    if n == 0 || m == 0 {
        return Ok(Assignment {
            rows: vec![None; n],
            total: 0.0,
        });
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let a = hungarian(&t)?;
        let mut rows = vec![None; n];
        for (j, i) in a.rows.iter().enumerate() {
            if let Some(i) = i {
                rows[*i] = Some(j);
            }
        }
        return Ok(Assignment { rows, total: a.total });
    }
    // 1-based arrays; column 0 is the virtual start
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            rows[p[j] - 1] = Some(j - 1);
        }
    }
    let total = rows
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| cost[i][c]))
        .sum();
    Ok(Assignment { rows, total })
}

/// Partial assignment: the matrix is padded to `(n + m)` square so every row
/// and column may stay unmatched at [`NO_MATCH_COST`] each.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let m = check(cost)?;
    let n = cost.len();
    let size = n + m;
    if size == 0 {
        return Ok(Assignment { rows: vec![], total: 0.0 });
    }
    let max = cost.iter().flatten().fold(0.0f64, |a, &b| a.max(b.abs()));
    let big = 1e6 * (1.0 + max + NO_MATCH_COST);
    let mut padded = vec![vec![0.0; size]; size];
    for i in 0..size {
        for j in 0..size {
            padded[i][j] = match (i < n, j < m) {
                (true, true) => cost[i][j],
                (true, false) => {
                    if j - m == i {
                        NO_MATCH_COST
                    } else {
                        big
                    }
                }
                (false, true) => {
                    if i - n == j {
                        NO_MATCH_COST
                    } else {
                        big
                    }
                }
                (false, false) => 0.0,
            };
        }
    }
    let a = hungarian(&padded)?;
    let rows: Vec<Option<usize>> = a.rows[..n].iter().map(|c| c.filter(|&c| c < m)).collect();
    let matched = rows.iter().flatten().count();
    let total = rows
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| cost[i][c]))
        .sum::<f64>()
        + NO_MATCH_COST * ((n - matched) + (m - matched)) as f64;
    Ok(Assignment { rows, total })
}
