//! RBF-kernel SVM: SMO with second-order working-set selection, combined
//! one-vs-one with majority voting.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureMatrix;

const TAU: f64 = 1e-12;
/// KKT violation tolerance.
const EPS: f64 = 1e-3;

/// `gamma = 1 / (dim · Var(X))` over all entries.
pub fn scale_gamma(x: &FeatureMatrix) -> f64 {
    let n = x.values.len() as f64;
    let mean = x.values.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = x
        .values
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n;
    if var > 0.0 {
        1.0 / (x.dim as f64 * var)
    } else {
        1.0
    }
}

fn to_matrix(x: &FeatureMatrix, rows: &[usize]) -> DMatrix<f32> {
    DMatrix::from_fn(rows.len(), x.dim, |i, j| x.values[rows[i] * x.dim + j])
}

fn sq_norms(m: &DMatrix<f32>) -> Vec<f64> {
    m.row_iter()
        .map(|r| r.iter().map(|&v| f64::from(v) * f64::from(v)).sum())
        .collect()
}

/// `K[i][j] = exp(-gamma‖a_i − b_j‖²)`.
fn rbf_matrix(a: &DMatrix<f32>, b: &DMatrix<f32>, gamma: f64) -> DMatrix<f64> {
    let dots = a * b.transpose();
    let (na, nb) = (sq_norms(a), sq_norms(b));
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let d2 = (na[i] + nb[j] - 2.0 * f64::from(dots[(i, j)])).max(0.0);
        (-gamma * d2).exp()
    })
}

struct BinarySolution {
    alpha: Vec<f64>,
    rho: f64,
}

/// Solves the C-SVC dual for labels `y ∈ {+1, −1}` given the kernel matrix.
fn smo(k: &DMatrix<f64>, y: &[f64], c: f64) -> BinarySolution {
    let n = y.len();
    let mut alpha = vec![0.0; n];
    let mut g = vec![-1.0; n];
    let is_upper = |a: f64| a >= c;
    let is_lower = |a: f64| a <= 0.0;
    let max_iter = (100 * n).max(10_000_000);
    for _ in 0..max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            if y[t] > 0.0 {
                if !is_upper(alpha[t]) && -g[t] >= gmax {
                    gmax = -g[t];
                    i_sel = Some(t);
                }
            } else if !is_lower(alpha[t]) && g[t] >= gmax {
                gmax = g[t];
                i_sel = Some(t);
            }
        }
        let Some(i) = i_sel else { break };
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut obj_min = f64::INFINITY;
        for t in 0..n {
            let quad = (k[(i, i)] + k[(t, t)] - 2.0 * k[(i, t)]).max(TAU);
            if y[t] > 0.0 {
                if !is_lower(alpha[t]) {
                    let diff = gmax + g[t];
                    gmax2 = gmax2.max(g[t]);
                    if diff > 0.0 {
                        let obj = -diff * diff / quad;
                        if obj <= obj_min {
                            obj_min = obj;
                            j_sel = Some(t);
                        }
                    }
                }
            } else if !is_upper(alpha[t]) {
                let diff = gmax - g[t];
                gmax2 = gmax2.max(-g[t]);
                if diff > 0.0 {
                    let obj = -diff * diff / quad;
                    if obj <= obj_min {
                        obj_min = obj;
                        j_sel = Some(t);
                    }
                }
            }
        }
        let Some(j) = j_sel else { break };
        if gmax + gmax2 < EPS {
            break;
        }

        let q_ij = y[i] * y[j] * k[(i, j)];
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (k[(i, i)] + k[(j, j)] + 2.0 * q_ij).max(TAU);
            let delta = (-g[i] - g[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (k[(i, i)] + k[(j, j)] - 2.0 * q_ij).max(TAU);
            let delta = (g[i] - g[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            g[t] += y[i] * y[t] * k[(i, t)] * di + y[j] * y[t] * k[(j, t)] * dj;
        }
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut n_free, mut sum_free) = (0usize, 0.0);
    for t in 0..n {
        let yg = y[t] * g[t];
        if is_upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if is_lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    };
    BinarySolution { alpha, rho }
}

/// One pairwise machine: positive side is `class_a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMachine {
    pub class_a: usize,
    pub class_b: usize,
    /// Indices into [`SvmModel::support_vectors`].
    pub sv_index: Vec<usize>,
    /// `alpha_i · y_i` for each entry of `sv_index`.
    pub coef: Vec<f64>,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub gamma: f64,
    pub c: f64,
    pub num_classes: usize,
    pub dim: usize,
    /// Row-major support vectors shared by all machines.
    pub support_vectors: Vec<f32>,
    pub machines: Vec<PairMachine>,
}

/// Fits one-vs-one machines over every pair of classes present in `labels`.
pub fn fit_svm(
    x: &FeatureMatrix,
    labels: &[usize],
    num_classes: usize,
    c: f64,
    gamma: f64,
) -> Result<SvmModel> {
    if x.rows != labels.len() {
        return Err(Error::Validation("feature/label count mismatch".into()));
    }
    if c.is_nan() || c <= 0.0 {
        return Err(Error::Config(format!("SVM C must be > 0, got {c}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Validation("SVM needs at least two classes".into()));
    }
    let mut sv_slot: BTreeMap<usize, usize> = BTreeMap::new();
    let mut machines = Vec::new();
    for (ai, &a) in classes.iter().enumerate() {
        for &b in &classes[ai + 1..] {
            let rows: Vec<usize> = by_class[&a].iter().chain(&by_class[&b]).copied().collect();
            let y: Vec<f64> = rows
                .iter()
                .map(|&r| if labels[r] == a { 1.0 } else { -1.0 })
                .collect();
            let m = to_matrix(x, &rows);
            let k = rbf_matrix(&m, &m, gamma);
            let sol = smo(&k, &y, c);
            let mut sv_index = Vec::new();
            let mut coef = Vec::new();
            for (t, &al) in sol.alpha.iter().enumerate() {
                if al > 0.0 {
                    let next = sv_slot.len();
                    sv_index.push(*sv_slot.entry(rows[t]).or_insert(next));
                    coef.push(al * y[t]);
                }
            }
            machines.push(PairMachine {
                class_a: a,
                class_b: b,
                sv_index,
                coef,
                rho: sol.rho,
            });
        }
    }
    let mut order: Vec<(usize, usize)> =
        sv_slot.into_iter().map(|(row, slot)| (slot, row)).collect();
    order.sort_unstable();
    let mut support_vectors = Vec::with_capacity(order.len() * x.dim);
    for (_, row) in order {
        support_vectors.extend_from_slice(x.row(row));
    }
    Ok(SvmModel {
        gamma,
        c,
        num_classes,
        dim: x.dim,
        support_vectors,
        machines,
    })
}

/// Rows processed per kernel block at prediction time.
const PREDICT_BLOCK: usize = 512;

impl SvmModel {
    pub fn num_support_vectors(&self) -> usize {
        self.support_vectors.len() / self.dim.max(1)
    }

    /// One-vs-one vote counts per class, one row per input.
    pub fn votes(&self, x: &FeatureMatrix) -> Result<Vec<Vec<usize>>> {
        if x.dim != self.dim {
            return Err(Error::Validation(format!(
                "SVM expects {}-dim features, got {}",
                self.dim, x.dim
            )));
        }
        let nsv = self.num_support_vectors();
        let sv = DMatrix::from_row_slice(nsv, self.dim, &self.support_vectors);
        let mut out = Vec::with_capacity(x.rows);
        let all: Vec<usize> = (0..x.rows).collect();
        for block in all.chunks(PREDICT_BLOCK) {
            let k = rbf_matrix(&to_matrix(x, block), &sv, self.gamma);
            for r in 0..block.len() {
                let mut v = vec![0usize; self.num_classes];
                for m in &self.machines {
                    let f: f64 = m
                        .sv_index
                        .iter()
                        .zip(&m.coef)
                        .map(|(&s, &c)| c * k[(r, s)])
                        .sum::<f64>()
                        - m.rho;
                    v[if f > 0.0 { m.class_a } else { m.class_b }] += 1;
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    /// Most-voted class; ties go to the smaller index.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<usize>> {
        Ok(self.votes(x)?.iter().map(|v| top_ranked(v)[0]).collect())
    }
}

/// Class indices ordered by descending votes, ties by ascending index.
pub fn top_ranked(votes: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..votes.len()).collect();
    idx.sort_by(|&a, &b| votes[b].cmp(&votes[a]).then(a.cmp(&b)));
    idx
}
