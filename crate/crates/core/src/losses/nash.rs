//! Nash bargaining combination of task gradients.
//!
//! With task gradients `g_i` (columns of `G`), the weights solve
//! `G^T G alpha = 1 / alpha` element-wise with `alpha > 0`. Writing
//! `alpha_i = beta_i / |g_i|` turns this into `M beta = 1 / beta` for the
//! cosine matrix `M`, which is the stationarity condition of the convex
//! function `phi(beta) = beta^T M beta / 2 - sum_i ln beta_i`. We minimize
//! `phi` with damped Newton steps. Because `M` does not change when a task
//! gradient is rescaled, the combined update is exactly scale-invariant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 200;

/// Beyond this the objective is treated as unbounded below (opposing gradients).
const DIVERGENCE_BOUND: f64 = 1e8;

/// Per-task gradients over one shared parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGradients {
    pub tasks: Vec<String>,
    pub grads: Vec<Vec<f64>>,
}

impl TaskGradients {
    pub fn new(tasks: Vec<String>, grads: Vec<Vec<f64>>) -> Result<Self> {
        if tasks.len() != grads.len() || grads.is_empty() {
            return Err(Error::Argument("need one gradient per task and at least one task".into()));
        }
        let d = grads[0].len();
        for (t, g) in tasks.iter().zip(&grads) {
            if g.len() != d {
                return Err(Error::Argument(format!("gradient of {t} has dimension {}, expected {d}", g.len())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of task {t}")));
            }
        }
        Ok(TaskGradients { tasks, grads })
    }

    pub fn dim(&self) -> usize {
        self.grads[0].len()
    }

    pub fn k(&self) -> usize {
        self.grads.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NashStatus {
    Converged,
    /// Stopped at `max_iters` above tolerance.
    Degraded,
    /// Solve failed; uniform weights 1/k were used.
    Fallback,
    /// Every task gradient was zero.
    AllZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashSolution {
    /// One weight per input task; dropped tasks get 0.
    pub alpha: Vec<f64>,
    /// `max_i |(G^T G alpha)_i - 1/alpha_i|` over the kept tasks.
    pub residual: f64,
    pub iterations: usize,
    pub status: NashStatus,
    /// Tasks dropped for having a zero gradient.
    pub dropped: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `a x = b` for a small dense system by Gaussian elimination.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

fn phi(m: &[Vec<f64>], beta: &[f64]) -> f64 {
    let quad: f64 = m.iter().zip(beta).map(|(row, &bi)| bi * dot(row, beta)).sum();
    0.5 * quad - beta.iter().map(|b| b.ln()).sum::<f64>()
}

/// Newton solve of `M beta = 1/beta`, converged when every
/// `|beta_i (M beta)_i - 1|` is within `tol`. Returns (beta, iterations, converged).
fn solve_cosine(m: &[Vec<f64>], tol: f64, max_iters: usize) -> (Option<Vec<f64>>, usize, bool) {
    let k = m.len();
    let mut beta = vec![1.0; k];
    let residual = |beta: &[f64]| {
        (0..k)
            .map(|i| (beta[i] * dot(&m[i], beta) - 1.0).abs())
            .fold(0.0, f64::max)
    };
    for it in 0..max_iters {
        if residual(&beta) <= tol {
            return (Some(beta), it, true);
        }
        let grad: Vec<f64> = (0..k).map(|i| dot(&m[i], &beta) - 1.0 / beta[i]).collect();
        let hess: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let mut row = m[i].clone();
                row[i] += 1.0 / (beta[i] * beta[i]);
                row
            })
            .collect();
        let Some(step) = solve(hess, grad.clone()) else {
            return (None, it, false);
        };
        let f0 = phi(m, &beta);
        let slope = dot(&grad, &step);
        let mut t = 1.0;
        let next = loop {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b - t * s).collect();
            // Every accepted iterate stays strictly positive.
            if cand.iter().all(|&b| b > 0.0) && phi(m, &cand) <= f0 - 1e-4 * t * slope {
                break Some(cand);
            }
            t *= 0.5;
            if t < 1e-12 {
                break None;
            }
        };
        match next {
            Some(b) => beta = b,
            // No descent possible at machine precision: accept the iterate as is.
            None => return (Some(beta.clone()), it, residual(&beta) <= tol),
        }
        if beta.iter().any(|&b| b > DIVERGENCE_BOUND || !b.is_finite()) {
            return (None, it + 1, false);
        }
    }
    let ok = residual(&beta) <= tol;
    (Some(beta), max_iters, ok)
}

/// Returns the combined update `sum_i alpha_i g_i` and the solver diagnostics.
pub fn nash_combine(grads: &TaskGradients, tol: f64, max_iters: usize) -> Result<(Vec<f64>, NashSolution)> {
    if !(tol > 0.0) {
        return Err(Error::Argument(format!("tolerance {tol} must be positive")));
    }
    let k = grads.k();
    let d = grads.dim();
    let all_norms: Vec<f64> = grads.grads.iter().map(|g| dot(g, g).sqrt()).collect();
    let kept: Vec<usize> = (0..k).filter(|&i| all_norms[i] > 0.0).collect();
    let dropped: Vec<usize> = (0..k).filter(|&i| all_norms[i] == 0.0).collect();
    for &i in &dropped {
        log::warn!("task {} has a zero gradient, dropped for this step", grads.tasks[i]);
    }
    if kept.is_empty() {
        return Ok((
            vec![0.0; d],
            NashSolution {
                alpha: vec![0.0; k],
                residual: 0.0,
                iterations: 0,
                status: NashStatus::AllZero,
                dropped,
            },
        ));
    }
    let norms: Vec<f64> = kept.iter().map(|&i| all_norms[i]).collect();
    let m: Vec<Vec<f64>> = kept
        .iter()
        .enumerate()
        .map(|(a, &i)| {
            kept.iter()
                .enumerate()
                .map(|(b, &j)| dot(&grads.grads[i], &grads.grads[j]) / (norms[a] * norms[b]))
                .collect()
        })
        .collect();

    let (beta, iterations, converged) = solve_cosine(&m, tol, max_iters);
    let mut alpha = vec![0.0; k];
    let status = match beta {
        Some(beta) => {
            for (a, &i) in kept.iter().enumerate() {
                alpha[i] = beta[a] / norms[a];
            }
            if converged {
                NashStatus::Converged
            } else {
                NashStatus::Degraded
            }
        }
        None => {
            log::warn!("Nash solve failed, falling back to uniform weights");
            for &i in &kept {
                alpha[i] = 1.0 / kept.len() as f64;
            }
            NashStatus::Fallback
        }
    };
    let gram_alpha = |i: usize| -> f64 {
        kept.iter()
            .map(|&j| dot(&grads.grads[i], &grads.grads[j]) * alpha[j])
            .sum()
    };
    let residual = kept
        .iter()
        .map(|&i| (gram_alpha(i) - 1.0 / alpha[i]).abs())
        .fold(0.0, f64::max);
    let mut update = vec![0.0; d];
    for &i in &kept {
        for (u, g) in update.iter_mut().zip(&grads.grads[i]) {
            *u += alpha[i] * g;
        }
    }
    Ok((
        update,
        NashSolution {
            alpha,
            residual,
            iterations,
            status,
            dropped,
        },
    ))
}

/// Linear-scalarization update: the plain sum of task gradients.
pub fn ls_combine_grads(grads: &TaskGradients) -> Vec<f64> {
    let mut update = vec![0.0; grads.dim()];
    for g in &grads.grads {
        for (u, v) in update.iter_mut().zip(g) {
            *u += v;
        }
    }
    update
}
