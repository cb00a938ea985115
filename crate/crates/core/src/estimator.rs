//! Diagnostics over particle ensembles: entropy, moments, risks and the
//! regularized objective.

use std::collections::BinaryHeap;

use ndarray::{Array2, ArrayView2};
use ordered_float::OrderedFloat;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::data::Dataset;
use crate::error::{check_dim, PdaError, Result};
use crate::loss::{zero_one, LossKind};
use crate::model::{forward_batch, ModelSpec, ParticleEnsemble};
use crate::potential::RegConfig;

/// Neighbour order used by default for the entropy estimate.
pub const DEFAULT_KNN: usize = 10;

/// One row of run telemetry. `None` fields are written as empty CSV cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub t: usize,
    pub cumulative_inner_steps: usize,
    pub train_risk: f64,
    pub test_risk: Option<f64>,
    pub test_zero_one: Option<f64>,
    /// Mean of `||theta_r||_2^2`.
    pub second_moment: f64,
    pub entropy_est: Option<f64>,
    /// `train_risk + lambda1 * E||theta||_p^p - lambda2 * entropy_est`.
    pub objective_est: Option<f64>,
    /// Elapsed milliseconds, only when wall-clock recording is enabled.
    pub wall_ms: Option<u64>,
}

/// Kozachenko-Leonenko differential entropy estimate in nats:
///
/// `psi(M) - psi(k) + log V_p + (p/M) sum_r log eps_r`
///
/// with `eps_r` the Euclidean distance from sample `r` to its `k`-th
/// nearest neighbour and `V_p` the volume of the unit `p`-ball. Exact
/// duplicates are separated by a `1e-12` relative jitter first.
///
/// Neighbours are found exactly by sweeping outward along the first
/// coordinate after sorting; this is `O(M k)` in one dimension and falls
/// back towards `O(M^2)` in high dimension.
pub fn knn_entropy(samples: ArrayView2<'_, f64>, k: usize) -> Result<f64> {
    let m = samples.nrows();
    let p = samples.ncols();
    if k == 0 {
        return Err(PdaError::InvalidConfig("k must be positive".into()));
    }
    if m <= k {
        return Err(PdaError::InsufficientSamples(format!(
            "kNN entropy needs more than k = {k} samples, got {m}"
        )));
    }
    if p == 0 {
        return Err(PdaError::Degenerate("zero-dimensional samples".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(PdaError::NonFinite("entropy sample"));
    }
    let mut dists = kth_neighbor_distances(samples, k);
    if dists.contains(&0.0) {
        let first = samples.row(0);
        if samples.rows().into_iter().all(|r| r == first) {
            return Err(PdaError::Degenerate("all samples are identical".into()));
        }
        let jittered = jitter_duplicates(samples);
        dists = kth_neighbor_distances(jittered.view(), k);
    }
    let pf = p as f64;
    let log_unit_ball = 0.5 * pf * std::f64::consts::PI.ln() - ln_gamma(0.5 * pf + 1.0);
    let mean_log: f64 = dists.iter().map(|e| e.ln()).sum::<f64>() / m as f64;
    Ok(digamma(m as f64) - digamma(k as f64) + log_unit_ball + pf * mean_log)
}

fn kth_neighbor_distances(samples: ArrayView2<'_, f64>, k: usize) -> Vec<f64> {
    let m = samples.nrows();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| samples[[a, 0]].total_cmp(&samples[[b, 0]]));
    let key: Vec<f64> = order.iter().map(|&i| samples[[i, 0]]).collect();
    let mut out = vec![0.0; m];
    let mut heap: BinaryHeap<OrderedFloat<f64>> = BinaryHeap::with_capacity(k + 1);
    for pos in 0..m {
        let i = order[pos];
        let xi = samples.row(i);
        heap.clear();
        let mut lo = pos as isize - 1;
        let mut hi = pos + 1;
        loop {
            let bound = if heap.len() == k {
                heap.peek().map(|v| v.0)
            } else {
                None
            };
            let gap_lo = (lo >= 0).then(|| key[pos] - key[lo as usize]);
            let gap_hi = (hi < m).then(|| key[hi] - key[pos]);
            // take the side with the smaller first-coordinate gap
            let next = match (gap_lo, gap_hi) {
                (None, None) => break,
                (Some(a), None) => (a, true),
                (None, Some(b)) => (b, false),
                (Some(a), Some(b)) => {
                    if a <= b {
                        (a, true)
                    } else {
                        (b, false)
                    }
                }
            };
            if let Some(bound) = bound {
                if next.0 * next.0 >= bound {
                    break;
                }
            }
            let j = if next.1 {
                let j = order[lo as usize];
                lo -= 1;
                j
            } else {
                let j = order[hi];
                hi += 1;
                j
            };
            let xj = samples.row(j);
            let d2: f64 = xi
                .iter()
                .zip(xj.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if heap.len() < k {
                heap.push(OrderedFloat(d2));
            } else if d2 < heap.peek().expect("heap is full").0 {
                heap.pop();
                heap.push(OrderedFloat(d2));
            }
        }
        out[i] = heap.peek().expect("k >= 1 neighbours").0.sqrt();
    }
    out
}

fn jitter_duplicates(samples: ArrayView2<'_, f64>) -> Array2<f64> {
    let m = samples.nrows();
    let mut out = samples.to_owned();
    let scale = 1e-12 * (1.0 + samples.iter().fold(0.0_f64, |a, v| a.max(v.abs())));
    let mut order: Vec<usize> = (0..m).collect();
    let lex = |a: &usize, b: &usize| {
        samples
            .row(*a)
            .iter()
            .zip(samples.row(*b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    order.sort_by(lex);
    let mut run = 0usize;
    for w in 1..m {
        if samples.row(order[w]) == samples.row(order[w - 1]) {
            run += 1;
            let r = order[w];
            for v in out.row_mut(r).iter_mut() {
                *v += scale * run as f64;
            }
        } else {
            run = 0;
        }
    }
    out
}

/// `(1/M) sum_r ||theta_r||_p^p`.
pub fn moment(ens: &ParticleEnsemble, norm_exponent: f64) -> f64 {
    let m = ens.n_particles() as f64;
    let total: f64 = ens
        .view()
        .rows()
        .into_iter()
        .map(|row| {
            if norm_exponent == 2.0 {
                row.iter().map(|v| v * v).sum::<f64>()
            } else {
                row.iter().map(|v| v.abs().powf(norm_exponent)).sum::<f64>()
            }
        })
        .sum();
    total / m
}

/// Mean loss of the ensemble's predictions over `data`.
pub fn risk(
    ens: &ParticleEnsemble,
    data: &Dataset,
    spec: &ModelSpec,
    loss: LossKind,
) -> Result<f64> {
    if data.is_empty() {
        return Err(PdaError::InsufficientSamples(
            "risk over an empty dataset".into(),
        ));
    }
    let preds = forward_batch(spec, ens, data.xs.view())?;
    let mut total = 0.0;
    for (z, y) in preds.iter().zip(&data.ys) {
        total += loss.value(*z, *y)?;
    }
    Ok(total / data.len() as f64)
}

/// Fraction of misclassified examples (zero predictions count as errors).
pub fn zero_one_error(ens: &ParticleEnsemble, data: &Dataset, spec: &ModelSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(PdaError::InsufficientSamples(
            "error rate over an empty dataset".into(),
        ));
    }
    let preds = forward_batch(spec, ens, data.xs.view())?;
    let errors: f64 = preds
        .iter()
        .zip(&data.ys)
        .map(|(z, y)| zero_one(*z, *y))
        .sum();
    Ok(errors / data.len() as f64)
}

/// Pieces of the regularized objective for one ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveEstimate {
    pub train_risk: f64,
    pub second_moment: f64,
    /// `E||theta||_p^p` at the configured exponent.
    pub moment: f64,
    pub entropy_est: Option<f64>,
    pub objective_est: Option<f64>,
}

/// Risk, moments, entropy and `risk + lambda1 * moment - lambda2 * entropy`.
///
/// The entropy (and so the objective) is absent when the ensemble has no
/// more than `k` particles.
pub fn objective(
    ens: &ParticleEnsemble,
    data: &Dataset,
    spec: &ModelSpec,
    loss: LossKind,
    reg: &RegConfig,
    k: usize,
) -> Result<ObjectiveEstimate> {
    check_dim(spec.param_dim(), ens.dim())?;
    let train_risk = risk(ens, data, spec, loss)?;
    let second_moment = moment(ens, 2.0);
    let moment_p = if reg.norm_exponent == 2.0 {
        second_moment
    } else {
        moment(ens, reg.norm_exponent)
    };
    let entropy_est = match knn_entropy(ens.view(), k) {
        Ok(h) => Some(h),
        Err(PdaError::InsufficientSamples(_)) => None,
        Err(e) => return Err(e),
    };
    let objective_est = entropy_est.map(|h| train_risk + reg.lambda1 * moment_p - reg.lambda2 * h);
    Ok(ObjectiveEstimate {
        train_risk,
        second_moment,
        moment: moment_p,
        entropy_est,
        objective_est,
    })
}

/// Monte Carlo `E[||theta||^2 1{||theta||^2 > 2R}]` for
/// `theta ~ N(0, sigma^2 I_p)`, paired with the bound
/// `2 (R + 10 sigma^2) exp(-R / (10 sigma^2))` valid for `R >= p sigma^2`.
pub fn gaussian_tail_check<R: Rng + ?Sized>(
    sigma: f64,
    radius: f64,
    dim: usize,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if !(sigma > 0.0) || dim == 0 || samples == 0 {
        return Err(PdaError::InvalidConfig(
            "tail check needs sigma > 0, p >= 1 and at least one sample".into(),
        ));
    }
    let s2 = sigma * sigma;
    if radius < dim as f64 * s2 {
        return Err(PdaError::InvalidConfig(format!(
            "tail check needs R >= p sigma^2 = {}, got {radius}",
            dim as f64 * s2
        )));
    }
    let mut total = 0.0;
    for _ in 0..samples {
        let mut sq = 0.0;
        for _ in 0..dim {
            let z: f64 = StandardNormal.sample(rng);
            sq += s2 * z * z;
        }
        if sq > 2.0 * radius {
            total += sq;
        }
    }
    let bound = 2.0 * (radius + 10.0 * s2) * (-radius / (10.0 * s2)).exp();
    Ok((total / samples as f64, bound))
}
