//! Dual-averaged potential and its gradient.
//!
//! At outer step `t` the inner Langevin loop targets `exp(-gbar_t)` with
//!
//! ```text
//! grad gbar_t(theta) = c1(t) * sum_s (s / b_s) * dl_s * grad h(theta, x_s)
//!                    + c2(t) * (p/2) * sign(theta) |theta|^(p-1)
//! c1(t) = 2 / (lambda2 (t+2)(t+1)),   c2(t) = 2 lambda1 t / (lambda2 (t+2))
//! ```
//!
//! where `b_s` is the batch size at step `s`. For `p = 2` the regularizer
//! term is `c2(t) * theta`.
//!
//! In empirical mode the weighted derivatives are folded into one
//! accumulator per training example; in streaming mode every drawn sample is
//! kept as its own record.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, PdaError, Result};
use crate::loss::LossKind;
use crate::model::{neuron_grad, weighted_data_grad, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    /// Weight of the `||theta||_p^p` moment.
    pub lambda1: f64,
    /// Weight of the negative entropy.
    pub lambda2: f64,
    /// `p` in `(1, 2]`.
    pub norm_exponent: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            lambda1: 1e-2,
            lambda2: 1e-4,
            norm_exponent: 2.0,
        }
    }
}

impl RegConfig {
    pub fn new(lambda1: f64, lambda2: f64, norm_exponent: f64) -> Result<Self> {
        let reg = RegConfig {
            lambda1,
            lambda2,
            norm_exponent,
        };
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda1.is_finite()) {
            return Err(PdaError::InvalidConfig(format!(
                "reg.lambda1 must be positive, got {}",
                self.lambda1
            )));
        }
        if !(self.lambda2 > 0.0 && self.lambda2.is_finite()) {
            return Err(PdaError::InvalidConfig(format!(
                "reg.lambda2 must be positive, got {}",
                self.lambda2
            )));
        }
        if !(self.norm_exponent > 1.0 && self.norm_exponent <= 2.0) {
            return Err(PdaError::InvalidConfig(format!(
                "reg.norm_exponent must lie in (1, 2], got {}",
                self.norm_exponent
            )));
        }
        Ok(())
    }

    /// Weight `c1(t)` on the data term.
    pub fn data_coefficient(&self, t: usize) -> f64 {
        let t = t as f64;
        2.0 / (self.lambda2 * (t + 2.0) * (t + 1.0))
    }

    /// Weight `c2(t)` on the regularizer gradient.
    pub fn reg_coefficient(&self, t: usize) -> f64 {
        let t = t as f64;
        2.0 * self.lambda1 * t / (self.lambda2 * (t + 2.0))
    }
}

/// How the data term is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMode {
    /// Finite training set, one accumulator per example.
    #[default]
    Empirical,
    /// Fresh samples every step, one record per sample.
    Streaming,
}

/// The examples drawn at one outer step.
#[derive(Debug, Clone)]
pub enum Batch {
    /// Indices into the training set (empirical mode).
    Indices(Vec<usize>),
    /// Inputs as rows, `b x d` (streaming mode).
    Samples(Array2<f64>),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Indices(ix) => ix.len(),
            Batch::Samples(xs) => xs.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
enum DataTerm {
    Empirical {
        xs: Array2<f64>,
        acc: Array1<f64>,
        touched: Vec<bool>,
        // examples touched so far and their accumulators, in index order
        active_xs: Array2<f64>,
        active_acc: Array1<f64>,
    },
    Streaming {
        input_dim: usize,
        xs: Vec<f64>,
        weights: Vec<f64>,
    },
}

/// Accumulated dual-averaging state.
#[derive(Debug, Clone)]
pub struct DualAverageState {
    reg: RegConfig,
    t: usize,
    term: DataTerm,
}

impl DualAverageState {
    /// Empirical-risk state over the training inputs `xs` (`n x d`).
    pub fn empirical(xs: Array2<f64>, reg: RegConfig) -> Result<Self> {
        reg.validate()?;
        let n = xs.nrows();
        let d = xs.ncols();
        Ok(DualAverageState {
            reg,
            t: 1,
            term: DataTerm::Empirical {
                xs,
                acc: Array1::zeros(n),
                touched: vec![false; n],
                active_xs: Array2::zeros((0, d)),
                active_acc: Array1::zeros(0),
            },
        })
    }

    /// Expected-risk state that keeps every drawn sample.
    pub fn streaming(input_dim: usize, reg: RegConfig) -> Result<Self> {
        reg.validate()?;
        Ok(DualAverageState {
            reg,
            t: 1,
            term: DataTerm::Streaming {
                input_dim,
                xs: Vec::new(),
                weights: Vec::new(),
            },
        })
    }

    pub fn mode(&self) -> RiskMode {
        match self.term {
            DataTerm::Empirical { .. } => RiskMode::Empirical,
            DataTerm::Streaming { .. } => RiskMode::Streaming,
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn reg(&self) -> &RegConfig {
        &self.reg
    }

    /// Move to the next outer step.
    pub fn advance(&mut self) {
        self.t += 1;
    }

    /// Per-example accumulators (empirical mode only).
    pub fn accumulators(&self) -> Option<ArrayView1<'_, f64>> {
        match &self.term {
            DataTerm::Empirical { acc, .. } => Some(acc.view()),
            DataTerm::Streaming { .. } => None,
        }
    }

    /// Number of stored streaming records.
    pub fn history_len(&self) -> usize {
        match &self.term {
            DataTerm::Empirical { .. } => 0,
            DataTerm::Streaming { weights, .. } => weights.len(),
        }
    }

    fn input_dim(&self) -> usize {
        match &self.term {
            DataTerm::Empirical { xs, .. } => xs.ncols(),
            DataTerm::Streaming { input_dim, .. } => *input_dim,
        }
    }

    /// Fold one outer step's derivatives into the state with weight `t / b`.
    /// Does not advance `t`.
    pub fn record(
        &mut self,
        batch: &Batch,
        preds: &[f64],
        labels: &[f64],
        loss: LossKind,
    ) -> Result<()> {
        let b = batch.len();
        if b == 0 {
            return Err(PdaError::InvalidConfig("batch must be non-empty".into()));
        }
        check_dim(b, preds.len())?;
        check_dim(b, labels.len())?;
        let weight = self.t as f64 / b as f64;
        let mut derivs = Vec::with_capacity(b);
        for (&z, &y) in preds.iter().zip(labels) {
            let g = loss.dz(z, y)?;
            if !g.is_finite() {
                return Err(PdaError::NonFinite("loss derivative"));
            }
            derivs.push(weight * g);
        }
        match (&mut self.term, batch) {
            (
                DataTerm::Empirical {
                    xs,
                    acc,
                    touched,
                    active_xs,
                    active_acc,
                },
                Batch::Indices(ix),
            ) => {
                let n = acc.len();
                if let Some(&bad) = ix.iter().find(|&&i| i >= n) {
                    return Err(PdaError::IndexOutOfRange { index: bad, len: n });
                }
                for (&i, g) in ix.iter().zip(&derivs) {
                    acc[i] += g;
                    touched[i] = true;
                }
                let active: Vec<usize> = (0..n).filter(|&i| touched[i]).collect();
                *active_xs = xs.select(Axis(0), &active);
                *active_acc = active.iter().map(|&i| acc[i]).collect();
            }
            (
                DataTerm::Streaming {
                    input_dim,
                    xs,
                    weights,
                },
                Batch::Samples(batch_xs),
            ) => {
                check_dim(*input_dim, batch_xs.ncols())?;
                for (row, g) in batch_xs.rows().into_iter().zip(&derivs) {
                    xs.extend(row.iter().copied());
                    weights.push(*g);
                }
            }
            (DataTerm::Empirical { .. }, Batch::Samples(_)) => {
                return Err(PdaError::InvalidConfig(
                    "empirical state expects index batches".into(),
                ))
            }
            (DataTerm::Streaming { .. }, Batch::Indices(_)) => {
                return Err(PdaError::InvalidConfig(
                    "streaming state expects sample batches".into(),
                ))
            }
        }
        Ok(())
    }

    /// Stored inputs and their accumulated weights.
    fn data_term(&self) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        match &self.term {
            DataTerm::Empirical {
                active_xs,
                active_acc,
                ..
            } => (active_xs.view(), active_acc.view()),
            DataTerm::Streaming {
                input_dim,
                xs,
                weights,
            } => (
                ArrayView2::from_shape((weights.len(), *input_dim), xs)
                    .expect("streaming history is row-major"),
                ArrayView1::from(weights.as_slice()),
            ),
        }
    }

    /// `grad gbar_t(theta)` for a single particle.
    pub fn grad(&self, theta: &[f64], spec: &ModelSpec) -> Result<Vec<f64>> {
        check_dim(spec.param_dim(), theta.len())?;
        let row = ArrayView2::from_shape((1, theta.len()), theta).expect("1 x p view");
        Ok(self.ensemble_grad(row, spec)?.into_raw_vec_and_offset().0)
    }

    /// `grad gbar_t` evaluated at every row of `particles`.
    pub fn ensemble_grad(
        &self,
        particles: ArrayView2<'_, f64>,
        spec: &ModelSpec,
    ) -> Result<Array2<f64>> {
        check_dim(spec.param_dim(), particles.ncols())?;
        check_dim(spec.input_dim, self.input_dim())?;
        let (xs, weights) = self.data_term();
        Ok(potential_gradient(
            spec,
            particles,
            xs,
            weights,
            self.reg.data_coefficient(self.t),
            self.reg.reg_coefficient(self.t),
            self.reg.norm_exponent,
        ))
    }
}

/// `data_coef * sum_i weights[i] grad h(theta_r, x_i) + reg_coef * (p/2) sign(theta)|theta|^(p-1)`
/// for each row `theta_r`.
pub fn potential_gradient(
    spec: &ModelSpec,
    particles: ArrayView2<'_, f64>,
    xs: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
    data_coef: f64,
    reg_coef: f64,
    norm_exponent: f64,
) -> Array2<f64> {
    let mut grad = weighted_data_grad(spec, particles, xs, weights);
    grad.mapv_inplace(|g| data_coef * g);
    add_reg_gradient(&mut grad, particles, reg_coef, norm_exponent);
    grad
}

fn add_reg_gradient(grad: &mut Array2<f64>, particles: ArrayView2<'_, f64>, coef: f64, p: f64) {
    if p == 2.0 {
        grad.scaled_add(coef, &particles);
    } else {
        let scale = coef * p / 2.0;
        grad.zip_mut_with(&particles, |g, &th| {
            *g += scale * th.signum() * th.abs().powf(p - 1.0);
        });
    }
}

/// One weighted loss derivative from the full run history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    /// Outer step `s` at which the sample was drawn.
    pub step: usize,
    /// Batch size at that step.
    pub batch_size: usize,
    pub x: Vec<f64>,
    /// `dl/dz` at the prediction used at step `s`.
    pub dz: f64,
}

/// Term-by-term evaluation of `grad gbar_t(theta)` from the raw history.
pub fn da_grad_naive(
    history: &[HistoryRecord],
    theta: &[f64],
    spec: &ModelSpec,
    reg: &RegConfig,
    t: usize,
) -> Result<Vec<f64>> {
    check_dim(spec.param_dim(), theta.len())?;
    let tf = t as f64;
    let norm = 2.0 / (reg.lambda2 * (tf + 2.0) * (tf + 1.0));
    let mut out = vec![0.0; theta.len()];
    for rec in history {
        let gh = neuron_grad(spec, theta, &rec.x)?;
        let w = norm * rec.step as f64 / rec.batch_size as f64 * rec.dz;
        for (o, g) in out.iter_mut().zip(&gh) {
            *o += w * g;
        }
    }
    let coef = 2.0 * reg.lambda1 * tf / (reg.lambda2 * (tf + 2.0));
    let p = reg.norm_exponent;
    for (o, th) in out.iter_mut().zip(theta) {
        *o += coef * (p / 2.0) * th.signum() * th.abs().powf(p - 1.0);
    }
    Ok(out)
}
