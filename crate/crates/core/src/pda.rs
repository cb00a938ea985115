//! Outer loop of particle dual averaging and the noisy-gradient baseline.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataSource, Dataset};
use crate::error::{PdaError, Result};
use crate::estimator::{objective, risk, zero_one_error, MetricsRecord, DEFAULT_KNN};
use crate::loss::LossKind;
use crate::model::{forward_batch, ModelSpec, ParticleEnsemble};
use crate::potential::{potential_gradient, Batch, DualAverageState, RegConfig, RiskMode};
use crate::rng::{self, Domain};
use crate::sampler::{inner_loop, langevin_chain, LangevinConfig};

/// Where each inner loop starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// From the previous outer iterate.
    #[default]
    WarmStart,
    /// From a fresh draw of the initial distribution.
    Resampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `eta_t = eta0 / (t+1)^2`, `T_t = ceil(inner0 / eta_t)`.
    Theory,
    /// `eta_t = eta0 / sqrt(t)`, `T_t = ceil(inner0 * t)`.
    #[default]
    Heuristic,
}

/// Keep every snapshot while `M * p * (T+1)` stays under this many scalars.
pub const SNAPSHOT_BUDGET: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Outer steps `T`.
    pub outer_steps: usize,
    /// Particles `M`.
    pub particles: usize,
    pub batch_size: usize,
    pub scheme: Scheme,
    pub schedule: Schedule,
    pub eta0: f64,
    pub inner0: f64,
    pub reg: RegConfig,
    pub model: ModelSpec,
    pub loss: LossKind,
    /// Seeds particle initialization, Langevin noise and the output index.
    pub seed: u64,
    /// Seeds the training-data stream; defaults to `seed`.
    pub data_seed: Option<u64>,
    /// Standard deviation of the Gaussian initial distribution.
    pub init_std: f64,
    pub risk_mode: RiskMode,
    /// Emit metrics every this many outer steps (the last one always).
    pub metric_every: usize,
    /// Neighbour order of the entropy estimate.
    pub knn_k: usize,
    /// Size of the held-out sample used as training risk for generators.
    pub risk_samples: usize,
    /// Record wall-clock time in the metrics (breaks byte-for-byte reruns).
    pub record_wall_time: bool,
    /// Reuse one initial draw and one set of Langevin noise streams at every
    /// outer step, so consecutive iterates differ only through the potential.
    pub common_noise: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            outer_steps: 10,
            particles: 100,
            batch_size: 50,
            scheme: Scheme::WarmStart,
            schedule: Schedule::Heuristic,
            eta0: 1e-3,
            inner0: 10.0,
            reg: RegConfig::default(),
            model: ModelSpec::default(),
            loss: LossKind::Squared,
            seed: 0,
            data_seed: None,
            init_std: 1.0,
            risk_mode: RiskMode::Empirical,
            metric_every: 1,
            knn_k: DEFAULT_KNN,
            risk_samples: 2000,
            record_wall_time: false,
            common_noise: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PdaError::InvalidConfig(msg));
        if self.outer_steps == 0 {
            return bad("outer_steps must be >= 1".into());
        }
        if self.particles == 0 {
            return bad("particles must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return bad(format!("eta0 must be positive, got {}", self.eta0));
        }
        if !(self.inner0 > 0.0 && self.inner0.is_finite()) {
            return bad(format!("inner0 must be positive, got {}", self.inner0));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        if self.metric_every == 0 {
            return bad("metric_every must be >= 1".into());
        }
        if self.knn_k == 0 {
            return bad("knn_k must be >= 1".into());
        }
        self.reg.validate()?;
        self.model.validate()
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// `(eta_t, T_t)` for outer step `t >= 1`.
    pub fn schedule_at(&self, t: usize) -> (f64, usize) {
        let tf = t as f64;
        match self.schedule {
            Schedule::Heuristic => (self.eta0 / tf.sqrt(), ceil_steps(self.inner0 * tf)),
            Schedule::Theory => {
                let delta = 1.0 / ((tf + 1.0) * (tf + 1.0));
                let eta = self.eta0 * delta;
                (eta, ceil_steps(self.inner0 / eta))
            }
        }
    }
}

/// Ceiling that ignores round-off just above an integer; at least one step.
fn ceil_steps(x: f64) -> usize {
    ((x - 1e-9 * x.abs().max(1.0)).ceil() as usize).max(1)
}

/// Training data plus an optional test set.
#[derive(Debug, Clone)]
pub struct RunData {
    pub source: DataSource,
    pub test: Option<Dataset>,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: usize,
    pub ensemble: ParticleEnsemble,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRecord>,
    /// Kept outer iterates, in increasing `t`.
    pub snapshots: Vec<Snapshot>,
    /// Index drawn by [`sample_output_index`].
    pub output_index: usize,
    pub output_ensemble: ParticleEnsemble,
    pub final_ensemble: ParticleEnsemble,
}

/// Draw `t` in `{2, ..., T+1}` with probability `2t / (T (T+3))`.
pub fn sample_output_index<R: Rng + ?Sized>(outer_steps: usize, rng: &mut R) -> usize {
    let big_t = outer_steps.max(1) as f64;
    // P[index <= t] = (t (t+1) - 2) / (T (T+3))
    let target = 2.0 + rng.random::<f64>() * big_t * (big_t + 3.0);
    let mut t = ((-1.0 + (1.0 + 4.0 * target).sqrt()) / 2.0).ceil() as usize;
    let cum = |t: usize| (t * (t + 1)) as f64;
    while t > 2 && cum(t - 1) >= target {
        t -= 1;
    }
    while cum(t) < target {
        t += 1;
    }
    t.clamp(2, outer_steps.max(1) + 1)
}

/// Draws training batches from a [`DataSource`] in either risk mode.
struct BatchDrawer<'a> {
    source: &'a DataSource,
    mode: RiskMode,
    seed: u64,
    batch_size: usize,
}

impl BatchDrawer<'_> {
    /// Batch for step `t` with its inputs and labels.
    fn draw(&self, t: usize) -> Result<(Batch, Array2<f64>, Vec<f64>)> {
        let mut rng = rng::stream(self.seed, Domain::Data, t as u64, 0);
        match (self.source, self.mode) {
            (DataSource::Finite(ds), mode) => {
                if ds.is_empty() {
                    return Err(PdaError::DataExhausted("training set is empty".into()));
                }
                let idx: Vec<usize> = (0..self.batch_size)
                    .map(|_| rng.random_range(0..ds.len()))
                    .collect();
                let xs = ds.xs.select(Axis(0), &idx);
                let ys = idx.iter().map(|&i| ds.ys[i]).collect();
                let batch = match mode {
                    RiskMode::Empirical => Batch::Indices(idx),
                    RiskMode::Streaming => Batch::Samples(xs.clone()),
                };
                Ok((batch, xs, ys))
            }
            (gen, RiskMode::Streaming) => {
                let ds = gen
                    .generate(self.batch_size, &mut rng)
                    .expect("generator sources always yield samples");
                Ok((Batch::Samples(ds.xs.clone()), ds.xs, ds.ys))
            }
            (_, RiskMode::Empirical) => Err(PdaError::InvalidConfig(
                "empirical risk mode needs a finite dataset".into(),
            )),
        }
    }
}

/// Dataset on which the training risk is reported.
fn risk_dataset(cfg: &RunConfig, source: &DataSource) -> Dataset {
    match source {
        DataSource::Finite(ds) => ds.clone(),
        gen => gen
            .generate(
                cfg.risk_samples,
                &mut rng::stream(cfg.data_seed(), Domain::Eval, 0, 0),
            )
            .expect("generator sources always yield samples"),
    }
}

struct MetricsSink<'a> {
    cfg: &'a RunConfig,
    train: Dataset,
    test: Option<&'a Dataset>,
    start: Instant,
    rows: Vec<MetricsRecord>,
}

impl MetricsSink<'_> {
    fn wants(&self, t: usize) -> bool {
        (t - 1).is_multiple_of(self.cfg.metric_every) || t == self.cfg.outer_steps + 1
    }

    fn emit(&mut self, t: usize, cum_inner: usize, ens: &ParticleEnsemble) -> Result<()> {
        if !self.wants(t) {
            return Ok(());
        }
        let cfg = self.cfg;
        let est = objective(ens, &self.train, &cfg.model, cfg.loss, &cfg.reg, cfg.knn_k)?;
        let (test_risk, test_zero_one) = match self.test {
            Some(test) if !test.is_empty() => {
                let r = risk(ens, test, &cfg.model, cfg.loss)?;
                let e = if cfg.loss.is_classification() {
                    Some(zero_one_error(ens, test, &cfg.model)?)
                } else {
                    None
                };
                (Some(r), e)
            }
            _ => (None, None),
        };
        self.rows.push(MetricsRecord {
            t,
            cumulative_inner_steps: cum_inner,
            train_risk: est.train_risk,
            test_risk,
            test_zero_one,
            second_moment: est.second_moment,
            entropy_est: est.entropy_est,
            objective_est: est.objective_est,
            wall_ms: cfg
                .record_wall_time
                .then(|| self.start.elapsed().as_millis() as u64),
        });
        Ok(())
    }
}

fn snapshot_grid(cfg: &RunConfig, output_index: usize) -> Vec<bool> {
    let last = cfg.outer_steps + 1;
    let mut keep = vec![false; last + 1];
    let scalars = cfg
        .particles
        .saturating_mul(cfg.model.param_dim())
        .saturating_mul(last);
    if scalars <= SNAPSHOT_BUDGET {
        keep[1..].iter_mut().for_each(|k| *k = true);
    } else {
        let mut t = 1;
        while t <= last {
            keep[t] = true;
            t *= 2;
        }
        keep[last] = true;
        keep[output_index] = true;
    }
    keep
}

fn initial_ensemble(cfg: &RunConfig, domain: Domain, tag: u64) -> ParticleEnsemble {
    ParticleEnsemble::gaussian(
        cfg.particles,
        cfg.model.param_dim(),
        cfg.init_std,
        cfg.seed,
        domain,
        tag,
    )
}

/// Random-stream tag of outer step `t`.
fn noise_tag(cfg: &RunConfig, t: usize) -> u64 {
    if cfg.common_noise {
        0
    } else {
        t as u64
    }
}

fn check_source(cfg: &RunConfig, data: &RunData) -> Result<()> {
    if data.source.dim() != cfg.model.input_dim {
        return Err(PdaError::InvalidConfig(format!(
            "data dimension {} does not match model.input_dim {}",
            data.source.dim(),
            cfg.model.input_dim
        )));
    }
    if cfg.risk_mode == RiskMode::Empirical && !matches!(data.source, DataSource::Finite(_)) {
        return Err(PdaError::InvalidConfig(
            "empirical risk mode needs a finite dataset".into(),
        ));
    }
    Ok(())
}

/// Run particle dual averaging.
///
/// Metrics row `t` describes the outer iterate `Theta~(t)`, for
/// `t = 1..=T+1`.
pub fn pda_run(cfg: &RunConfig, data: &RunData) -> Result<RunOutput> {
    cfg.validate()?;
    check_source(cfg, data)?;
    let spec = &cfg.model;
    let drawer = BatchDrawer {
        source: &data.source,
        mode: cfg.risk_mode,
        seed: cfg.data_seed(),
        batch_size: cfg.batch_size,
    };
    let mut state = match (&data.source, cfg.risk_mode) {
        (DataSource::Finite(ds), RiskMode::Empirical) => {
            DualAverageState::empirical(ds.xs.clone(), cfg.reg)?
        }
        _ => DualAverageState::streaming(spec.input_dim, cfg.reg)?,
    };
    let output_index = sample_output_index(
        cfg.outer_steps,
        &mut rng::stream(cfg.seed, Domain::OutputIndex, 0, 0),
    );
    let keep = snapshot_grid(cfg, output_index);
    let mut sink = MetricsSink {
        cfg,
        train: risk_dataset(cfg, &data.source),
        test: data.test.as_ref(),
        start: Instant::now(),
        rows: Vec::new(),
    };

    let mut ens = initial_ensemble(cfg, Domain::Init, 0);
    let mut snapshots = vec![Snapshot {
        t: 1,
        ensemble: ens.clone(),
    }];
    let mut output_ensemble = None;
    let mut cum_inner = 0usize;
    sink.emit(1, 0, &ens)?;

    for t in 1..=cfg.outer_steps {
        debug_assert_eq!(state.t(), t);
        let (batch, xs, ys) = drawer.draw(t)?;
        let preds = forward_batch(spec, &ens, xs.view())?;
        state.record(&batch, &preds, &ys, cfg.loss)?;
        let start = match cfg.scheme {
            Scheme::WarmStart => ens,
            Scheme::Resampling => initial_ensemble(cfg, Domain::Resample, noise_tag(cfg, t)),
        };
        let (eta, steps) = cfg.schedule_at(t);
        let lcfg = LangevinConfig {
            eta,
            steps,
            seed: cfg.seed,
            outer_step: t,
            stream: noise_tag(cfg, t),
        };
        ens = inner_loop(&start, &state, spec, &lcfg)?;
        cum_inner += steps;
        state.advance();
        let next = t + 1;
        sink.emit(next, cum_inner, &ens)?;
        if next == output_index {
            output_ensemble = Some(ens.clone());
        }
        if keep[next] {
            snapshots.push(Snapshot {
                t: next,
                ensemble: ens.clone(),
            });
        }
    }

    Ok(RunOutput {
        metrics: sink.rows,
        snapshots,
        output_index,
        output_ensemble: output_ensemble.expect("output index lies in 2..=T+1"),
        final_ensemble: ens,
    })
}

/// Drift coefficients `(data, regularizer)` of the noisy-gradient baseline:
/// `(1/lambda2, 2 lambda1/lambda2)`.
pub fn sgd_coefficients(reg: &RegConfig) -> (f64, f64) {
    (1.0 / reg.lambda2, 2.0 * reg.lambda1 / reg.lambda2)
}

/// Mean-field Langevin baseline: one noisy gradient step per outer step,
///
/// `theta_r <- theta_r - eta/lambda2 * (mean_batch dl * grad h + 2 lambda1 theta_r) + sqrt(2 eta) zeta`
///
/// with constant `eta = eta0`. Metrics and snapshots follow [`pda_run`].
pub fn noisy_sgd_run(cfg: &RunConfig, data: &RunData) -> Result<RunOutput> {
    cfg.validate()?;
    check_source(cfg, data)?;
    let spec = &cfg.model;
    // batches are always drawn as raw samples here
    let drawer = BatchDrawer {
        source: &data.source,
        mode: RiskMode::Streaming,
        seed: cfg.data_seed(),
        batch_size: cfg.batch_size,
    };
    let output_index = sample_output_index(
        cfg.outer_steps,
        &mut rng::stream(cfg.seed, Domain::OutputIndex, 0, 0),
    );
    let keep = snapshot_grid(cfg, output_index);
    let mut sink = MetricsSink {
        cfg,
        train: risk_dataset(cfg, &data.source),
        test: data.test.as_ref(),
        start: Instant::now(),
        rows: Vec::new(),
    };
    let (data_coef, reg_coef) = sgd_coefficients(&cfg.reg);
    let mut ens = initial_ensemble(cfg, Domain::Init, 0);
    let mut snapshots = vec![Snapshot {
        t: 1,
        ensemble: ens.clone(),
    }];
    let mut output_ensemble = None;
    sink.emit(1, 0, &ens)?;
    for t in 1..=cfg.outer_steps {
        let (_, xs, ys) = drawer.draw(t)?;
        let preds = forward_batch(spec, &ens, xs.view())?;
        let b = ys.len() as f64;
        let weights = preds
            .iter()
            .zip(&ys)
            .map(|(z, y)| cfg.loss.dz(*z, *y).map(|g| g / b))
            .collect::<Result<Array1<f64>>>()?;
        let lcfg = LangevinConfig {
            eta: cfg.eta0,
            steps: 1,
            seed: cfg.seed,
            outer_step: t,
            stream: noise_tag(cfg, t),
        };
        ens = langevin_chain(&ens, &lcfg, |particles| {
            Ok(potential_gradient(
                spec,
                particles,
                xs.view(),
                weights.view(),
                data_coef,
                reg_coef,
                cfg.reg.norm_exponent,
            ))
        })?;
        let next = t + 1;
        sink.emit(next, t, &ens)?;
        if next == output_index {
            output_ensemble = Some(ens.clone());
        }
        if keep[next] {
            snapshots.push(Snapshot {
                t: next,
                ensemble: ens.clone(),
            });
        }
    }
    Ok(RunOutput {
        metrics: sink.rows,
        snapshots,
        output_index,
        output_ensemble: output_ensemble.expect("output index lies in 2..=T+1"),
        final_ensemble: ens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_index_single_step() {
        let mut rng = rng::stream(1, Domain::OutputIndex, 0, 0);
        for _ in 0..100 {
            assert_eq!(sample_output_index(1, &mut rng), 2);
        }
    }

    #[test]
    fn output_index_in_range() {
        let mut rng = rng::stream(2, Domain::OutputIndex, 0, 0);
        for big_t in [2, 3, 7, 50] {
            for _ in 0..1000 {
                let t = sample_output_index(big_t, &mut rng);
                assert!((2..=big_t + 1).contains(&t));
            }
        }
    }

    #[test]
    fn output_probabilities_sum_to_one() {
        for big_t in 1..=10_000usize {
            let denom = (big_t * (big_t + 3)) as f64;
            let total: f64 = (2..=big_t + 1).map(|t| 2.0 * t as f64 / denom).sum();
            assert!((total - 1.0).abs() < 1e-9, "T = {big_t}: {total}");
        }
    }

    #[test]
    fn schedules() {
        let cfg = RunConfig {
            eta0: 0.4,
            inner0: 2.5,
            ..Default::default()
        };
        assert_eq!(cfg.schedule_at(4), (0.2, 10));
        let cfg = RunConfig {
            schedule: Schedule::Theory,
            eta0: 0.9,
            inner0: 0.1,
            ..cfg
        };
        let (eta, steps) = cfg.schedule_at(2);
        assert!((eta - 0.1).abs() < 1e-15);
        assert_eq!(steps, 1);
    }

    #[test]
    fn validation() {
        let bad = RunConfig {
            outer_steps: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RunConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
