//! Overdamped Langevin inner loop.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, PdaError, Result};
use crate::model::{ModelSpec, ParticleEnsemble};
use crate::potential::DualAverageState;
use crate::rng::{self, Domain, StreamRng};

/// Runs abort once any coordinate grows past this magnitude.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LangevinConfig {
    pub eta: f64,
    pub steps: usize,
    pub seed: u64,
    /// Outer step the loop belongs to, reported on divergence.
    pub outer_step: usize,
    /// Selects the noise streams `(seed, Langevin, stream, r)`.
    pub stream: u64,
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(PdaError::InvalidConfig(format!(
                "step size must be positive, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// `theta - eta * grad + sqrt(2 eta) * noise`
pub fn langevin_step(theta: &[f64], grad: &[f64], eta: f64, noise: &[f64]) -> Result<Vec<f64>> {
    check_dim(theta.len(), grad.len())?;
    check_dim(theta.len(), noise.len())?;
    if !eta.is_finite() || eta < 0.0 {
        return Err(PdaError::NonFinite("step size"));
    }
    if theta
        .iter()
        .chain(grad)
        .chain(noise)
        .any(|v| !v.is_finite())
    {
        return Err(PdaError::NonFinite("langevin step input"));
    }
    let scale = (2.0 * eta).sqrt();
    Ok(theta
        .iter()
        .zip(grad)
        .zip(noise)
        .map(|((th, g), z)| th - eta * g + scale * z)
        .collect())
}

/// Run `cfg.steps` Langevin steps on every particle against `grad gbar_t`.
pub fn inner_loop(
    ens: &ParticleEnsemble,
    state: &DualAverageState,
    spec: &ModelSpec,
    cfg: &LangevinConfig,
) -> Result<ParticleEnsemble> {
    check_dim(spec.param_dim(), ens.dim())?;
    langevin_chain(ens, cfg, |particles| state.ensemble_grad(particles, spec))
}

/// Langevin dynamics with an arbitrary ensemble drift.
///
/// Particle `r` draws its noise from the stream
/// `(seed, Langevin, stream, r)` in (inner step, coordinate) order.
pub fn langevin_chain<F>(
    ens: &ParticleEnsemble,
    cfg: &LangevinConfig,
    mut drift: F,
) -> Result<ParticleEnsemble>
where
    F: FnMut(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
{
    cfg.validate()?;
    let mut particles = ens.as_array().clone();
    if cfg.steps == 0 {
        return Ok(ens.clone());
    }
    let mut streams: Vec<StreamRng> = (0..particles.nrows())
        .map(|r| rng::stream(cfg.seed, Domain::Langevin, cfg.stream, r as u64))
        .collect();
    let scale = (2.0 * cfg.eta).sqrt();
    for _ in 0..cfg.steps {
        let grad = drift(particles.view())?;
        check_dim(particles.ncols(), grad.ncols())?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(PdaError::NonFinite("potential gradient"));
        }
        let mut worst = 0.0_f64;
        for ((mut row, grow), stream) in particles
            .axis_iter_mut(Axis(0))
            .zip(grad.axis_iter(Axis(0)))
            .zip(streams.iter_mut())
        {
            Zip::from(&mut row).and(&grow).for_each(|th, &g| {
                let z: f64 = StandardNormal.sample(stream);
                *th += -cfg.eta * g + scale * z;
                worst = worst.max(th.abs());
            });
        }
        if !(worst <= DIVERGENCE_LIMIT) {
            return Err(PdaError::Divergence {
                value: worst,
                limit: DIVERGENCE_LIMIT,
                outer_step: cfg.outer_step,
            });
        }
    }
    ParticleEnsemble::new(particles)
}
