//! Two-layer mean-field network: neuron function, ensemble prediction and
//! parameter gradients.
//!
//! A particle is a parameter vector `theta`. With a trainable output layer the
//! layout is `(a, w_1..w_d, b)`; with a fixed output layer it is
//! `(w_1..w_d, b)`. The neuron is `sigma2(a * sigma1(w.x + b))`, where `a` is
//! `output_scale` when the output layer is fixed.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, PdaError, Result};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn value(self, u: f64) -> f64 {
        match self {
            Activation::Tanh => tanh(u),
            Activation::Sigmoid => sigmoid(u),
        }
    }

    /// Value and first derivative at `u`.
    #[inline]
    pub fn value_and_slope(self, u: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let v = tanh(u);
                (v, 1.0 - v * v)
            }
            Activation::Sigmoid => {
                let v = sigmoid(u);
                (v, v * (1.0 - v))
            }
        }
    }
}

/// `tanh` through a single `exp` call; absolute error below `4e-16`.
#[inline]
pub fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputNonlinearity {
    Tanh,
    #[default]
    None,
}

impl OutputNonlinearity {
    #[inline]
    fn value_and_slope(self, z: f64) -> (f64, f64) {
        match self {
            OutputNonlinearity::Tanh => {
                let v = tanh(z);
                (v, 1.0 - v * v)
            }
            OutputNonlinearity::None => (z, 1.0),
        }
    }
}

/// Neuron family and network scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub activation: Activation,
    pub output_nonlinearity: OutputNonlinearity,
    /// `1` for the mean-field scaling, `1/2` for the kernel scaling.
    pub scaling_exponent: f64,
    pub fixed_output_layer: bool,
    pub output_scale: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_dim: 1,
            activation: Activation::Tanh,
            output_nonlinearity: OutputNonlinearity::None,
            scaling_exponent: 1.0,
            fixed_output_layer: true,
            output_scale: 1.0,
        }
    }
}

impl ModelSpec {
    /// Fixed output layer, tanh hidden units, no output nonlinearity.
    pub fn mean_field_tanh(input_dim: usize) -> Self {
        ModelSpec {
            input_dim,
            ..Default::default()
        }
    }

    /// Parameter dimension `p` of a single particle.
    pub fn param_dim(&self) -> usize {
        if self.fixed_output_layer {
            self.input_dim + 1
        } else {
            self.input_dim + 2
        }
    }

    /// Offset of `w_1` inside a parameter vector.
    #[inline]
    pub fn w_offset(&self) -> usize {
        usize::from(!self.fixed_output_layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(PdaError::InvalidConfig(
                "model.input_dim must be positive".into(),
            ));
        }
        if self.scaling_exponent != 1.0 && self.scaling_exponent != 0.5 {
            return Err(PdaError::InvalidConfig(format!(
                "model.scaling_exponent must be 1 or 0.5, got {}",
                self.scaling_exponent
            )));
        }
        if !self.output_scale.is_finite() {
            return Err(PdaError::InvalidConfig(
                "model.output_scale must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Pre-activation `w.x + b`.
    #[inline]
    fn preactivation(&self, theta: &[f64], x: &[f64]) -> f64 {
        let off = self.w_offset();
        let d = self.input_dim;
        let mut u = theta[off + d];
        for (w, xi) in theta[off..off + d].iter().zip(x) {
            u += w * xi;
        }
        u
    }

    #[inline]
    fn outer_weight(&self, theta: &[f64]) -> f64 {
        if self.fixed_output_layer {
            self.output_scale
        } else {
            theta[0]
        }
    }

    /// `1 / M^alpha`.
    pub fn ensemble_scale(&self, n_particles: usize) -> f64 {
        (n_particles as f64).powf(-self.scaling_exponent)
    }
}

/// Value of one neuron `h(theta, x)`.
pub fn neuron_value(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Result<f64> {
    check_dim(spec.param_dim(), theta.len())?;
    check_dim(spec.input_dim, x.len())?;
    Ok(neuron_value_unchecked(spec, theta, x))
}

#[inline]
pub(crate) fn neuron_value_unchecked(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> f64 {
    let hidden = spec.activation.value(spec.preactivation(theta, x));
    spec.output_nonlinearity
        .value_and_slope(spec.outer_weight(theta) * hidden)
        .0
}

/// Analytic gradient of `h(theta, x)` with respect to `theta`.
pub fn neuron_grad(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_dim(spec.param_dim(), theta.len())?;
    check_dim(spec.input_dim, x.len())?;
    let mut out = vec![0.0; spec.param_dim()];
    let (dh_da, dh_du) = neuron_partials(spec, spec.preactivation(theta, x), theta);
    let off = spec.w_offset();
    if !spec.fixed_output_layer {
        out[0] = dh_da;
    }
    for (g, xi) in out[off..off + spec.input_dim].iter_mut().zip(x) {
        *g = dh_du * xi;
    }
    out[off + spec.input_dim] = dh_du;
    Ok(out)
}

/// `(dh/da, dh/du)` at pre-activation `u`; `dh/da` is 0 for a fixed output layer.
#[inline]
fn neuron_partials(spec: &ModelSpec, u: f64, theta: &[f64]) -> (f64, f64) {
    let a = spec.outer_weight(theta);
    let (s1, ds1) = spec.activation.value_and_slope(u);
    let (_, ds2) = spec.output_nonlinearity.value_and_slope(a * s1);
    let dh_da = if spec.fixed_output_layer {
        0.0
    } else {
        ds2 * s1
    };
    (dh_da, ds2 * a * ds1)
}

/// `M x p` matrix of particles; row `r` is `theta_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    particles: Array2<f64>,
}

impl ParticleEnsemble {
    pub fn new(particles: Array2<f64>) -> Result<Self> {
        if particles.nrows() == 0 || particles.ncols() == 0 {
            return Err(PdaError::InvalidConfig("ensemble must be non-empty".into()));
        }
        if particles.iter().any(|v| !v.is_finite()) {
            return Err(PdaError::NonFinite("ensemble entry"));
        }
        Ok(ParticleEnsemble { particles })
    }

    /// Build an ensemble for `spec`, checking the parameter dimension.
    pub fn for_spec(spec: &ModelSpec, particles: Array2<f64>) -> Result<Self> {
        check_dim(spec.param_dim(), particles.ncols())?;
        Self::new(particles)
    }

    pub fn zeros(n_particles: usize, dim: usize) -> Self {
        ParticleEnsemble {
            particles: Array2::zeros((n_particles.max(1), dim.max(1))),
        }
    }

    /// I.i.d. `N(0, std^2 I_p)` particles; particle `r` uses its own stream.
    pub fn gaussian(
        n_particles: usize,
        dim: usize,
        std: f64,
        seed: u64,
        domain: Domain,
        tag: u64,
    ) -> Self {
        let mut particles = Array2::zeros((n_particles, dim));
        for (r, mut row) in particles.axis_iter_mut(Axis(0)).enumerate() {
            let mut rng = rng::stream(seed, domain, tag, r as u64);
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = std * z;
            }
        }
        ParticleEnsemble { particles }
    }

    pub fn n_particles(&self) -> usize {
        self.particles.nrows()
    }

    pub fn dim(&self) -> usize {
        self.particles.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.particles.view()
    }

    pub fn particle(&self, r: usize) -> ArrayView1<'_, f64> {
        self.particles.row(r)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.particles
    }

    pub fn as_array_mut(&mut self) -> &mut Array2<f64> {
        &mut self.particles
    }

    pub fn into_array(self) -> Array2<f64> {
        self.particles
    }

    /// The `M x d` first-layer weight block.
    pub fn weight_block(&self, spec: &ModelSpec) -> ArrayView2<'_, f64> {
        let off = spec.w_offset();
        self.particles.slice(s![.., off..off + spec.input_dim])
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.particles.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Network prediction `(1/M^alpha) * sum_r h(theta_r, x)`.
///
/// Particles are summed left to right in index order so results are
/// reproducible bit for bit.
pub fn forward(spec: &ModelSpec, ens: &ParticleEnsemble, x: &[f64]) -> Result<f64> {
    check_dim(spec.param_dim(), ens.dim())?;
    check_dim(spec.input_dim, x.len())?;
    Ok(forward_unchecked(spec, ens, x))
}

pub(crate) fn forward_unchecked(spec: &ModelSpec, ens: &ParticleEnsemble, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for row in ens.particles.rows() {
        let theta = row.as_slice().expect("ensemble rows are contiguous");
        acc += neuron_value_unchecked(spec, theta, x);
    }
    acc * spec.ensemble_scale(ens.n_particles())
}

/// Predictions for every row of `xs` (`n x d`).
pub fn forward_batch(
    spec: &ModelSpec,
    ens: &ParticleEnsemble,
    xs: ArrayView2<'_, f64>,
) -> Result<Vec<f64>> {
    check_dim(spec.param_dim(), ens.dim())?;
    check_dim(spec.input_dim, xs.ncols())?;
    Ok(xs
        .rows()
        .into_iter()
        .map(|x| match x.as_slice() {
            Some(sl) => forward_unchecked(spec, ens, sl),
            None => forward_unchecked(spec, ens, &x.to_vec()),
        })
        .collect())
}

/// Particles per parallel chunk in [`weighted_data_grad`]. Fixed so that the
/// result does not depend on the number of worker threads.
const GRAD_CHUNK: usize = 64;

/// For every particle, `sum_i weights[i] * grad_theta h(theta_r, xs[i])`.
///
/// Returns an `M x p` matrix. Work is split over fixed-size particle chunks
/// and run in parallel; each chunk is computed with dense matrix products.
pub fn weighted_data_grad(
    spec: &ModelSpec,
    particles: ArrayView2<'_, f64>,
    xs: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
) -> Array2<f64> {
    use rayon::prelude::*;

    let m = particles.nrows();
    let p = spec.param_dim();
    let mut out = Array2::zeros((m, p));
    if xs.nrows() == 0 {
        return out;
    }
    let weights = weights.as_standard_layout();
    let weights = weights.view();
    let xs = xs.as_standard_layout();
    let xs = xs.view();
    out.axis_chunks_iter_mut(Axis(0), GRAD_CHUNK)
        .into_par_iter()
        .zip(
            particles
                .axis_chunks_iter(Axis(0), GRAD_CHUNK)
                .into_par_iter(),
        )
        .for_each(|(mut out_chunk, theta_chunk)| {
            weighted_data_grad_chunk(spec, theta_chunk, xs, weights, &mut out_chunk);
        });
    out
}

/// Training examples per tile; keeps the `GRAD_CHUNK x DATA_TILE`
/// pre-activation block in cache.
const DATA_TILE: usize = 512;

/// Input dimensions up to this use the fused per-particle loop.
const FUSED_MAX_DIM: usize = 8;

/// One pass over the data per particle, for small `d` and `sigma2 = id`.
fn weighted_data_grad_fused(
    spec: &ModelSpec,
    thetas: ArrayView2<'_, f64>,
    xs: ArrayView2<'_, f64>,
    weights: &[f64],
    out: &mut ndarray::ArrayViewMut2<'_, f64>,
) {
    let d = spec.input_dim;
    let off = spec.w_offset();
    let xs = xs.as_slice().expect("inputs are in standard layout");
    for (theta, mut out_row) in thetas.rows().into_iter().zip(out.rows_mut()) {
        let theta = theta.as_slice().expect("ensemble rows are contiguous");
        let a = spec.outer_weight(theta);
        let w = &theta[off..off + d];
        let b = theta[off + d];
        let mut grad_w = [0.0; FUSED_MAX_DIM];
        let (mut grad_a, mut grad_b) = (0.0, 0.0);
        for (x, wi) in xs.chunks_exact(d).zip(weights) {
            let u = b + w.iter().zip(x).map(|(wk, xk)| wk * xk).sum::<f64>();
            let (s1, ds1) = spec.activation.value_and_slope(u);
            grad_a += wi * s1;
            let g = wi * a * ds1;
            grad_b += g;
            for (gk, xk) in grad_w.iter_mut().zip(x) {
                *gk += g * xk;
            }
        }
        for (o, g) in out_row.iter_mut().skip(off).zip(&grad_w[..d]) {
            *o = *g;
        }
        out_row[off + d] = grad_b;
        if !spec.fixed_output_layer {
            out_row[0] = grad_a;
        }
    }
}

fn weighted_data_grad_chunk(
    spec: &ModelSpec,
    thetas: ArrayView2<'_, f64>,
    xs: ArrayView2<'_, f64>,
    weights: ArrayView1<'_, f64>,
    out: &mut ndarray::ArrayViewMut2<'_, f64>,
) {
    let d = spec.input_dim;
    let off = spec.w_offset();
    let linear_output = spec.output_nonlinearity == OutputNonlinearity::None;
    if linear_output && d <= FUSED_MAX_DIM {
        let wts = weights.as_slice().expect("weights are contiguous");
        return weighted_data_grad_fused(spec, thetas, xs, wts, out);
    }
    let w = thetas.slice(s![.., off..off + d]);
    let bias = thetas.column(off + d);
    let mut grad_a = Array1::<f64>::zeros(thetas.nrows());
    let mut grad_w = Array2::<f64>::zeros((thetas.nrows(), d));
    let mut grad_b = Array1::<f64>::zeros(thetas.nrows());
    for (x_tile, w_tile) in xs
        .axis_chunks_iter(Axis(0), DATA_TILE)
        .zip(weights.axis_chunks_iter(Axis(0), DATA_TILE))
    {
        // u[r, i] = w_r . x_i + b_r
        let mut u = w.dot(&x_tile.t());
        for (r, mut row) in u.axis_iter_mut(Axis(0)).enumerate() {
            let theta = thetas.row(r);
            let theta = theta.as_slice().expect("ensemble rows are contiguous");
            let b = bias[r];
            let row = row.as_slice_mut().expect("fresh product is contiguous");
            let wts = w_tile.as_slice().expect("weights are contiguous");
            if linear_output {
                // dh/du = a * sigma1'(u), dh/da = sigma1(u)
                let a = spec.outer_weight(theta);
                let mut acc_a = 0.0;
                for (v, wi) in row.iter_mut().zip(wts) {
                    let (s1, ds1) = spec.activation.value_and_slope(*v + b);
                    acc_a += wi * s1;
                    *v = wi * a * ds1;
                }
                if !spec.fixed_output_layer {
                    grad_a[r] += acc_a;
                }
            } else {
                let mut acc_a = 0.0;
                for (v, wi) in row.iter_mut().zip(wts) {
                    let (dh_da, dh_du) = neuron_partials(spec, *v + b, theta);
                    acc_a += wi * dh_da;
                    *v = wi * dh_du;
                }
                grad_a[r] += acc_a;
            }
        }
        // u now holds weights[i] * dh/du(r, i).
        grad_w += &u.dot(&x_tile);
        grad_b += &u.sum_axis(Axis(1));
    }
    out.slice_mut(s![.., off..off + d]).assign(&grad_w);
    out.column_mut(off + d).assign(&grad_b);
    if !spec.fixed_output_layer {
        out.column_mut(0).assign(&grad_a);
    }
}

/// `|cos angle(teacher, v_j)|` for the top-`k` right singular vectors of the
/// particles' first-layer weight matrix.
///
/// Singular vectors come from power iteration with deflation on the `d x d`
/// Gram matrix. Directions in the numerical null space report 0.
pub fn top_singular_alignment(
    spec: &ModelSpec,
    ens: &ParticleEnsemble,
    teacher: &[f64],
    k: usize,
) -> Result<Vec<f64>> {
    check_dim(spec.param_dim(), ens.dim())?;
    check_dim(spec.input_dim, teacher.len())?;
    let d = spec.input_dim;
    let m = ens.n_particles();
    if k == 0 || k > m.min(d) {
        return Err(PdaError::InvalidConfig(format!(
            "k = {k} must lie in 1..={}",
            m.min(d)
        )));
    }
    let tnorm = teacher.iter().map(|v| v * v).sum::<f64>().sqrt();
    if tnorm == 0.0 || !tnorm.is_finite() {
        return Err(PdaError::Degenerate(
            "teacher direction must be non-zero".into(),
        ));
    }
    let w = ens.weight_block(spec);
    let vectors = top_right_singular_vectors(w, k, 1e-8);
    Ok(vectors
        .into_iter()
        .map(|v| match v {
            Some(v) => {
                let dot: f64 = v.iter().zip(teacher).map(|(a, b)| a * b).sum();
                (dot / tnorm).abs()
            }
            None => 0.0,
        })
        .collect())
}

/// Top-`k` right singular vectors of `w`, `None` for null directions.
pub(crate) fn top_right_singular_vectors(
    w: ArrayView2<'_, f64>,
    k: usize,
    tol: f64,
) -> Vec<Option<Array1<f64>>> {
    const MAX_ITERS: usize = 200_000;
    let d = w.ncols();
    let mut gram = w.t().dot(&w);
    let scale = gram.diag().sum();
    let mut out = Vec::with_capacity(k);
    let mut start_rng = rng::stream(0x5eed, Domain::Generic, 0, 0);
    for _ in 0..k {
        let mut v = Array1::from_shape_fn(d, |_| StandardNormal.sample(&mut start_rng));
        for prev in out.iter().flatten() {
            let prev: &Array1<f64> = prev;
            let c = v.dot(prev);
            v.scaled_add(-c, prev);
        }
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..MAX_ITERS {
            let mut next = gram.dot(&v);
            let norm = next.dot(&next).sqrt();
            if norm <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
                lambda = 0.0;
                break;
            }
            next /= norm;
            // sign-insensitive change between iterates
            let diff = (&next - &v).dot(&(&next - &v)).sqrt();
            let flip = (&next + &v).dot(&(&next + &v)).sqrt();
            lambda = norm;
            v = next;
            if diff.min(flip) <= tol {
                break;
            }
        }
        if lambda <= 1e-12 * scale || scale == 0.0 {
            out.push(None);
            continue;
        }
        let outer = outer_product(&v);
        gram.scaled_add(-lambda, &outer);
        out.push(Some(v));
    }
    out
}

fn normalize(v: &mut Array1<f64>) {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        *v /= n;
    }
}

fn outer_product(v: &Array1<f64>) -> Array2<f64> {
    let col = v.view().insert_axis(Axis(1));
    let row = v.view().insert_axis(Axis(0));
    col.dot(&row)
}
