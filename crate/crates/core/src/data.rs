//! Synthetic datasets and CSV persistence.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PdaError, Result};

/// Inputs (`n x d`) with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub xs: Array2<f64>,
    pub ys: Vec<f64>,
}

impl Dataset {
    pub fn new(xs: Array2<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.nrows() != ys.len() {
            return Err(PdaError::DimensionMismatch {
                expected: xs.nrows(),
                got: ys.len(),
            });
        }
        Ok(Dataset { xs, ys })
    }

    pub fn empty(dim: usize) -> Self {
        Dataset {
            xs: Array2::zeros((0, dim)),
            ys: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.xs.ncols()
    }

    pub fn x(&self, i: usize) -> ArrayView1<'_, f64> {
        self.xs.row(i)
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            xs: self.xs.select(Axis(0), idx),
            ys: idx.iter().map(|&i| self.ys[i]).collect(),
        }
    }

    /// Seeded uniform split into `(train, test)` with `n_test` test rows.
    pub fn split<R: Rng + ?Sized>(&self, n_test: usize, rng: &mut R) -> Result<(Dataset, Dataset)> {
        if n_test > self.len() {
            return Err(PdaError::InsufficientSamples(format!(
                "cannot hold out {n_test} of {} rows",
                self.len()
            )));
        }
        let mut test_idx = sample_indices(rng, self.len(), n_test).into_vec();
        test_idx.sort_unstable();
        let mut is_test = vec![false; self.len()];
        for &i in &test_idx {
            is_test[i] = true;
        }
        let train_idx: Vec<usize> = (0..self.len()).filter(|&i| !is_test[i]).collect();
        Ok((self.select(&train_idx), self.select(&test_idx)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    #[default]
    SingleIndex,
    MultiIndex,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherActivation {
    #[default]
    Tanh,
    Sign,
}

impl TeacherActivation {
    fn apply(self, u: f64) -> f64 {
        match self {
            TeacherActivation::Tanh => u.tanh(),
            TeacherActivation::Sign => {
                if u > 0.0 {
                    1.0
                } else if u < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Description of a teacher network; directions are drawn by
/// [`TeacherSpec::instantiate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSpec {
    pub kind: TeacherKind,
    /// Number of teacher neurons (forced to 1 for single-index and linear).
    pub m: usize,
    pub activation: TeacherActivation,
    /// Non-zero coordinates per direction; `None` means dense.
    pub sparsity: Option<usize>,
    pub noise_std: f64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec {
            kind: TeacherKind::SingleIndex,
            m: 1,
            activation: TeacherActivation::Tanh,
            sparsity: None,
            noise_std: 0.0,
        }
    }
}

impl TeacherSpec {
    fn neurons(&self) -> usize {
        match self.kind {
            TeacherKind::SingleIndex | TeacherKind::Linear => 1,
            TeacherKind::MultiIndex => self.m,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(PdaError::InvalidConfig(
                "teacher input dimension must be positive".into(),
            ));
        }
        if self.neurons() == 0 {
            return Err(PdaError::InvalidConfig("teacher.m must be positive".into()));
        }
        if let Some(r) = self.sparsity {
            if r == 0 || r > d {
                return Err(PdaError::InvalidConfig(format!(
                    "teacher.sparsity must lie in 1..={d}, got {r}"
                )));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(PdaError::InvalidConfig(
                "teacher.noise_std must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Draw unit-norm directions. Sparse directions keep `r` random
    /// coordinates before normalization.
    pub fn instantiate<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Result<Teacher> {
        self.validate(d)?;
        let m = self.neurons();
        let mut directions = Array2::<f64>::zeros((m, d));
        for mut row in directions.rows_mut() {
            loop {
                for v in row.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
                if let Some(r) = self.sparsity {
                    let keep = sample_indices(rng, d, r).into_vec();
                    let mut mask = vec![false; d];
                    for k in keep {
                        mask[k] = true;
                    }
                    for (v, keep) in row.iter_mut().zip(mask) {
                        if !keep {
                            *v = 0.0;
                        }
                    }
                }
                let norm = row.dot(&row).sqrt();
                if norm > 0.0 {
                    row /= norm;
                    break;
                }
            }
        }
        Teacher::new(self.kind, self.activation, directions, self.noise_std)
    }
}

/// A concrete teacher function with label noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    kind: TeacherKind,
    activation: TeacherActivation,
    directions: Array2<f64>,
    noise_std: f64,
}

impl Teacher {
    pub fn new(
        kind: TeacherKind,
        activation: TeacherActivation,
        directions: Array2<f64>,
        noise_std: f64,
    ) -> Result<Self> {
        for row in directions.rows() {
            if (row.dot(&row).sqrt() - 1.0).abs() > 1e-9 {
                return Err(PdaError::InvalidConfig(
                    "teacher directions must have unit norm".into(),
                ));
            }
        }
        Ok(Teacher {
            kind,
            activation,
            directions,
            noise_std,
        })
    }

    pub fn dim(&self) -> usize {
        self.directions.ncols()
    }

    pub fn directions(&self) -> &Array2<f64> {
        &self.directions
    }

    /// Noise-free target, before clipping.
    ///
    /// Multi-index teachers use `(1/sqrt m) sum_i sigma(<w_i, x>)`, further
    /// divided by `sqrt m` so the target stays in `[-1, 1]`.
    pub fn target(&self, x: ArrayView1<'_, f64>) -> f64 {
        let m = self.directions.nrows() as f64;
        match self.kind {
            TeacherKind::Linear => self.directions.row(0).dot(&x),
            TeacherKind::SingleIndex => self.activation.apply(self.directions.row(0).dot(&x)),
            TeacherKind::MultiIndex => {
                let sum: f64 = self
                    .directions
                    .rows()
                    .into_iter()
                    .map(|w| self.activation.apply(w.dot(&x)))
                    .sum();
                let scale = if m > 1.0 { 1.0 / m } else { 1.0 };
                sum * scale
            }
        }
    }

    /// `n` samples with `x ~ N(0, I_d)` and labels clipped to `[-1, 1]`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Dataset {
        let d = self.dim();
        let mut xs = Array2::zeros((n, d));
        let mut ys = Vec::with_capacity(n);
        for mut row in xs.rows_mut() {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let noise: f64 = if self.noise_std > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                self.noise_std * z
            } else {
                0.0
            };
            ys.push((self.target(row.view()) + noise).clamp(-1.0, 1.0));
        }
        Dataset { xs, ys }
    }
}

/// Draw a teacher and `n` labelled samples from it.
pub fn gen_teacher_data<R: Rng + ?Sized>(
    spec: &TeacherSpec,
    n: usize,
    d: usize,
    rng: &mut R,
) -> Result<Dataset> {
    Ok(spec.instantiate(d, rng)?.sample(n, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CirclesParams {
    /// Inner radius (outer radius is 1).
    pub factor: f64,
    pub noise_std: f64,
}

impl Default for CirclesParams {
    fn default() -> Self {
        CirclesParams {
            factor: 0.5,
            noise_std: 0.05,
        }
    }
}

impl CirclesParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(PdaError::InvalidConfig(format!(
                "circles.factor must lie in (0, 1), got {}",
                self.factor
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(PdaError::InvalidConfig(
                "circles.noise_std must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// `n/2` points on the unit circle labelled `+1`, the rest on radius
    /// `factor` labelled `-1`; uniform angles plus isotropic jitter.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Dataset {
        let n_outer = n / 2;
        let mut xs = Array2::zeros((n, 2));
        let mut ys = Vec::with_capacity(n);
        for (i, mut row) in xs.rows_mut().into_iter().enumerate() {
            let (radius, label) = if i < n_outer {
                (1.0, 1.0)
            } else {
                (self.factor, -1.0)
            };
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            row[0] = radius * angle.cos();
            row[1] = radius * angle.sin();
            if self.noise_std > 0.0 {
                for v in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += self.noise_std * z;
                }
            }
            ys.push(label);
        }
        Dataset { xs, ys }
    }
}

pub fn gen_circles<R: Rng + ?Sized>(
    n: usize,
    factor: f64,
    noise_std: f64,
    rng: &mut R,
) -> Result<Dataset> {
    let params = CirclesParams { factor, noise_std };
    params.validate()?;
    Ok(params.sample(n, rng))
}

/// Where training examples come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Fixed dataset, sampled uniformly with replacement.
    Finite(Dataset),
    /// Fresh teacher samples on every draw.
    Teacher(Teacher),
    /// Fresh circles samples on every draw.
    Circles(CirclesParams),
}

impl DataSource {
    pub fn dim(&self) -> usize {
        match self {
            DataSource::Finite(ds) => ds.dim(),
            DataSource::Teacher(t) => t.dim(),
            DataSource::Circles(_) => 2,
        }
    }

    /// Draw `n` fresh samples from a generator; `None` for finite sources.
    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Option<Dataset> {
        match self {
            DataSource::Finite(_) => None,
            DataSource::Teacher(t) => Some(t.sample(n, rng)),
            DataSource::Circles(c) => Some(c.sample(n, rng)),
        }
    }
}

/// Write `ds` as CSV with header `x1,...,xd,y`.
pub fn save_csv(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, to_csv_string(ds))?;
    Ok(())
}

pub fn to_csv_string(ds: &Dataset) -> String {
    let d = ds.dim();
    let mut out = String::new();
    for j in 1..=d {
        let _ = write!(out, "x{j},");
    }
    out.push_str("y\n");
    for (row, y) in ds.xs.rows().into_iter().zip(&ds.ys) {
        for v in row {
            let _ = write!(out, "{},", fmt_f64(*v));
        }
        let _ = writeln!(out, "{}", fmt_f64(*y));
    }
    out
}

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, &path.display().to_string())
}

pub fn parse_csv(text: &str, origin: &str) -> Result<Dataset> {
    let malformed = |reason: String| PdaError::Malformed {
        path: origin.to_string(),
        reason,
    };
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| malformed("missing header".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let d = cols
        .len()
        .checked_sub(1)
        .ok_or_else(|| malformed("empty header".into()))?;
    for (j, name) in cols.iter().take(d).enumerate() {
        if *name != format!("x{}", j + 1) {
            return Err(malformed(format!(
                "header column {} is {name:?}, expected x{}",
                j + 1,
                j + 1
            )));
        }
    }
    if cols[d] != "y" || d == 0 {
        return Err(malformed("header must be x1,...,xd,y with d >= 1".into()));
    }
    let mut flat = Vec::new();
    let mut ys = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(PdaError::DimensionMismatch {
                expected: d + 1,
                got: fields.len(),
            });
        }
        for (j, f) in fields.iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| malformed(format!("line {}: cannot parse {f:?}", lineno + 2)))?;
            if j < d {
                flat.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    let xs = Array2::from_shape_vec((ys.len(), d), flat).expect("row lengths checked");
    Ok(Dataset { xs, ys })
}
