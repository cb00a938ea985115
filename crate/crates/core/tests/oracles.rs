//! Independent oracles for the model, potential and sampler.

use ndarray::{Array1, Array2, Axis};
use pda::data::Dataset;
use pda::model::{
    forward, forward_batch, neuron_grad, neuron_value, top_singular_alignment, weighted_data_grad,
    Activation, ModelSpec, OutputNonlinearity, ParticleEnsemble,
};
use pda::potential::{da_grad_naive, Batch, DualAverageState, HistoryRecord, RegConfig};
use pda::rng::{stream, Domain};
use pda::sampler::{inner_loop, langevin_step, LangevinConfig};
use pda::LossKind;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn spec_variant(d: usize, variant: u8) -> ModelSpec {
    let mut spec = ModelSpec::mean_field_tanh(d);
    spec.fixed_output_layer = variant & 1 == 0;
    spec.activation = if variant & 2 == 0 {
        Activation::Tanh
    } else {
        Activation::Sigmoid
    };
    spec.output_nonlinearity = if variant & 4 == 0 {
        OutputNonlinearity::None
    } else {
        OutputNonlinearity::Tanh
    };
    spec.output_scale = 1.3;
    spec
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64, tag: u64) -> Array2<f64> {
    let mut rng = stream(seed, Domain::Generic, tag, 0);
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neuron_grad_matches_central_differences(d in 1usize..5, variant in 0u8..8, seed in 0u64..1000) {
        let spec = spec_variant(d, variant);
        let theta = gaussian_matrix(1, spec.param_dim(), seed, 0).row(0).to_vec();
        let x = gaussian_matrix(1, d, seed, 1).row(0).to_vec();
        let g = neuron_grad(&spec, &theta, &x).unwrap();
        let h = 1e-6;
        for j in 0..theta.len() {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (neuron_value(&spec, &up, &x).unwrap() - neuron_value(&spec, &dn, &x).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() < 1e-7, "coordinate {j}: fd {fd} vs analytic {}", g[j]);
        }
    }

    #[test]
    fn forward_is_permutation_invariant(m in 1usize..40, d in 1usize..4, seed in 0u64..1000) {
        let spec = ModelSpec::mean_field_tanh(d);
        let particles = gaussian_matrix(m, spec.param_dim(), seed, 0);
        let ens = ParticleEnsemble::new(particles.clone()).unwrap();
        let mut order: Vec<usize> = (0..m).collect();
        order.reverse();
        order.rotate_left(seed as usize % m);
        let shuffled = ParticleEnsemble::new(particles.select(Axis(0), &order)).unwrap();
        let x = gaussian_matrix(1, d, seed, 1).row(0).to_vec();
        let a = forward(&spec, &ens, &x).unwrap();
        let b = forward(&spec, &shuffled, &x).unwrap();
        prop_assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
    }

    #[test]
    fn forward_is_the_scaled_neuron_sum(m in 1usize..30, d in 1usize..4, variant in 0u8..8, kernel in any::<bool>(), seed in 0u64..1000) {
        let mut spec = spec_variant(d, variant);
        spec.scaling_exponent = if kernel { 0.5 } else { 1.0 };
        let ens = ParticleEnsemble::new(gaussian_matrix(m, spec.param_dim(), seed, 0)).unwrap();
        let xs = gaussian_matrix(5, d, seed, 1);
        let batch = forward_batch(&spec, &ens, xs.view()).unwrap();
        for (row, z) in xs.rows().into_iter().zip(&batch) {
            let x = row.to_vec();
            let manual: f64 = ens
                .view()
                .rows()
                .into_iter()
                .map(|th| neuron_value(&spec, &th.to_vec(), &x).unwrap())
                .sum::<f64>()
                / (m as f64).powf(spec.scaling_exponent);
            prop_assert!((manual - z).abs() < 1e-12);
            prop_assert!((forward(&spec, &ens, &x).unwrap() - z).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_gradient_matches_per_particle_sum(m in 1usize..150, n in 0usize..20, d in 1usize..4, variant in 0u8..8, seed in 0u64..1000) {
        let spec = spec_variant(d, variant);
        let particles = gaussian_matrix(m, spec.param_dim(), seed, 0);
        let xs = gaussian_matrix(n, d, seed, 1);
        let weights = Array1::from_iter(gaussian_matrix(1, n, seed, 2).into_iter());
        let got = weighted_data_grad(&spec, particles.view(), xs.view(), weights.view());
        for (r, th) in particles.rows().into_iter().enumerate() {
            let mut expect = vec![0.0; spec.param_dim()];
            for (x, w) in xs.rows().into_iter().zip(weights.iter()) {
                let g = neuron_grad(&spec, &th.to_vec(), &x.to_vec()).unwrap();
                for (e, gj) in expect.iter_mut().zip(g) {
                    *e += w * gj;
                }
            }
            for (j, e) in expect.iter().enumerate() {
                prop_assert!((got[[r, j]] - e).abs() < 1e-11, "particle {r} coord {j}");
            }
        }
    }
}

/// Drive an accumulator state for `steps` outer steps and compare its
/// gradient with the term-by-term sum over the recorded history.
fn accumulator_matches_history(empirical: bool, norm_exponent: f64) {
    let d = 3;
    let spec = ModelSpec::mean_field_tanh(d);
    let reg = RegConfig::new(0.05, 0.2, norm_exponent).unwrap();
    let train = gaussian_matrix(40, d, 9, 0);
    let mut state = if empirical {
        DualAverageState::empirical(train.clone(), reg).unwrap()
    } else {
        DualAverageState::streaming(d, reg).unwrap()
    };
    let mut history = Vec::new();
    let mut rng = stream(9, Domain::Generic, 1, 0);
    let mut worst = 0.0_f64;
    for t in 1..=60 {
        let b = rng.random_range(1..6);
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..train.nrows())).collect();
        let xs = train.select(Axis(0), &idx);
        let preds: Vec<f64> = (0..b).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = if empirical {
            Batch::Indices(idx)
        } else {
            Batch::Samples(xs.clone())
        };
        state
            .record(&batch, &preds, &ys, LossKind::Squared)
            .unwrap();
        for ((x, z), y) in xs.rows().into_iter().zip(&preds).zip(&ys) {
            history.push(HistoryRecord {
                step: t,
                batch_size: b,
                x: x.to_vec(),
                dz: LossKind::Squared.dz(*z, *y).unwrap(),
            });
        }
        for probe in 0..5 {
            let theta = gaussian_matrix(1, spec.param_dim(), t as u64, probe)
                .row(0)
                .to_vec();
            let fast = state.grad(&theta, &spec).unwrap();
            let slow = da_grad_naive(&history, &theta, &spec, &reg, t).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                worst = worst.max((a - b).abs());
            }
        }
        state.advance();
    }
    assert!(worst <= 1e-12, "max deviation {worst}");
}

#[test]
fn empirical_accumulators_match_history() {
    accumulator_matches_history(true, 2.0);
    accumulator_matches_history(true, 1.1);
}

#[test]
fn streaming_history_matches_naive_sum() {
    accumulator_matches_history(false, 2.0);
    accumulator_matches_history(false, 1.5);
}

#[test]
fn empty_state_gradient_is_the_regularizer() {
    let spec = ModelSpec::mean_field_tanh(2);
    let reg = RegConfig::new(0.3, 0.6, 2.0).unwrap();
    let mut state = DualAverageState::streaming(2, reg).unwrap();
    state.advance();
    let theta = [0.5, -1.0, 2.0];
    let g = state.grad(&theta, &spec).unwrap();
    // t = 2: c2 = 2 * 0.3 * 2 / (0.6 * 4) = 0.5
    for (gj, th) in g.iter().zip(theta) {
        assert!((gj - 0.5 * th).abs() < 1e-15);
    }
}

#[test]
fn langevin_step_is_exact() {
    let out = langevin_step(&[1.0, -2.0], &[0.5, 4.0], 0.02, &[1.0, -0.5]).unwrap();
    let s = (0.04_f64).sqrt();
    assert_eq!(out, vec![1.0 - 0.01 + s, -2.0 - 0.08 - 0.5 * s]);
}

#[test]
fn quadratic_inner_loop_matches_discrete_stationary_variance() {
    // zero data term: drift c * theta, exact ULA variance 1 / (c (1 - eta c / 2))
    let spec = ModelSpec::mean_field_tanh(1);
    let reg = RegConfig::new(1.0, 1.0, 2.0).unwrap();
    let mut state = DualAverageState::streaming(1, reg).unwrap();
    state.advance();
    let c = reg.reg_coefficient(2);
    assert!((c - 1.0).abs() < 1e-15);
    let eta = 0.1;
    let ens = ParticleEnsemble::zeros(2000, spec.param_dim());
    let cfg = LangevinConfig {
        eta,
        steps: 200,
        seed: 5,
        outer_step: 2,
        stream: 2,
    };
    let out = inner_loop(&ens, &state, &spec, &cfg).unwrap();
    let expect = 1.0 / (c * (1.0 - eta * c / 2.0));
    for col in out.view().columns() {
        let var = col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64;
        assert!(
            (var / expect - 1.0).abs() < 0.08,
            "variance {var} vs {expect}"
        );
    }
}

#[test]
fn halving_the_step_roughly_halves_the_variance_bias() {
    let spec = ModelSpec::mean_field_tanh(1);
    let reg = RegConfig::new(1.0, 1.0, 2.0).unwrap();
    let mut state = DualAverageState::streaming(1, reg).unwrap();
    state.advance();
    let c = reg.reg_coefficient(2);
    let bias = |eta: f64| {
        let ens = ParticleEnsemble::zeros(50_000, spec.param_dim());
        let cfg = LangevinConfig {
            eta,
            steps: (12.0 / (eta * c)).ceil() as usize,
            seed: 17,
            outer_step: 2,
            stream: 2,
        };
        let out = inner_loop(&ens, &state, &spec, &cfg).unwrap();
        let var = out.view().iter().map(|v| v * v).sum::<f64>() / out.view().len() as f64;
        var - 1.0 / c
    };
    let ratio = bias(0.4) / bias(0.2);
    assert!((1.5..=2.5).contains(&ratio), "bias ratio {ratio}");
}

#[test]
fn inner_loop_is_reproducible() {
    let spec = ModelSpec::mean_field_tanh(2);
    let reg = RegConfig::default();
    let xs = gaussian_matrix(10, 2, 3, 0);
    let mut state = DualAverageState::empirical(xs.clone(), reg).unwrap();
    state
        .record(
            &Batch::Indices(vec![0, 3, 3]),
            &[0.1, 0.2, 0.3],
            &[1.0, -1.0, 0.5],
            LossKind::Squared,
        )
        .unwrap();
    let ens = ParticleEnsemble::gaussian(70, spec.param_dim(), 1.0, 3, Domain::Init, 0);
    let cfg = LangevinConfig {
        eta: 1e-3,
        steps: 5,
        seed: 3,
        outer_step: 1,
        stream: 1,
    };
    let a = inner_loop(&ens, &state, &spec, &cfg).unwrap();
    let b = inner_loop(&ens, &state, &spec, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn singular_alignment_matches_svd_oracle() {
    let d = 6;
    let spec = ModelSpec::mean_field_tanh(d);
    let ens = ParticleEnsemble::new(gaussian_matrix(30, spec.param_dim(), 17, 0)).unwrap();
    let teacher: Vec<f64> = gaussian_matrix(1, d, 17, 1).row(0).to_vec();
    let got = top_singular_alignment(&spec, &ens, &teacher, 3).unwrap();

    let w = ens.weight_block(&spec);
    let mat = nalgebra::DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| w[[i, j]]);
    let svd = mat.svd(false, true);
    let v_t = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let tnorm = teacher.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (j, &row) in order.iter().take(3).enumerate() {
        let dot: f64 = (0..d).map(|c| v_t[(row, c)] * teacher[c]).sum();
        let expect = (dot / tnorm).abs();
        assert!(
            (got[j] - expect).abs() < 1e-6,
            "vector {j}: {} vs {expect}",
            got[j]
        );
    }
}

#[test]
fn dataset_split_partitions_rows() {
    let xs = Array2::from_shape_fn((20, 1), |(i, _)| i as f64);
    let ds = Dataset::new(xs, (0..20).map(|i| i as f64).collect()).unwrap();
    let (train, test) = ds.split(6, &mut stream(1, Domain::Eval, 0, 0)).unwrap();
    assert_eq!((train.len(), test.len()), (14, 6));
    let mut all: Vec<f64> = train.ys.iter().chain(&test.ys).copied().collect();
    all.sort_by(f64::total_cmp);
    assert_eq!(all, (0..20).map(|i| i as f64).collect::<Vec<_>>());
}
