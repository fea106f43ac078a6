//! Trained and analytic oracles for the energy, generator and dataset modules.

use dde_core::datasets::{two_spirals, MixtureSpec, TwoSpirals};
use dde_core::dde::{DdeModel, DdeTrainConfig, DdeTrainer};
use dde_core::diffengine::Mat;
use dde_core::evaluation::density_grid;
use dde_core::generator::{
    generator_objective_grad, init_q_dde, refresh_q_dde, GenTrainConfig, GenTrainState, GeneratorModel,
};
use dde_core::network::{init_mlp, MlpConfig, MlpParams};
use dde_core::rng;
use dde_core::samplers::SmoothedMixture;

fn train(data: &dyn dde_core::datasets::SampleSource, sigma: f64, steps: u64, seed: u64) -> DdeModel {
    let mut cfg = DdeTrainConfig::constant(sigma, steps, 512, 2e-3, seed);
    cfg.lr_decay.factor = 2.0;
    cfg.lr_decay.every_steps = steps / 4;
    let mut t = DdeTrainer::new(MlpConfig::dde(2, 3, 32), cfg).unwrap();
    t.run(data, |_, _| Ok(())).unwrap();
    t.model
}

#[test]
fn gaussian_oracle_point_values() {
    // N(0, I) smoothed at σ = 0.5 is N(0, 1.25·I): log-density −‖x‖²/2.5, score −x/1.25.
    let data = dde_core::datasets::GaussianSource::isotropic(vec![0.0, 0.0], 1.0);
    let m = train(&data, 0.5, 12_000, 1);
    let s0 = m.log_density_unnormalized(&[0.0, 0.0]).unwrap();
    let s1 = m.log_density_unnormalized(&[1.0, 0.0]).unwrap();
    let s2 = m.log_density_unnormalized(&[2.0, 0.0]).unwrap();
    assert!((s1 - s0 + 0.4).abs() < 0.05, "difference {}", s1 - s0);
    assert!(s0 > s2);
    let g = m.score(&[1.0, 0.0]).unwrap();
    assert!((g[0] + 0.8).abs() < 0.1 && g[1].abs() < 0.1, "score {g:?}");
    let d = m.denoise(&[1.0, 0.0]).unwrap();
    assert!((d[0] - 0.8).abs() < 0.05 && d[1].abs() < 0.05, "denoised {d:?}");
}

#[test]
fn score_field_is_conservative() {
    let m = DdeModel::new(init_mlp(&MlpConfig::dde(2, 3, 16), 2).unwrap(), 0.3).unwrap();
    // Simpson's rule for ∮ ∇s · dl around the square [−1,1]², traversed counter-clockwise.
    let n = 2_000;
    let corners = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0]];
    let mut total = 0.0;
    for side in 0..4 {
        let (a, b) = (corners[side], corners[side + 1]);
        let dir = [b[0] - a[0], b[1] - a[1]];
        let pts: Vec<[f64; 2]> =
            (0..=n).map(|k| k as f64 / n as f64).map(|t| [a[0] + t * dir[0], a[1] + t * dir[1]]).collect();
        let g = m.score_batch(&Mat::from_rows(&pts).unwrap()).unwrap();
        let f: Vec<f64> = (0..=n).map(|k| g.get(k, 0) * dir[0] + g.get(k, 1) * dir[1]).collect();
        let simpson: f64 = (0..=n).map(|k| f[k] * if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 }).sum();
        total += simpson / (3.0 * n as f64);
    }
    assert!(total.abs() < 1e-9, "loop integral {total}");
}

fn point_mass_generator(at: &[f64]) -> GeneratorModel {
    let cfg = MlpConfig::generator(at.len(), at.len(), 1, 4);
    let mut p = MlpParams::zeros(cfg.clone()).unwrap();
    let last = cfg.layout().pop().unwrap();
    p.values_mut()[last.bias_range()].copy_from_slice(at);
    GeneratorModel::new(p)
}

#[test]
fn collapsed_generator_loss_is_lower_at_the_mode() {
    let sigma = 0.5;
    let p = SmoothedMixture::new(MixtureSpec::new(vec![vec![0.0, 0.0]], 1.0).unwrap(), sigma).unwrap();
    let mut r = rng::stream(3, "batch", 0);
    let z = rng::normal_mat(&mut r, 4_000, 2, 1.0);
    let eta = rng::normal_mat(&mut r, 4_000, 2, sigma);
    let loss_at = |c: [f64; 2]| {
        let q = SmoothedMixture::new(MixtureSpec::new(vec![c.to_vec()], 1e-6).unwrap(), sigma).unwrap();
        generator_objective_grad(&point_mass_generator(&c), &q, &p, &z, &eta).unwrap().value
    };
    let at_mode = loss_at([0.0, 0.0]);
    let far = loss_at([2.5, 0.0]);
    assert!(far > at_mode, "{far} vs {at_mode}");
    // Both are KL(N(c, σ²I) ‖ N(0, 1.25·I)); the offset adds ‖c‖²/2.5 = 2.5.
    assert!((far - at_mode - 2.5).abs() < 0.1, "{}", far - at_mode);
}

#[test]
fn generator_step_moves_toward_target_moments() {
    // Identity generator on N(0, 1) against target N(2, 0.5²), with the exact energy of
    // the current generator as q: the mean rises and the spread shrinks.
    let sigma = 0.3;
    let cfg = MlpConfig::generator(1, 1, 1, 4);
    let mut gen = GeneratorModel::new(MlpParams::identity(cfg).unwrap());
    let p = SmoothedMixture::new(MixtureSpec::new(vec![vec![2.0]], 0.5).unwrap(), sigma).unwrap();
    let q = SmoothedMixture::new(MixtureSpec::new(vec![vec![0.0]], 1.0).unwrap(), sigma).unwrap();
    let mut r = rng::stream(4, "batch", 0);
    let z = rng::normal_mat(&mut r, 4_000, 1, 1.0);
    let eta = rng::normal_mat(&mut r, 4_000, 1, sigma);
    let moments = |g: &GeneratorModel| {
        let x = g.forward(&z).unwrap().into_vec();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        (mean, var.sqrt())
    };
    let (m0, s0) = moments(&gen);
    let grad = generator_objective_grad(&gen, &q, &p, &z, &eta).unwrap().param_grads;
    for (v, g) in gen.params_mut().values_mut().iter_mut().zip(&grad) {
        *v -= 1e-3 * g;
    }
    let (m1, s1) = moments(&gen);
    assert!(m1 > m0, "mean {m0} -> {m1}");
    assert!(s1 < s0, "std {s0} -> {s1}");
}

#[test]
fn refreshed_q_tracks_a_frozen_linear_generator() {
    // Identity generator: the generated data is N(0, I), so q̃ = N(0, (1+σ²)·I).
    let sigma = 0.5;
    let mut cfg = GenTrainConfig::new(sigma, 2, 1, 5);
    cfg.gen_lr = 0.0;
    cfg.dde_lr = 2e-3;
    cfg.q_init_steps = 0;
    cfg.batch_size = 512;
    let mut state = GenTrainState::new(MlpConfig::generator(2, 2, 1, 4), MlpConfig::dde(2, 2, 16), &cfg).unwrap();
    state.generator = GeneratorModel::new(MlpParams::identity(MlpConfig::generator(2, 2, 1, 4)).unwrap());
    init_q_dde(&mut state, &cfg).unwrap();
    let mut losses = Vec::new();
    for k in 0..600 {
        losses.push(refresh_q_dde(&mut state, &cfg, &mut rng::stream(6, "refresh", k)).unwrap());
    }
    let early = losses[..50].iter().sum::<f64>() / 50.0;
    let late = losses[550..].iter().sum::<f64>() / 50.0;
    assert!(late <= early, "{early} -> {late}");
    for x in [[1.0, 0.0], [0.0, -1.0], [0.7, 0.7]] {
        let g = state.q_dde.score(&x).unwrap();
        for d in 0..2 {
            assert!((g[d] + x[d] / (1.0 + sigma * sigma)).abs() < 0.1, "score at {x:?}: {g:?}");
        }
    }
}

fn distance_to_spirals(x: &[f64], curve: &[[f64; 2]]) -> f64 {
    curve.iter().map(|c| ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)
}

#[test]
fn spirals_smoothing_and_denoising() {
    let data = two_spirals(20_000, 0.05, 7).unwrap();
    let sharp = train(&data, 0.05, 4_000, 8);
    let smooth = train(&data, 0.2, 4_000, 9);
    let bounds = [(-2.5, 2.5), (-2.5, 2.5)];
    let tv_sharp = density_grid(&sharp, bounds, [64, 64]).unwrap().total_variation();
    let tv_smooth = density_grid(&smooth, bounds, [64, 64]).unwrap().total_variation();
    assert!(tv_smooth < tv_sharp, "total variation {tv_smooth} vs {tv_sharp}");

    let curve: Vec<[f64; 2]> =
        (0..=4_000).flat_map(|k| [0, 1].map(|arm| TwoSpirals::arm_point(k as f64 / 4_000.0, arm))).collect();
    let mut r = rng::stream(10, "noisy", 0);
    let clean = TwoSpirals { noise_std: 0.0 };
    let x = dde_core::datasets::SampleSource::sample(&clean, 1_000, &mut r);
    let mut noisy = rng::normal_mat(&mut r, 1_000, 2, 0.2);
    noisy.add_assign(&x);
    let denoised = smooth.denoise_batch(&noisy).unwrap();
    let mean_dist = |m: &Mat| m.iter_rows().map(|p| distance_to_spirals(p, &curve)).sum::<f64>() / m.rows() as f64;
    let (before, after) = (mean_dist(&noisy), mean_dist(&denoised));
    assert!(after < before, "mean distance {before} -> {after}");
}
