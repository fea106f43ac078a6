//! One-step generators trained by reverse-KL descent against two energy networks.
//!
//! Each outer step moves the generator `g(z; φ)` down the gradient of
//! `E_{x = g(z)+η}[s_q(x) − s_p(x)]`, where `s_p` is a frozen energy of the data and `s_q`
//! an energy of the generator's own (noised) output. `s_q` is then refreshed with a few
//! DDE updates on fresh generator samples. Unknown additive constants in either energy
//! drop out of the φ-gradient.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datasets::MixtureSpec;
use crate::dde::{self, DdeModel, DdeOptState, LossGraphCache, NoiseSchedule};
use crate::diffengine::{self, ExprGraph, GradReport, Mat};
use crate::error::{Error, Result};
use crate::evaluation::{self, sample_moments, Energy};
use crate::samplers::ScoreField;
use crate::network::{self, init_mlp, MlpConfig, MlpParams, Weights};
use crate::optim::Adam;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    params: MlpParams,
}

impl GeneratorModel {
    pub fn new(params: MlpParams) -> Self {
        GeneratorModel { params }
    }

    pub fn init(config: MlpConfig, seed: u64) -> Result<Self> {
        Ok(GeneratorModel { params: init_mlp(&config, seed)? })
    }

    pub fn latent_dim(&self) -> usize {
        self.params.config().in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.params.config().out_dim
    }

    pub fn config(&self) -> &MlpConfig {
        self.params.config()
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut MlpParams {
        &mut self.params
    }

    /// `g(z)` for each row of `z`.
    pub fn forward(&self, z: &Mat) -> Result<Mat> {
        if z.rows() <= dde::EVAL_CHUNK {
            return network::generator_forward_batch(&self.params, z);
        }
        let d = self.out_dim();
        let mut out = Mat::zeros(z.rows(), d);
        for start in (0..z.rows()).step_by(dde::EVAL_CHUNK) {
            let end = (start + dde::EVAL_CHUNK).min(z.rows());
            let x = network::generator_forward_batch(&self.params, &z.slice_rows(start, end))?;
            out.as_mut_slice()[start * d..end * d].copy_from_slice(x.as_slice());
        }
        Ok(out)
    }

    /// `n` samples `g(z)`, `z ~ N(0, I)`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Mat> {
        let z = rng::normal_mat(rng, n, self.latent_dim(), 1.0);
        self.forward(&z)
    }
}

/// How generator weights start before training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenInit {
    /// Uniform `±1/√fan_in` weights, zero biases.
    #[default]
    Random,
    /// Close to the affine map `z ↦ mean + L·z` with `L Lᵀ` the data covariance.
    DataMoments,
}

/// Damping applied to the randomly initialised residual branches by [`init_from_moments`].
pub const MOMENT_INIT_BRANCH_SCALE: f64 = 0.1;

/// Reshape a randomly initialised residual generator so that `g(z) ≈ mean + L·z`, where
/// `mean` and `L Lᵀ` are the sample mean and covariance of `data`. The input layer embeds
/// `z` into the first channels, the output layer applies `L`, and each residual branch's
/// outer map is scaled by [`MOMENT_INIT_BRANCH_SCALE`].
pub fn init_from_moments(gen: &mut GeneratorModel, data: &Mat) -> Result<()> {
    let cfg = gen.config().clone();
    let (m, d) = (cfg.in_dim, cfg.out_dim);
    if !cfg.residual {
        return Err(Error::Unsupported("moment initialisation needs a residual generator".into()));
    }
    if cfg.channels < m {
        return Err(Error::config("moment initialisation needs channels >= latent_dim"));
    }
    if data.cols() != d || data.rows() < 2 {
        return Err(Error::config("moment initialisation needs at least two points of the generator's dimension"));
    }
    let (mean, cov) = sample_moments(data);
    let chol = DMatrix::from_row_slice(d, d, &cov)
        .cholesky()
        .ok_or_else(|| Error::Numeric("data covariance is not positive definite".into()))?;
    let l = chol.l();
    let layout = cfg.layout();
    let vals = gen.params_mut().values_mut();
    let (first, last) = (&layout[0], &layout[layout.len() - 1]);
    for slot in [first, last] {
        vals[slot.offset..slot.offset + slot.len()].iter_mut().for_each(|v| *v = 0.0);
    }
    for i in 0..m {
        vals[first.offset + i * first.fan_in + i] = 1.0;
    }
    for r in 0..d {
        for c in 0..m.min(d) {
            vals[last.offset + r * last.fan_in + c] = l[(r, c)];
        }
        vals[last.bias_range().start + r] = mean[r];
    }
    for slot in layout.iter().filter(|s| s.name.ends_with(".outer")) {
        vals[slot.weight_range()].iter_mut().for_each(|v| *v *= MOMENT_INIT_BRANCH_SCALE);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenTrainConfig {
    pub gen_lr: f64,
    pub dde_inner_steps: usize,
    pub dde_lr: f64,
    pub batch_size: usize,
    pub outer_steps: u64,
    pub latent_dim: usize,
    pub sigma_eta: f64,
    #[serde(default)]
    pub seed: u64,
    /// DDE updates fitting the first `s_q` to the untrained generator.
    #[serde(default = "default_q_init_steps")]
    pub q_init_steps: u64,
    /// Outer steps between trace rows.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Generator samples used for each trace diagnostic.
    #[serde(default = "default_diagnostic_samples")]
    pub diagnostic_samples: usize,
    #[serde(default)]
    pub init: GenInit,
}

fn default_q_init_steps() -> u64 {
    500
}

fn default_checkpoint_every() -> u64 {
    200
}

fn default_diagnostic_samples() -> usize {
    10_000
}

impl GenTrainConfig {
    pub fn new(sigma_eta: f64, latent_dim: usize, outer_steps: u64, seed: u64) -> Self {
        GenTrainConfig {
            gen_lr: 1e-4,
            dde_inner_steps: 10,
            dde_lr: 1e-3,
            batch_size: 512,
            outer_steps,
            latent_dim,
            sigma_eta,
            seed,
            q_init_steps: default_q_init_steps(),
            checkpoint_every: default_checkpoint_every(),
            diagnostic_samples: default_diagnostic_samples(),
            init: GenInit::Random,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.dde_inner_steps == 0 {
            problems.push("dde_inner_steps must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.latent_dim == 0 {
            problems.push("latent_dim must be at least 1".to_string());
        }
        if !(self.sigma_eta > 0.0 && self.sigma_eta.is_finite()) {
            problems.push(format!("sigma_eta must be positive, got {}", self.sigma_eta));
        }
        if !(self.gen_lr >= 0.0) || !(self.dde_lr >= 0.0) {
            problems.push("learning rates must be non-negative".to_string());
        }
        if self.checkpoint_every == 0 {
            problems.push("checkpoint_every must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn same_sigma(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

fn check_pair(q: &DdeModel, p: &DdeModel) -> Result<()> {
    if !same_sigma(q.sigma_eta(), p.sigma_eta()) {
        return Err(Error::config(format!(
            "noise levels differ: generated-data energy σ = {}, data energy σ = {}",
            q.sigma_eta(),
            p.sigma_eta()
        )));
    }
    if q.dim() != p.dim() {
        return Err(Error::config("energy networks have different input dimensions"));
    }
    Ok(())
}

/// Graph of `Σ_b s_q(g(z_b)+η_b) − s_p(g(z_b)+η_b)`; data slot 0 is `z`, slot 1 is `η`.
/// Generator weights are trainable at offset 0, both energies are frozen constants.
pub fn generator_loss_graph(gen: &MlpConfig, q: &DdeModel, p: &DdeModel) -> Result<ExprGraph> {
    check_pair(q, p)?;
    if gen.out_dim != p.dim() {
        return Err(Error::config(format!(
            "generator emits {} dimensions, energies expect {}",
            gen.out_dim,
            p.dim()
        )));
    }
    let mut g = ExprGraph::new();
    let z = g.data(0, gen.in_dim);
    let eta = g.data(1, gen.out_dim);
    let x = network::build_mlp(gen, &mut g, z, Weights::Trainable { base: 0 });
    let noised = g.add(x, eta);
    let sq = network::build_mlp(q.config(), &mut g, noised, Weights::Frozen(q.params().values()));
    let sp = network::build_mlp(p.config(), &mut g, noised, Weights::Frozen(p.params().values()));
    let diff = g.sub(sq, sp);
    let total = g.sum(diff);
    g.set_output(total);
    Ok(g)
}

/// Log-density and score on batches: what each side of the generator objective needs.
pub trait ScoredEnergy: Energy + ScoreField {}

impl<T: Energy + ScoreField + ?Sized> ScoredEnergy for T {}

/// Batch mean of `s_q(x̃) − s_p(x̃)` at `x̃ = g(z)+η`, and its gradient with respect to φ.
///
/// Both energies are frozen, so the gradient only flows through `g`:
/// `∇_φ (1/B) Σ_b ⟨∇s_q(x̃_b) − ∇s_p(x̃_b), g(z_b)⟩` with the score difference held fixed.
/// This equals the gradient of [`generator_loss_graph`] without building either energy
/// into the generator's graph.
pub fn generator_objective_grad(
    gen: &GeneratorModel,
    q: &dyn ScoredEnergy,
    p: &dyn ScoredEnergy,
    z: &Mat,
    eta: &Mat,
) -> Result<GradReport> {
    let b = z.rows();
    if b == 0 || b != eta.rows() {
        return Err(Error::contract("latent and noise batches must be non-empty and equally long"));
    }
    let d = gen.out_dim();
    if Energy::dim(q) != d || Energy::dim(p) != d {
        return Err(Error::config(format!("generator emits {d} dimensions, energies expect {}", Energy::dim(p))));
    }
    let mut noised = gen.forward(z)?;
    noised.add_assign(eta);
    let inv = 1.0 / b as f64;
    let value = q
        .log_density_batch(&noised)?
        .iter()
        .zip(p.log_density_batch(&noised)?)
        .map(|(a, c)| a - c)
        .sum::<f64>()
        * inv;
    let weights = q.score_batch(&noised)?.zip_map(&p.score_batch(&noised)?, |a, c| (a - c) * inv);

    let cfg = gen.config();
    let mut g = ExprGraph::new();
    let zn = g.data(0, cfg.in_dim);
    let w = g.data(1, d);
    let x = network::build_mlp(cfg, &mut g, zn, Weights::Trainable { base: 0 });
    let prod = g.mul(x, w);
    let total = g.sum(prod);
    g.set_output(total);
    let mut rep = diffengine::param_gradient_of_loss(&g, gen.params().values(), &[z, &weights])?;
    rep.value = value;
    Ok(rep)
}

/// [`generator_objective_grad`] for two energy networks, which must share σ and dimension.
pub fn generator_loss_grad(gen: &GeneratorModel, q: &DdeModel, p: &DdeModel, z: &Mat, eta: &Mat) -> Result<GradReport> {
    check_pair(q, p)?;
    generator_objective_grad(gen, q, p, z, eta)
}

pub fn generator_loss(gen: &GeneratorModel, q: &DdeModel, p: &DdeModel, z: &Mat, eta: &Mat) -> Result<f64> {
    Ok(generator_loss_grad(gen, q, p, z, eta)?.value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenTraceRow {
    pub outer_step: u64,
    /// Mean generator loss over the interval.
    pub gen_loss: f64,
    /// Mean `s_q` DDE loss over the interval's refresh steps.
    pub q_dde_loss: f64,
    pub diagnostic_kl: f64,
}

/// Everything needed to continue Algorithm-style training.
#[derive(Clone, Debug)]
pub struct GenTrainState {
    pub generator: GeneratorModel,
    pub q_dde: DdeModel,
    pub step: u64,
    pub gen_opt: Adam,
    pub q_opt: DdeOptState,
    pub trace: Vec<GenTraceRow>,
}

impl GenTrainState {
    /// Fresh generator and `s_q`; `s_q` still has to be fitted (see [`init_q_dde`]).
    pub fn new(gen_cfg: MlpConfig, q_cfg: MlpConfig, cfg: &GenTrainConfig) -> Result<Self> {
        cfg.validate()?;
        if gen_cfg.in_dim != cfg.latent_dim {
            return Err(Error::config(format!(
                "generator input is {}, latent_dim is {}",
                gen_cfg.in_dim, cfg.latent_dim
            )));
        }
        if q_cfg.in_dim != gen_cfg.out_dim {
            return Err(Error::config("generated-data energy must take generator outputs"));
        }
        let generator = GeneratorModel::init(gen_cfg, rng::derive_seed(cfg.seed, "gen-init", 0))?;
        let q_dde = DdeModel::init(q_cfg, cfg.sigma_eta, rng::derive_seed(cfg.seed, "q-init", 0))?;
        let gen_opt = Adam::new(generator.params().len());
        let q_opt = DdeOptState::new(q_dde.params().len());
        Ok(GenTrainState { generator, q_dde, step: 0, gen_opt, q_opt, trace: Vec::new() })
    }
}

fn q_schedule(cfg: &GenTrainConfig) -> NoiseSchedule {
    NoiseSchedule::constant(cfg.sigma_eta, cfg.dde_lr)
}

/// Fit `s_q` to the current generator for `cfg.q_init_steps` DDE updates.
pub fn init_q_dde(state: &mut GenTrainState, cfg: &GenTrainConfig) -> Result<()> {
    let schedule = q_schedule(cfg);
    let mut cache = LossGraphCache::default();
    for k in 0..cfg.q_init_steps {
        let mut r = rng::stream(cfg.seed, "q-init-step", k);
        let batch = state.generator.sample(cfg.batch_size, &mut r)?;
        dde::dde_train_step_cached(&mut state.q_dde, &batch, &schedule, &mut state.q_opt, &mut r, &mut cache)?;
    }
    Ok(())
}

/// One descent step on φ using samples `g(z)+η`. Both energies are left untouched.
/// `p` must be smoothed at `cfg.sigma_eta`.
pub fn generator_step(state: &mut GenTrainState, p: &dyn ScoredEnergy, cfg: &GenTrainConfig, rng: &mut Rng) -> Result<f64> {
    let z = rng::normal_mat(rng, cfg.batch_size, state.generator.latent_dim(), 1.0);
    let eta = rng::normal_mat(rng, cfg.batch_size, state.generator.out_dim(), cfg.sigma_eta);
    let rep = generator_objective_grad(&state.generator, &state.q_dde, p, &z, &eta)?;
    state.gen_opt.step(state.generator.params_mut().values_mut(), &rep.param_grads, cfg.gen_lr)?;
    Ok(rep.value)
}

/// `cfg.dde_inner_steps` DDE updates of `s_q` on samples from the current generator.
/// Returns the mean pre-update loss.
pub fn refresh_q_dde(state: &mut GenTrainState, cfg: &GenTrainConfig, rng: &mut Rng) -> Result<f64> {
    if cfg.dde_inner_steps == 0 {
        return Err(Error::contract("dde_inner_steps must be at least 1"));
    }
    let schedule = q_schedule(cfg);
    let mut cache = LossGraphCache::default();
    let mut total = 0.0;
    for _ in 0..cfg.dde_inner_steps {
        let batch = state.generator.sample(cfg.batch_size, rng)?;
        total += dde::dde_train_step_cached(&mut state.q_dde, &batch, &schedule, &mut state.q_opt, rng, &mut cache)?;
    }
    Ok(total / cfg.dde_inner_steps as f64)
}

/// What the per-checkpoint diagnostic compares generator samples against.
#[derive(Clone, Debug, PartialEq)]
pub enum DiagnosticTarget {
    /// Closed-form KL between a Gaussian fitted to the samples and this Gaussian.
    Gaussian { mean: Vec<f64>, cov: Vec<f64> },
    /// Reverse KL of the mode histogram against uniform.
    Mixture(MixtureSpec),
}

impl DiagnosticTarget {
    pub fn isotropic(mean: Vec<f64>, std: f64) -> Self {
        let d = mean.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = std * std;
        }
        DiagnosticTarget::Gaussian { mean, cov }
    }

    /// Gaussian with the data's own moments, for targets without a tractable density.
    pub fn moment_fit(data: &Mat) -> Self {
        let (mean, cov) = sample_moments(data);
        DiagnosticTarget::Gaussian { mean, cov }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlDiagnostic {
    pub kl: f64,
    /// The fitted covariance was singular and had 1e-6·I added.
    pub regularized: bool,
    pub method: String,
}

/// KL(N(μ₀,Σ₀) ‖ N(μ₁,Σ₁)).
pub fn gaussian_kl(mean0: &[f64], cov0: &[f64], mean1: &[f64], cov1: &[f64]) -> Result<f64> {
    let d = mean0.len();
    let s0 = DMatrix::from_row_slice(d, d, cov0);
    let s1 = DMatrix::from_row_slice(d, d, cov1);
    let c0 = s0.clone().cholesky().ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))?;
    let c1 = s1.cholesky().ok_or_else(|| Error::config("target covariance is not positive definite"))?;
    let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = c1.solve(&s0).trace();
    let diff = nalgebra::DVector::from_iterator(d, mean1.iter().zip(mean0).map(|(a, b)| a - b));
    let maha = diff.dot(&c1.solve(&diff));
    Ok(0.5 * (trace + maha - d as f64 + logdet(&c1) - logdet(&c0)))
}

pub fn reverse_kl_diagnostic(samples: &Mat, target: &DiagnosticTarget) -> Result<KlDiagnostic> {
    if samples.rows() < 2 {
        return Err(Error::contract("diagnostic needs at least two samples"));
    }
    match target {
        DiagnosticTarget::Gaussian { mean, cov } => {
            if mean.len() != samples.cols() {
                return Err(Error::config("target dimension does not match samples"));
            }
            let (m, mut c) = sample_moments(samples);
            let d = m.len();
            let singular = DMatrix::from_row_slice(d, d, &c)
                .cholesky()
                .map(|ch| ch.l().diagonal().iter().any(|v| *v < 1e-6))
                .unwrap_or(true);
            if singular {
                log::warn!("fitted covariance is singular; regularizing with 1e-6·I");
                for i in 0..d {
                    c[i * d + i] += 1e-6;
                }
            }
            let kl = gaussian_kl(&m, &c, mean, cov)?;
            Ok(KlDiagnostic { kl, regularized: singular, method: "gaussian-fit".into() })
        }
        DiagnosticTarget::Mixture(spec) => {
            let rep = evaluation::mode_coverage(samples, spec, 3.0)?;
            Ok(KlDiagnostic { kl: rep.reverse_kl, regularized: false, method: "mode-histogram".into() })
        }
    }
}

/// Run outer steps until `cfg.outer_steps`, appending a trace row every `cfg.checkpoint_every`
/// steps. Outer step `k` draws from the streams `(seed, "gen-step", k)` and `(seed, "q-refresh", k)`.
pub fn continue_training(
    state: &mut GenTrainState,
    p_dde: &DdeModel,
    cfg: &GenTrainConfig,
    target: Option<&DiagnosticTarget>,
    on_row: impl FnMut(&GenTrainState, &GenTraceRow) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    check_pair(&state.q_dde, p_dde)?;
    if !same_sigma(cfg.sigma_eta, p_dde.sigma_eta()) {
        return Err(Error::config(format!(
            "training noise σ = {} differs from the data energy's σ = {}",
            cfg.sigma_eta,
            p_dde.sigma_eta()
        )));
    }
    continue_training_against(state, p_dde, cfg, target, on_row)
}

/// [`continue_training`] against any data energy. The caller guarantees that `p` is
/// smoothed at `cfg.sigma_eta`.
pub fn continue_training_against(
    state: &mut GenTrainState,
    p: &dyn ScoredEnergy,
    cfg: &GenTrainConfig,
    target: Option<&DiagnosticTarget>,
    mut on_row: impl FnMut(&GenTrainState, &GenTraceRow) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if Energy::dim(p) != state.generator.out_dim() {
        return Err(Error::config(format!(
            "data energy has {} dimensions, generator emits {}",
            Energy::dim(p),
            state.generator.out_dim()
        )));
    }
    let (mut gen_acc, mut q_acc, mut count) = (0.0, 0.0, 0u64);
    while state.step < cfg.outer_steps {
        let k = state.step;
        let mut r = rng::stream(cfg.seed, "gen-step", k);
        gen_acc += generator_step(state, p, cfg, &mut r)?;
        let mut r = rng::stream(cfg.seed, "q-refresh", k);
        q_acc += refresh_q_dde(state, cfg, &mut r)?;
        count += 1;
        state.step += 1;
        if state.step % cfg.checkpoint_every == 0 || state.step == cfg.outer_steps {
            let diagnostic_kl = match target {
                Some(t) => {
                    let mut r = rng::stream(cfg.seed, "gen-diagnostic", state.step);
                    let samples = state.generator.sample(cfg.diagnostic_samples, &mut r)?;
                    reverse_kl_diagnostic(&samples, t)?.kl
                }
                None => f64::NAN,
            };
            let row = GenTraceRow {
                outer_step: state.step,
                gen_loss: gen_acc / count as f64,
                q_dde_loss: q_acc / count as f64,
                diagnostic_kl,
            };
            on_row(state, &row)?;
            state.trace.push(row);
            gen_acc = 0.0;
            q_acc = 0.0;
            count = 0;
        }
    }
    Ok(())
}

/// Train a generator against a pre-trained data energy `p_dde`.
pub fn train_generator(
    p_dde: &DdeModel,
    gen_cfg: &MlpConfig,
    q_cfg: &MlpConfig,
    cfg: &GenTrainConfig,
    target: Option<&DiagnosticTarget>,
) -> Result<GenTrainState> {
    let mut state = GenTrainState::new(gen_cfg.clone(), q_cfg.clone(), cfg)?;
    init_q_dde(&mut state, cfg)?;
    continue_training(&mut state, p_dde, cfg, target, |_, _| Ok(()))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{GaussianSource, SampleSource};

    fn energies(seed: u64) -> (DdeModel, DdeModel) {
        let q = DdeModel::init(MlpConfig::dde(2, 2, 8), 0.3, seed).unwrap();
        let p = DdeModel::init(MlpConfig::dde(2, 2, 8), 0.3, seed + 1).unwrap();
        (q, p)
    }

    fn batch(seed: u64, n: usize) -> (Mat, Mat) {
        let mut r = rng::stream(seed, "t", 0);
        (rng::normal_mat(&mut r, n, 2, 1.0), rng::normal_mat(&mut r, n, 2, 0.3))
    }

    #[test]
    fn identical_energies_cancel_exactly() {
        let (p, _) = energies(1);
        let gen = GeneratorModel::init(MlpConfig::generator(2, 2, 2, 8), 3).unwrap();
        let (z, eta) = batch(2, 64);
        let rep = generator_loss_grad(&gen, &p, &p, &z, &eta).unwrap();
        assert_eq!(rep.value, 0.0);
        assert!(rep.param_grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn energy_constants_do_not_touch_gradient() {
        let (q, p) = energies(4);
        let mut shifted = q.clone();
        let last = q.config().layout().pop().unwrap();
        shifted.params_mut().values_mut()[last.bias_range()][0] += 10.0;
        let gen = GeneratorModel::init(MlpConfig::generator(2, 2, 2, 8), 5).unwrap();
        let (z, eta) = batch(6, 32);
        let a = generator_loss_grad(&gen, &q, &p, &z, &eta).unwrap();
        let b = generator_loss_grad(&gen, &shifted, &p, &z, &eta).unwrap();
        assert_eq!(a.param_grads, b.param_grads);
        assert!((b.value - a.value - 10.0).abs() < 1e-9);
    }

    #[test]
    fn score_form_matches_full_graph() {
        let (q, p) = energies(12);
        let gen = GeneratorModel::init(MlpConfig::generator(2, 2, 2, 8), 13).unwrap();
        let (z, eta) = batch(14, 48);
        let graph = generator_loss_graph(gen.config(), &q, &p).unwrap();
        let full = diffengine::param_gradient_of_loss(&graph, gen.params().values(), &[&z, &eta]).unwrap();
        let rep = generator_loss_grad(&gen, &q, &p, &z, &eta).unwrap();
        assert!((rep.value - full.value / 48.0).abs() < 1e-12);
        let scale = full.param_grads.iter().fold(0.0f64, |m, g| m.max(g.abs())) / 48.0;
        for (a, b) in rep.param_grads.iter().zip(&full.param_grads) {
            assert!((a - b / 48.0).abs() <= 1e-10 * scale.max(1.0), "{a} vs {}", b / 48.0);
        }
    }

    #[test]
    fn sigma_mismatch_is_config_error() {
        let (q, mut p) = energies(7);
        p.set_sigma_eta(0.5).unwrap();
        let gen = GeneratorModel::init(MlpConfig::generator(2, 2, 1, 4), 0).unwrap();
        let (z, eta) = batch(0, 4);
        assert!(matches!(generator_loss(&gen, &q, &p, &z, &eta), Err(Error::Config(_))));
    }

    #[test]
    fn zero_lr_step_leaves_generator() {
        let (q, p) = energies(8);
        let cfg = GenTrainConfig { gen_lr: 0.0, ..GenTrainConfig::new(0.3, 2, 1, 0) };
        let mut state = GenTrainState::new(MlpConfig::generator(2, 2, 1, 4), MlpConfig::dde(2, 2, 8), &cfg).unwrap();
        state.q_dde = q;
        let before = state.generator.clone();
        let q_before = state.q_dde.clone();
        generator_step(&mut state, &p, &cfg, &mut rng::stream(0, "t", 0)).unwrap();
        assert_eq!(state.generator, before);
        assert_eq!(state.q_dde, q_before);
    }

    #[test]
    fn zero_inner_steps_rejected() {
        let cfg = GenTrainConfig { dde_inner_steps: 0, ..GenTrainConfig::new(0.3, 2, 1, 0) };
        assert!(cfg.validate().is_err());
        assert!(GenTrainState::new(MlpConfig::generator(2, 2, 1, 4), MlpConfig::dde(2, 2, 8), &cfg).is_err());
    }

    #[test]
    fn gaussian_kl_closed_form() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert!((gaussian_kl(&[0.0, 0.0], &eye, &[1.0, 0.0], &eye).unwrap() - 0.5).abs() < 1e-12);
        // 1D check: KL(N(0,1)‖N(0,4)) = ½(1/4 − 1 + ln 4)
        let v = gaussian_kl(&[0.0], &[1.0], &[0.0], &[4.0]).unwrap();
        assert!((v - 0.5 * (0.25 - 1.0 + 4f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn diagnostic_self_and_shifted() {
        let mut r = rng::stream(3, "t", 0);
        let x = GaussianSource::isotropic(vec![0.0, 0.0], 1.0).sample(100_000, &mut r);
        let own = reverse_kl_diagnostic(&x, &DiagnosticTarget::isotropic(vec![0.0, 0.0], 1.0)).unwrap();
        assert!(own.kl < 0.01 && !own.regularized, "{own:?}");
        let shifted = reverse_kl_diagnostic(&x, &DiagnosticTarget::isotropic(vec![1.0, 0.0], 1.0)).unwrap();
        assert!((shifted.kl - 0.5).abs() < 0.02, "{shifted:?}");
    }

    #[test]
    fn moment_init_is_affine_once_branches_vanish() {
        let data = Mat::from_rows(&[[1.0, 2.0], [3.0, 2.0], [1.0, 6.0], [3.0, 6.0]]).unwrap();
        let mut gen = GeneratorModel::init(MlpConfig::generator(2, 2, 2, 4), 3).unwrap();
        init_from_moments(&mut gen, &data).unwrap();
        let layout = gen.config().layout();
        for slot in layout.iter().filter(|s| s.name.ends_with(".outer")) {
            gen.params_mut().values_mut()[slot.offset..slot.offset + slot.len()].iter_mut().for_each(|v| *v = 0.0);
        }
        // mean (2, 4), covariance diag(1, 4): g(z) = (2 + z₁, 4 + 2 z₂).
        let out = gen.forward(&Mat::from_rows(&[[0.0, 0.0], [1.0, -1.0]]).unwrap()).unwrap();
        let want = [2.0, 4.0, 3.0, 2.0];
        for (a, b) in out.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{:?}", out);
        }
    }

    #[test]
    fn moment_init_rejects_bad_shapes() {
        let data = Mat::from_rows(&[[1.0, 2.0], [3.0, 5.0], [0.0, 1.0]]).unwrap();
        let mut narrow = GeneratorModel::init(MlpConfig::generator(4, 2, 1, 3), 0).unwrap();
        assert!(init_from_moments(&mut narrow, &data).is_err());
        let mut flat = GeneratorModel::init(MlpConfig::generator(2, 2, 1, 4), 0).unwrap();
        assert!(init_from_moments(&mut flat, &Mat::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap()).is_err());
    }

    #[test]
    fn collapsed_samples_are_flagged() {
        let x = Mat::filled(100, 2, 0.7);
        let d = reverse_kl_diagnostic(&x, &DiagnosticTarget::isotropic(vec![0.0, 0.0], 1.0)).unwrap();
        assert!(d.regularized);
        assert!(d.kl > 10.0, "{d:?}");
    }
}
