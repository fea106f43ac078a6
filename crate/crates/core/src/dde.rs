//! Denoising density estimators.
//!
//! A scalar network `s(x; θ)` is trained so that its input gradient predicts the noise
//! that was added to a data point:
//!
//! ```text
//! L(s) = E_{x~p, η~N(0,σ²I)} ‖∇ₓ s(x+η) + η/σ²‖²
//! ```
//!
//! The minimizer satisfies `s(x) = log p̃(x) + C` where `p̃` is the data density blurred
//! by the noise kernel, so differences `s(a) − s(b)` are log-density ratios.

use serde::{Deserialize, Serialize};

use crate::datasets::SampleSource;
use crate::diffengine::{self, ExprGraph, GradReport, Mat};
use crate::error::{Error, Result};
use crate::network::{self, init_mlp, MlpConfig, MlpParams, Weights};
use crate::optim::Adam;
use crate::rng::{self, Rng};

/// Rows evaluated per graph run when a loss is computed over a large sample.
pub const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct DdeModel {
    params: MlpParams,
    sigma_eta: f64,
}

impl DdeModel {
    pub fn new(params: MlpParams, sigma_eta: f64) -> Result<Self> {
        if params.config().out_dim != 1 {
            return Err(Error::config("energy network must have out_dim = 1"));
        }
        check_sigma(sigma_eta)?;
        Ok(DdeModel { params, sigma_eta })
    }

    pub fn init(config: MlpConfig, sigma_eta: f64, seed: u64) -> Result<Self> {
        Self::new(init_mlp(&config, seed)?, sigma_eta)
    }

    pub fn config(&self) -> &MlpConfig {
        self.params.config()
    }

    pub fn dim(&self) -> usize {
        self.config().in_dim
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut MlpParams {
        &mut self.params
    }

    pub fn sigma_eta(&self) -> f64 {
        self.sigma_eta
    }

    pub fn set_sigma_eta(&mut self, sigma: f64) -> Result<()> {
        check_sigma(sigma)?;
        self.sigma_eta = sigma;
        Ok(())
    }

    /// `log p̃(x) + C`. Only differences between evaluations are meaningful.
    pub fn log_density_unnormalized(&self, x: &[f64]) -> Result<f64> {
        network::dde_forward(&self.params, x)
    }

    pub fn log_density_batch(&self, x: &Mat) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(EVAL_CHUNK) {
            let chunk = x.slice_rows(start, (start + EVAL_CHUNK).min(x.rows()));
            out.extend(network::dde_forward_batch(&self.params, &chunk)?);
        }
        Ok(out)
    }

    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        network::dde_score(&self.params, x)
    }

    pub fn score_batch(&self, x: &Mat) -> Result<Mat> {
        if x.rows() <= EVAL_CHUNK {
            return network::dde_score_batch(&self.params, x);
        }
        let mut out = Mat::zeros(x.rows(), x.cols());
        for start in (0..x.rows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(x.rows());
            let g = network::dde_score_batch(&self.params, &x.slice_rows(start, end))?;
            out.as_mut_slice()[start * x.cols()..end * x.cols()].copy_from_slice(g.as_slice());
        }
        Ok(out)
    }

    /// Tweedie denoiser `x + σ²·∇ₓ s(x)`.
    pub fn denoise(&self, x: &[f64]) -> Result<Vec<f64>> {
        let s2 = self.sigma_eta * self.sigma_eta;
        Ok(self.score(x)?.iter().zip(x).map(|(g, xi)| xi + s2 * g).collect())
    }

    pub fn denoise_batch(&self, x: &Mat) -> Result<Mat> {
        let s2 = self.sigma_eta * self.sigma_eta;
        let g = self.score_batch(x)?;
        Ok(x.zip_map(&g, |xi, gi| xi + s2 * gi))
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("noise level must be positive, got {sigma}")));
    }
    Ok(())
}

/// Loss graph for one noise level. Data slot 0 holds the noised points `x+η`, slot 1 the noise `η`.
/// Parameters of the energy network sit at offset 0.
pub fn dde_loss_graph(config: &MlpConfig, sigma: f64) -> Result<ExprGraph> {
    check_sigma(sigma)?;
    let mut g = ExprGraph::new();
    let y = g.data(0, config.in_dim);
    let eta = g.data(1, config.in_dim);
    let s = network::build_mlp(config, &mut g, y, Weights::Trainable { base: 0 });
    let grad = g.append_input_tangent(s, 0)?;
    let target = g.stack_columns(eta);
    let target = g.scale(target, 1.0 / (sigma * sigma));
    let residual = g.add(grad, target);
    let sq = g.square(residual);
    let total = g.sum(sq);
    // The 1/batch factor is applied by the caller, which knows the row count.
    g.set_output(total);
    Ok(g)
}

/// Mean DDE loss and parameter gradient for explicit noise draws.
pub fn dde_loss_grad(params: &MlpParams, batch: &Mat, eta: &Mat, sigma: f64) -> Result<GradReport> {
    let graph = dde_loss_graph(params.config(), sigma)?;
    loss_grad_with_graph(&graph, params, batch, eta)
}

fn loss_grad_with_graph(graph: &ExprGraph, params: &MlpParams, batch: &Mat, eta: &Mat) -> Result<GradReport> {
    check_batch(params.config(), batch, eta)?;
    let y = batch.zip_map(eta, |a, b| a + b);
    let mut rep = diffengine::param_gradient_of_loss(graph, params.values(), &[&y, eta])?;
    let inv = 1.0 / batch.rows() as f64;
    rep.value *= inv;
    rep.param_grads.iter_mut().for_each(|g| *g *= inv);
    Ok(rep)
}

fn check_batch(config: &MlpConfig, batch: &Mat, eta: &Mat) -> Result<()> {
    if batch.rows() == 0 {
        return Err(Error::contract("DDE loss needs a non-empty batch"));
    }
    if batch.cols() != config.in_dim {
        return Err(Error::config(format!(
            "batch has {} dimensions, network expects {}",
            batch.cols(),
            config.in_dim
        )));
    }
    if eta.shape() != batch.shape() {
        return Err(Error::config("noise and batch shapes differ"));
    }
    Ok(())
}

/// Mean DDE loss for explicit noise draws, evaluated in chunks for large samples.
pub fn dde_loss_with_noise(model: &DdeModel, batch: &Mat, eta: &Mat, sigma: f64) -> Result<f64> {
    check_batch(model.config(), batch, eta)?;
    let graph = dde_loss_graph(model.config(), sigma)?;
    let mut total = 0.0;
    for start in (0..batch.rows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(batch.rows());
        let (b, e) = (batch.slice_rows(start, end), eta.slice_rows(start, end));
        let y = b.zip_map(&e, |a, n| a + n);
        total += diffengine::evaluate(&graph, model.params().values(), &[&y, &e])?.get(0, 0);
    }
    Ok(total / batch.rows() as f64)
}

/// Monte-Carlo DDE loss with one fresh noise draw per sample.
pub fn dde_loss(model: &DdeModel, batch: &Mat, sigma: f64, rng: &mut Rng) -> Result<f64> {
    check_sigma(sigma)?;
    let eta = rng::normal_mat(rng, batch.rows(), batch.cols(), sigma);
    dde_loss_with_noise(model, batch, &eta, sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayKind {
    /// Divide by the factor every interval.
    #[default]
    Geometric,
    /// Step linearly from the start value to the end value over the run, one step per interval.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub factor: f64,
    pub every_steps: u64,
}

impl Default for LrDecay {
    fn default() -> Self {
        LrDecay { factor: 1.0, every_steps: u64::MAX }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdeTrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    #[serde(default)]
    pub lr_decay: LrDecay,
    pub sigma_start: f64,
    pub sigma_end: f64,
    #[serde(default = "default_sigma_factor")]
    pub sigma_decay_factor: f64,
    #[serde(default = "default_sigma_every")]
    pub sigma_decay_every: u64,
    #[serde(default)]
    pub sigma_decay: DecayKind,
    #[serde(default)]
    pub seed: u64,
}

fn default_sigma_factor() -> f64 {
    1.1
}

fn default_sigma_every() -> u64 {
    1000
}

impl DdeTrainConfig {
    /// Fixed noise level, no decay.
    pub fn constant(sigma: f64, steps: u64, batch_size: usize, lr: f64, seed: u64) -> Self {
        DdeTrainConfig {
            batch_size,
            steps,
            lr,
            lr_decay: LrDecay::default(),
            sigma_start: sigma,
            sigma_end: sigma,
            sigma_decay_factor: default_sigma_factor(),
            sigma_decay_every: default_sigma_every(),
            sigma_decay: DecayKind::Geometric,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(self.sigma_end > 0.0 && self.sigma_end.is_finite()) {
            problems.push(format!("sigma_end must be positive, got {}", self.sigma_end));
        }
        if !(self.sigma_start >= self.sigma_end && self.sigma_start.is_finite()) {
            problems.push(format!(
                "sigma_start ({}) must be at least sigma_end ({})",
                self.sigma_start, self.sigma_end
            ));
        }
        if self.sigma_decay == DecayKind::Geometric && !(self.sigma_decay_factor >= 1.0) {
            problems.push("sigma_decay_factor must be at least 1".to_string());
        }
        if self.sigma_decay_every == 0 {
            problems.push("sigma_decay_every must be positive".to_string());
        }
        if !(self.lr_decay.factor >= 1.0) || self.lr_decay.every_steps == 0 {
            problems.push("lr_decay needs factor >= 1 and every_steps > 0".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule {
            start: self.sigma_start,
            end: self.sigma_end,
            factor: self.sigma_decay_factor,
            every: self.sigma_decay_every,
            kind: self.sigma_decay,
            total_steps: self.steps,
            lr: self.lr,
            lr_decay: self.lr_decay.clone(),
        }
    }
}

/// Per-step noise level and learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    start: f64,
    end: f64,
    factor: f64,
    every: u64,
    kind: DecayKind,
    total_steps: u64,
    lr: f64,
    lr_decay: LrDecay,
}

impl NoiseSchedule {
    pub fn constant(sigma: f64, lr: f64) -> Self {
        DdeTrainConfig::constant(sigma, 0, 1, lr, 0).schedule()
    }

    /// Non-increasing in `step`, never below the end value.
    pub fn sigma_at(&self, step: u64) -> f64 {
        let k = step / self.every;
        let s = match self.kind {
            DecayKind::Geometric => self.start / self.factor.powf(k as f64),
            DecayKind::Linear => {
                let intervals = (self.total_steps / self.every).max(1);
                let frac = (k as f64 / intervals as f64).min(1.0);
                self.start + (self.end - self.start) * frac
            }
        };
        s.max(self.end)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let k = step / self.lr_decay.every_steps;
        self.lr / self.lr_decay.factor.powf(k as f64)
    }

    pub fn sigma_end(&self) -> f64 {
        self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdeOptState {
    pub step: u64,
    pub adam: Adam,
}

impl DdeOptState {
    pub fn new(param_count: usize) -> Self {
        DdeOptState { step: 0, adam: Adam::new(param_count) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdeTraceRow {
    pub step: u64,
    pub sigma: f64,
    pub loss: f64,
    pub lr: f64,
}

/// Loss graphs keyed by noise level; rebuilt only when the schedule moves.
#[derive(Default)]
pub struct LossGraphCache {
    key: Option<(u64, MlpConfig)>,
    graph: Option<ExprGraph>,
}

impl LossGraphCache {
    pub fn get(&mut self, config: &MlpConfig, sigma: f64) -> Result<&ExprGraph> {
        let key = (sigma.to_bits(), config.clone());
        if self.key.as_ref() != Some(&key) {
            self.graph = Some(dde_loss_graph(config, sigma)?);
            self.key = Some(key);
        }
        Ok(self.graph.as_ref().expect("cache filled above"))
    }
}

/// One optimizer update on a batch. Returns the loss before the update.
pub fn dde_train_step(
    model: &mut DdeModel,
    batch: &Mat,
    schedule: &NoiseSchedule,
    opt: &mut DdeOptState,
    rng: &mut Rng,
) -> Result<f64> {
    let mut cache = LossGraphCache::default();
    dde_train_step_cached(model, batch, schedule, opt, rng, &mut cache)
}

pub fn dde_train_step_cached(
    model: &mut DdeModel,
    batch: &Mat,
    schedule: &NoiseSchedule,
    opt: &mut DdeOptState,
    rng: &mut Rng,
    cache: &mut LossGraphCache,
) -> Result<f64> {
    let sigma = schedule.sigma_at(opt.step);
    let lr = schedule.lr_at(opt.step);
    let eta = rng::normal_mat(rng, batch.rows(), batch.cols(), sigma);
    let graph = cache.get(model.config(), sigma)?;
    let rep = loss_grad_with_graph(graph, model.params(), batch, &eta)?;
    opt.adam.step(model.params.values_mut(), &rep.param_grads, lr)?;
    model.sigma_eta = sigma;
    opt.step += 1;
    Ok(rep.value)
}

/// Resumable training loop. Step `k` draws its batch and noise from the stream
/// `(seed, "dde-step", k)`, so stopping and resuming reproduces an uninterrupted run.
pub struct DdeTrainer {
    pub model: DdeModel,
    pub opt: DdeOptState,
    pub cfg: DdeTrainConfig,
    cache: LossGraphCache,
}

impl DdeTrainer {
    pub fn new(net: MlpConfig, cfg: DdeTrainConfig) -> Result<Self> {
        net.validate()?;
        cfg.validate()?;
        if net.out_dim != 1 {
            return Err(Error::config("energy network must have out_dim = 1"));
        }
        let model = DdeModel::init(net, cfg.sigma_start, rng::derive_seed(cfg.seed, "dde-init", 0))?;
        let opt = DdeOptState::new(model.params().len());
        Ok(DdeTrainer { model, opt, cfg, cache: LossGraphCache::default() })
    }

    pub fn resume(model: DdeModel, opt: DdeOptState, cfg: DdeTrainConfig) -> Result<Self> {
        cfg.validate()?;
        if opt.adam.m.len() != model.params().len() {
            return Err(Error::config("optimizer state does not match the model"));
        }
        Ok(DdeTrainer { model, opt, cfg, cache: LossGraphCache::default() })
    }

    pub fn step(&mut self, data: &dyn SampleSource) -> Result<DdeTraceRow> {
        let schedule = self.cfg.schedule();
        let step = self.opt.step;
        let mut r = rng::stream(self.cfg.seed, "dde-step", step);
        let batch = data.sample(self.cfg.batch_size, &mut r);
        let lr = schedule.lr_at(step);
        let loss = dde_train_step_cached(&mut self.model, &batch, &schedule, &mut self.opt, &mut r, &mut self.cache)?;
        Ok(DdeTraceRow { step, sigma: self.model.sigma_eta, loss, lr })
    }

    /// Train until `cfg.steps`, calling `on_step` after every update.
    pub fn run(
        &mut self,
        data: &dyn SampleSource,
        mut on_step: impl FnMut(&DdeTrainer, &DdeTraceRow) -> Result<()>,
    ) -> Result<Vec<DdeTraceRow>> {
        if data.dim() != self.model.dim() {
            return Err(Error::config(format!(
                "data has {} dimensions, network expects {}",
                data.dim(),
                self.model.dim()
            )));
        }
        let mut trace = Vec::new();
        while self.opt.step < self.cfg.steps {
            let row = self.step(data)?;
            on_step(self, &row)?;
            trace.push(row);
        }
        // Tag the model with the noise level it finished at.
        let final_sigma = self.cfg.schedule().sigma_at(self.cfg.steps.saturating_sub(1));
        self.model.set_sigma_eta(final_sigma)?;
        Ok(trace)
    }
}

pub fn train_dde(data: &dyn SampleSource, net: &MlpConfig, cfg: &DdeTrainConfig) -> Result<(DdeModel, Vec<DdeTraceRow>)> {
    let mut trainer = DdeTrainer::new(net.clone(), cfg.clone())?;
    let trace = trainer.run(data, |_, _| Ok(()))?;
    Ok((trainer.model, trace))
}
