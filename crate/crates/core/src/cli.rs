//! The `dde` command-line tool: dataset generation, training, sampling and evaluation.
//!
//! Every command reads an optional JSON [`RunConfig`], writes its outputs under `--out`
//! and lists them in `run_manifest.json`. All randomness comes from one root seed; each
//! config section gets its own seed derived as `derive_seed(root, section, 0)`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind, TrainingMeta};
use crate::datasets::{self, Dataset, GaussianSource, MixtureSpec, SampleSource};
use crate::dde::{DdeTrainConfig, DdeTrainer};
use crate::diffengine::Mat;
use crate::error::{Error, Result};
use crate::evaluation::{self, GaussianProposal};
use crate::generator::{self, DiagnosticTarget, GenInit, GenTrainConfig, GenTrainState};
use crate::network::MlpConfig;
use crate::rng;
use crate::samplers::{self, AldConfig, LevelScores};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "dde", version, about = "Denoising density estimators and one-step generators")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// JSON run configuration; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: the config's `out_dir`, else the current directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for batch evaluation.
    #[arg(long, global = true, env = "DDE_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset as CSV plus a manifest.
    GenData {
        name: DatasetName,
        n: usize,
        #[arg(long, default_value_t = 0.05)]
        noise_std: f64,
        #[arg(long, default_value_t = 5)]
        k_side: usize,
        #[arg(long, default_value_t = 2.0)]
        spacing: f64,
        #[arg(long, default_value_t = 0.1)]
        std: f64,
    },
    /// Train a denoising density estimator on the configured dataset.
    TrainDde {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop (and checkpoint) once this many steps are complete.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Train a generator against a pre-trained data energy.
    TrainGen {
        #[arg(long)]
        p_dde: PathBuf,
    },
    /// Draw samples from a generator (direct) or an energy (ALD).
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value_t = SampleMode::Direct)]
        mode: SampleMode,
        #[arg(long, value_enum, default_value_t = SampleFormat::Csv)]
        format: SampleFormat,
    },
    /// Evaluate a checkpoint and write `report.json`.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', required = true)]
        tasks: Vec<EvalTask>,
        /// Test set CSV; defaults to the configured dataset.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetName {
    TwoSpirals,
    Checkerboard,
    GaussianGrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SampleMode {
    Direct,
    Ald,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SampleFormat {
    Csv,
    Bin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Grid,
    Logz,
    Ll,
    Modes,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub dde: Option<DdeSection>,
    #[serde(default)]
    pub generator: Option<GenSection>,
    #[serde(default)]
    pub ald: Option<AldSection>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    TwoSpirals {
        n: usize,
        #[serde(default = "default_noise_std")]
        noise_std: f64,
    },
    Checkerboard {
        n: usize,
    },
    GaussianGrid {
        n: usize,
        k_side: usize,
        spacing: f64,
        std: f64,
    },
    /// Isotropic Gaussian; training draws fresh samples every batch.
    Gaussian {
        mean: Vec<f64>,
        std: f64,
        #[serde(default = "default_gaussian_n")]
        n: usize,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        standardize: bool,
    },
}

fn default_noise_std() -> f64 {
    0.05
}

fn default_gaussian_n() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub layers: usize,
    pub channels: usize,
    #[serde(default = "yes")]
    pub residual: bool,
}

fn yes() -> bool {
    true
}

impl NetSection {
    fn mlp(&self, in_dim: usize, out_dim: usize) -> MlpConfig {
        let mut c = MlpConfig::generator(in_dim, out_dim, self.layers, self.channels);
        c.residual = self.residual;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdeSection {
    pub network: NetSection,
    pub train: DdeTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    pub network: NetSection,
    /// Architecture of the generated-data energy; defaults to the data energy's.
    #[serde(default)]
    pub q_network: Option<NetSection>,
    pub train: GenTrainConfig,
    #[serde(default)]
    pub diagnostic: Option<DiagnosticConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiagnosticConfig {
    /// Closed-form KL against `N(mean, std²·I)`.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// Closed-form KL against a Gaussian fitted to the configured dataset.
    DatasetMoments,
    /// Mode-histogram reverse KL against the configured `gaussian_grid` dataset.
    Mixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AldSection {
    /// Explicit noise levels; defaults to ten geometric levels from 1.0 to the energy's σ.
    #[serde(default)]
    pub sigma_levels: Option<Vec<f64>>,
    #[serde(default = "default_ald_steps")]
    pub steps_per_level: usize,
    #[serde(default = "default_ald_step")]
    pub step_size_base: f64,
    #[serde(default)]
    pub init_bounds: Option<Vec<(f64, f64)>>,
}

fn default_ald_steps() -> usize {
    20
}

fn default_ald_step() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_bounds")]
    pub grid_bounds: [(f64, f64); 2],
    #[serde(default = "default_resolution")]
    pub grid_resolution: [usize; 2],
    #[serde(default = "default_logz_samples")]
    pub logz_samples: usize,
    #[serde(default = "default_logz_repeats")]
    pub logz_repeats: usize,
    #[serde(default)]
    pub diagonal_proposal: bool,
    #[serde(default = "default_radius")]
    pub radius_sigmas: f64,
    #[serde(default = "default_mode_batches")]
    pub mode_batches: usize,
    #[serde(default = "default_mode_batch")]
    pub mode_batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all eval fields have defaults")
    }
}

fn default_bounds() -> [(f64, f64); 2] {
    [(-3.0, 3.0), (-3.0, 3.0)]
}

fn default_resolution() -> [usize; 2] {
    [128, 128]
}

fn default_logz_samples() -> usize {
    51_200
}

fn default_logz_repeats() -> usize {
    5
}

fn default_radius() -> f64 {
    3.0
}

fn default_mode_batches() -> usize {
    20
}

fn default_mode_batch() -> usize {
    512
}

impl RunConfig {
    /// Parse a config file. Seeds are not allowed inside sections: they are derived from the
    /// root seed. Relative paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        for section in ["dde", "generator"] {
            if value.pointer(&format!("/{section}/train/seed")).is_some() {
                return Err(Error::config(format!(
                    "{}: {section}.train.seed is derived from the root seed; set the top-level seed instead",
                    path.display()
                )));
            }
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(DatasetConfig::Csv { path: p, .. }) = &mut cfg.dataset {
            *p = resolve(base, p);
        }
        if let Some(out) = &mut cfg.out_dir {
            *out = resolve(base, out);
        }
        Ok(cfg)
    }

    /// Every validation problem in the sections present, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut push = |r: Result<()>| match r {
            Err(Error::Config(m)) => problems.push(m),
            Err(e) => problems.push(e.to_string()),
            Ok(()) => {}
        };
        if let Some(d) = &self.dde {
            push(d.train.validate());
            push(d.network.mlp(1, 1).validate());
        }
        if let Some(g) = &self.generator {
            push(g.train.validate());
            push(g.network.mlp(1, 1).validate());
            if let Some(q) = &g.q_network {
                push(q.mlp(1, 1).validate());
            }
        }
        if let Some(a) = &self.ald {
            if let Some(levels) = &a.sigma_levels {
                let cfg = AldConfig {
                    sigma_levels: levels.clone(),
                    steps_per_level: a.steps_per_level,
                    step_size_base: a.step_size_base,
                    seed: 0,
                    init_bounds: None,
                };
                push(cfg.validate());
            }
        }
        if let Some(e) = &self.eval {
            if e.logz_repeats < 2 || e.logz_samples == 0 {
                push(Err(Error::config("eval needs logz_repeats >= 2 and logz_samples >= 1")));
            }
            if e.mode_batches == 0 || e.mode_batch_size == 0 {
                push(Err(Error::config("eval mode batches must be non-empty")));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Training data: a finite dataset, or a distribution sampled fresh each batch.
pub enum DataSource {
    Finite(Dataset, Option<MixtureSpec>),
    Gaussian(GaussianSource),
}

impl DataSource {
    pub fn source(&self) -> &dyn SampleSource {
        match self {
            DataSource::Finite(d, _) => d,
            DataSource::Gaussian(g) => g,
        }
    }

    pub fn dim(&self) -> usize {
        self.source().dim()
    }

    /// Points for moment fits and test-set metrics.
    pub fn points(&self, seed: u64, n: usize) -> Mat {
        match self {
            DataSource::Finite(d, _) => d.points.clone(),
            DataSource::Gaussian(g) => g.sample(n, &mut rng::stream(seed, "dataset-points", 0)),
        }
    }

    pub fn mixture(&self) -> Option<&MixtureSpec> {
        match self {
            DataSource::Finite(_, m) => m.as_ref(),
            DataSource::Gaussian(_) => None,
        }
    }
}

pub fn build_dataset(cfg: &DatasetConfig, seed: u64) -> Result<DataSource> {
    Ok(match cfg {
        DatasetConfig::TwoSpirals { n, noise_std } => DataSource::Finite(datasets::two_spirals(*n, *noise_std, seed)?, None),
        DatasetConfig::Checkerboard { n } => DataSource::Finite(datasets::checkerboard(*n, seed)?, None),
        DatasetConfig::GaussianGrid { n, k_side, spacing, std } => {
            let (d, spec) = datasets::gaussian_mixture_grid(*n, *k_side, *spacing, *std, seed)?;
            DataSource::Finite(d, Some(spec))
        }
        DatasetConfig::Gaussian { mean, std, .. } => {
            if mean.is_empty() || !(*std > 0.0) {
                return Err(Error::config("gaussian dataset needs a non-empty mean and std > 0"));
            }
            DataSource::Gaussian(GaussianSource::isotropic(mean.clone(), *std))
        }
        DatasetConfig::Csv { path, standardize } => DataSource::Finite(datasets::load_csv(path, *standardize)?, None),
    })
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    config: Option<&'a Path>,
    outputs: &'a [PathBuf],
}

/// Resolved settings plus the list of files a command has written.
pub struct Run {
    pub config: RunConfig,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn new(global: &GlobalArgs) -> Result<Self> {
        let config = match &global.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        config.validate()?;
        let seed = global.seed.or(config.seed).unwrap_or(0);
        let out_dir = global.out.clone().or_else(|| config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        Ok(Run { config, config_path: global.config.clone(), seed, out_dir, outputs: Vec::new() })
    }

    pub fn section_seed(&self, section: &str) -> u64 {
        rng::derive_seed(self.seed, section, 0)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn record(&mut self, path: &Path) {
        if !self.outputs.iter().any(|p| p == path) {
            self.outputs.push(path.to_path_buf());
        }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.record(&path);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn write_checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<PathBuf> {
        self.write(name, ck.to_json().as_bytes())
    }

    pub fn outputs(&self) -> &[PathBuf] {
        &self.outputs
    }

    pub fn finish(mut self, command: &str) -> Result<Vec<PathBuf>> {
        let path = self.path(MANIFEST_FILE);
        self.record(&path);
        let manifest =
            RunManifest { command, seed: self.seed, config: self.config_path.as_deref(), outputs: &self.outputs };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(self.outputs)
    }

    fn dataset(&self) -> Result<DataSource> {
        let cfg = self.config.dataset.as_ref().ok_or_else(|| Error::config("config has no dataset section"))?;
        build_dataset(cfg, self.section_seed("dataset"))
    }

    fn eval_section(&self) -> EvalSection {
        self.config.eval.clone().unwrap_or_default()
    }
}

/// Exit status for an error: 2 for configuration problems, 3 for runtime failures.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_config() {
        2
    } else {
        3
    }
}

pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::config("--threads must be at least 1"));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut run = Run::new(&cli.global)?;
    let name = match cli.command {
        Command::GenData { name, n, noise_std, k_side, spacing, std } => {
            cmd_gen_data(&mut run, name, n, noise_std, k_side, spacing, std)?;
            "gen-data"
        }
        Command::TrainDde { resume, max_steps } => {
            cmd_train_dde(&mut run, resume.as_deref(), max_steps)?;
            "train-dde"
        }
        Command::TrainGen { p_dde } => {
            cmd_train_gen(&mut run, &p_dde)?;
            "train-gen"
        }
        Command::Sample { model, n, mode, format } => {
            cmd_sample(&mut run, &model, n, mode, format)?;
            "sample"
        }
        Command::Eval { model, tasks, data } => {
            cmd_eval(&mut run, &model, &tasks, data.as_deref())?;
            "eval"
        }
    };
    run.finish(name)
}

pub fn cmd_gen_data(
    run: &mut Run,
    name: DatasetName,
    n: usize,
    noise_std: f64,
    k_side: usize,
    spacing: f64,
    std: f64,
) -> Result<()> {
    let seed = run.section_seed("dataset");
    let (ds, mixture) = match name {
        DatasetName::TwoSpirals => (datasets::two_spirals(n, noise_std, seed)?, None),
        DatasetName::Checkerboard => (datasets::checkerboard(n, seed)?, None),
        DatasetName::GaussianGrid => {
            let (d, s) = datasets::gaussian_mixture_grid(n, k_side, spacing, std, seed)?;
            (d, Some(s))
        }
    };
    let stem = name.to_possible_value().expect("named variant").get_name().to_string();
    let csv = run.path(&format!("{stem}.csv"));
    ds.write_csv(&csv)?;
    run.record(&csv);
    let mut manifest = ds.manifest();
    manifest.mixture = mixture;
    run.write_json(&format!("{stem}.manifest.json"), &manifest)?;
    Ok(())
}

fn dde_trace_csv(rows: &[crate::dde::DdeTraceRow]) -> String {
    let mut s = String::from("step,sigma,loss,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.sigma, r.loss, r.lr));
    }
    s
}

pub fn cmd_train_dde(run: &mut Run, resume: Option<&Path>, max_steps: Option<u64>) -> Result<()> {
    let section = run.config.dde.clone().ok_or_else(|| Error::config("config has no dde section"))?;
    let data = run.dataset()?;
    let mut cfg = section.train.clone();
    cfg.seed = run.section_seed("dde");
    let net = section.network.mlp(data.dim(), 1);
    net.validate()?;
    cfg.validate()?;

    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config != net {
                return Err(Error::config(format!("{}: architecture differs from the config", path.display())));
            }
            if ck.seed != cfg.seed {
                return Err(Error::config(format!("{}: checkpoint seed differs from this run's seed", path.display())));
            }
            let opt = ck
                .dde_opt_state()?
                .ok_or_else(|| Error::config(format!("{}: checkpoint has no optimizer state", path.display())))?;
            DdeTrainer::resume(ck.to_dde()?, opt, cfg.clone())?
        }
        None => DdeTrainer::new(net, cfg.clone())?,
    };
    let stop = max_steps.unwrap_or(cfg.steps).min(cfg.steps);
    let mut trace = Vec::new();
    while trainer.opt.step < stop {
        trace.push(trainer.step(data.source())?);
    }
    let meta = TrainingMeta {
        step: trainer.opt.step,
        adam: Some((&trainer.opt.adam).into()),
        train_config: Some(serde_json::to_value(&cfg).expect("config serializes")),
    };
    run.write_checkpoint("dde.json", &Checkpoint::from_dde(&trainer.model, cfg.seed, Some(meta)))?;
    run.write("dde_trace.csv", dde_trace_csv(&trace).as_bytes())?;
    Ok(())
}

fn gen_trace_header() -> String {
    "outer_step,gen_loss,q_dde_loss,diagnostic_kl\n".to_string()
}

fn diagnostic_target(run: &Run, cfg: Option<&DiagnosticConfig>) -> Result<Option<DiagnosticTarget>> {
    Ok(match cfg {
        None => None,
        Some(DiagnosticConfig::Gaussian { mean, std }) => Some(DiagnosticTarget::isotropic(mean.clone(), *std)),
        Some(DiagnosticConfig::DatasetMoments) => {
            let data = run.dataset()?;
            Some(DiagnosticTarget::moment_fit(&data.points(run.section_seed("dataset"), 10_000)))
        }
        Some(DiagnosticConfig::Mixture) => {
            let data = run.dataset()?;
            let spec = data.mixture().ok_or_else(|| Error::config("mixture diagnostic needs a gaussian_grid dataset"))?;
            Some(DiagnosticTarget::Mixture(spec.clone()))
        }
    })
}

pub fn cmd_train_gen(run: &mut Run, p_path: &Path) -> Result<()> {
    let section = run.config.generator.clone().ok_or_else(|| Error::config("config has no generator section"))?;
    let ck = Checkpoint::load(p_path)?;
    let p_dde = ck.to_dde()?;
    let mut cfg = section.train.clone();
    cfg.seed = run.section_seed("generator");
    cfg.validate()?;
    if (cfg.sigma_eta - p_dde.sigma_eta()).abs() > 1e-12 * cfg.sigma_eta.abs().max(p_dde.sigma_eta()) {
        return Err(Error::config(format!(
            "generator sigma_eta = {} but {} was trained at σ = {}",
            cfg.sigma_eta,
            p_path.display(),
            p_dde.sigma_eta()
        )));
    }
    let dim = p_dde.dim();
    let gen_net = section.network.mlp(cfg.latent_dim, dim);
    let q_net = match &section.q_network {
        Some(q) => q.mlp(dim, 1),
        None => p_dde.config().clone(),
    };
    let target = diagnostic_target(run, section.diagnostic.as_ref())?;
    if let GenInit::DataMoments = cfg.init {
        if run.config.dataset.is_none() {
            return Err(Error::config("generator init data_moments needs a dataset section"));
        }
    }

    let mut state = GenTrainState::new(gen_net, q_net, &cfg)?;
    if let GenInit::DataMoments = cfg.init {
        let data = run.dataset()?;
        generator::init_from_moments(&mut state.generator, &data.points(run.section_seed("dataset"), 10_000))?;
    }
    generator::init_q_dde(&mut state, &cfg)?;
    let trace_path = run.path("gen_trace.csv");
    let gen_path = run.path("generator.json");
    let q_path = run.path("q_dde.json");
    let mut trace_text = gen_trace_header();
    let seed = cfg.seed;
    generator::continue_training(&mut state, &p_dde, &cfg, target.as_ref(), |st, row| {
        trace_text.push_str(&format!("{},{},{},{}\n", row.outer_step, row.gen_loss, row.q_dde_loss, row.diagnostic_kl));
        let meta = TrainingMeta { step: st.step, adam: Some((&st.gen_opt).into()), train_config: None };
        Checkpoint::from_generator(&st.generator, seed, Some(meta)).save(&gen_path)?;
        let q_meta = TrainingMeta { step: st.q_opt.step, adam: Some((&st.q_opt.adam).into()), train_config: None };
        Checkpoint::from_dde(&st.q_dde, seed, Some(q_meta)).save(&q_path)?;
        fs::write(&trace_path, &trace_text).map_err(|e| Error::io(&trace_path, e))
    })?;
    if state.trace.is_empty() {
        fs::write(&trace_path, &trace_text).map_err(|e| Error::io(&trace_path, e))?;
        Checkpoint::from_generator(&state.generator, seed, None).save(&gen_path)?;
        Checkpoint::from_dde(&state.q_dde, seed, None).save(&q_path)?;
    }
    for p in [gen_path, q_path, trace_path] {
        run.record(&p);
    }
    Ok(())
}

#[derive(Serialize)]
struct AldReport<'a> {
    label: &'a str,
    score_mode: &'a str,
    n: usize,
    network_evals: u64,
    evals_per_sample: f64,
    config: &'a AldConfig,
    levels: &'a [samplers::LevelDiagnostics],
}

pub fn cmd_sample(run: &mut Run, model: &Path, n: usize, mode: SampleMode, format: SampleFormat) -> Result<()> {
    let ck = Checkpoint::load(model)?;
    let points = match (mode, ck.kind) {
        (SampleMode::Direct, ModelKind::Generator) => {
            samplers::sample_direct(&ck.to_generator()?, n, run.section_seed("sample"))?.points
        }
        (SampleMode::Ald, ModelKind::Dde) => {
            let dde = ck.to_dde()?;
            let seed = run.section_seed("ald");
            let mut cfg = AldConfig::default_for(&dde, seed);
            if let Some(a) = &run.config.ald {
                if let Some(levels) = &a.sigma_levels {
                    cfg.sigma_levels = levels.clone();
                }
                cfg.steps_per_level = a.steps_per_level;
                cfg.step_size_base = a.step_size_base;
                cfg.init_bounds = a.init_bounds.clone();
            }
            let out = samplers::sample_ald(&LevelScores::Shared(&dde), &cfg, n)?;
            let report = AldReport {
                label: out.label,
                score_mode: out.score_mode,
                n,
                network_evals: out.samples.network_evals,
                evals_per_sample: out.samples.evals_per_sample(),
                config: &cfg,
                levels: &out.levels,
            };
            run.write_json("ald_report.json", &report)?;
            out.samples.points
        }
        (mode, kind) => {
            return Err(Error::config(format!(
                "{} sampling needs a {} checkpoint, {} holds a {kind} model",
                match mode {
                    SampleMode::Direct => "direct",
                    SampleMode::Ald => "ald",
                },
                match mode {
                    SampleMode::Direct => "generator",
                    SampleMode::Ald => "dde",
                },
                model.display()
            )))
        }
    };
    match format {
        SampleFormat::Csv => run.write("samples.csv", samplers::samples_to_csv(&points).as_bytes())?,
        SampleFormat::Bin => run.write("samples.bin", &samplers::samples_to_bytes(&points))?,
    };
    Ok(())
}

/// `report.json` written by `eval`. Sections appear only for the tasks requested.
#[derive(Clone, Debug, Default, Serialize)]
pub struct EvalReport {
    pub model: PathBuf,
    pub kind: String,
    pub tasks: Vec<EvalTask>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logz: Option<evaluation::LogZEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ll: Option<LlReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modes: Option<ModesReport>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridReport {
    pub csv: PathBuf,
    pub ppm: PathBuf,
    pub bounds: [(f64, f64); 2],
    pub resolution: [usize; 2],
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LlReport {
    pub avg_log_likelihood: f64,
    pub test_points: usize,
    /// Add to `avg_log_likelihood` to express it in the data's original units.
    pub standardization_log_jacobian: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModesReport {
    pub overall: evaluation::ModeReport,
    pub mean_modes_hit_per_batch: f64,
    pub batches: usize,
    pub batch_size: usize,
}

/// Repeat variance above which a log-partition estimate is reported as unreliable.
pub const LOGZ_VARIANCE_WARNING: f64 = 0.5;

pub fn cmd_eval(run: &mut Run, model: &Path, tasks: &[EvalTask], data: Option<&Path>) -> Result<EvalReport> {
    let mut tasks = tasks.to_vec();
    tasks.sort();
    tasks.dedup();
    if tasks.contains(&EvalTask::Ll) && !tasks.contains(&EvalTask::Logz) {
        return Err(Error::config("task ll needs logz in the same run"));
    }
    let ck = Checkpoint::load(model)?;
    let needs_dde = tasks.iter().any(|t| matches!(t, EvalTask::Grid | EvalTask::Logz | EvalTask::Ll));
    if needs_dde && ck.kind != ModelKind::Dde {
        return Err(Error::config("grid, logz and ll need a dde checkpoint"));
    }
    if tasks.contains(&EvalTask::Modes) && ck.kind != ModelKind::Generator {
        return Err(Error::config("modes needs a generator checkpoint"));
    }
    let es = run.eval_section();
    let test: Option<Dataset> = match data {
        Some(p) => Some(datasets::load_csv(p, false)?),
        None => match &run.config.dataset {
            Some(_) => {
                let src = run.dataset()?;
                Some(Dataset::new("dataset", src.points(run.section_seed("dataset"), 10_000)))
            }
            None => None,
        },
    };
    let mut report =
        EvalReport { model: model.to_path_buf(), kind: ck.kind.to_string(), tasks: tasks.clone(), ..Default::default() };
    let seed = run.section_seed("eval");

    if ck.kind == ModelKind::Dde {
        let dde = ck.to_dde()?;
        if tasks.contains(&EvalTask::Grid) {
            let grid = evaluation::density_grid(&dde, es.grid_bounds, es.grid_resolution)?;
            let csv = run.path("grid.csv");
            grid.write_csv(&csv)?;
            run.record(&csv);
            let ppm = run.write("grid.ppm", &grid.to_ppm())?;
            let min = grid.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = grid.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            report.grid = Some(GridReport { csv, ppm, bounds: es.grid_bounds, resolution: es.grid_resolution, min, max });
        }
        if tasks.contains(&EvalTask::Logz) {
            let test = test.as_ref().ok_or_else(|| Error::config("logz needs a dataset for its proposal"))?;
            let proposal = GaussianProposal::moment_matched(&test.points, es.diagonal_proposal)?;
            let est = evaluation::estimate_log_partition(&dde, &proposal, es.logz_samples, es.logz_repeats, seed)?;
            if est.variance > LOGZ_VARIANCE_WARNING {
                let msg = format!(
                    "log Z repeat variance {:.3} exceeds {LOGZ_VARIANCE_WARNING}; the estimate is unreliable",
                    est.variance
                );
                log::warn!("{msg}");
                report.warnings.push(msg);
            }
            if tasks.contains(&EvalTask::Ll) {
                let ll = evaluation::avg_log_likelihood(&dde, &est, test)?;
                report.ll = Some(LlReport {
                    avg_log_likelihood: ll,
                    test_points: test.len(),
                    standardization_log_jacobian: test.standardization.as_ref().map(|s| s.log_jacobian()),
                });
            }
            report.logz = Some(est);
        }
    } else if tasks.contains(&EvalTask::Modes) {
        let gen = ck.to_generator()?;
        let spec = run
            .dataset()
            .ok()
            .and_then(|d| d.mixture().cloned())
            .ok_or_else(|| Error::config("modes needs a gaussian_grid dataset in the config"))?;
        let n = es.mode_batches * es.mode_batch_size;
        let samples = samplers::sample_direct(&gen, n, seed)?.points;
        let overall = evaluation::mode_coverage(&samples, &spec, es.radius_sigmas)?;
        let mut hits = 0usize;
        for b in 0..es.mode_batches {
            let batch = samples.slice_rows(b * es.mode_batch_size, (b + 1) * es.mode_batch_size);
            hits += evaluation::mode_coverage(&batch, &spec, es.radius_sigmas)?.modes_hit;
        }
        report.modes = Some(ModesReport {
            overall,
            mean_modes_hit_per_batch: hits as f64 / es.mode_batches as f64,
            batches: es.mode_batches,
            batch_size: es.mode_batch_size,
        });
    }
    run.write_json("report.json", &report)?;
    Ok(report)
}

/// Entry point for the binary: parse, run, print errors, map them to exit codes.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ll_without_logz_is_rejected_before_loading() {
        let mut run = Run {
            config: RunConfig::default(),
            config_path: None,
            seed: 0,
            out_dir: std::env::temp_dir(),
            outputs: Vec::new(),
        };
        let err = cmd_eval(&mut run, Path::new("/nonexistent.json"), &[EvalTask::Ll], None).unwrap_err();
        assert!(err.is_config(), "{err}");
    }

    #[test]
    fn section_seed_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(
            &p,
            r#"{"dde": {"network": {"layers": 1, "channels": 4},
                "train": {"batch_size": 8, "steps": 1, "lr": 0.001, "sigma_start": 0.5, "sigma_end": 0.5, "seed": 3}}}"#,
        )
        .unwrap();
        assert!(RunConfig::load(&p).unwrap_err().to_string().contains("root seed"));
    }

    #[test]
    fn unknown_keys_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"dataset": {"kind": "csv", "path": "data.csv"}, "out_dir": "runs"}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.dataset, Some(DatasetConfig::Csv { path: dir.path().join("data.csv"), standardize: false }));
        assert_eq!(cfg.out_dir, Some(dir.path().join("runs")));
        fs::write(&p, r#"{"datset": {}}"#).unwrap();
        assert!(RunConfig::load(&p).unwrap_err().is_config());
    }

    #[test]
    fn validation_enumerates_problems() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"dde": {"network": {"layers": 1, "channels": 0},
                "train": {"batch_size": 0, "steps": 1, "lr": 0.001, "sigma_start": -1, "sigma_end": 0.5}}}"#,
        )
        .unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("batch_size") && msg.contains("sigma_start") && msg.contains("channel"), "{msg}");
        assert!(!msg.contains("error: configuration"), "{msg}");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x")), 2);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 3);
        assert_eq!(main_with_args(["dde", "gen-data", "nope", "10"]), 2);
    }
}
