//! Direct generator sampling and annealed Langevin dynamics on an energy's score.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::MixtureSpec;
use crate::dde::DdeModel;
use crate::diffengine::Mat;
use crate::error::{Error, Result};
use crate::evaluation::Energy;
use crate::generator::GeneratorModel;
use crate::rng::{self, Rng};

/// Gradient of a log-density, evaluated on batches.
pub trait ScoreField: Sync {
    fn dim(&self) -> usize;
    fn score_batch(&self, x: &Mat) -> Result<Mat>;
}

impl ScoreField for DdeModel {
    fn dim(&self) -> usize {
        DdeModel::dim(self)
    }

    fn score_batch(&self, x: &Mat) -> Result<Mat> {
        DdeModel::score_batch(self, x)
    }
}

/// Score given by a closure over single points.
pub struct FnScore<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> FnScore<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnScore { dim, f }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> ScoreField for FnScore<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_batch(&self, x: &Mat) -> Result<Mat> {
        let rows: Vec<Vec<f64>> = x.iter_rows().map(|r| (self.f)(r)).collect();
        Mat::from_rows(&rows)
    }
}

/// A Gaussian mixture blurred by `N(0, σ²I)`: exact log-density and score of the
/// smoothed distribution an energy network trained at noise `σ` approximates.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedMixture {
    pub spec: MixtureSpec,
    pub sigma: f64,
}

impl SmoothedMixture {
    pub fn new(spec: MixtureSpec, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config("smoothing σ must be finite and non-negative"));
        }
        Ok(SmoothedMixture { spec, sigma })
    }
}

impl ScoreField for SmoothedMixture {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn score_batch(&self, x: &Mat) -> Result<Mat> {
        let rows: Vec<Vec<f64>> = x.iter_rows().map(|r| self.spec.score_convolved(r, self.sigma)).collect();
        Mat::from_rows(&rows)
    }
}

impl Energy for SmoothedMixture {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn log_density_batch(&self, x: &Mat) -> Result<Vec<f64>> {
        Ok(x.iter_rows().map(|r| self.spec.log_density_convolved(r, self.sigma)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub points: Mat,
    /// Network evaluations spent, in total over all samples.
    pub network_evals: u64,
}

impl Samples {
    pub fn evals_per_sample(&self) -> f64 {
        self.network_evals as f64 / self.points.rows().max(1) as f64
    }
}

/// `n` samples `g(z)`, one forward pass each. Latents come from the stream `(seed, "direct", 0)`.
pub fn sample_direct(gen: &GeneratorModel, n: usize, seed: u64) -> Result<Samples> {
    if n == 0 {
        return Err(Error::contract("sample count must be at least 1"));
    }
    let mut r = rng::stream(seed, "direct", 0);
    let points = gen.sample(n, &mut r)?;
    Ok(Samples { points, network_evals: n as u64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AldConfig {
    /// Strictly decreasing noise levels σ₁ > … > σ_L > 0.
    pub sigma_levels: Vec<f64>,
    pub steps_per_level: usize,
    /// Step size at the last level; level `i` uses `step_size_base·σ_i²/σ_L²`.
    pub step_size_base: f64,
    #[serde(default)]
    pub seed: u64,
    /// Per-dimension `(lo, hi)` box for the uniform initial states.
    #[serde(default)]
    pub init_bounds: Option<Vec<(f64, f64)>>,
}

impl AldConfig {
    /// `levels` geometrically spaced noise levels from `top` down to `bottom`.
    pub fn geometric(top: f64, bottom: f64, levels: usize, steps_per_level: usize, step_size_base: f64, seed: u64) -> Self {
        let sigma_levels = if levels <= 1 {
            vec![bottom]
        } else {
            let ratio = (bottom / top).powf(1.0 / (levels - 1) as f64);
            (0..levels).map(|i| if i == levels - 1 { bottom } else { top * ratio.powi(i as i32) }).collect()
        };
        AldConfig { sigma_levels, steps_per_level, step_size_base, seed, init_bounds: None }
    }

    /// Ten levels from 1.0 down to the energy's own noise level.
    pub fn default_for(dde: &DdeModel, seed: u64) -> Self {
        let bottom = dde.sigma_eta();
        let top = 1.0f64.max(bottom);
        let levels = if top > bottom { 10 } else { 1 };
        Self::geometric(top, bottom, levels, 20, 0.1, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_levels.is_empty() {
            return Err(Error::config("ALD needs at least one noise level"));
        }
        if self.sigma_levels.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("ALD noise levels must be positive"));
        }
        if self.sigma_levels.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::config("ALD noise levels must be strictly decreasing"));
        }
        if !(self.step_size_base >= 0.0) {
            return Err(Error::config("ALD step size must be non-negative"));
        }
        Ok(())
    }

    pub fn alpha(&self, level: usize) -> f64 {
        let last = *self.sigma_levels.last().expect("validated non-empty");
        self.step_size_base * (self.sigma_levels[level] / last).powi(2)
    }
}

/// Either one score reused at every level or one score per level.
pub enum LevelScores<'a> {
    Shared(&'a dyn ScoreField),
    PerLevel(Vec<&'a dyn ScoreField>),
}

impl LevelScores<'_> {
    fn at(&self, level: usize) -> &dyn ScoreField {
        match self {
            LevelScores::Shared(s) => *s,
            LevelScores::PerLevel(v) => v[level],
        }
    }

    fn dim(&self) -> usize {
        self.at(0).dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub level: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub mean_norm: f64,
    pub max_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AldOutput {
    pub samples: Samples,
    /// `"langevin"` for a single level, `"annealed-langevin"` otherwise.
    pub label: &'static str,
    /// `"shared"` when one score served every level, `"per-level"` otherwise.
    pub score_mode: &'static str,
    pub levels: Vec<LevelDiagnostics>,
}

const CHAIN_CHUNK: usize = 512;
const DIVERGENCE_NORM: f64 = 1e6;

/// Annealed Langevin dynamics: at level `i`, `x ← x + (α_i/2)·score(x) + √α_i·ξ` for
/// `steps_per_level` steps. Chain `c` draws its initial state and noise from the stream
/// `(seed, "ald-chain", c)`, so results do not depend on how chains are scheduled.
pub fn sample_ald(scores: &LevelScores<'_>, cfg: &AldConfig, n: usize) -> Result<AldOutput> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::contract("sample count must be at least 1"));
    }
    if let LevelScores::PerLevel(v) = scores {
        if v.len() != cfg.sigma_levels.len() {
            return Err(Error::config(format!(
                "{} score models for {} noise levels",
                v.len(),
                cfg.sigma_levels.len()
            )));
        }
    }
    let d = scores.dim();
    let bounds = match &cfg.init_bounds {
        Some(b) if b.len() == d => b.clone(),
        Some(_) => return Err(Error::config("init_bounds dimension does not match the model")),
        None => vec![(-3.0, 3.0); d],
    };

    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHAIN_CHUNK).map(|s| (s, (s + CHAIN_CHUNK).min(n))).collect();
    let results: Vec<Result<(Mat, Vec<(f64, f64)>)>> = chunks
        .par_iter()
        .map(|&(start, end)| run_chunk(scores, cfg, &bounds, start, end))
        .collect();

    let mut points = Mat::zeros(n, d);
    let levels_n = cfg.sigma_levels.len();
    let mut sums = vec![0.0; levels_n];
    let mut maxes = vec![0.0f64; levels_n];
    for ((start, end), res) in chunks.iter().zip(results) {
        let (x, stats) = res?;
        points.as_mut_slice()[start * d..end * d].copy_from_slice(x.as_slice());
        for (l, (s, m)) in stats.into_iter().enumerate() {
            sums[l] += s;
            maxes[l] = maxes[l].max(m);
        }
    }
    let levels = (0..levels_n)
        .map(|l| LevelDiagnostics {
            level: l,
            sigma: cfg.sigma_levels[l],
            alpha: cfg.alpha(l),
            mean_norm: sums[l] / n as f64,
            max_norm: maxes[l],
        })
        .collect();
    let network_evals = (n * cfg.steps_per_level * levels_n) as u64;
    Ok(AldOutput {
        samples: Samples { points, network_evals },
        label: if levels_n == 1 { "langevin" } else { "annealed-langevin" },
        score_mode: match scores {
            LevelScores::Shared(_) => "shared",
            LevelScores::PerLevel(_) => "per-level",
        },
        levels,
    })
}

fn run_chunk(
    scores: &LevelScores<'_>,
    cfg: &AldConfig,
    bounds: &[(f64, f64)],
    start: usize,
    end: usize,
) -> Result<(Mat, Vec<(f64, f64)>)> {
    let d = bounds.len();
    let mut rngs: Vec<Rng> =
        (start..end).map(|c| Rng::seed_from_u64(rng::derive_seed(cfg.seed, "ald-chain", c as u64))).collect();
    let mut x = Mat::zeros(end - start, d);
    for (i, r) in rngs.iter_mut().enumerate() {
        for (j, (lo, hi)) in bounds.iter().enumerate() {
            x.set(i, j, r.random_range(*lo..=*hi));
        }
    }
    let mut stats = Vec::with_capacity(cfg.sigma_levels.len());
    for level in 0..cfg.sigma_levels.len() {
        let alpha = cfg.alpha(level);
        let noise_scale = alpha.sqrt();
        let score = scores.at(level);
        for _ in 0..cfg.steps_per_level {
            let g = score.score_batch(&x)?;
            for (i, r) in rngs.iter_mut().enumerate() {
                let gi = g.row(i);
                for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                    let xi: f64 = StandardNormal.sample(r);
                    *v += 0.5 * alpha * gi[j] + noise_scale * xi;
                }
            }
        }
        let norms: Vec<f64> = x.iter_rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let max = norms.iter().cloned().fold(0.0, f64::max);
        if !(max <= DIVERGENCE_NORM) {
            return Err(Error::Numeric(format!(
                "Langevin chains diverged at level {level} (σ = {}): ‖x‖ = {max:e}",
                cfg.sigma_levels[level]
            )));
        }
        stats.push((norms.iter().sum::<f64>(), max));
    }
    Ok((x, stats))
}

/// Rows as CSV text, one sample per line.
pub fn samples_to_csv(points: &Mat) -> String {
    let mut out = String::new();
    for r in points.iter_rows() {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Binary layout: the sample count as a little-endian `u64`, then the values as
/// little-endian `f64`, row-major.
pub fn samples_to_bytes(points: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + points.as_slice().len() * 8);
    out.extend_from_slice(&(points.rows() as u64).to_le_bytes());
    for v in points.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Inverse of [`samples_to_bytes`] for samples of dimension `d`.
pub fn samples_from_bytes(bytes: &[u8], d: usize) -> Result<Mat> {
    let n = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8-byte slice")) as usize)
        .ok_or_else(|| Error::Parse { row: 0, col: 0, msg: "truncated sample header".into() })?;
    let body = &bytes[8..];
    if body.len() != n * d * 8 {
        return Err(Error::Parse { row: 0, col: 0, msg: format!("expected {} values, found {} bytes", n * d, body.len()) });
    }
    let vals = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk"))).collect();
    Mat::from_vec(n, d, vals)
}
