//! Synthetic 2D datasets with analytic oracles and tabular CSV ingestion.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffengine::Mat;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Anything that can hand out i.i.d. training batches.
pub trait SampleSource {
    fn dim(&self) -> usize;
    fn sample(&self, n: usize, rng: &mut Rng) -> Mat;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn apply(&self, x: &mut Mat) {
        for r in 0..x.rows() {
            for (j, v) in x.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }

    pub fn invert(&self, x: &mut Mat) {
        for r in 0..x.rows() {
            for (j, v) in x.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
    }

    /// Add this to a log-density in standardized units to get raw-data units.
    pub fn log_jacobian(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub points: Mat,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, points: Mat) -> Self {
        Dataset { name: name.into(), points, standardization: None }
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    /// Per-dimension zero mean, unit variance (population std). Constant columns keep std 1.
    pub fn standardize(&mut self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::contract("cannot standardize an empty dataset"));
        }
        let mean = self.points.column_means();
        let n = self.len() as f64;
        let mut var = vec![0.0; self.dim()];
        for r in self.points.iter_rows() {
            for (j, v) in r.iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std = var.iter().map(|v| {
            let s = (v / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        });
        let t = Standardization { mean, std: std.collect() };
        t.apply(&mut self.points);
        self.standardization = Some(t);
        Ok(())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            dim: self.dim(),
            n: self.len(),
            standardization: self.standardization.clone(),
            mixture: None,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(&self.points, path)
    }
}

impl SampleSource for Dataset {
    fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Uniform draws with replacement.
    fn sample(&self, n: usize, rng: &mut Rng) -> Mat {
        let d = self.dim();
        let mut out = Mat::zeros(n, d);
        for i in 0..n {
            let k = rng.random_range(0..self.len());
            out.row_mut(i).copy_from_slice(self.points.row(k));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub dim: usize,
    pub n: usize,
    pub standardization: Option<Standardization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<MixtureSpec>,
}

/// N(mean, std²·I), drawn fresh for every batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSource {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianSource {
    pub fn isotropic(mean: Vec<f64>, std: f64) -> Self {
        GaussianSource { mean, std }
    }
}

impl SampleSource for GaussianSource {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, n: usize, rng: &mut Rng) -> Mat {
        let mut x = rng::normal_mat(rng, n, self.dim(), self.std);
        for r in 0..n {
            for (v, m) in x.row_mut(r).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        x
    }
}

/// Equal-weight isotropic Gaussian mixture with a shared standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub std: f64,
}

impl MixtureSpec {
    pub fn new(means: Vec<Vec<f64>>, std: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::config("mixture needs at least one component"));
        }
        if !(std > 0.0) {
            return Err(Error::config("mixture std must be positive"));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::config("mixture means must share a positive dimension"));
        }
        Ok(MixtureSpec { means, std })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    /// Exact normalized log-density.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_density_with_var(self, x, self.std * self.std)
    }

    /// Log-density of the mixture blurred by N(0, σ_η²·I): every component variance grows by σ_η².
    pub fn log_density_convolved(&self, x: &[f64], sigma_eta: f64) -> f64 {
        log_density_with_var(self, x, self.std * self.std + sigma_eta * sigma_eta)
    }

    /// Score of the blurred mixture, ∇ₓ log p̃(x).
    pub fn score_convolved(&self, x: &[f64], sigma_eta: f64) -> Vec<f64> {
        let var = self.std * self.std + sigma_eta * sigma_eta;
        let logs: Vec<f64> = self.means.iter().map(|m| -sq_dist(x, m) / (2.0 * var)).collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut g = vec![0.0; x.len()];
        for (wk, m) in w.iter().zip(&self.means) {
            for (gi, (xi, mi)) in g.iter_mut().zip(x.iter().zip(m)) {
                *gi += wk / total * (mi - xi) / var;
            }
        }
        g
    }

    /// Index of the nearest component mean and the distance to it.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, m) in self.means.iter().enumerate() {
            let d = sq_dist(x, m);
            if d < best.1 {
                best = (k, d);
            }
        }
        (best.0, best.1.sqrt())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn log_density_with_var(spec: &MixtureSpec, x: &[f64], var: f64) -> f64 {
    let d = spec.dim() as f64;
    let log_norm = -0.5 * d * (2.0 * PI * var).ln() - (spec.components() as f64).ln();
    let logs: Vec<f64> = spec.means.iter().map(|m| -sq_dist(x, m) / (2.0 * var)).collect();
    log_norm + log_sum_exp(&logs)
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl SampleSource for MixtureSpec {
    fn dim(&self) -> usize {
        MixtureSpec::dim(self)
    }

    fn sample(&self, n: usize, rng: &mut Rng) -> Mat {
        let d = self.dim();
        let mut out = Mat::zeros(n, d);
        for i in 0..n {
            let k = rng.random_range(0..self.components());
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(rng);
                *v = self.means[k][j] + self.std * z;
            }
        }
        out
    }
}

/// Two interleaved Archimedean spirals of radius 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoSpirals {
    pub noise_std: f64,
}

impl TwoSpirals {
    /// Noise-free point on arm A (`arm == 0`) or arm B at parameter `u ∈ [0,1]`.
    pub fn arm_point(u: f64, arm: usize) -> [f64; 2] {
        let t = 1.5 * PI * (1.0 + 2.0 * u);
        let scale = 2.0 / (4.5 * PI);
        let p = [-t * t.cos() * scale, t * t.sin() * scale];
        if arm == 0 {
            p
        } else {
            [-p[0], -p[1]]
        }
    }

    fn draw(&self, rng: &mut Rng) -> ([f64; 2], usize) {
        let u: f64 = rng.random();
        let arm = usize::from(rng.random_bool(0.5));
        let mut p = Self::arm_point(u, arm);
        for v in &mut p {
            let z: f64 = StandardNormal.sample(rng);
            *v += self.noise_std * z;
        }
        (p, arm)
    }
}

impl SampleSource for TwoSpirals {
    fn dim(&self) -> usize {
        2
    }

    fn sample(&self, n: usize, rng: &mut Rng) -> Mat {
        let mut out = Mat::zeros(n, 2);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(&self.draw(rng).0);
        }
        out
    }
}

/// `n` spiral points plus the arm (0 or 1) each came from.
pub fn two_spirals_with_arms(n: usize, noise_std: f64, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    if n == 0 {
        return Err(Error::contract("dataset size must be at least 1"));
    }
    let gen = TwoSpirals { noise_std };
    let mut r = rng::stream(seed, "two-spirals", 0);
    let mut pts = Mat::zeros(n, 2);
    let mut arms = Vec::with_capacity(n);
    for i in 0..n {
        let (p, arm) = gen.draw(&mut r);
        pts.row_mut(i).copy_from_slice(&p);
        arms.push(arm);
    }
    Ok((Dataset::new("two-spirals", pts), arms))
}

pub fn two_spirals(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    Ok(two_spirals_with_arms(n, noise_std, seed)?.0)
}

/// Uniform density on the "on" unit squares of [−2,2]²: square (i,j) covering
/// `[−2+i, −1+i]×[−2+j, −1+j]` is on iff `i+j` is even.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Checkerboard;

impl Checkerboard {
    pub const ON_SQUARES: usize = 8;

    /// Square indices of a point inside [−2,2]², if any.
    pub fn square_of(x: &[f64]) -> Option<(usize, usize)> {
        let (a, b) = (x[0] + 2.0, x[1] + 2.0);
        if !(0.0..=4.0).contains(&a) || !(0.0..=4.0).contains(&b) {
            return None;
        }
        Some(((a.floor() as usize).min(3), (b.floor() as usize).min(3)))
    }

    pub fn is_on(x: &[f64]) -> bool {
        matches!(Self::square_of(x), Some((i, j)) if (i + j) % 2 == 0)
    }

    pub fn on_squares() -> Vec<(usize, usize)> {
        (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).filter(|(i, j)| (i + j) % 2 == 0).collect()
    }
}

impl SampleSource for Checkerboard {
    fn dim(&self) -> usize {
        2
    }

    fn sample(&self, n: usize, rng: &mut Rng) -> Mat {
        let squares = Self::on_squares();
        let mut out = Mat::zeros(n, 2);
        for i in 0..n {
            let (a, b) = squares[rng.random_range(0..squares.len())];
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            out.row_mut(i).copy_from_slice(&[-2.0 + a as f64 + u, -2.0 + b as f64 + v]);
        }
        out
    }
}

pub fn checkerboard(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::contract("dataset size must be at least 1"));
    }
    let mut r = rng::stream(seed, "checkerboard", 0);
    Ok(Dataset::new("checkerboard", Checkerboard.sample(n, &mut r)))
}

/// `k_side × k_side` components on a grid centred at the origin.
pub fn mixture_grid_spec(k_side: usize, spacing: f64, std: f64) -> Result<MixtureSpec> {
    if k_side == 0 {
        return Err(Error::contract("k_side must be at least 1"));
    }
    let offset = (k_side as f64 - 1.0) / 2.0;
    let mut means = Vec::with_capacity(k_side * k_side);
    for i in 0..k_side {
        for j in 0..k_side {
            means.push(vec![(i as f64 - offset) * spacing, (j as f64 - offset) * spacing]);
        }
    }
    MixtureSpec::new(means, std)
}

pub fn gaussian_mixture_grid(n: usize, k_side: usize, spacing: f64, std: f64, seed: u64) -> Result<(Dataset, MixtureSpec)> {
    if n == 0 {
        return Err(Error::contract("dataset size must be at least 1"));
    }
    let spec = mixture_grid_spec(k_side, spacing, std)?;
    let mut r = rng::stream(seed, "gaussian-grid", 0);
    Ok((Dataset::new("gaussian-grid", spec.sample(n, &mut r)), spec))
}

pub fn mixture_log_density(spec: &MixtureSpec, x: &[f64]) -> f64 {
    spec.log_density(x)
}

/// Parse a rectangular numeric CSV. A non-numeric first row is treated as a header.
pub fn load_csv(path: &Path, standardize: bool) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    let mut ds = parse_csv(&text, &name)?;
    if standardize {
        ds.standardize()?;
    }
    Ok(ds)
}

pub fn parse_csv(text: &str, name: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, rec) in reader.records().enumerate() {
        let line = idx + 1;
        let rec = rec.map_err(|e| Error::Parse { row: line, col: 0, msg: e.to_string() })?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> = rec.iter().map(str::parse::<f64>).collect();
        if rows.is_empty() && width.is_none() && parsed.iter().any(|p| p.is_err()) {
            log::info!("{name}: skipping header row {line}");
            width = Some(rec.len());
            continue;
        }
        let expected = *width.get_or_insert(rec.len());
        if rec.len() != expected {
            return Err(Error::Parse {
                row: line,
                col: rec.len().min(expected) + 1,
                msg: format!("expected {expected} columns, found {}", rec.len()),
            });
        }
        let mut vals = Vec::with_capacity(expected);
        for (c, p) in parsed.into_iter().enumerate() {
            match p {
                Ok(v) if v.is_finite() => vals.push(v),
                _ => {
                    return Err(Error::Parse {
                        row: line,
                        col: c + 1,
                        msg: format!("not a finite number: {:?}", &rec[c]),
                    })
                }
            }
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(Error::Parse { row: 0, col: 0, msg: "no data rows".into() });
    }
    Ok(Dataset::new(name, Mat::from_rows(&rows)?))
}

/// One row per sample, shortest round-trip decimal for every value, no header.
pub fn write_csv(points: &Mat, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(points.rows() * points.cols() * 20);
    for r in points.iter_rows() {
        for (j, v) in r.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spirals_stay_within_radius() {
        let ds = two_spirals(2000, 0.05, 3).unwrap();
        for r in ds.points.iter_rows() {
            assert!((r[0] * r[0] + r[1] * r[1]).sqrt() < 2.2);
        }
        // Noise-free arms have radius exactly 2 at the outer end.
        let p = TwoSpirals::arm_point(1.0, 0);
        assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn spirals_arm_balance_within_binomial_bounds() {
        let n = 10_000;
        let (_, arms) = two_spirals_with_arms(n, 0.05, 4).unwrap();
        let a = arms.iter().filter(|&&k| k == 0).count() as f64;
        // 4 binomial standard deviations: 4·sqrt(n/4) = 200
        assert!((a - n as f64 / 2.0).abs() < 200.0, "{a}");
    }

    #[test]
    fn generators_are_seed_deterministic() {
        assert_eq!(two_spirals(100, 0.05, 1).unwrap(), two_spirals(100, 0.05, 1).unwrap());
        assert_ne!(two_spirals(100, 0.05, 1).unwrap(), two_spirals(100, 0.05, 2).unwrap());
        assert_eq!(checkerboard(100, 1).unwrap(), checkerboard(100, 1).unwrap());
        assert_eq!(
            gaussian_mixture_grid(100, 3, 1.0, 0.1, 5).unwrap(),
            gaussian_mixture_grid(100, 3, 1.0, 0.1, 5).unwrap()
        );
        assert!(two_spirals(0, 0.05, 1).is_err());
        assert!(checkerboard(0, 1).is_err());
    }

    #[test]
    fn checkerboard_on_squares_only_and_uniform() {
        let n = 100_000;
        let ds = checkerboard(n, 9).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        for r in ds.points.iter_rows() {
            assert!(Checkerboard::is_on(r), "{r:?}");
            *counts.entry(Checkerboard::square_of(r).unwrap()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 8);
        let e = n as f64 / 8.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // χ²₇ 99.9% quantile ≈ 24.3
        assert!(chi2 < 24.3, "{chi2}");
        assert_eq!(Checkerboard::on_squares().len() * 2, 16);
    }

    #[test]
    fn mixture_grid_tail_and_occupancy() {
        let n = 50_000;
        let (ds, spec) = gaussian_mixture_grid(n, 5, 2.0, 0.1, 2).unwrap();
        let mut counts = vec![0usize; 25];
        let mut near = 0;
        for r in ds.points.iter_rows() {
            let (k, d) = spec.nearest(r);
            counts[k] += 1;
            if d <= 0.3 {
                near += 1;
            }
        }
        // 2D: P(‖z‖ > 3) = e^{-4.5} ≈ 1.1%; the 3σ radius catches ~98.9%.
        assert!(near as f64 / n as f64 > 0.985);
        let e = n as f64 / 25.0;
        let sd = (n as f64 * (1.0 / 25.0) * (24.0 / 25.0)).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - e).abs() < 5.0 * sd), "{counts:?}");
    }

    #[test]
    fn single_component_grid_is_plain_gaussian() {
        let spec = mixture_grid_spec(1, 2.0, 1.0).unwrap();
        assert_eq!(spec.means, vec![vec![0.0, 0.0]]);
        assert!((spec.log_density(&[0.0, 0.0]) + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((mixture_log_density(&spec, &[0.0, 0.0]) - (-1.8379)).abs() < 1e-4);
    }

    #[test]
    fn mixture_symmetry_and_smoothing() {
        let spec = mixture_grid_spec(5, 2.0, 0.1).unwrap();
        let a = spec.log_density(&[2.0, -4.0]);
        let b = spec.log_density(&[-2.0, 4.0]);
        let c = spec.log_density(&[4.0, 2.0]);
        assert!((a - b).abs() < 1e-12 && (a - c).abs() < 1e-12);
        assert!(spec.log_density_convolved(&[0.0, 0.0], 0.2) < spec.log_density(&[0.0, 0.0]));
    }

    #[test]
    fn convolved_score_matches_finite_differences() {
        let spec = mixture_grid_spec(2, 1.0, 0.3).unwrap();
        let x = [0.2, -0.7];
        let g = spec.score_convolved(&x, 0.2);
        let h = 1e-6;
        for j in 0..2 {
            let mut a = x;
            let mut b = x;
            a[j] += h;
            b[j] -= h;
            let fd = (spec.log_density_convolved(&a, 0.2) - spec.log_density_convolved(&b, 0.2)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let text = "1.5,2\n-3,4.25\n0.1,1e-3\n";
        let ds = parse_csv(text, "t").unwrap();
        assert_eq!(ds.points, Mat::from_rows(&[[1.5, 2.0], [-3.0, 4.25], [0.1, 1e-3]]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        ds.write_csv(&p).unwrap();
        assert_eq!(load_csv(&p, false).unwrap().points, ds.points);

        let with_header = parse_csv("a,b\n1,2\n", "t").unwrap();
        assert_eq!(with_header.points, Mat::from_rows(&[[1.0, 2.0]]).unwrap());
    }

    #[test]
    fn csv_errors_carry_location() {
        match parse_csv("1,2\n3\n", "t") {
            Err(Error::Parse { row: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_csv("1,2\n3,x\n", "t") {
            Err(Error::Parse { row: 2, col: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_csv("", "t"), Err(Error::Parse { .. })));
        assert!(matches!(parse_csv("a,b\n", "t"), Err(Error::Parse { .. })));
    }

    #[test]
    fn standardization_is_exact_and_invertible() {
        let mut r = rng::stream(1, "t", 0);
        let raw = GaussianSource::isotropic(vec![3.0, -7.0, 0.5], 4.0).sample(1000, &mut r);
        let mut ds = Dataset::new("g", raw.clone());
        ds.standardize().unwrap();
        let mean = ds.points.column_means();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
        for j in 0..3 {
            let v: f64 = ds.points.iter_rows().map(|r| r[j] * r[j]).sum::<f64>() / 1000.0;
            assert!((v.sqrt() - 1.0).abs() < 1e-12);
        }
        let mut back = ds.points.clone();
        ds.standardization.as_ref().unwrap().invert(&mut back);
        let err = back.as_slice().iter().zip(raw.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }
}
