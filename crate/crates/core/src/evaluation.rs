//! Density grids, importance-sampled normalizing constants, average log-likelihood and
//! mode coverage.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{log_sum_exp, Dataset, MixtureSpec};
use crate::dde::DdeModel;
use crate::diffengine::Mat;
use crate::error::{Error, Result};
use crate::rng;

/// Unnormalized log-density evaluated on batches of points.
pub trait Energy {
    fn dim(&self) -> usize;
    fn log_density_batch(&self, x: &Mat) -> Result<Vec<f64>>;
}

impl Energy for DdeModel {
    fn dim(&self) -> usize {
        DdeModel::dim(self)
    }

    fn log_density_batch(&self, x: &Mat) -> Result<Vec<f64>> {
        DdeModel::log_density_batch(self, x)
    }
}

impl Energy for MixtureSpec {
    fn dim(&self) -> usize {
        MixtureSpec::dim(self)
    }

    fn log_density_batch(&self, x: &Mat) -> Result<Vec<f64>> {
        Ok(x.iter_rows().map(|r| self.log_density(r)).collect())
    }
}

/// Energy given by a closure over single points.
pub struct FnEnergy<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64> FnEnergy<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnEnergy { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64> Energy for FnEnergy<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_batch(&self, x: &Mat) -> Result<Vec<f64>> {
        Ok(x.iter_rows().map(|r| (self.f)(r)).collect())
    }
}

fn check_dim(energy: &dyn Energy, cols: usize) -> Result<()> {
    if energy.dim() != cols {
        return Err(Error::config(format!("points have {cols} dimensions, energy expects {}", energy.dim())));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    /// `[(x_lo, x_hi), (y_lo, y_hi)]`
    pub bounds: [(f64, f64); 2],
    /// `[nx, ny]`
    pub resolution: [usize; 2],
    /// `s` at cell centres, index `iy·nx + ix`, `iy = 0` at the low-y edge.
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        cell_center(&self.bounds, &self.resolution, ix, iy)
    }

    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.resolution[0] + ix]
    }

    /// `exp(s)` normalized to sum to one over the grid.
    pub fn normalized_density(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.values);
        self.values.iter().map(|v| (v - lse).exp()).collect()
    }

    /// Sum of absolute differences between horizontally and vertically adjacent cells of
    /// the normalized density. Lower means smoother.
    pub fn total_variation(&self) -> f64 {
        let d = self.normalized_density();
        let [nx, ny] = self.resolution;
        let mut tv = 0.0;
        for iy in 0..ny {
            for ix in 0..nx {
                let v = d[iy * nx + ix];
                if ix + 1 < nx {
                    tv += (d[iy * nx + ix + 1] - v).abs();
                }
                if iy + 1 < ny {
                    tv += (d[(iy + 1) * nx + ix] - v).abs();
                }
            }
        }
        tv
    }

    /// `x,y,s` with a header line, one row per cell in storage order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("x,y,s\n");
        for iy in 0..self.resolution[1] {
            for ix in 0..self.resolution[0] {
                let [x, y] = self.cell_center(ix, iy);
                out.push_str(&format!("{x},{y},{}\n", self.value(ix, iy)));
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Binary PPM (P6): header `P6\n{nx} {ny}\n255\n`, then `nx·ny` RGB byte triples,
    /// top image row first (the top row is the highest y). Values are min-max scaled to
    /// `t ∈ [0,1]` and coloured black → red → yellow → white.
    pub fn to_ppm(&self) -> Vec<u8> {
        let [nx, ny] = self.resolution;
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut out = format!("P6\n{nx} {ny}\n255\n").into_bytes();
        out.reserve(nx * ny * 3);
        for row in (0..ny).rev() {
            for ix in 0..nx {
                let t = (self.value(ix, row) - lo) / span;
                out.extend_from_slice(&heat_color(t));
            }
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

fn heat_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    let ch = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(t), ch(t - 1.0), ch(t - 2.0)]
}

fn cell_center(bounds: &[(f64, f64); 2], res: &[usize; 2], ix: usize, iy: usize) -> [f64; 2] {
    let x = bounds[0].0 + (ix as f64 + 0.5) * (bounds[0].1 - bounds[0].0) / res[0] as f64;
    let y = bounds[1].0 + (iy as f64 + 0.5) * (bounds[1].1 - bounds[1].0) / res[1] as f64;
    [x, y]
}

/// Evaluate a 2D energy at the centres of a regular grid.
pub fn density_grid(energy: &dyn Energy, bounds: [(f64, f64); 2], resolution: [usize; 2]) -> Result<DensityGrid> {
    if energy.dim() != 2 {
        return Err(Error::Unsupported(format!("density grids need a 2D model, got {}D", energy.dim())));
    }
    if resolution.contains(&0) {
        return Err(Error::config("grid resolution must be positive"));
    }
    if bounds.iter().any(|(lo, hi)| !(hi > lo)) {
        return Err(Error::config("grid bounds must satisfy lo < hi"));
    }
    let [nx, ny] = resolution;
    let mut pts = Mat::zeros(nx * ny, 2);
    for iy in 0..ny {
        for ix in 0..nx {
            pts.row_mut(iy * nx + ix).copy_from_slice(&cell_center(&bounds, &resolution, ix, iy));
        }
    }
    let values = energy.log_density_batch(&pts)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("density grid produced a non-finite value".into()));
    }
    Ok(DensityGrid { bounds, resolution, values })
}

/// Gaussian importance-sampling proposal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianProposal {
    pub mean: Vec<f64>,
    /// Row-major `d×d`; a diagonal proposal stores zeros off the diagonal.
    pub cov: Vec<f64>,
}

impl GaussianProposal {
    pub fn isotropic(mean: Vec<f64>, std: f64) -> Self {
        let d = mean.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = std * std;
        }
        GaussianProposal { mean, cov }
    }

    /// Mean and covariance of the data; `diagonal` keeps only per-dimension variances.
    pub fn moment_matched(data: &Mat, diagonal: bool) -> Result<Self> {
        if data.rows() < 2 {
            return Err(Error::contract("moment matching needs at least two points"));
        }
        let (mean, mut cov) = sample_moments(data);
        if diagonal {
            let d = mean.len();
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        cov[i * d + j] = 0.0;
                    }
                }
            }
        }
        Ok(GaussianProposal { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cholesky(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let d = self.dim();
        if self.cov.len() != d * d {
            return Err(Error::config("proposal covariance has the wrong size"));
        }
        DMatrix::from_row_slice(d, d, &self.cov)
            .cholesky()
            .ok_or_else(|| Error::config("proposal covariance is not positive definite"))
    }
}

/// Mean and maximum-likelihood covariance (row-major) of the rows of `x`.
pub fn sample_moments(x: &Mat) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let mean = x.column_means();
    let mut cov = vec![0.0; d * d];
    for r in x.iter_rows() {
        for i in 0..d {
            let a = r[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += a * (r[j] - mean[j]);
            }
        }
    }
    let n = x.rows().max(1) as f64;
    cov.iter_mut().for_each(|c| *c /= n);
    (mean, cov)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogZEstimate {
    pub log_z: f64,
    pub repeats: usize,
    pub samples_per_repeat: usize,
    /// Sample variance (n−1 denominator) of the per-repeat estimates.
    pub variance: f64,
    pub per_repeat: Vec<f64>,
}

/// `log Z = log E_{x~q}[exp(s(x)) / q(x)]`, computed with log-sum-exp for each repeat and
/// averaged over repeats. Repeat `r` draws from the stream `(seed, "logz", r)`.
pub fn estimate_log_partition(
    energy: &dyn Energy,
    proposal: &GaussianProposal,
    n_per: usize,
    repeats: usize,
    seed: u64,
) -> Result<LogZEstimate> {
    if repeats < 2 {
        return Err(Error::contract("partition estimates need at least two repeats"));
    }
    if n_per == 0 {
        return Err(Error::contract("partition estimates need samples"));
    }
    check_dim(energy, proposal.dim())?;
    let d = proposal.dim();
    let chol = proposal.cholesky()?;
    let l = chol.l();
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);

    let mut per_repeat = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let mut r = rng::stream(seed, "logz", rep as u64);
        let mut log_w = Vec::with_capacity(n_per);
        let chunk = 8192;
        let mut done = 0;
        while done < n_per {
            let m = chunk.min(n_per - done);
            let mut x = Mat::zeros(m, d);
            let mut log_q = Vec::with_capacity(m);
            for i in 0..m {
                let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut r)));
                let y = &l * &z;
                for j in 0..d {
                    x.set(i, j, proposal.mean[j] + y[j]);
                }
                log_q.push(log_norm - 0.5 * z.norm_squared());
            }
            let s = energy.log_density_batch(&x)?;
            log_w.extend(s.iter().zip(&log_q).map(|(s, q)| s - q));
            done += m;
        }
        let lse = log_sum_exp(&log_w);
        if !lse.is_finite() {
            return Err(Error::Estimation(format!("repeat {rep}: importance weights are all zero or invalid")));
        }
        per_repeat.push(lse - (n_per as f64).ln());
    }
    let mean = per_repeat.iter().sum::<f64>() / repeats as f64;
    let variance = per_repeat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
    Ok(LogZEstimate { log_z: mean, repeats, samples_per_repeat: n_per, variance, per_repeat })
}

/// Mean of `s(x) − log Z` over the test set.
pub fn avg_log_likelihood(energy: &dyn Energy, log_z: &LogZEstimate, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::contract("test set is empty"));
    }
    check_dim(energy, test.dim())?;
    let s = energy.log_density_batch(&test.points)?;
    Ok(s.iter().map(|v| v - log_z.log_z).sum::<f64>() / s.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub modes_hit: usize,
    pub total_modes: usize,
    pub histogram: Vec<usize>,
    /// KL(histogram ‖ uniform) over assigned samples, with 0·log 0 = 0.
    pub reverse_kl: f64,
    pub unassigned: usize,
    pub unassigned_fraction: f64,
}

/// Assign each sample to its nearest mode when within `radius_sigmas·std`.
pub fn mode_coverage(samples: &Mat, spec: &MixtureSpec, radius_sigmas: f64) -> Result<ModeReport> {
    if !(radius_sigmas > 0.0) {
        return Err(Error::contract("radius_sigmas must be positive"));
    }
    if samples.cols() != spec.dim() {
        return Err(Error::config("sample dimension does not match the mixture"));
    }
    let radius = radius_sigmas * spec.std;
    let k = spec.components();
    let mut histogram = vec![0usize; k];
    let mut unassigned = 0;
    for r in samples.iter_rows() {
        let (idx, dist) = spec.nearest(r);
        if dist <= radius {
            histogram[idx] += 1;
        } else {
            unassigned += 1;
        }
    }
    let assigned: usize = histogram.iter().sum();
    let reverse_kl = if assigned == 0 {
        f64::INFINITY
    } else {
        histogram
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let h = c as f64 / assigned as f64;
                h * (h * k as f64).ln()
            })
            .sum::<f64>()
            .max(0.0)
    };
    Ok(ModeReport {
        modes_hit: histogram.iter().filter(|&&c| c > 0).count(),
        total_modes: k,
        histogram,
        reverse_kl,
        unassigned,
        unassigned_fraction: if samples.rows() == 0 { 0.0 } else { unassigned as f64 / samples.rows() as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gaussian_mixture_grid, mixture_grid_spec, GaussianSource, SampleSource};
    use std::f64::consts::PI;

    fn neg_half_sq() -> FnEnergy<impl Fn(&[f64]) -> f64> {
        FnEnergy::new(2, |x: &[f64]| -0.5 * (x[0] * x[0] + x[1] * x[1]))
    }

    #[test]
    fn grid_peak_at_center_and_degenerate_grid() {
        let g = density_grid(&neg_half_sq(), [(-2.0, 2.0), (-2.0, 2.0)], [5, 5]).unwrap();
        let best = g.values.iter().cloned().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
        assert_eq!(best, 2 * 5 + 2);
        let one = density_grid(&neg_half_sq(), [(-1.0, 3.0), (0.0, 2.0)], [1, 1]).unwrap();
        assert_eq!(one.values, vec![-0.5 * (1.0 + 1.0)]);
        assert_eq!(one.cell_center(0, 0), [1.0, 1.0]);
    }

    #[test]
    fn grid_rejects_non_2d() {
        let e = FnEnergy::new(3, |_: &[f64]| 0.0);
        assert!(matches!(density_grid(&e, [(0.0, 1.0), (0.0, 1.0)], [2, 2]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn ppm_layout() {
        let g = DensityGrid { bounds: [(0.0, 1.0), (0.0, 1.0)], resolution: [2, 2], values: vec![0.0, 1.0, 2.0, 3.0] };
        let bytes = g.to_ppm();
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 12);
        // Top-left pixel is (ix=0, iy=1) = 2.0 → t = 2/3 → (255, 255, 0).
        assert_eq!(&bytes[header.len()..header.len() + 3], &[255, 255, 0]);
        // Bottom-left is the minimum → black.
        assert_eq!(&bytes[header.len() + 6..header.len() + 9], &[0, 0, 0]);
    }

    #[test]
    fn normalized_energy_has_zero_log_z() {
        let e = FnEnergy::new(2, |x: &[f64]| -0.5 * (x[0] * x[0] + x[1] * x[1]) - (2.0 * PI).ln());
        let est = estimate_log_partition(&e, &GaussianProposal::isotropic(vec![0.0, 0.0], 1.5), 51_200, 5, 1).unwrap();
        assert!(est.log_z.abs() < 0.02, "{est:?}");
    }

    #[test]
    fn unnormalized_gaussian_log_z_and_shift() {
        let prop = GaussianProposal::isotropic(vec![0.0, 0.0], 1.5);
        let est = estimate_log_partition(&neg_half_sq(), &prop, 51_200, 5, 2).unwrap();
        assert!((est.log_z - (2.0 * PI).ln()).abs() < 0.02, "{est:?}");
        let shifted = FnEnergy::new(2, |x: &[f64]| -0.5 * (x[0] * x[0] + x[1] * x[1]) + 3.0);
        let est2 = estimate_log_partition(&shifted, &prop, 51_200, 5, 2).unwrap();
        for (a, b) in est.per_repeat.iter().zip(&est2.per_repeat) {
            assert!((b - a - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_z_variance_shrinks_with_samples() {
        let prop = GaussianProposal::isotropic(vec![0.3, -0.2], 2.0);
        let small = estimate_log_partition(&neg_half_sq(), &prop, 2000, 40, 3).unwrap();
        let large = estimate_log_partition(&neg_half_sq(), &prop, 4000, 40, 3).unwrap();
        // Expected ratio 1/2; allow 2× statistical slack.
        assert!(large.variance < small.variance, "{} vs {}", large.variance, small.variance);
        assert!(large.variance <= small.variance * 0.5 * 2.0);
    }

    #[test]
    fn log_z_contracts() {
        let prop = GaussianProposal::isotropic(vec![0.0, 0.0], 1.0);
        assert!(estimate_log_partition(&neg_half_sq(), &prop, 10, 1, 0).is_err());
        let bad = GaussianProposal { mean: vec![0.0, 0.0], cov: vec![1.0, 2.0, 2.0, 1.0] };
        assert!(estimate_log_partition(&neg_half_sq(), &bad, 10, 2, 0).is_err());
        let dead = FnEnergy::new(2, |_: &[f64]| f64::NEG_INFINITY);
        assert!(matches!(estimate_log_partition(&dead, &prop, 10, 2, 0), Err(Error::Estimation(_))));
    }

    #[test]
    fn avg_ll_of_exact_gaussian_is_negative_entropy() {
        let e = FnEnergy::new(2, |x: &[f64]| -0.5 * (x[0] * x[0] + x[1] * x[1]));
        let prop = GaussianProposal::isotropic(vec![0.0, 0.0], 1.2);
        let z = estimate_log_partition(&e, &prop, 51_200, 5, 4).unwrap();
        let mut r = rng::stream(4, "test", 0);
        let test = Dataset::new("g", GaussianSource::isotropic(vec![0.0, 0.0], 1.0).sample(100_000, &mut r));
        let ll = avg_log_likelihood(&e, &z, &test).unwrap();
        // −(1 + log 2π); MC std of the mean ≈ 1/sqrt(1e5) ≈ 0.003
        assert!((ll + 1.0 + (2.0 * PI).ln()).abs() < 0.02, "{ll}");

        let shifted = FnEnergy::new(2, |x: &[f64]| -0.5 * (x[0] * x[0] + x[1] * x[1]) + 5.0);
        let z2 = LogZEstimate { log_z: z.log_z + 5.0, ..z.clone() };
        let ll2 = avg_log_likelihood(&shifted, &z2, &test).unwrap();
        assert!((ll - ll2).abs() < 1e-12);
        assert!(avg_log_likelihood(&e, &z, &Dataset::new("e", Mat::zeros(0, 2))).is_err());
    }

    #[test]
    fn mode_coverage_exact_and_degenerate() {
        let spec = mixture_grid_spec(5, 2.0, 0.1).unwrap();
        let centers = Mat::from_rows(&spec.means).unwrap();
        let rep = mode_coverage(&centers, &spec, 3.0).unwrap();
        assert_eq!(rep.modes_hit, 25);
        assert!(rep.reverse_kl.abs() < 1e-12);
        let one = Mat::from_rows(&vec![spec.means[7].clone(); 40]).unwrap();
        let rep = mode_coverage(&one, &spec, 3.0).unwrap();
        assert_eq!(rep.modes_hit, 1);
        assert!((rep.reverse_kl - 25f64.ln()).abs() < 1e-12);
        assert!((25f64.ln() - 3.2189).abs() < 1e-4);
    }

    #[test]
    fn mode_coverage_of_true_samples() {
        let (ds, spec) = gaussian_mixture_grid(100_000, 5, 2.0, 0.1, 8).unwrap();
        let rep = mode_coverage(&ds.points, &spec, 3.0).unwrap();
        assert_eq!(rep.modes_hit, 25);
        assert!(rep.reverse_kl < 0.01, "{rep:?}");
        // A 3σ disc in 2D leaves e^{-4.5} ≈ 1.11% of the mass outside; MC std at 1e5 ≈ 0.033%.
        assert!((rep.unassigned_fraction - (-4.5f64).exp()).abs() < 0.0015, "{rep:?}");
        assert_eq!(rep.histogram.iter().sum::<usize>() + rep.unassigned, 100_000);
    }
}
