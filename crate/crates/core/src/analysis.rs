//! Statistical checks of the Monte Carlo dynamics.
//!
//! The small-mutation limit predicts the first and second jump moments of the
//! chain (drift and diffusion). For a linear loss `U = g . x` these have
//! closed forms that the estimators here can be compared against, and for a
//! quadratic loss the finite-beta chain must sample the Boltzmann
//! distribution `exp(-beta U)`.

use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{propose_into, Beta, McState, MutationConfig, MutationScale};
use crate::ensemble::trajectory_rng;
use crate::error::{Error, Result};
use crate::model::{fd_coordinate, init_params, Architecture, Dataset, NetworkLoss, Objective};

const PROBE_CHUNK: usize = 4096;

/// Analytic test losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyLoss {
    /// `U(x) = kappa/2 * |x|^2` in `dim` dimensions.
    Quadratic { kappa: f64, dim: usize },
    /// `U(x) = g . x`.
    Linear { g: Vec<f64> },
}

impl ToyLoss {
    pub fn quadratic(kappa: f64, dim: usize) -> Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::invalid("kappa", "must be positive"));
        }
        if dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        Ok(Self::Quadratic { kappa, dim })
    }

    pub fn linear(g: Vec<f64>) -> Result<Self> {
        if g.is_empty() || g.iter().any(|v| !v.is_finite()) || g.iter().all(|&v| v == 0.0) {
            return Err(Error::invalid("g", "must be finite and nonzero"));
        }
        Ok(Self::Linear { g })
    }
}

impl Objective for ToyLoss {
    fn dim(&self) -> usize {
        match self {
            Self::Quadratic { dim, .. } => *dim,
            Self::Linear { g } => g.len(),
        }
    }

    fn value(&self, x: &[f64]) -> f64 {
        match self {
            Self::Quadratic { kappa, .. } => 0.5 * kappa * x.iter().map(|v| v * v).sum::<f64>(),
            Self::Linear { g } => g.iter().zip(x).map(|(a, b)| a * b).sum(),
        }
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        match self {
            Self::Quadratic { kappa, .. } => {
                for (g, v) in grad.iter_mut().zip(x) {
                    *g = kappa * v;
                }
            }
            Self::Linear { g } => grad.copy_from_slice(g),
        }
    }
}

/// Leading-order drift per Monte Carlo step at a point with gradient `grad`:
/// `-(beta sigma_i^2 / 2) g_i` for finite beta and
/// `-(sigma_i / sqrt(2 pi)) sigma_i g_i / |sigma g|` at infinite beta.
pub fn predicted_drift(config: &MutationConfig, grad: &[f64]) -> Vec<f64> {
    let s = &config.sigma;
    match config.beta {
        Beta::Finite(b) => (0..grad.len()).map(|i| -0.5 * b * s.at(i).powi(2) * grad[i]).collect(),
        Beta::Infinite => {
            let n = (0..grad.len()).map(|i| (s.at(i) * grad[i]).powi(2)).sum::<f64>().sqrt();
            (0..grad.len())
                .map(|i| -s.at(i) / (2.0 * PI).sqrt() * s.at(i) * grad[i] / n)
                .collect()
        }
    }
}

/// Leading-order diagonal second moment per step: `sigma_i^2` (finite beta)
/// or `sigma_i^2 / 2` (infinite beta). Off-diagonal moments vanish.
pub fn predicted_diffusion(config: &MutationConfig, dim: usize) -> Vec<f64> {
    let factor = if config.beta.is_infinite() { 0.5 } else { 1.0 };
    (0..dim).map(|i| factor * config.sigma.at(i).powi(2)).collect()
}

/// Leading-order mean loss change per step, `-(beta sigma^2 / 2) |g|^2` or
/// `-(sigma / sqrt(2 pi)) |g|`, for an isotropic mutation scale.
pub fn predicted_loss_rate(beta: Beta, sigma: f64, grad_norm: f64) -> f64 {
    match beta {
        Beta::Finite(b) => -0.5 * b * sigma * sigma * grad_norm * grad_norm,
        Beta::Infinite => -sigma / (2.0 * PI).sqrt() * grad_norm,
    }
}

/// Empirical jump moments of single Monte Carlo steps from a fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub samples: usize,
    pub drift: Vec<f64>,
    pub drift_se: Vec<f64>,
    /// `E[dx_i dx_j]`, row-major `dim x dim`.
    pub second_moment: Vec<Vec<f64>>,
    pub second_moment_se: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub mean_loss_change: f64,
    pub mean_loss_change_se: f64,
}

#[derive(Debug, Clone)]
struct ProbeSums {
    n: usize,
    accepted: usize,
    d: Vec<f64>,
    d2: Vec<f64>,
    cross: Vec<f64>,
    cross2: Vec<f64>,
    du: f64,
    du2: f64,
}

impl ProbeSums {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            accepted: 0,
            d: vec![0.0; dim],
            d2: vec![0.0; dim],
            cross: vec![0.0; dim * dim],
            cross2: vec![0.0; dim * dim],
            du: 0.0,
            du2: 0.0,
        }
    }

    fn merge(&mut self, o: &Self) {
        self.n += o.n;
        self.accepted += o.accepted;
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.d, &o.d);
        add(&mut self.d2, &o.d2);
        add(&mut self.cross, &o.cross);
        add(&mut self.cross2, &o.cross2);
        self.du += o.du;
        self.du2 += o.du2;
    }
}

fn mean_and_se(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let m = sum / nf;
    let var = ((sum_sq - nf * m * m) / (nf - 1.0)).max(0.0);
    (m, (var / nf).sqrt())
}

/// Samples `n_probes` single Metropolis steps from `point`. Rejected probes
/// contribute zero displacement. Probes are split into fixed chunks, chunk
/// `c` drawing from stream `c` of `seed`.
pub fn estimate_drift_diffusion<O: Objective + ?Sized>(
    objective: &O,
    point: &[f64],
    config: &MutationConfig,
    n_probes: usize,
    seed: u64,
) -> Result<MomentReport> {
    if n_probes < 1000 {
        return Err(Error::invalid("n_probes", "must be at least 1000"));
    }
    let dim = objective.dim();
    if point.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, actual: point.len() });
    }
    config.sigma.validate(dim)?;
    config.beta.validate()?;
    let base_loss = objective.value(point);

    let chunks = n_probes.div_ceil(PROBE_CHUNK);
    let partials: Vec<ProbeSums> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let count = PROBE_CHUNK.min(n_probes - c * PROBE_CHUNK);
            let mut rng = trajectory_rng(seed, c as u64);
            let mut state = McState::with_loss(point.to_vec(), base_loss);
            let mut sums = ProbeSums::new(dim);
            let mut disp = vec![0.0; dim];
            for _ in 0..count {
                state.reset(point, base_loss);
                let out = state.step(objective, config, &mut rng);
                sums.n += 1;
                if out.accepted {
                    sums.accepted += 1;
                    let du = state.loss() - base_loss;
                    sums.du += du;
                    sums.du2 += du * du;
                }
                for (d, (a, b)) in disp.iter_mut().zip(state.params().iter().zip(point)) {
                    *d = a - b;
                }
                for i in 0..dim {
                    sums.d[i] += disp[i];
                    sums.d2[i] += disp[i] * disp[i];
                    for j in 0..dim {
                        let p = disp[i] * disp[j];
                        sums.cross[i * dim + j] += p;
                        sums.cross2[i * dim + j] += p * p;
                    }
                }
            }
            sums
        })
        .collect();
    let mut total = ProbeSums::new(dim);
    for p in &partials {
        total.merge(p);
    }

    let n = total.n;
    let (drift, drift_se): (Vec<f64>, Vec<f64>) =
        (0..dim).map(|i| mean_and_se(total.d[i], total.d2[i], n)).unzip();
    let mut second_moment = vec![vec![0.0; dim]; dim];
    let mut second_moment_se = vec![vec![0.0; dim]; dim];
    for i in 0..dim {
        for j in 0..dim {
            let (m, se) = mean_and_se(total.cross[i * dim + j], total.cross2[i * dim + j], n);
            second_moment[i][j] = m;
            second_moment_se[i][j] = se;
        }
    }
    let (mean_loss_change, mean_loss_change_se) = mean_and_se(total.du, total.du2, n);
    Ok(MomentReport {
        samples: n,
        drift,
        drift_se,
        second_moment,
        second_moment_se,
        acceptance_rate: total.accepted as f64 / n as f64,
        mean_loss_change,
        mean_loss_change_se,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryConfig {
    pub beta: f64,
    /// Proposal scale; `None` uses `2.4 / sqrt(beta * kappa * dim)`.
    pub sigma: Option<f64>,
    pub steps: u64,
    pub burn_in: u64,
    /// Spacing of the energy samples entering the histogram test.
    pub thin: u64,
    pub bins: usize,
    /// Number of batches for the batch-means standard error.
    pub batches: usize,
}

impl Default for StationaryConfig {
    fn default() -> Self {
        Self {
            beta: 10.0,
            sigma: None,
            steps: 1_000_000,
            burn_in: 100_000,
            thin: 50,
            bins: 20,
            batches: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryReport {
    pub sigma: f64,
    pub acceptance_rate: f64,
    pub empirical_mean: Vec<f64>,
    /// Batch-means standard error of the mean.
    pub mean_se: Vec<f64>,
    pub empirical_variance: Vec<f64>,
    pub boltzmann_variance: f64,
    /// Pearson statistic of `beta U` against its Gamma(dim/2, 1) law.
    pub energy_chi_square: f64,
    pub energy_dof: usize,
    /// 99.9% quantile of the chi-square law with `energy_dof` degrees.
    pub energy_chi_square_critical: f64,
    /// `beta U` every `thin` steps after burn-in.
    #[serde(default, skip)]
    pub energies: Vec<f64>,
}

impl StationaryReport {
    pub fn max_variance_rel_error(&self) -> f64 {
        self.empirical_variance
            .iter()
            .map(|v| (v / self.boltzmann_variance - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_mean_z(&self) -> f64 {
        self.empirical_mean
            .iter()
            .zip(&self.mean_se)
            .map(|(m, se)| (m / se).abs())
            .fold(0.0, f64::max)
    }
}

/// Runs one long finite-beta chain on a quadratic loss and compares its
/// moments and energy histogram with the Boltzmann distribution.
pub fn stationary_check<R: Rng + ?Sized>(
    kappa: f64,
    dim: usize,
    config: &StationaryConfig,
    rng: &mut R,
) -> Result<StationaryReport> {
    let toy = ToyLoss::quadratic(kappa, dim)?;
    let beta = Beta::finite(config.beta)?;
    let Beta::Finite(b) = beta else {
        return Err(Error::invalid("beta", "stationarity requires finite beta"));
    };
    if config.steps == 0 || config.batches < 2 || config.bins < 2 || config.thin == 0 {
        return Err(Error::invalid("stationary", "steps, batches, bins and thin must be positive"));
    }
    let sigma = config.sigma.unwrap_or(2.4 / (b * kappa * dim as f64).sqrt());
    let mutation = MutationConfig::isotropic(sigma, beta);
    let mut state = McState::new(&toy, vec![0.0; dim]);
    for _ in 0..config.burn_in {
        state.step(&toy, &mutation, rng);
    }

    let batch_len = (config.steps / config.batches as u64).max(1);
    let mut batch_sums = vec![vec![0.0; dim]; config.batches];
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    let mut energies = Vec::with_capacity((config.steps / config.thin) as usize + 1);
    let mut accepted = 0u64;
    for t in 0..config.steps {
        accepted += state.step(&toy, &mutation, rng).accepted as u64;
        let x = state.params();
        let batch = ((t / batch_len) as usize).min(config.batches - 1);
        for i in 0..dim {
            sum[i] += x[i];
            sum_sq[i] += x[i] * x[i];
            batch_sums[batch][i] += x[i];
        }
        if t % config.thin == 0 {
            energies.push(b * state.loss());
        }
    }

    let n = config.steps as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let variance: Vec<f64> = (0..dim).map(|i| (sum_sq[i] - n * mean[i] * mean[i]) / (n - 1.0)).collect();
    let mean_se = (0..dim)
        .map(|i| {
            let counts: Vec<f64> = (0..config.batches)
                .map(|k| {
                    if k + 1 == config.batches {
                        (config.steps - batch_len * k as u64) as f64
                    } else {
                        batch_len as f64
                    }
                })
                .collect();
            let means: Vec<f64> = batch_sums.iter().zip(&counts).map(|(s, c)| s[i] / c).collect();
            let nb = means.len() as f64;
            let bm = means.iter().sum::<f64>() / nb;
            let var = means.iter().map(|m| (m - bm) * (m - bm)).sum::<f64>() / (nb - 1.0);
            (var / nb).sqrt()
        })
        .collect();

    let (chi2, dof, critical) = energy_histogram_test(&energies, dim, config.bins)?;
    Ok(StationaryReport {
        sigma,
        acceptance_rate: accepted as f64 / n,
        empirical_mean: mean,
        mean_se,
        empirical_variance: variance,
        boltzmann_variance: 1.0 / (b * kappa),
        energy_chi_square: chi2,
        energy_dof: dof,
        energy_chi_square_critical: critical,
        energies,
    })
}

/// Regularized lower incomplete gamma `P(a, x)` for `a` a positive multiple
/// of 1/2, the CDF of `beta U` for a quadratic loss in `2a` dimensions.
pub fn half_integer_gamma_cdf(a2: usize, x: f64) -> f64 {
    assert!(a2 > 0, "shape must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    // Start from P(1/2, x) = erf(sqrt x) or P(1, x) = 1 - exp(-x), then step
    // up with P(a + 1, x) = P(a, x) - x^a exp(-x) / Gamma(a + 1).
    let (mut a, mut p) = if a2 % 2 == 1 {
        (0.5, libm::erf(x.sqrt()))
    } else {
        (1.0, -(-x).exp_m1())
    };
    while a < a2 as f64 / 2.0 {
        p -= (a * x.ln() - x - libm::lgamma(a + 1.0)).exp();
        a += 1.0;
    }
    p.clamp(0.0, 1.0)
}

/// Upper quantile of the chi-square law (Wilson-Hilferty approximation).
fn chi_square_quantile(dof: usize, z: f64) -> f64 {
    let k = dof as f64;
    let c = 2.0 / (9.0 * k);
    k * (1.0 - c + z * c.sqrt()).powi(3)
}

/// Pearson chi-square of `beta U` samples against Gamma(dim/2, 1) using
/// equal-probability bins.
fn energy_histogram_test(samples: &[f64], dim: usize, bins: usize) -> Result<(f64, usize, f64)> {
    let mut counts = vec![0usize; bins];
    for &e in samples {
        let u = half_integer_gamma_cdf(dim, e);
        counts[((u * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let expected = samples.len() as f64 / bins as f64;
    let chi2 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dof = bins - 1;
    // z = 3.090 is the standard-normal 99.9% point.
    Ok((chi2, dof, chi_square_quantile(dof, 3.090)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub sigma: f64,
    pub rate: f64,
    pub se: f64,
}

/// Fraction of isotropic proposals with `dU <= 0` (the infinite-beta
/// acceptance rule) at each mutation scale.
pub fn acceptance_rate_limit<O: Objective + ?Sized>(
    objective: &O,
    point: &[f64],
    sigmas: &[f64],
    n_probes: usize,
    seed: u64,
) -> Result<Vec<RateEstimate>> {
    if n_probes == 0 {
        return Err(Error::invalid("n_probes", "must be positive"));
    }
    if point.len() != objective.dim() {
        return Err(Error::DimensionMismatch { expected: objective.dim(), actual: point.len() });
    }
    let base = objective.value(point);
    sigmas
        .iter()
        .enumerate()
        .map(|(s_idx, &sigma)| {
            MutationScale::Isotropic(sigma).validate(point.len())?;
            let scale = MutationScale::Isotropic(sigma);
            let chunks = n_probes.div_ceil(PROBE_CHUNK);
            let hits: usize = (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let count = PROBE_CHUNK.min(n_probes - c * PROBE_CHUNK);
                    let mut rng = trajectory_rng(seed ^ (s_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), c as u64);
                    let mut cand = vec![0.0; point.len()];
                    (0..count)
                        .filter(|_| {
                            propose_into(point, &scale, &mut rng, &mut cand);
                            objective.value(&cand) - base <= 0.0
                        })
                        .count()
                })
                .sum();
            let rate = hits as f64 / n_probes as f64;
            let se = (rate * (1.0 - rate) / n_probes as f64).sqrt();
            Ok(RateEstimate { sigma, rate, se })
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor used by [`grad_check_suite`]; gradient components
/// smaller than this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Finite-difference step scale used by [`grad_check_suite`].
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub points: usize,
    /// Coordinates checked per point; `None` checks all of them.
    pub coords_per_point: Option<usize>,
    /// Standard deviation of the random parameter vectors.
    pub param_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub points: usize,
    pub coordinates_checked: usize,
    pub max_rel_error: f64,
    pub worst_point: usize,
    pub worst_coordinate: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares analytic and five-point central-difference gradients of the network loss at
/// random parameter vectors and reports the worst relative error.
pub fn grad_check_suite(arch: &Architecture, data: &Dataset, config: &GradCheckConfig) -> Result<GradCheckReport> {
    if config.points == 0 {
        return Err(Error::invalid("points", "must be at least 1"));
    }
    arch.validate()?;
    let objective = NetworkLoss::new(*arch, data.clone());
    let dim = arch.param_count();
    let per_point: Vec<(usize, f64, usize, f64, f64)> = (0..config.points)
        .into_par_iter()
        .map(|p| {
            let mut rng = trajectory_rng(config.seed, p as u64);
            let x = init_params(arch, config.param_std, &mut rng);
            let coords: Vec<usize> = match config.coords_per_point {
                Some(k) if k < dim => index::sample(&mut rng, dim, k).into_vec(),
                _ => (0..dim).collect(),
            };
            let g = objective.gradient_vec(&x);
            let mut probe = x.clone();
            let f = |v: &[f64]| objective.value(v);
            let mut worst = (0.0, 0, 0.0, 0.0);
            for &i in &coords {
                let fd = fd_coordinate(&f, &mut probe, i, FD_STEP);
                let e = relative_error(g[i], fd, GRAD_CHECK_FLOOR);
                if e > worst.0 || (worst.0 == 0.0 && i == coords[0]) {
                    worst = (e, i, g[i], fd);
                }
            }
            (coords.len(), worst.0, worst.1, worst.2, worst.3)
        })
        .collect();
    let (worst_point, &(_, max_rel_error, worst_coordinate, worst_analytic, worst_numeric)) = per_point
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("at least one point");
    Ok(GradCheckReport {
        points: config.points,
        coordinates_checked: per_point.iter().map(|p| p.0).sum(),
        max_rel_error,
        worst_point,
        worst_coordinate,
        worst_analytic,
        worst_numeric,
    })
}
