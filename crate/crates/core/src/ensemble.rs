//! Trajectories, ensembles and the common time axis.
//!
//! Gradient descent and neuroevolution are compared on a shared scaled time
//! `t = alpha * t_gd = alpha * lambda * t_evolution`. The mutation scale is
//! derived from `(alpha, lambda)` so that, in the small-mutation limit, one
//! Monte Carlo step covers the same scaled time as `lambda` descent steps.
//!
//! Ensembles fold per-trajectory records into running moments in trajectory
//! index order, so the summary is bit-identical for any worker count.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, Beta, McState, MutationConfig, MutationScale, NORM_FLOOR};
use crate::error::{Error, Result};
use crate::model::Objective;

/// Default spacing of the recording grid in scaled time.
pub const DEFAULT_RECORD_INTERVAL: f64 = 0.1;

/// Relative tolerance used when matching time grids and integer step ratios.
const GRID_TOL: f64 = 1e-9;

/// Random stream for trajectory `index` of an ensemble seeded with `master_seed`.
///
/// Streams share the ChaCha key derived from `master_seed` and differ in the
/// stream id, so they never overlap.
pub fn trajectory_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeScaling {
    /// Learning rate of the gradient-descent counterpart.
    pub alpha: f64,
    /// Scaled time covered by one Monte Carlo step, in units of `alpha`.
    pub lambda: f64,
}

impl TimeScaling {
    pub fn new(alpha: f64, lambda: f64) -> Result<Self> {
        let s = Self { alpha, lambda };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::invalid("alpha", format!("must be positive, got {}", self.alpha)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Mutation scale matching gradient descent at learning rate `alpha`:
/// `lambda * alpha * sqrt(2 pi)` at `beta = inf`, `lambda * sqrt(2 alpha / beta)`
/// otherwise.
pub fn derive_sigma(scaling: &TimeScaling, beta: Beta) -> Result<f64> {
    scaling.validate()?;
    beta.validate()?;
    Ok(match beta {
        Beta::Infinite => scaling.lambda * scaling.alpha * (2.0 * PI).sqrt(),
        Beta::Finite(b) => scaling.lambda * (2.0 * scaling.alpha / b).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Dynamics {
    Neuroevolution { beta: Beta },
    GradientDescent { clipped: bool },
    Langevin { beta: Beta },
}

impl Dynamics {
    pub fn is_gradient_descent(&self) -> bool {
        matches!(self, Self::GradientDescent { .. })
    }

    /// The gradient-descent scheme that the mean of this dynamics follows.
    pub fn gd_counterpart(&self) -> Self {
        match *self {
            Self::Neuroevolution { beta } | Self::Langevin { beta } => Self::GradientDescent {
                clipped: beta.is_infinite(),
            },
            gd => gd,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Neuroevolution { beta: Beta::Infinite } => "mc_infinite_beta",
            Self::Neuroevolution { .. } => "mc_finite_beta",
            Self::GradientDescent { clipped: true } => "gd_clipped",
            Self::GradientDescent { clipped: false } => "gd_plain",
            Self::Langevin { beta: Beta::Infinite } => "langevin_infinite_beta",
            Self::Langevin { .. } => "langevin_finite_beta",
        }
    }
}

/// A stepper together with its learning rate and step-size parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub dynamics: Dynamics,
    pub scaling: TimeScaling,
    /// Explicit mutation scale; derived from `scaling` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<MutationScale>,
}

impl DynamicsConfig {
    pub fn new(dynamics: Dynamics, alpha: f64, lambda: f64) -> Result<Self> {
        Ok(Self {
            dynamics,
            scaling: TimeScaling::new(alpha, lambda)?,
            sigma: None,
        })
    }

    pub fn gd_counterpart(&self) -> Self {
        Self {
            dynamics: self.dynamics.gd_counterpart(),
            scaling: self.scaling,
            sigma: None,
        }
    }

    pub fn sigma(&self) -> Result<MutationScale> {
        match (&self.sigma, self.dynamics) {
            (Some(s), _) => Ok(s.clone()),
            (None, Dynamics::Neuroevolution { beta } | Dynamics::Langevin { beta }) => {
                derive_sigma(&self.scaling, beta).map(MutationScale::Isotropic)
            }
            (None, Dynamics::GradientDescent { .. }) => Ok(MutationScale::Isotropic(0.0)),
        }
    }

    /// Scaled time covered by one step.
    pub fn time_per_step(&self) -> f64 {
        match self.dynamics {
            Dynamics::GradientDescent { .. } => self.scaling.alpha,
            _ => self.scaling.alpha * self.scaling.lambda,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        self.scaling.validate()?;
        match self.dynamics {
            Dynamics::Neuroevolution { beta } | Dynamics::Langevin { beta } => {
                beta.validate()?;
                self.sigma()?.validate(dim)?;
                if self.time_per_step() <= 0.0 {
                    return Err(Error::invalid("lambda", "must be positive for stochastic dynamics"));
                }
            }
            Dynamics::GradientDescent { .. } => {}
        }
        Ok(())
    }
}

/// Scaled time reached after `step` steps.
pub fn map_time(step: u64, scaling: &TimeScaling, dynamics: Dynamics) -> f64 {
    match dynamics {
        Dynamics::GradientDescent { .. } => step as f64 * scaling.alpha,
        _ => step as f64 * (scaling.alpha * scaling.lambda),
    }
}

/// Converts a scaled-time span into a whole number of steps.
pub fn steps_for(span: f64, config: &DynamicsConfig, field: &str) -> Result<u64> {
    let unit = config.time_per_step();
    let ratio = span / unit;
    let steps = ratio.round();
    if !(span.is_finite() && span >= 0.0) || (ratio - steps).abs() > GRID_TOL * ratio.max(1.0) {
        return Err(Error::invalid(
            field,
            format!("{span} is not a whole number of steps of length {unit}"),
        ));
    }
    Ok(steps as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub dynamics: DynamicsConfig,
    pub init: Vec<f64>,
    pub steps: u64,
    pub record_stride: u64,
    pub seed: u64,
}

impl TrajectorySpec {
    /// A spec running to scaled time `t_max` and recording every `record_interval`.
    pub fn on_grid(
        dynamics: DynamicsConfig,
        init: Vec<f64>,
        t_max: f64,
        record_interval: f64,
        seed: u64,
    ) -> Result<Self> {
        let steps = steps_for(t_max, &dynamics, "t_max")?;
        let record_stride = steps_for(record_interval, &dynamics, "record_interval")?;
        let spec = Self { dynamics, init, steps, record_stride, seed };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        if self.record_stride == 0 {
            return Err(Error::invalid("record_stride", "must be at least 1"));
        }
        if self.init.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("init", "parameters must be finite"));
        }
        self.dynamics.validate(self.init.len())
    }

    pub fn record_count(&self) -> usize {
        (self.steps / self.record_stride) as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub scaled_times: Vec<f64>,
    pub steps: Vec<u64>,
    pub params: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    /// Accepted Monte Carlo moves (zero for other dynamics).
    pub accepted: u64,
    pub total_steps: u64,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.scaled_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scaled_times.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.total_steps == 0 {
            0.0
        } else {
            self.accepted as f64 / self.total_steps as f64
        }
    }

    /// Largest increase between consecutive recorded losses.
    pub fn max_loss_increase(&self) -> f64 {
        self.losses
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Runs one trajectory on stream 0 of `spec.seed`.
pub fn run_trajectory<O: Objective + ?Sized>(objective: &O, spec: &TrajectorySpec) -> Result<TrajectoryRecord> {
    spec.check()?;
    if spec.init.len() != objective.dim() {
        return Err(Error::DimensionMismatch {
            expected: objective.dim(),
            actual: spec.init.len(),
        });
    }
    let mut rng = trajectory_rng(spec.seed, 0);
    simulate(objective, spec, &spec.init, 0, &mut rng, 0)
}

/// Core loop. `step_offset` shifts the clock (used by the reset protocol);
/// `index` only labels divergence errors.
fn simulate<O: Objective + ?Sized>(
    objective: &O,
    spec: &TrajectorySpec,
    init: &[f64],
    step_offset: u64,
    rng: &mut ChaCha8Rng,
    index: usize,
) -> Result<TrajectoryRecord> {
    let cfg = &spec.dynamics;
    let scaling = cfg.scaling;
    let capacity = spec.record_count();
    let mut rec = TrajectoryRecord {
        scaled_times: Vec::with_capacity(capacity),
        steps: Vec::with_capacity(capacity),
        params: Vec::with_capacity(capacity),
        losses: Vec::with_capacity(capacity),
        accepted: 0,
        total_steps: spec.steps,
    };
    let diverged = |step: u64| Error::Divergence { trajectory: index, step };
    let push = |rec: &mut TrajectoryRecord, step: u64, x: &[f64], loss: f64| -> Result<()> {
        if !loss.is_finite() {
            return Err(diverged(step));
        }
        let global = step + step_offset;
        rec.scaled_times.push(map_time(global, &scaling, cfg.dynamics));
        rec.steps.push(global);
        rec.params.push(x.to_vec());
        rec.losses.push(loss);
        Ok(())
    };

    match cfg.dynamics {
        Dynamics::Neuroevolution { beta } => {
            let mutation = MutationConfig::new(cfg.sigma()?, beta);
            let mut state = McState::new(objective, init.to_vec());
            push(&mut rec, 0, state.params(), state.loss())?;
            for step in 1..=spec.steps {
                let out = state.step(objective, &mutation, rng);
                if out.delta_loss.is_nan() {
                    return Err(diverged(step + step_offset));
                }
                rec.accepted += out.accepted as u64;
                if step % spec.record_stride == 0 {
                    push(&mut rec, step, state.params(), state.loss())?;
                }
            }
        }
        Dynamics::GradientDescent { clipped } => {
            let mut x = init.to_vec();
            let mut grad = vec![0.0; x.len()];
            push(&mut rec, 0, &x, objective.value(&x))?;
            for step in 1..=spec.steps {
                objective.gradient(&x, &mut grad);
                if clipped {
                    dynamics::gd_step_clipped(&mut x, &grad, scaling.alpha, NORM_FLOOR);
                } else {
                    dynamics::gd_step_plain(&mut x, &grad, scaling.alpha);
                }
                if step % spec.record_stride == 0 {
                    push(&mut rec, step, &x, objective.value(&x))?;
                }
            }
        }
        Dynamics::Langevin { beta } => {
            let sigma = cfg.sigma()?;
            let mut x = init.to_vec();
            let mut grad = vec![0.0; x.len()];
            push(&mut rec, 0, &x, objective.value(&x))?;
            for step in 1..=spec.steps {
                objective.gradient(&x, &mut grad);
                match (beta, &sigma) {
                    (Beta::Finite(b), s) => dynamics::langevin_step_finite(&mut x, &grad, b, s, rng),
                    (Beta::Infinite, MutationScale::Isotropic(s)) => {
                        dynamics::langevin_step_infinite(&mut x, &grad, *s, rng);
                    }
                    (Beta::Infinite, MutationScale::PerParameter(s)) => {
                        dynamics::langevin_step_noniso(&mut x, &grad, s, rng);
                    }
                }
                if step % spec.record_stride == 0 {
                    push(&mut rec, step, &x, objective.value(&x))?;
                }
            }
        }
    }
    Ok(rec)
}

/// Running shifted sums with Neumaier compensation. The shift is the first
/// value added, so identical inputs reproduce their value exactly.
#[derive(Debug, Clone)]
struct Moments {
    count: usize,
    shift: Vec<f64>,
    sum: Vec<f64>,
    comp: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            count: 0,
            shift: vec![0.0; dim],
            sum: vec![0.0; dim],
            comp: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        if self.count == 0 {
            self.shift.copy_from_slice(x);
        }
        self.count += 1;
        for i in 0..x.len() {
            let d = x[i] - self.shift[i];
            let s = self.sum[i];
            let t = s + d;
            self.comp[i] += if s.abs() >= d.abs() { (s - t) + d } else { (d - t) + s };
            self.sum[i] = t;
            self.sum_sq[i] += d * d;
        }
    }

    fn mean(&self) -> Vec<f64> {
        let n = self.count as f64;
        (0..self.shift.len())
            .map(|i| self.shift[i] + (self.sum[i] + self.comp[i]) / n)
            .collect()
    }

    /// Unbiased per-coordinate variance (zero for a single sample).
    fn variance(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.shift.len()];
        }
        let n = self.count as f64;
        (0..self.shift.len())
            .map(|i| {
                let s = self.sum[i] + self.comp[i];
                ((self.sum_sq[i] - s * s / n) / (n - 1.0)).max(0.0)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Accumulator {
    params: Vec<Moments>,
    losses: Moments,
    times: Vec<f64>,
    accepted: u64,
    total_steps: u64,
    max_loss_increase: f64,
}

impl Accumulator {
    fn new(dim: usize, records: usize) -> Self {
        Self {
            params: (0..records).map(|_| Moments::new(dim)).collect(),
            losses: Moments::new(records),
            times: Vec::new(),
            accepted: 0,
            total_steps: 0,
            max_loss_increase: f64::NEG_INFINITY,
        }
    }

    fn add(&mut self, rec: &TrajectoryRecord) {
        if self.times.is_empty() {
            self.times = rec.scaled_times.clone();
        }
        debug_assert_eq!(rec.params.len(), self.params.len());
        for (m, x) in self.params.iter_mut().zip(&rec.params) {
            m.add(x);
        }
        self.losses.add(&rec.losses);
        self.accepted += rec.accepted;
        self.total_steps += rec.total_steps;
        self.max_loss_increase = self.max_loss_increase.max(rec.max_loss_increase());
    }

    fn summary<O: Objective + ?Sized>(&self, objective: &O, stochastic: bool) -> EnsembleSummary {
        let mean_params: Vec<Vec<f64>> = self.params.iter().map(Moments::mean).collect();
        let param_variance = self
            .params
            .iter()
            .map(|m| {
                let v = m.variance();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect();
        let loss_of_mean = mean_params.iter().map(|x| objective.value(x)).collect();
        EnsembleSummary {
            n: self.losses.count,
            times: self.times.clone(),
            mean_loss: self.losses.mean(),
            loss_variance: self.losses.variance(),
            loss_of_mean,
            param_variance,
            mean_params,
            mean_acceptance: (stochastic && self.total_steps > 0)
                .then(|| self.accepted as f64 / self.total_steps as f64),
            max_loss_increase: self.max_loss_increase,
            delta: None,
        }
    }
}

/// Statistics of an ensemble at each recorded scaled time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub n: usize,
    pub times: Vec<f64>,
    pub mean_params: Vec<Vec<f64>>,
    /// Across-trajectory variance, averaged over coordinates.
    pub param_variance: Vec<f64>,
    pub mean_loss: Vec<f64>,
    /// Across-trajectory variance of the loss.
    pub loss_variance: Vec<f64>,
    pub loss_of_mean: Vec<f64>,
    pub mean_acceptance: Option<f64>,
    /// Largest increase between consecutive recorded losses over all
    /// trajectories; nonpositive when every loss series is non-increasing.
    pub max_loss_increase: f64,
    /// Mean-squared parameter distance to a reference trajectory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
}

impl EnsembleSummary {
    pub fn attach_reference(&mut self, reference: &TrajectoryRecord) -> Result<()> {
        self.delta = Some(delta_metric(reference, self)?);
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct EnsembleOptions {
    /// Number of leading trajectories whose full records are returned.
    pub keep_records: usize,
    /// Ensemble sizes at which intermediate summaries are taken. Because
    /// trajectories are folded in index order these are nested prefixes.
    pub checkpoints: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub summary: EnsembleSummary,
    pub checkpoints: Vec<EnsembleSummary>,
    pub records: Vec<TrajectoryRecord>,
}

/// Runs `n` independent trajectories from `spec.init`; trajectory `k` uses
/// stream `k` of `master_seed`.
pub fn run_ensemble<O: Objective + ?Sized>(
    objective: &O,
    spec: &TrajectorySpec,
    n: usize,
    master_seed: u64,
    options: &EnsembleOptions,
) -> Result<EnsembleRun> {
    if n == 0 {
        return Err(Error::invalid("n", "ensemble needs at least one trajectory"));
    }
    spec.check()?;
    if spec.init.len() != objective.dim() {
        return Err(Error::DimensionMismatch {
            expected: objective.dim(),
            actual: spec.init.len(),
        });
    }
    let stochastic = !spec.dynamics.dynamics.is_gradient_descent();
    let mut acc = Accumulator::new(spec.init.len(), spec.record_count());
    let mut checkpoints = Vec::new();
    let mut records = Vec::new();

    let wave = (4 * rayon::current_num_threads()).max(8);
    let mut start = 0;
    while start < n {
        let end = (start + wave).min(n);
        let batch: Vec<Result<TrajectoryRecord>> = (start..end)
            .into_par_iter()
            .map(|k| {
                let mut rng = trajectory_rng(master_seed, k as u64);
                simulate(objective, spec, &spec.init, 0, &mut rng, k)
            })
            .collect();
        for (k, rec) in (start..end).zip(batch) {
            let rec = rec?;
            acc.add(&rec);
            if options.checkpoints.contains(&(k + 1)) && k + 1 < n {
                checkpoints.push(acc.summary(objective, stochastic));
            }
            if k < options.keep_records {
                records.push(rec);
            }
        }
        start = end;
    }
    let summary = acc.summary(objective, stochastic);
    if options.checkpoints.contains(&n) {
        checkpoints.push(summary.clone());
    }
    Ok(EnsembleRun { summary, checkpoints, records })
}

fn times_match(a: f64, b: f64) -> bool {
    (a - b).abs() <= GRID_TOL * a.abs().max(b.abs()).max(1e-12)
}

/// `Delta(t) = (1/N) sum_i (x_ref_i(t) - <x_i(t)>)^2` on a shared time grid.
pub fn delta_metric(reference: &TrajectoryRecord, summary: &EnsembleSummary) -> Result<Vec<f64>> {
    if reference.len() != summary.times.len() {
        return Err(Error::GridMismatch(format!(
            "reference has {} records, ensemble has {}",
            reference.len(),
            summary.times.len()
        )));
    }
    reference
        .scaled_times
        .iter()
        .zip(&summary.times)
        .zip(reference.params.iter().zip(&summary.mean_params))
        .map(|((&tr, &te), (xr, xe))| {
            if !times_match(tr, te) {
                return Err(Error::GridMismatch(format!("reference t={tr} vs ensemble t={te}")));
            }
            if xr.len() != xe.len() {
                return Err(Error::DimensionMismatch { expected: xr.len(), actual: xe.len() });
            }
            let sq: f64 = xr.iter().zip(xe).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok(sq / xr.len() as f64)
        })
        .collect()
}

/// Forward-difference estimate of `d<U>/dt` between consecutive records.
pub fn mean_loss_rate(summary: &EnsembleSummary) -> Result<Vec<f64>> {
    if summary.times.len() < 2 {
        return Err(Error::invalid("records", "need at least two recorded times"));
    }
    Ok(summary
        .times
        .windows(2)
        .zip(summary.mean_loss.windows(2))
        .map(|(t, u)| (u[1] - u[0]) / (t[1] - t[0]))
        .collect())
}

/// Ensemble evolved in windows of length `period`, every trajectory being
/// overwritten with the reference state at the start of each window.
///
/// `spec.steps` sets the total horizon; each trajectory keeps one random
/// stream across windows. Returns one summary per window, each on its own
/// grid including both window edges.
pub fn reset_protocol<O: Objective + ?Sized>(
    objective: &O,
    reference: &TrajectoryRecord,
    spec: &TrajectorySpec,
    period: f64,
    n: usize,
    master_seed: u64,
) -> Result<Vec<EnsembleSummary>> {
    spec.check()?;
    if n == 0 {
        return Err(Error::invalid("n", "ensemble needs at least one trajectory"));
    }
    if reference.len() < 2 {
        return Err(Error::invalid("reference", "needs at least two records"));
    }
    let record_interval = spec.record_stride as f64 * spec.dynamics.time_per_step();
    if !(period > 0.0) || period < record_interval * (1.0 - GRID_TOL) {
        return Err(Error::invalid(
            "period",
            format!("must be at least one record interval ({record_interval})"),
        ));
    }
    let window_steps = steps_for(period, &spec.dynamics, "period")?;
    if window_steps % spec.record_stride != 0 {
        return Err(Error::invalid("period", "must be a multiple of the record interval"));
    }
    let ref_interval = reference.scaled_times[1] - reference.scaled_times[0];
    let ratio = period / ref_interval;
    let ref_per_window = ratio.round() as usize;
    if (ratio - ratio.round()).abs() > GRID_TOL * ratio || ref_per_window == 0 {
        return Err(Error::GridMismatch(format!(
            "period {period} is not a multiple of the reference interval {ref_interval}"
        )));
    }
    let windows = (spec.steps / window_steps) as usize;
    if windows == 0 {
        return Err(Error::invalid("period", "longer than the trajectory horizon"));
    }
    let starts: Vec<&Vec<f64>> = (0..windows)
        .map(|w| {
            reference.params.get(w * ref_per_window).ok_or_else(|| {
                Error::GridMismatch(format!("reference does not reach window {w} start"))
            })
        })
        .collect::<Result<_>>()?;
    for (w, &s) in starts.iter().enumerate() {
        let t_ref = reference.scaled_times[w * ref_per_window];
        let t_win = map_time(w as u64 * window_steps, &spec.dynamics.scaling, spec.dynamics.dynamics);
        if !times_match(t_ref, t_win) {
            return Err(Error::GridMismatch(format!("window {w}: reference t={t_ref}, ensemble t={t_win}")));
        }
        if s.len() != objective.dim() {
            return Err(Error::DimensionMismatch { expected: objective.dim(), actual: s.len() });
        }
    }

    let window_spec = TrajectorySpec {
        steps: window_steps,
        ..spec.clone()
    };
    let stochastic = !spec.dynamics.dynamics.is_gradient_descent();
    let dim = objective.dim();
    let mut accs: Vec<Accumulator> = (0..windows)
        .map(|_| Accumulator::new(dim, window_spec.record_count()))
        .collect();

    let wave = (4 * rayon::current_num_threads()).max(8);
    let mut start = 0;
    while start < n {
        let end = (start + wave).min(n);
        let batch: Vec<Result<Vec<TrajectoryRecord>>> = (start..end)
            .into_par_iter()
            .map(|k| {
                let mut rng = trajectory_rng(master_seed, k as u64);
                starts
                    .iter()
                    .enumerate()
                    .map(|(w, init)| {
                        simulate(objective, &window_spec, init, w as u64 * window_steps, &mut rng, k)
                    })
                    .collect()
            })
            .collect();
        for recs in batch {
            for (acc, rec) in accs.iter_mut().zip(recs?) {
                acc.add(&rec);
            }
        }
        start = end;
    }
    Ok(accs.iter().map(|a| a.summary(objective, stochastic)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Architecture, Dataset, NetworkLoss};

    fn small_net() -> (NetworkLoss, Vec<f64>) {
        let arch = Architecture::Shallow { hidden: 3 };
        let obj = NetworkLoss::new(arch, Dataset::sine(20).unwrap());
        let init = init_params(&arch, 0.5, &mut trajectory_rng(99, 0));
        (obj, init)
    }

    #[test]
    fn sigma_from_scaling() {
        let s = derive_sigma(&TimeScaling::new(1e-5, 0.1).unwrap(), Beta::Infinite).unwrap();
        assert!((s - 1e-6 * (2.0 * PI).sqrt()).abs() < 1e-20);
        assert!((s - 2.5066e-6).abs() < 1e-10);
        let s = derive_sigma(&TimeScaling::new(1e-4, 1.0).unwrap(), Beta::Finite(1e3)).unwrap();
        assert!((s - 2e-7f64.sqrt()).abs() < 1e-18);
        assert!((s - 4.4721e-4).abs() < 1e-8);
        assert_eq!(derive_sigma(&TimeScaling::new(1e-3, 0.0).unwrap(), Beta::Infinite).unwrap(), 0.0);
        assert!(derive_sigma(&TimeScaling { alpha: 1e-3, lambda: 1.0 }, Beta::Finite(-1.0)).is_err());
        assert!(TimeScaling::new(0.0, 1.0).is_err());
    }

    #[test]
    fn time_mapping() {
        let sc = TimeScaling::new(1e-5, 0.1).unwrap();
        let gd = Dynamics::GradientDescent { clipped: true };
        let mc = Dynamics::Neuroevolution { beta: Beta::Infinite };
        assert!((map_time(1_000_000, &sc, gd) - 10.0).abs() < 1e-12);
        assert_eq!(map_time(0, &sc, mc), 0.0);
        // equal scaled time needs 1/lambda times more MC steps
        let t = map_time(1000, &sc, gd);
        assert!((map_time(10_000, &sc, mc) - t).abs() < 1e-15);
    }

    #[test]
    fn grid_conversion() {
        let cfg = DynamicsConfig::new(Dynamics::Neuroevolution { beta: Beta::Infinite }, 1e-3, 0.1).unwrap();
        assert_eq!(steps_for(2.0, &cfg, "t").unwrap(), 20_000);
        assert_eq!(steps_for(0.1, &cfg, "t").unwrap(), 1000);
        assert!(steps_for(0.00015, &cfg, "t").is_err());
    }

    #[test]
    fn single_snapshot_when_stride_exceeds_steps() {
        let (obj, init) = small_net();
        let cfg = DynamicsConfig::new(Dynamics::Neuroevolution { beta: Beta::Infinite }, 1e-3, 1.0).unwrap();
        let spec = TrajectorySpec { dynamics: cfg, init: init.clone(), steps: 3, record_stride: 10, seed: 1 };
        let rec = run_trajectory(&obj, &spec).unwrap();
        assert_eq!(rec.len(), 1);
        assert_eq!(rec.params[0], init);
        assert_eq!(rec.scaled_times, vec![0.0]);
    }

    #[test]
    fn deterministic_and_monotone() {
        let (obj, init) = small_net();
        let cfg = DynamicsConfig::new(Dynamics::Neuroevolution { beta: Beta::Infinite }, 1e-2, 0.5).unwrap();
        let spec = TrajectorySpec { dynamics: cfg, init, steps: 400, record_stride: 1, seed: 5 };
        let a = run_trajectory(&obj, &spec).unwrap();
        let b = run_trajectory(&obj, &spec).unwrap();
        assert_eq!(a, b);
        assert!(a.max_loss_increase() <= 0.0);
        assert!(a.accepted > 0 && a.accepted < 400);
        assert!(a.scaled_times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn invalid_specs_rejected() {
        let (obj, init) = small_net();
        let cfg = DynamicsConfig::new(Dynamics::GradientDescent { clipped: true }, 1e-2, 1.0).unwrap();
        let bad = TrajectorySpec { dynamics: cfg.clone(), init: init.clone(), steps: 0, record_stride: 1, seed: 0 };
        assert!(run_trajectory(&obj, &bad).is_err());
        let bad = TrajectorySpec { dynamics: cfg.clone(), init: vec![0.0; 4], steps: 5, record_stride: 1, seed: 0 };
        assert!(matches!(run_trajectory(&obj, &bad), Err(Error::DimensionMismatch { .. })));
        let mut nan_init = init;
        nan_init[0] = f64::NAN;
        let bad = TrajectorySpec { dynamics: cfg, init: nan_init, steps: 5, record_stride: 1, seed: 0 };
        assert!(run_trajectory(&obj, &bad).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        struct Blowup;
        impl Objective for Blowup {
            fn dim(&self) -> usize {
                1
            }
            fn value(&self, x: &[f64]) -> f64 {
                if x[0] > 3.0 { f64::NAN } else { -x[0] }
            }
            fn gradient(&self, _x: &[f64], g: &mut [f64]) {
                g[0] = -1.0;
            }
        }
        let cfg = DynamicsConfig::new(Dynamics::GradientDescent { clipped: false }, 1.0, 1.0).unwrap();
        let spec = TrajectorySpec { dynamics: cfg, init: vec![0.0], steps: 10, record_stride: 1, seed: 0 };
        match run_trajectory(&Blowup, &spec) {
            Err(Error::Divergence { trajectory: 0, step: 4 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ensemble_of_one_is_the_trajectory() {
        let (obj, init) = small_net();
        let cfg = DynamicsConfig::new(Dynamics::Neuroevolution { beta: Beta::Infinite }, 1e-2, 0.5).unwrap();
        let spec = TrajectorySpec { dynamics: cfg, init, steps: 200, record_stride: 20, seed: 0 };
        let run = run_ensemble(&obj, &spec, 1, 17, &EnsembleOptions { keep_records: 1, ..Default::default() })
            .unwrap();
        let rec = &run.records[0];
        assert_eq!(run.summary.mean_params, rec.params);
        assert_eq!(run.summary.mean_loss, rec.losses);
        assert!(run.summary.param_variance.iter().all(|&v| v == 0.0));
        let mut rng = trajectory_rng(17, 0);
        let direct = simulate(&obj, &spec, &spec.init, 0, &mut rng, 0).unwrap();
        assert_eq!(&direct, rec);
    }

    #[test]
    fn ensemble_delta_and_checkpoints() {
        let (obj, init) = small_net();
        let cfg = DynamicsConfig::new(Dynamics::Neuroevolution { beta: Beta::Infinite }, 1e-2, 0.5).unwrap();
        let spec = TrajectorySpec::on_grid(cfg.clone(), init.clone(), 0.5, 0.05, 0).unwrap();
        let gd_spec = TrajectorySpec::on_grid(cfg.gd_counterpart(), init, 0.5, 0.05, 0).unwrap();
        let gd = run_trajectory(&obj, &gd_spec).unwrap();
        let opts = EnsembleOptions { keep_records: 0, checkpoints: vec![4, 12] };
        let mut run = run_ensemble(&obj, &spec, 12, 3, &opts).unwrap();
        assert_eq!(run.checkpoints.len(), 2);
        assert_eq!(run.checkpoints[0].n, 4);
        assert_eq!(run.checkpoints[1], run.summary);
        run.summary.attach_reference(&gd).unwrap();
        let delta = run.summary.delta.unwrap();
        assert_eq!(delta[0], 0.0);
        assert!(delta.iter().all(|&d| d >= 0.0));

        let self_delta = delta_metric(&gd, &run_ensemble(&obj, &gd_spec, 3, 0, &Default::default()).unwrap().summary)
            .unwrap();
        assert!(self_delta.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn mismatched_grids_refused() {
        let (obj, init) = small_net();
        let cfg = DynamicsConfig::new(Dynamics::Neuroevolution { beta: Beta::Infinite }, 1e-2, 0.5).unwrap();
        let spec = TrajectorySpec::on_grid(cfg.clone(), init.clone(), 0.5, 0.05, 0).unwrap();
        let gd_spec = TrajectorySpec::on_grid(cfg.gd_counterpart(), init.clone(), 0.5, 0.1, 0).unwrap();
        let gd = run_trajectory(&obj, &gd_spec).unwrap();
        let run = run_ensemble(&obj, &spec, 2, 0, &Default::default()).unwrap();
        assert!(matches!(delta_metric(&gd, &run.summary), Err(Error::GridMismatch(_))));
        let gd_spec = TrajectorySpec::on_grid(cfg.gd_counterpart(), init, 1.0, 0.1, 0).unwrap();
        let mut gd = run_trajectory(&obj, &gd_spec).unwrap();
        gd.scaled_times.truncate(11);
        gd.params.truncate(11);
        assert!(matches!(delta_metric(&gd, &run.summary), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn reset_windows_restart_on_reference() {
        let (obj, init) = small_net();
        let cfg = DynamicsConfig::new(Dynamics::Neuroevolution { beta: Beta::Infinite }, 1e-2, 0.5).unwrap();
        let spec = TrajectorySpec::on_grid(cfg.clone(), init.clone(), 0.6, 0.05, 0).unwrap();
        let gd = run_trajectory(&obj, &TrajectorySpec::on_grid(cfg.gd_counterpart(), init, 0.6, 0.05, 0).unwrap())
            .unwrap();
        let windows = reset_protocol(&obj, &gd, &spec, 0.2, 5, 9).unwrap();
        assert_eq!(windows.len(), 3);
        for (w, s) in windows.iter().enumerate() {
            assert_eq!(s.mean_params[0], gd.params[4 * w]);
            assert!((s.times[0] - 0.2 * w as f64).abs() < 1e-12);
            assert_eq!(s.times.len(), 5);
        }
        assert!(reset_protocol(&obj, &gd, &spec, 0.01, 5, 9).is_err());
        assert!(reset_protocol(&obj, &gd, &spec, 0.125, 5, 9).is_err());
    }

    #[test]
    fn loss_rate_on_flat_loss_is_zero() {
        struct Flat;
        impl Objective for Flat {
            fn dim(&self) -> usize {
                2
            }
            fn value(&self, _x: &[f64]) -> f64 {
                1.5
            }
            fn gradient(&self, _x: &[f64], g: &mut [f64]) {
                g.fill(0.0);
            }
        }
        let cfg = DynamicsConfig::new(Dynamics::Neuroevolution { beta: Beta::Finite(10.0) }, 1e-2, 1.0).unwrap();
        let spec = TrajectorySpec::on_grid(cfg, vec![0.0, 0.0], 1.0, 0.1, 0).unwrap();
        let run = run_ensemble(&Flat, &spec, 4, 0, &Default::default()).unwrap();
        assert!(mean_loss_rate(&run.summary).unwrap().iter().all(|&r| r == 0.0));
        assert_eq!(run.summary.mean_acceptance, Some(1.0));
    }
}
