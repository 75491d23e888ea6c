//! Executes a resolved [`ExperimentConfig`] into tables, a summary and checks.

use neuroevo_core::analysis::{
    estimate_drift_diffusion, grad_check_suite, predicted_diffusion, predicted_drift, stationary_check,
    GradCheckConfig, StationaryConfig, ToyLoss,
};
use neuroevo_core::dynamics::{Beta, MutationConfig};
use neuroevo_core::ensemble::{
    reset_protocol, run_ensemble, run_trajectory, trajectory_rng, Dynamics, DynamicsConfig,
    EnsembleOptions, EnsembleSummary, TrajectoryRecord, TrajectorySpec,
};
use neuroevo_core::model::{init_params, Dataset, NetworkLoss};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{
    BoltzmannExperiment, DriftExperiment, EnsembleExperiment, Experiment, ExperimentConfig, GradCheckExperiment,
};
use crate::plot::PlotSpec;

/// Stream of the master seed reserved for drawing the initial network.
const INIT_STREAM: u64 = u64::MAX;

/// A CSV table; cells are preformatted.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }
}

/// Scientific notation with 16 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.15e}")
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &str, pass: bool, detail: impl Into<String>) -> Check {
    Check { name: name.into(), pass, detail: detail.into() }
}

pub struct Plot {
    pub file: String,
    pub csv: String,
    pub spec: PlotSpec,
}

pub struct RunOutput {
    /// `(file name, table)`; the first entry is `timeseries.csv`.
    pub tables: Vec<(String, Table)>,
    pub summary: Value,
    pub checks: Vec<Check>,
    pub plots: Vec<Plot>,
}

pub fn execute(config: &ExperimentConfig) -> neuroevo_core::Result<RunOutput> {
    match &config.experiment {
        Experiment::Ensemble(e) => ensemble(e, config.seed),
        Experiment::Boltzmann(b) => boltzmann(b, config.seed),
        Experiment::DriftDiffusion(d) => drift_diffusion(d, config.seed),
        Experiment::GradCheck(g) => grad_check(g, config.seed),
    }
}

fn max_rel_deviation(mean_loss: &[f64], gd_loss: &[f64], u0: f64) -> f64 {
    mean_loss
        .iter()
        .zip(gd_loss)
        .map(|(m, g)| (m - g).abs() / u0)
        .fold(0.0, f64::max)
}

struct LambdaRun {
    lambda: f64,
    sigma: f64,
    /// One summary, or one per reset window.
    windows: Vec<EnsembleSummary>,
    checkpoints: Vec<EnsembleSummary>,
    samples: Vec<TrajectoryRecord>,
}

fn ensemble(e: &EnsembleExperiment, seed: u64) -> neuroevo_core::Result<RunOutput> {
    let objective = NetworkLoss::new(e.arch, Dataset::sine(e.samples)?);
    let init = init_params(&e.arch, e.init_std, &mut trajectory_rng(seed, INIT_STREAM));
    let gd_cfg = DynamicsConfig::new(e.dynamics.gd_counterpart(), e.alpha, 1.0)?;
    let gd = run_trajectory(
        &objective,
        &TrajectorySpec::on_grid(gd_cfg, init.clone(), e.t_max, e.record_interval, seed)?,
    )?;
    let u0 = gd.losses[0];

    let mut runs = Vec::new();
    for &lambda in &e.lambdas {
        let cfg = DynamicsConfig::new(e.dynamics, e.alpha, lambda)?;
        let sigma = cfg.sigma()?.at(0);
        let spec = TrajectorySpec::on_grid(cfg, init.clone(), e.t_max, e.record_interval, seed)?;
        let run = match e.reset_period {
            Some(period) => LambdaRun {
                lambda,
                sigma,
                windows: reset_protocol(&objective, &gd, &spec, period, e.trajectories, seed)?,
                checkpoints: Vec::new(),
                samples: Vec::new(),
            },
            None => {
                let opts = EnsembleOptions { keep_records: e.sample_trajectories, checkpoints: e.checkpoints.clone() };
                let mut out = run_ensemble(&objective, &spec, e.trajectories, seed, &opts)?;
                out.summary.attach_reference(&gd)?;
                for c in &mut out.checkpoints {
                    c.attach_reference(&gd)?;
                }
                LambdaRun { lambda, sigma, windows: vec![out.summary], checkpoints: out.checkpoints, samples: out.records }
            }
        };
        runs.push(run);
    }

    let multi = e.lambdas.len() > 1;
    let reset = e.reset_period.is_some();
    let per_window = e.reset_period.map(|p| (p / e.record_interval).round() as usize).unwrap_or(0);

    let mut header: Vec<String> = Vec::new();
    if multi {
        header.push("lambda".into());
    }
    if reset {
        header.push("window".into());
    }
    header.extend(["t", "weight_id", "gd_value", "evo_mean"].map(String::from));
    header.extend((1..=e.sample_trajectories).map(|k| format!("evo_sample_{k}")));
    let mut series = Table { header, rows: Vec::new() };
    let mut curves = Table::new(&["lambda", "window", "t", "gd_loss", "mean_loss", "loss_variance", "loss_of_mean", "delta"]);
    let mut by_n = Table::new(&["lambda", "n", "t", "delta"]);
    let mut run_summaries = Vec::new();
    let mut checks = Vec::new();

    for run in &runs {
        let mut window_reports = Vec::new();
        let mut deviation: f64 = 0.0;
        for (w, s) in run.windows.iter().enumerate() {
            let offset = w * per_window;
            let gd_losses = &gd.losses[offset..offset + s.times.len()];
            let gd_params = &gd.params[offset..offset + s.times.len()];
            let delta: Vec<f64> = gd_params
                .iter()
                .zip(&s.mean_params)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
                .collect();
            let dev = max_rel_deviation(&s.mean_loss, gd_losses, u0);
            deviation = deviation.max(dev);
            if reset {
                window_reports.push(json!({
                    "window": w,
                    "t_start": s.times[0],
                    "delta_at_reset": delta[0],
                    "max_rel_loss_deviation": dev,
                }));
            }
            for r in 0..s.times.len() {
                curves.rows.push(vec![
                    num(run.lambda),
                    w.to_string(),
                    num(s.times[r]),
                    num(gd_losses[r]),
                    num(s.mean_loss[r]),
                    num(s.loss_variance[r]),
                    num(s.loss_of_mean[r]),
                    num(delta[r]),
                ]);
                for &wid in &e.tracked_weights {
                    let mut row = Vec::new();
                    if multi {
                        row.push(num(run.lambda));
                    }
                    if reset {
                        row.push(w.to_string());
                    }
                    row.extend([num(s.times[r]), wid.to_string(), num(gd_params[r][wid]), num(s.mean_params[r][wid])]);
                    row.extend(run.samples.iter().map(|rec| num(rec.params[r][wid])));
                    row.resize(series.header.len(), String::new());
                    series.rows.push(row);
                }
            }
        }
        for c in &run.checkpoints {
            let d = c.delta.as_ref().expect("reference attached");
            for (t, v) in c.times.iter().zip(d) {
                by_n.rows.push(vec![num(run.lambda), c.n.to_string(), num(*t), num(*v)]);
            }
        }

        let last = &run.windows[run.windows.len() - 1];
        let k = last.times.len() - 1;
        let final_delta = if reset {
            let idx = (run.windows.len() - 1) * per_window + k;
            let (a, b) = (&gd.params[idx], &last.mean_params[k]);
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
        } else {
            last.delta.as_ref().expect("reference attached")[k]
        };
        let max_increase = run.windows.iter().map(|s| s.max_loss_increase).fold(f64::NEG_INFINITY, f64::max);
        run_summaries.push(json!({
            "lambda": run.lambda,
            "sigma": run.sigma,
            "trajectories": last.n,
            "mean_acceptance": last.mean_acceptance,
            "max_loss_increase": max_increase,
            "max_rel_loss_deviation": deviation,
            "delta_final": final_delta,
            "gd_loss_final": gd.losses[gd.losses.len() - 1],
            "mean_loss_final": last.mean_loss[k],
            "loss_of_mean_final": last.loss_of_mean[k],
            "checkpoints": run.checkpoints.iter().map(|c| json!({
                "n": c.n,
                "delta_final": c.delta.as_ref().expect("reference attached")[c.times.len() - 1],
            })).collect::<Vec<_>>(),
            "windows": window_reports,
        }));

        if matches!(e.dynamics, Dynamics::Neuroevolution { beta: Beta::Infinite }) {
            checks.push(check(
                &format!("monotone loss (lambda={})", run.lambda),
                max_increase <= 0.0,
                format!("largest recorded increase {max_increase:.3e}"),
            ));
        }
        for (w, s) in run.windows.iter().enumerate().filter(|_| reset) {
            let idx = w * per_window;
            let zero = gd.params[idx] == s.mean_params[0];
            checks.push(check(&format!("reset window {w} starts on reference"), zero, "Delta at reset"));
        }
        if !run.checkpoints.is_empty() {
            let d: Vec<f64> = run
                .checkpoints
                .iter()
                .map(|c| c.delta.as_ref().expect("reference attached")[c.times.len() - 1])
                .collect();
            checks.push(check(
                &format!("Delta decreases with ensemble size (lambda={})", run.lambda),
                d.windows(2).all(|p| p[1] < p[0]),
                format!("{d:?}"),
            ));
        }
    }

    let smallest = runs
        .iter()
        .zip(&run_summaries)
        .min_by(|a, b| a.0.lambda.total_cmp(&b.0.lambda))
        .expect("at least one lambda");
    let dev = smallest.1["max_rel_loss_deviation"].as_f64().unwrap_or(f64::NAN);
    checks.push(check(
        &format!("mean loss tracks gradient descent (lambda={})", smallest.0.lambda),
        dev < e.loss_tolerance,
        format!("max |<U> - U_gd| / U_gd(0) = {dev:.4e}, tolerance {}", e.loss_tolerance),
    ));
    if multi && !reset {
        let mut order: Vec<(f64, f64)> = run_summaries
            .iter()
            .map(|s| (s["lambda"].as_f64().unwrap(), s["delta_final"].as_f64().unwrap()))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        checks.push(check(
            "Delta(t_max) shrinks with lambda",
            order.windows(2).all(|p| p[0].1 < p[1].1),
            format!("{order:?}"),
        ));
    }

    let summary = json!({
        "parameters": e.arch.param_count(),
        "initial_loss": u0,
        "runs": run_summaries,
    });

    let weight_plot = PlotSpec {
        title: format!("parameter {}", e.tracked_weights.first().copied().unwrap_or(0)),
        x: "t".into(),
        x_label: "scaled time t".into(),
        y: vec!["gd_value".into(), "evo_mean".into()],
        y_label: "value".into(),
        group: multi.then(|| "lambda".into()),
        filter: e.tracked_weights.first().map(|&w| ("weight_id".into(), w as f64)),
        log_y: false,
    };
    let mut plots = vec![
        Plot {
            file: "loss.svg".into(),
            csv: "curves.csv".into(),
            spec: PlotSpec {
                title: "loss".into(),
                x: "t".into(),
                x_label: "scaled time t".into(),
                y: vec!["gd_loss".into(), "mean_loss".into(), "loss_of_mean".into()],
                y_label: "loss".into(),
                group: Some("lambda".into()),
                filter: None,
                log_y: true,
            },
        },
        Plot {
            file: "delta.svg".into(),
            csv: "curves.csv".into(),
            spec: PlotSpec {
                title: "Delta(t)".into(),
                x: "t".into(),
                x_label: "scaled time t".into(),
                y: vec!["delta".into()],
                y_label: "Delta".into(),
                group: Some("lambda".into()),
                filter: None,
                log_y: true,
            },
        },
    ];
    if !e.tracked_weights.is_empty() {
        plots.insert(0, Plot { file: "weights.svg".into(), csv: "timeseries.csv".into(), spec: weight_plot });
    }
    let mut tables = vec![("timeseries.csv".to_string(), series), ("curves.csv".to_string(), curves)];
    if !by_n.rows.is_empty() {
        plots.push(Plot {
            file: "delta_by_n.svg".into(),
            csv: "delta_by_n.csv".into(),
            spec: PlotSpec {
                title: "Delta(t) by ensemble size".into(),
                x: "t".into(),
                x_label: "scaled time t".into(),
                y: vec!["delta".into()],
                y_label: "Delta".into(),
                group: Some("n".into()),
                filter: None,
                log_y: true,
            },
        });
        tables.push(("delta_by_n.csv".to_string(), by_n));
    }
    Ok(RunOutput { tables, summary, checks, plots })
}

fn boltzmann(b: &BoltzmannExperiment, seed: u64) -> neuroevo_core::Result<RunOutput> {
    let cfg = StationaryConfig {
        beta: b.beta,
        sigma: None,
        steps: b.steps,
        burn_in: b.burn_in,
        thin: b.thin,
        bins: b.bins,
        batches: b.batches,
    };
    let r = stationary_check(b.kappa, b.dim, &cfg, &mut trajectory_rng(seed, 0))?;
    let mut series = Table::new(&["step", "beta_energy"]);
    for (k, en) in r.energies.iter().enumerate() {
        series.rows.push(vec![(b.burn_in + k as u64 * b.thin).to_string(), num(*en)]);
    }
    let var_err = r.max_variance_rel_error();
    let z = r.max_mean_z();
    let checks = vec![
        check("variance matches Boltzmann", var_err < 0.05, format!("max relative error {var_err:.4}")),
        check("mean within 4 standard errors of 0", z < 4.0, format!("max |mean|/se {z:.3}")),
        check(
            "energy histogram",
            r.energy_chi_square < r.energy_chi_square_critical,
            format!("chi2 {:.2} vs {:.2} ({} dof)", r.energy_chi_square, r.energy_chi_square_critical, r.energy_dof),
        ),
    ];
    let summary = json!({
        "sigma": r.sigma,
        "acceptance_rate": r.acceptance_rate,
        "empirical_mean": r.empirical_mean,
        "mean_se": r.mean_se,
        "empirical_variance": r.empirical_variance,
        "boltzmann_variance": r.boltzmann_variance,
        "max_variance_rel_error": var_err,
        "energy_chi_square": r.energy_chi_square,
        "energy_dof": r.energy_dof,
        "energy_chi_square_critical": r.energy_chi_square_critical,
    });
    let plots = vec![Plot {
        file: "energy.svg".into(),
        csv: "timeseries.csv".into(),
        spec: PlotSpec {
            title: "beta U along the chain".into(),
            x: "step".into(),
            x_label: "Monte Carlo step".into(),
            y: vec!["beta_energy".into()],
            y_label: "beta U".into(),
            group: None,
            filter: None,
            log_y: false,
        },
    }];
    Ok(RunOutput { tables: vec![("timeseries.csv".into(), series)], summary, checks, plots })
}

fn drift_diffusion(d: &DriftExperiment, seed: u64) -> neuroevo_core::Result<RunOutput> {
    let toy = ToyLoss::linear(d.gradient.clone())?;
    let dim = d.gradient.len();
    let mut table = Table::new(&[
        "case", "beta", "sigma", "i", "j", "drift", "drift_se", "drift_predicted", "second_moment",
        "second_moment_se", "second_moment_predicted",
    ]);
    let mut cases = Vec::new();
    let mut worst: f64 = 0.0;
    for (c, case) in d.cases.iter().enumerate() {
        let cfg = MutationConfig::isotropic(case.sigma, case.beta);
        let r = estimate_drift_diffusion(&toy, &d.point, &cfg, d.probes, seed.wrapping_add(c as u64))?;
        let drift = predicted_drift(&cfg, &d.gradient);
        let diff = predicted_diffusion(&cfg, dim);
        for i in 0..dim {
            worst = worst.max((r.drift[i] - drift[i]).abs() / r.drift_se[i]);
            for j in 0..dim {
                let expected = if i == j { diff[i] } else { 0.0 };
                worst = worst.max((r.second_moment[i][j] - expected).abs() / r.second_moment_se[i][j]);
                table.rows.push(vec![
                    c.to_string(),
                    case.beta.to_string(),
                    num(case.sigma),
                    i.to_string(),
                    j.to_string(),
                    if i == j { num(r.drift[i]) } else { String::new() },
                    if i == j { num(r.drift_se[i]) } else { String::new() },
                    if i == j { num(drift[i]) } else { String::new() },
                    num(r.second_moment[i][j]),
                    num(r.second_moment_se[i][j]),
                    num(expected),
                ]);
            }
        }
        cases.push(json!({
            "beta": case.beta,
            "sigma": case.sigma,
            "report": r,
            "predicted_drift": drift,
            "predicted_diffusion": diff,
        }));
    }
    let checks = vec![check(
        "moments within 3 standard errors",
        worst < 3.0,
        format!("worst deviation {worst:.2} standard errors"),
    )];
    let summary = json!({ "cases": cases, "max_z": worst });
    Ok(RunOutput { tables: vec![("timeseries.csv".into(), table)], summary, checks, plots: Vec::new() })
}

fn grad_check(g: &GradCheckExperiment, seed: u64) -> neuroevo_core::Result<RunOutput> {
    let mut table = Table::new(&["target", "parameters", "points", "coordinates", "max_rel_error"]);
    let mut reports = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, t) in g.targets.iter().enumerate() {
        let cfg = GradCheckConfig {
            points: t.points,
            coords_per_point: t.coords_per_point,
            param_std: t.param_std,
            seed: seed.wrapping_add(i as u64),
        };
        let r = grad_check_suite(&t.arch, &Dataset::sine(t.samples)?, &cfg)?;
        worst = worst.max(r.max_rel_error);
        table.rows.push(vec![
            i.to_string(),
            t.arch.param_count().to_string(),
            r.points.to_string(),
            r.coordinates_checked.to_string(),
            num(r.max_rel_error),
        ]);
        reports.push(json!({ "arch": t.arch, "report": r }));
    }
    let checks = vec![check(
        "analytic gradient matches finite differences",
        worst < g.tolerance,
        format!("max relative error {worst:.3e}, tolerance {:.1e}", g.tolerance),
    )];
    let summary = json!({ "max_rel_error": worst, "targets": reports });
    Ok(RunOutput { tables: vec![("timeseries.csv".into(), table)], summary, checks, plots: Vec::new() })
}
