use std::f64::consts::PI;

use mzphase::detector::{fit_confusion, fit_retrodictive_weights, simulate_calibration};
use mzphase::fisher::{crlb, fisher_numeric};
use mzphase::io::{
    weights_to_json, write_fisher_csv, write_histogram_csv, write_posterior_csv, write_reference_csv, write_scan_csv,
};
use mzphase::photon_model::DEFAULT_N_MAX;
use mzphase::{EstimatorKind, Experiment, ExperimentPlan, NoisyModel, PhaseGrid, ScanResult};
use serde_json::json;

use crate::config::Setup;
use crate::output::Staged;
use crate::{CliError, Reporter, ScanKind};

fn csv<F>(write: F) -> Result<Vec<u8>, CliError>
where
    F: FnOnce(&mut Vec<u8>) -> mzphase::Result<()>,
{
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn finish(setup: &Setup, command: &str, mut staged: Staged, report: &Reporter) -> Result<(), CliError> {
    let manifest_name = format!("{command}_manifest.json");
    let mut outputs = staged.names();
    outputs.push(manifest_name.clone());
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": setup.plan.seed,
        "config": setup.config,
        "outputs": outputs,
    });
    staged.add(manifest_name, serde_json::to_vec_pretty(&manifest).expect("manifest serializes"));
    let written = staged.commit(&setup.out_dir).map_err(CliError::Output)?;
    for path in written {
        report.line(format!("wrote {}", path.display()));
    }
    Ok(())
}

pub fn calibrate(setup: &Setup, report: &Reporter) -> Result<(), CliError> {
    let data = match &setup.recorded {
        Some(data) => data.clone(),
        None => simulate_calibration(
            &setup.plan.calibration_phases,
            setup.plan.calibration_pulses,
            &setup.calibration_channel,
            &setup.model,
            setup.plan.seed,
        )?,
    };
    let grid = PhaseGrid::new(setup.plan.grid_points)?;
    let fitted = fit_confusion(&data)?;
    let weights = fit_retrodictive_weights(&data, &grid)?;

    let (worst, diagonal) = weights.worst_diagonal();
    for o in weights.measured_pairs().filter(|o| o.total() <= 2) {
        report.line(format!("W({0},{1}|{0},{1}) = {2:.4}", o.n_c, o.n_d, weights.diagonal(o)));
    }
    let unseen = weights.measured_pairs().filter(|&o| weights.is_fallback(o)).count();
    if unseen > 0 {
        report.line(format!("{unseen} count pairs never seen in calibration were given uniform weights"));
    }
    report.line(format!("worst diagonal weight {diagonal:.4} at ({},{})", worst.n_c, worst.n_d));

    let mut staged = Staged::default();
    staged.add("weights.json", weights_to_json(&weights)?.into_bytes());
    staged.add("fitted_confusion.json", serde_json::to_vec_pretty(&fitted).expect("confusion model serializes"));
    staged.add("calibration_histograms.csv", csv(|b| write_histogram_csv(b, &data))?);
    finish(setup, "calibrate", staged, report)
}

fn summarize(result: &ScanResult, report: &Reporter) {
    let sqrt_p = (result.shots as f64).sqrt();
    let mut thetas: Vec<f64> = result.records.iter().map(|r| r.theta).collect();
    thetas.dedup();
    for theta in thetas {
        let parts: Vec<String> = result
            .records
            .iter()
            .filter(|r| r.theta == theta)
            .map(|r| {
                let spread = r.mean_dtheta.map_or("-".into(), |d| format!("{:.3}", sqrt_p * d));
                format!("{} {:.4}π bias {:+.4} √p·ΔΘ {spread}", r.estimator, r.mean_est / PI, r.bias)
            })
            .collect();
        report.line(format!("θ = {:.3}π  {}", theta / PI, parts.join("  |  ")));
    }
}

pub fn scan(setup: &Setup, kind: ScanKind, report: &Reporter) -> Result<(), CliError> {
    let exp = Experiment::from_parts(setup.model, setup.plan.clone(), setup.recorded.clone(), setup.weights.clone())?;
    if let Some(w) = exp.weights() {
        let (worst, diagonal) = w.worst_diagonal();
        report.line(format!("worst diagonal weight {diagonal:.4} at ({},{})", worst.n_c, worst.n_d));
    }
    let result = match kind {
        ScanKind::Bias => exp.bias_scan()?,
        ScanKind::Sensitivity => exp.sensitivity_scan()?,
    };
    summarize(&result, report);
    let worst = result
        .records
        .iter()
        .filter_map(|r| r.sd_est.map(|sd| (r, r.bias.abs() / sd)))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    match worst {
        Some((r, ratio)) => report.line(format!(
            "max |bias|/σ_est = {ratio:.3} ({} at θ = {:.3}π)",
            r.estimator,
            r.theta / PI
        )),
        None => report.line("max |bias|/σ_est undefined: a single replica per phase"),
    }

    let name = kind.name();
    let mut staged = Staged::default();
    staged.add(format!("scan_{name}.csv"), csv(|b| write_scan_csv(b, &result))?);
    if kind == ScanKind::Sensitivity {
        staged.add("reference.csv", csv(|b| write_reference_csv(b, &result))?);
    }
    finish(setup, &format!("scan_{name}"), staged, report)
}

pub fn fisher(setup: &Setup, report: &Reporter) -> Result<(), CliError> {
    let noisy = setup.plan.noise.clone().map(|k| NoisyModel::new(setup.model, k));
    let mut rows = Vec::with_capacity(setup.plan.theta_grid.len());
    for &theta in &setup.plan.theta_grid {
        let f = match &noisy {
            Some(m) => fisher_numeric(m, theta, m.confusion.n_max(), setup.d_theta),
            None => fisher_numeric(&setup.model, theta, DEFAULT_N_MAX, setup.d_theta),
        }
        .map_err(|e| match e {
            mzphase::Error::Endpoint { .. } => CliError::Config(format!("plan.theta: {e}")),
            e => e.into(),
        })?;
        let bound = crlb(f, setup.plan.shots).ok();
        report.line(format!(
            "θ = {:.3}π  F = {f:.6}  √p·CRLB = {}",
            theta / PI,
            bound.map_or("-".into(), |b| format!("{:.4}", b * (setup.plan.shots as f64).sqrt()))
        ));
        rows.push((theta, f, bound));
    }
    let mut staged = Staged::default();
    staged.add("fisher.csv", csv(|b| write_fisher_csv(b, &rows))?);
    finish(setup, "fisher", staged, report)
}

pub fn posterior(setup: &Setup, report: &Reporter) -> Result<(), CliError> {
    if setup.checkpoints.is_empty() {
        return Err(CliError::Config("plan.checkpoints is empty".into()));
    }
    let plan = ExperimentPlan { estimators: vec![EstimatorKind::Bayes], ..setup.plan.clone() };
    let exp = Experiment::from_parts(setup.model, plan, setup.recorded.clone(), setup.weights.clone())?;
    let progression = exp.posterior_progression(setup.posterior_theta, &setup.checkpoints)?;
    let mut staged = Staged::default();
    for (p, post) in &progression {
        let dt = post.credible_interval(setup.plan.level)?;
        report.line(format!(
            "p = {p}  mean {:.4}π  ΔΘ {dt:.4}  √p·ΔΘ {:.4}",
            post.mean() / PI,
            dt * (*p as f64).sqrt()
        ));
        staged.add(format!("posterior_p{p}.csv"), csv(|b| write_posterior_csv(b, post))?);
    }
    finish(setup, "posterior", staged, report)
}
