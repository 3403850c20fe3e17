//! File formats.
//!
//! Phase positions (`theta`, `phi`, `mean_est`) are written in units of π;
//! widths and differences (`bias`, `mean_dtheta`, `sd_est`, `sd_dtheta`,
//! `crlb`) are in radians, and densities are per radian. Floats use the
//! shortest representation that reads back to the same value.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::detector::{CalibrationData, RetrodictiveWeights};
use crate::error::{Error, Result};
use crate::experiment::ScanResult;
use crate::photon_model::Outcome;
use crate::posterior::Posterior;

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.filter(|v| v.is_finite()).map(num).unwrap_or_default()
}

/// `theta,estimator,mean_est,bias,mean_dtheta,sd_est,sd_dtheta`
pub fn write_scan_csv<W: Write>(out: W, result: &ScanResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["theta", "estimator", "mean_est", "bias", "mean_dtheta", "sd_est", "sd_dtheta"])?;
    for r in &result.records {
        let mean = r.mean_est.is_finite().then_some(r.mean_est);
        w.write_record([
            num(r.theta / PI),
            r.estimator.to_string(),
            opt(mean.map(|m| m / PI)),
            opt(mean.map(|_| r.bias)),
            opt(r.mean_dtheta),
            opt(r.sd_est),
            opt(r.sd_dtheta),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `theta,crlb_ideal,crlb_fit,classical`
pub fn write_reference_csv<W: Write>(out: W, result: &ScanResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["theta", "crlb_ideal", "crlb_fit", "classical"])?;
    for p in &result.reference {
        w.write_record([num(p.theta / PI), num(p.crlb_ideal), opt(p.crlb_fit), opt(p.classical)])?;
    }
    w.flush()?;
    Ok(())
}

/// `theta,fisher,crlb` from `(θ in radians, F, bound)` rows.
pub fn write_fisher_csv<W: Write>(out: W, rows: &[(f64, f64, Option<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["theta", "fisher", "crlb"])?;
    for &(theta, fisher, bound) in rows {
        w.write_record([num(theta / PI), num(fisher), opt(bound)])?;
    }
    w.flush()?;
    Ok(())
}

/// `phi,density` at every grid node.
pub fn write_posterior_csv<W: Write>(out: W, posterior: &Posterior) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["phi", "density"])?;
    for (phi, d) in posterior.grid().nodes().iter().zip(posterior.density()) {
        w.write_record([num(phi / PI), num(*d)])?;
    }
    w.flush()?;
    Ok(())
}

/// `phi,nc,nd,count` for every phase and reported pair.
pub fn write_histogram_csv<W: Write>(out: W, calib: &CalibrationData) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["phi", "nc", "nd", "count"])?;
    for (j, &phi) in calib.phases().iter().enumerate() {
        for n_c in 0..=calib.n_max() {
            for n_d in 0..=calib.n_max() {
                let count = calib.count(j, Outcome::new(n_c, n_d));
                w.write_record([num(phi / PI), n_c.to_string(), n_d.to_string(), count.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PulseRow {
    #[allow(dead_code)]
    pulse_index: u64,
    nc: u32,
    nd: u32,
}

/// Reads recorded pulses from `pulse_index,nc,nd` CSV.
pub fn read_pulse_csv<R: Read>(input: R) -> Result<Vec<Outcome>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["pulse_index", "nc", "nd"] {
        return Err(Error::Format(format!("expected header pulse_index,nc,nd, got {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    reader
        .deserialize::<PulseRow>()
        .map(|row| Ok(row.map(|r| Outcome::new(r.nc, r.nd))?))
        .collect()
}

fn pair_key(o: Outcome) -> String {
    format!("({},{})", o.n_c, o.n_d)
}

/// Parses `"(a,b)"`.
pub fn parse_pair(key: &str) -> Result<Outcome> {
    let bad = || Error::Format(format!("expected a pair like (1,0), got {key:?}"));
    let inner = key.trim().strip_prefix('(').and_then(|s| s.strip_suffix(')')).ok_or_else(bad)?;
    let (a, b) = inner.split_once(',').ok_or_else(bad)?;
    let a = a.trim().parse().map_err(|_| bad())?;
    let b = b.trim().parse().map_err(|_| bad())?;
    Ok(Outcome::new(a, b))
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    weights: BTreeMap<String, BTreeMap<String, f64>>,
}

/// `{"weights":{"(Nc,Nd)":{"(N'c,N'd)":w}}}`
pub fn weights_to_json(weights: &RetrodictiveWeights) -> Result<String> {
    let table = weights
        .measured_pairs()
        .map(|m| (pair_key(m), weights.row(m).map(|(t, w)| (pair_key(t), w)).collect()))
        .collect();
    Ok(serde_json::to_string_pretty(&WeightsFile { weights: table })?)
}

/// Reads a weight table; the count range is taken from the largest count
/// among the keys and every measured pair in that range must be present.
pub fn weights_from_json(text: &str) -> Result<RetrodictiveWeights> {
    let file: WeightsFile = serde_json::from_str(text)?;
    let mut rows = BTreeMap::new();
    let mut n_max = 0;
    for (measured, row) in &file.weights {
        let m = parse_pair(measured)?;
        let mut parsed = Vec::with_capacity(row.len());
        for (truth, &w) in row {
            let t = parse_pair(truth)?;
            n_max = n_max.max(t.n_c).max(t.n_d);
            parsed.push((t, w));
        }
        n_max = n_max.max(m.n_c).max(m.n_d);
        if rows.insert(m, parsed).is_some() {
            return Err(Error::Format(format!("measured pair {measured} appears twice")));
        }
    }
    let side = n_max as usize + 1;
    let mut table = vec![vec![0.0; side * side]; side * side];
    for a in 0..=n_max {
        for b in 0..=n_max {
            let m = Outcome::new(a, b);
            let row = rows.get(&m).ok_or_else(|| Error::Format(format!("weights for {} are missing", pair_key(m))))?;
            for &(t, w) in row {
                table[a as usize * side + b as usize][t.n_c as usize * side + t.n_d as usize] = w;
            }
        }
    }
    RetrodictiveWeights::new(n_max, table)
}
