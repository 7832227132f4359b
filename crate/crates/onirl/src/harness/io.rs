//! Trajectory CSV ingest/export and run-report emission.
//!
//! Trajectory files carry the header `t,x1,...,x2n,u1,...,um` followed by one
//! row per sample in plain decimal text. Values are written with Rust's
//! shortest-round-trip float formatting, so an export/ingest cycle reproduces
//! the samples exactly. All writes go through a write-temp-then-rename so a
//! crash never leaves a half-written file behind.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;

use crate::dynamics::{Trajectory, TrajectorySample};
use crate::error::{Error, Result};

use super::experiment::RunReport;

/// Parses trajectory CSV text. Dimensions are inferred from the header.
pub fn parse_trajectory_csv(text: &str) -> Result<Trajectory> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;

    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let (state_dim, control_dim) =
        parse_header(&cols).map_err(|msg| Error::Parse { line: 1, msg })?;

    let mut samples = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != 1 + state_dim + control_dim {
            return Err(Error::Parse {
                line,
                msg: format!(
                    "expected {} fields, found {}",
                    1 + state_dim + control_dim,
                    fields.len()
                ),
            });
        }
        let mut values = Vec::with_capacity(fields.len());
        for f in &fields {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("not a number: `{f}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite value `{f}`"),
                });
            }
            values.push(v);
        }
        samples.push(TrajectorySample {
            t: values[0],
            x: DVector::from_vec(values[1..1 + state_dim].to_vec()),
            u: DVector::from_vec(values[1 + state_dim..].to_vec()),
        });
    }

    if samples.len() < 2 {
        return Err(Error::Parse {
            line: samples.len() + 1,
            msg: "a trajectory needs at least two samples".into(),
        });
    }

    // Re-check spacing sample by sample so the error names the bad line.
    let ts = samples[1].t - samples[0].t;
    if !(ts > 0.0) {
        return Err(Error::Parse {
            line: 3,
            msg: format!("non-increasing time: step {ts}"),
        });
    }
    let t0 = samples[0].t;
    for (i, s) in samples.iter().enumerate() {
        let expected = t0 + i as f64 * ts;
        if (s.t - expected).abs() > 1e-9 * expected.abs().max(1.0) {
            return Err(Error::Parse {
                line: i + 2,
                msg: format!("non-uniform spacing: t = {}, expected {expected}", s.t),
            });
        }
    }

    Trajectory::from_samples(samples).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })
}

fn parse_header(cols: &[&str]) -> std::result::Result<(usize, usize), String> {
    if cols.first() != Some(&"t") {
        return Err("header must start with `t`".into());
    }
    let mut state_dim = 0;
    let mut control_dim = 0;
    for c in &cols[1..] {
        if control_dim == 0 && *c == format!("x{}", state_dim + 1) {
            state_dim += 1;
        } else if *c == format!("u{}", control_dim + 1) {
            control_dim += 1;
        } else {
            return Err(format!("unexpected column `{c}`"));
        }
    }
    if state_dim == 0 || state_dim % 2 != 0 {
        return Err(format!(
            "state dimension must be even and positive, got {state_dim}"
        ));
    }
    if control_dim == 0 {
        return Err("at least one control column is required".into());
    }
    Ok((state_dim, control_dim))
}

/// Reads and parses a trajectory CSV file.
pub fn ingest_trajectory(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_trajectory_csv(&text)
}

/// Renders a trajectory to CSV text.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let first = traj.get(0);
    let mut out = String::from("t");
    for i in 0..first.x.len() {
        let _ = write!(out, ",x{}", i + 1);
    }
    for i in 0..first.u.len() {
        let _ = write!(out, ",u{}", i + 1);
    }
    out.push('\n');
    for s in traj.samples() {
        let _ = write!(out, "{}", s.t);
        for v in s.x.iter() {
            let _ = write!(out, ",{v}");
        }
        for v in s.u.iter() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Writes a trajectory CSV file atomically.
pub fn export_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    write_atomic(path, trajectory_to_csv(traj).as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

/// Writes the run's time series, purge log and summary into `dir`:
/// `theta_error.csv`, `weight_error.csv`, `purges.csv`, `summary.json`.
pub fn export_report(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;

    let mut theta = String::from("t,err_norm");
    for i in 0..report.final_theta.len() {
        let _ = write!(theta, ",theta{}", i + 1);
    }
    theta.push('\n');
    for point in &report.theta_error_series {
        let _ = write!(theta, "{},{}", point.t, point.err_norm);
        for v in &point.values {
            let _ = write!(theta, ",{v}");
        }
        theta.push('\n');
    }
    write_atomic(&dir.join("theta_error.csv"), theta.as_bytes())?;

    let mut weights = String::from("t,err_norm");
    for i in 0..report.final_weights.len() {
        let _ = write!(weights, ",w{}", i + 1);
    }
    weights.push('\n');
    for point in &report.weight_error_series {
        let _ = write!(weights, "{},{}", point.t, point.err_norm);
        for v in &point.values {
            let _ = write!(weights, ",{v}");
        }
        weights.push('\n');
    }
    write_atomic(&dir.join("weight_error.csv"), weights.as_bytes())?;

    let mut purges = String::from("t,s,eta_bar,kappa\n");
    for e in &report.purge_events {
        let _ = writeln!(purges, "{},{},{},{}", e.t, e.count, e.eta_bar, e.kappa);
    }
    write_atomic(&dir.join("purges.csv"), purges.as_bytes())?;

    #[derive(serde::Serialize)]
    struct Summary<'a> {
        config: &'a super::config::ExperimentConfig,
        theta_hat: &'a [f64],
        w_hat: &'a [f64],
        purge_count: u32,
        wall_time_s: f64,
    }
    let summary = Summary {
        config: &report.config,
        theta_hat: &report.final_theta,
        w_hat: &report.final_weights,
        purge_count: report.purge_count,
        wall_time_s: report.wall_time_s,
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::invalid(format!("summary serialization failed: {e}")))?;
    write_atomic(&dir.join("summary.json"), json.as_bytes())
}

/// Parses a state list: one state per line, comma-separated components,
/// `#` comments and blank lines ignored.
pub fn parse_state_list(text: &str, dim: usize) -> Result<Vec<DVector<f64>>> {
    let mut states = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = match raw.find('#') {
            Some(pos) => raw[..pos].trim(),
            None => raw.trim(),
        };
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != dim {
            return Err(Error::Parse {
                line,
                msg: format!("expected {dim} components, found {}", fields.len()),
            });
        }
        let mut values = Vec::with_capacity(dim);
        for f in &fields {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("not a number: `{f}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite value `{f}`"),
                });
            }
            values.push(v);
        }
        states.push(DVector::from_vec(values));
    }
    Ok(states)
}
