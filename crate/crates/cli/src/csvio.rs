//! CSV readers and writers for paths, filters, and vectors.

use std::path::Path;

use rkb_core::kalman::{FilterOutput, ObservationPath};
use rkb_core::model::TimeGrid;
use rkb_core::sim::{DeterministicTheta, PathBatch};
use rkb_core::{Error, Result};

fn io_err(e: csv::Error) -> Error {
    Error::ConfigParse(format!("csv: {e}"))
}

pub fn write_simulate_csv(path: &Path, batch: &PathBatch) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let mut header = vec!["path_id".to_string(), "t".to_string()];
    header.extend((0..batch.n).map(|i| format!("x_{i}")));
    header.extend((0..batch.m).map(|j| format!("m_{j}")));
    header.push("f_theta".to_string());
    w.write_record(&header).map_err(io_err)?;
    for (pid, p) in batch.paths.iter().enumerate() {
        for k in 0..batch.grid.num_points() {
            let mut rec = vec![pid.to_string(), batch.grid.time(k).to_string()];
            rec.extend(p.x_at(k, batch.n).iter().map(|v| v.to_string()));
            rec.extend(p.obs_at(k, batch.m).iter().map(|v| v.to_string()));
            rec.push(p.f_theta[k].to_string());
            w.write_record(&rec).map_err(io_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_observations_csv(path: &Path, obs: &ObservationPath) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..obs.m_dim).map(|j| format!("m_{j}")));
    w.write_record(&header).map_err(io_err)?;
    for k in 0..obs.grid.num_points() {
        let mut rec = vec![obs.grid.time(k).to_string()];
        rec.extend(obs.at(k).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `t, m_0, ..` rows; the time column is checked against the grid.
pub fn read_observations_csv(path: &Path, grid: &TimeGrid, m_dim: usize) -> Result<ObservationPath> {
    let mut r = csv::Reader::from_path(path).map_err(io_err)?;
    let mut values = Vec::with_capacity(grid.num_points() * m_dim);
    let mut rows = 0usize;
    for rec in r.records() {
        let rec = rec.map_err(io_err)?;
        if rec.len() != m_dim + 1 {
            return Err(Error::GridMismatch(format!(
                "observation row has {} fields, expected {}",
                rec.len(),
                m_dim + 1
            )));
        }
        let t: f64 = rec[0]
            .parse()
            .map_err(|e| Error::ConfigParse(format!("bad time value `{}`: {e}", &rec[0])))?;
        if rows < grid.num_points() && grid.index_at(t) != Some(rows) {
            return Err(Error::GridMismatch(format!(
                "observation time {t} does not match grid point {rows}"
            )));
        }
        for j in 0..m_dim {
            values.push(rec[j + 1].parse().map_err(|e| {
                Error::ConfigParse(format!("bad observation value `{}`: {e}", &rec[j + 1]))
            })?);
        }
        rows += 1;
    }
    ObservationPath::new(*grid, m_dim, values)
}

pub fn write_filter_csv(path: &Path, grid: &TimeGrid, n: usize, out: &FilterOutput) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x_hat_{i}")));
    for i in 0..n {
        for j in 0..n {
            header.push(format!("p_{i}{j}"));
        }
    }
    w.write_record(&header).map_err(io_err)?;
    for k in 0..grid.num_points() {
        let mut rec = vec![grid.time(k).to_string()];
        rec.extend(out.x_hat_at(k, n).iter().map(|v| v.to_string()));
        let p = &out.p[k];
        for i in 0..n {
            for j in 0..n {
                rec.push(p[(i, j)].to_string());
            }
        }
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a per-step parameter table with `theta1_*` and `theta2_*` columns.
pub fn read_theta_csv(path: &Path, n: usize, m: usize, steps: usize) -> Result<DeterministicTheta> {
    let mut r = csv::Reader::from_path(path).map_err(io_err)?;
    let mut th1 = Vec::with_capacity(steps);
    let mut th2 = Vec::with_capacity(steps);
    for rec in r.records() {
        let rec = rec.map_err(io_err)?;
        if rec.len() != n + m {
            return Err(Error::GridMismatch(format!(
                "theta row has {} fields, expected {}",
                rec.len(),
                n + m
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| Error::ConfigParse(format!("bad theta value `{s}`: {e}")))
        };
        th1.push(rec.iter().take(n).map(parse).collect::<Result<Vec<_>>>()?);
        th2.push(rec.iter().skip(n).map(parse).collect::<Result<Vec<_>>>()?);
    }
    if th1.len() != steps {
        return Err(Error::GridMismatch(format!(
            "theta file has {} rows, expected one per step ({steps})",
            th1.len()
        )));
    }
    DeterministicTheta::per_step(th1, th2)
}

/// Reads a single-column numeric CSV (header optional).
pub fn read_vector_csv(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        for field in line.split(',') {
            let field = field.trim();
            match field.parse::<f64>() {
                Ok(v) => out.push(v),
                Err(e) => {
                    if lineno == 0 {
                        continue; // header
                    }
                    return Err(Error::ConfigParse(format!("bad value `{field}`: {e}")));
                }
            }
        }
    }
    Ok(out)
}
