//! Plot-ready CSV tables.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::models::MpcPoint;
use crate::orchestrator::ConvergenceReport;
use crate::solvers::SolverState;
use crate::stochastics::{NoisePair, TimeGrid};
use crate::validation::ProcessReport;

pub const PATHS_HEADER: [&str; 9] = ["path_id", "t", "W", "W0", "X", "Y", "Z", "Z0", "S"];

/// Decimal text with 9 significant digits, scientific notation outside
/// `[1e-5, 1e9)`.
pub fn sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let text = if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        // Rounding may carry into a new leading digit (9.99999999996 -> 10.0000000);
        // the extra digit is always a trailing zero, which is trimmed below.
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    };
    if text == "-0" {
        "0".into()
    } else {
        text
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("CSV: {other:?}")),
    }
}

/// One row per `(path, node)`, sorted by `(path_id, t)`.
pub fn write_paths_csv<W: Write>(out: W, grid: &TimeGrid, noise: &NoisePair, state: &SolverState) -> Result<()> {
    state.check_consistent()?;
    if noise.paths() != state.paths() || state.nodes() != grid.nodes() || noise.steps() != grid.steps() {
        return Err(Error::dimension(
            "paths CSV",
            format!("{} paths x {} nodes", noise.paths(), grid.nodes()),
            format!("{} paths x {} nodes", state.paths(), state.nodes()),
        ));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PATHS_HEADER).map_err(csv_error)?;
    for i in 0..state.paths() {
        for j in 0..grid.nodes() {
            let row = [
                i.to_string(),
                sig9(grid.time(j)),
                sig9(noise.w.get(i, j)),
                sig9(noise.w0.get(i, j)),
                sig9(state.x.get(i, j)),
                sig9(state.y.get(i, j)),
                sig9(state.z.get(i, j)),
                sig9(state.z0.get(i, j)),
                sig9(state.s.get(i, j)),
            ];
            w.write_record(&row).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A parsed paths table; `values[k]` holds the eight numeric columns of row
/// `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathsTable {
    pub paths: usize,
    pub nodes: usize,
    pub values: Vec<[f64; 8]>,
}

impl PathsTable {
    /// Column `c` (0 = t, ..., 7 = S) as a `paths x nodes` matrix.
    pub fn column(&self, c: usize) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_fn((self.paths, self.nodes), |(i, j)| self.values[i * self.nodes + j][c])
    }
}

/// Reads and checks a paths table: exact header, contiguous path ids from
/// 0, strictly increasing `t` within a path, and the same node count for
/// every path.
pub fn read_paths_csv<R: Read>(input: R) -> Result<PathsTable> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers().map_err(csv_error)?.clone();
    if header.iter().ne(PATHS_HEADER) {
        return Err(Error::Parse(format!("paths CSV header must be {}", PATHS_HEADER.join(","))));
    }
    let mut values = Vec::new();
    let mut current: Option<usize> = None;
    let mut count = 0usize;
    let mut nodes: Option<usize> = None;
    let mut last_t = f64::NEG_INFINITY;
    let finish_path = |count: usize, nodes: &mut Option<usize>| -> Result<()> {
        match *nodes {
            None => *nodes = Some(count),
            Some(n) if n != count => {
                return Err(Error::Parse(format!("paths CSV: path has {count} rows, expected {n}")));
            }
            _ => {}
        }
        Ok(())
    };
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let row = line + 2;
        if rec.len() != PATHS_HEADER.len() {
            return Err(Error::Parse(format!("paths CSV row {row}: expected 9 fields, got {}", rec.len())));
        }
        let id: usize = rec[0]
            .parse()
            .map_err(|_| Error::Parse(format!("paths CSV row {row}: bad path_id `{}`", &rec[0])))?;
        let mut v = [0.0; 8];
        for (k, slot) in v.iter_mut().enumerate() {
            let field = &rec[k + 1];
            *slot = field
                .parse()
                .map_err(|_| Error::Parse(format!("paths CSV row {row}: bad {} `{field}`", PATHS_HEADER[k + 1])))?;
        }
        match current {
            Some(c) if c == id => {
                if !(v[0] > last_t) {
                    return Err(Error::Parse(format!("paths CSV row {row}: t not increasing")));
                }
                count += 1;
            }
            _ => {
                let expected = current.map_or(0, |c| c + 1);
                if id != expected {
                    return Err(Error::Parse(format!("paths CSV row {row}: path_id {id}, expected {expected}")));
                }
                if current.is_some() {
                    finish_path(count, &mut nodes)?;
                }
                current = Some(id);
                count = 1;
            }
        }
        last_t = v[0];
        values.push(v);
    }
    let Some(last) = current else {
        return Err(Error::Parse("paths CSV has no rows".into()));
    };
    finish_path(count, &mut nodes)?;
    let nodes = nodes.expect("set by finish_path");
    Ok(PathsTable {
        paths: last + 1,
        nodes,
        values,
    })
}

/// Per-iteration distances, final losses and Picard diagnostics. Contains
/// no timings, so fixed-seed runs give identical files.
pub fn write_metrics_csv<W: Write>(out: W, report: &ConvergenceReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iteration",
        "dist_x",
        "dist_y",
        "dist_z",
        "dist_z0",
        "loss_s",
        "loss_y",
        "loss_z0",
        "picard_sweeps",
        "picard_converged",
        "clamp_events",
    ])
    .map_err(csv_error)?;
    let last = |v: &[f64]| v.last().map_or_else(String::new, |&x| sig9(x));
    for r in &report.records {
        w.write_record([
            r.iteration.to_string(),
            sig9(r.dist_x),
            sig9(r.dist_y),
            sig9(r.dist_z),
            sig9(r.dist_z0),
            last(&r.loss_s),
            last(&r.loss_y),
            last(&r.loss_z0),
            r.picard.errors.len().to_string(),
            r.picard.converged.to_string(),
            r.clamp_events.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Full loss histories, one row per optimizer step.
pub fn write_losses_csv<W: Write>(out: W, report: &ConvergenceReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "network", "epoch", "loss"]).map_err(csv_error)?;
    for r in &report.records {
        for (name, losses) in [("S", &r.loss_s), ("U", &r.loss_y), ("v", &r.loss_z0)] {
            for (e, l) in losses.iter().enumerate() {
                w.write_record([r.iteration.to_string(), name.into(), e.to_string(), sig9(*l)])
                    .map_err(csv_error)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings_csv<W: Write>(out: W, report: &ConvergenceReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "wall_seconds"]).map_err(csv_error)?;
    for (r, s) in report.records.iter().zip(&report.wall_seconds) {
        w.write_record([r.iteration.to_string(), format!("{s:.3}")]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Error quantile bands of one process: `t,q05,q25,q50,q75,q95`.
pub fn write_bands_csv<W: Write>(out: W, process: &ProcessReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "q05", "q25", "q50", "q75", "q95"]).map_err(csv_error)?;
    for b in &process.bands {
        w.write_record([b.t, b.q05, b.q25, b.q50, b.q75, b.q95].map(sig9)).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Marginal propensity to consume on a `(K, r)` grid; empty `mpc` where the
/// `|Y|` floor is active.
pub fn write_mpc_csv<W: Write>(out: W, points: &[MpcPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "k", "r", "y", "z", "mpc"]).map_err(csv_error)?;
    for p in points {
        w.write_record([
            sig9(p.t),
            sig9(p.k),
            sig9(p.r),
            sig9(p.y),
            sig9(p.z),
            p.mpc.map_or_else(String::new, sig9),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
