//! Run artifacts: CSV builders and readers for controls, ledgers,
//! residual reports, measure frames, and the per-run manifest.  Every
//! float is printed as `{:.16e}` so identical runs produce byte-identical
//! files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use measure_steer_core::fmp::FmpReport;
use measure_steer_core::measures::{EmpiricalMeasure, GridMeasure};
use measure_steer_core::pmp::PmpResidual;
use measure_steer_core::time::{ControlSignal, Partition, TimeGrid};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for byte in digest {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

/// Collects written files so the closing manifest can list their hashes.
pub struct ArtifactSet {
    dir: PathBuf,
    entries: Vec<(String, String, usize)>,
}

impl ArtifactSet {
    pub fn create(dir: &Path) -> Result<Self, ArtifactError> {
        std::fs::create_dir_all(dir)
            .map_err(|source| ArtifactError::Write { path: dir.to_path_buf(), source })?;
        Ok(Self { dir: dir.to_path_buf(), entries: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, content: &str) -> Result<(), ArtifactError> {
        let path = self.dir.join(name);
        std::fs::write(&path, content)
            .map_err(|source| ArtifactError::Write { path: path.clone(), source })?;
        self.entries.push((name.to_string(), sha256_hex(content.as_bytes()), content.len()));
        Ok(())
    }

    /// Write `manifest.txt`: the given header lines followed by one
    /// `artifact = <name> sha256=<hex> bytes=<n>` line per written file.
    pub fn finish(self, header: &[String]) -> Result<(), ArtifactError> {
        let mut text = String::new();
        for line in header {
            text.push_str(line);
            text.push('\n');
        }
        for (name, hash, bytes) in &self.entries {
            let _ = writeln!(text, "artifact = {name} sha256={hash} bytes={bytes}");
        }
        let path = self.dir.join("manifest.txt");
        std::fs::write(&path, text)
            .map_err(|source| ArtifactError::Write { path, source })?;
        Ok(())
    }
}

/// `t_start,t_end,u1..um`, one row per partition interval.
pub fn control_csv(signal: &ControlSignal) -> String {
    let m = signal.dim();
    let mut out = String::from("t_start,t_end");
    for k in 1..=m {
        let _ = write!(out, ",u{k}");
    }
    out.push('\n');
    let pi = signal.partition();
    for (i, value) in signal.values().iter().enumerate() {
        let (a, b) = pi.interval(i);
        let _ = write!(out, "{},{}", fmt_float(a), fmt_float(b));
        for v in value {
            let _ = write!(out, ",{}", fmt_float(*v));
        }
        out.push('\n');
    }
    out
}

/// `iter,accepted,cost,alpha,diam_pi,mass_loss_mu,mass_loss_nu`, one row
/// per tried feedback.  Explore-at-tie trials keep their alpha column; a
/// single-population run reports zero for the second mass-loss column.
pub fn ledger_csv(report: &FmpReport) -> String {
    let mut out = String::from("iter,accepted,cost,alpha,diam_pi,mass_loss_mu,mass_loss_nu\n");
    for (i, it) in report.iterates.iter().enumerate() {
        let mu = it.mass_loss.first().copied().unwrap_or(0.0);
        let nu = it.mass_loss.get(1).copied().unwrap_or(0.0);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            i + 1,
            u8::from(it.accepted),
            fmt_float(it.cost),
            fmt_float(it.alpha),
            fmt_float(it.diam),
            fmt_float(mu),
            fmt_float(nu),
        );
    }
    out
}

/// `t,residual,sigma_1..sigma_m`, one row per solver node.
pub fn residual_csv(res: &PmpResidual) -> String {
    let m = res.sigmas.first().map_or(0, |s| s.len());
    let mut out = String::from("t,residual");
    for k in 1..=m {
        let _ = write!(out, ",sigma_{k}");
    }
    out.push('\n');
    for i in 0..res.times.len() {
        let _ = write!(out, "{},{}", fmt_float(res.times[i]), fmt_float(res.residuals[i]));
        for s in res.sigmas[i].components() {
            let _ = write!(out, ",{}", fmt_float(*s));
        }
        out.push('\n');
    }
    out
}

/// `a,b,value` over cell centers, fastest along the first axis.
pub fn density_csv(m: &GridMeasure) -> String {
    let spec = m.spec();
    let [nx, ny] = spec.cells();
    let mut out = String::from("a,b,value\n");
    for j in 0..ny {
        for i in 0..nx {
            let c = spec.cell_center(i, j);
            let _ = writeln!(
                out,
                "{},{},{}",
                fmt_float(c[0]),
                fmt_float(c[1]),
                fmt_float(m.value(i, j))
            );
        }
    }
    out
}

/// `x1,..,xn,weight`, one atom per row.
pub fn atoms_csv(m: &EmpiricalMeasure) -> String {
    let mut out = String::new();
    for d in 1..=m.dim() {
        if d > 1 {
            out.push(',');
        }
        let _ = write!(out, "x{d}");
    }
    out.push_str(",weight\n");
    for i in 0..m.len() {
        for x in m.point(i) {
            let _ = write!(out, "{},", fmt_float(*x));
        }
        let _ = writeln!(out, "{}", fmt_float(m.weights()[i]));
    }
    out
}

/// `t,mean_1..mean_n,mass`, one row per recorded time.
pub fn means_csv(times: &[f64], means: &[Vec<f64>], masses: &[f64]) -> String {
    let dim = means.first().map_or(0, Vec::len);
    let mut out = String::from("t");
    for d in 1..=dim {
        let _ = write!(out, ",mean_{d}");
    }
    out.push_str(",mass\n");
    for i in 0..times.len() {
        let _ = write!(out, "{}", fmt_float(times[i]));
        for v in &means[i] {
            let _ = write!(out, ",{}", fmt_float(*v));
        }
        let _ = writeln!(out, ",{}", fmt_float(masses[i]));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Read a comma-separated table with a header row; fields are trimmed and
/// blank lines skipped.
pub fn read_csv(path: &Path) -> Result<CsvTable, ArtifactError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ArtifactError::Read { path: path.to_path_buf(), source })?;
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|f| f.trim().to_string()).collect::<Vec<_>>());
    let header = lines.next().ok_or_else(|| ArtifactError::Format {
        path: path.to_path_buf(),
        message: "empty file".into(),
    })?;
    Ok(CsvTable { header, rows: lines.collect() })
}

/// Read a piecewise-constant control back from its CSV dump and validate
/// it against the scenario horizon and control dimension.
pub fn read_control_csv(
    path: &Path,
    tg: &TimeGrid,
    dim: usize,
) -> Result<ControlSignal, ArtifactError> {
    let bad = |message: String| ArtifactError::Format { path: path.to_path_buf(), message };
    let table = read_csv(path)?;
    if table.header.len() != dim + 2
        || table.header[0] != "t_start"
        || table.header[1] != "t_end"
    {
        return Err(bad(format!(
            "expected header t_start,t_end,u1..u{dim}, got {}",
            table.header.join(",")
        )));
    }
    if table.rows.is_empty() {
        return Err(bad("no control intervals".into()));
    }
    let span = tg.t_end() - tg.t0();
    let slack = 1e-9 * (1.0 + span.abs());
    let parse = |field: &str, row: usize| -> Result<f64, ArtifactError> {
        field
            .parse::<f64>()
            .map_err(|_| bad(format!("row {}: not a number: `{field}`", row + 2)))
    };
    let mut nodes = Vec::with_capacity(table.rows.len() + 1);
    let mut values = Vec::with_capacity(table.rows.len());
    for (r, row) in table.rows.iter().enumerate() {
        if row.len() != dim + 2 {
            return Err(bad(format!(
                "row {} has {} fields, expected {}",
                r + 2,
                row.len(),
                dim + 2
            )));
        }
        let start = parse(&row[0], r)?;
        let end = parse(&row[1], r)?;
        if r == 0 {
            nodes.push(start);
        } else if (start - nodes[r]).abs() > slack {
            return Err(bad(format!(
                "row {}: t_start {} does not continue the previous t_end {}",
                r + 2,
                start,
                nodes[r]
            )));
        }
        nodes.push(end);
        let mut value = Vec::with_capacity(dim);
        for field in &row[2..] {
            value.push(parse(field, r)?);
        }
        values.push(value);
    }
    if (nodes[0] - tg.t0()).abs() > slack || (nodes[nodes.len() - 1] - tg.t_end()).abs() > slack {
        return Err(bad(format!(
            "control spans [{}, {}] but the scenario horizon is [{}, {}]",
            nodes[0],
            nodes[nodes.len() - 1],
            tg.t0(),
            tg.t_end()
        )));
    }
    let partition = Partition::new(nodes)
        .map_err(|e| bad(format!("invalid interval sequence: {e}")))?;
    ControlSignal::new(partition, values).map_err(|e| bad(format!("invalid control: {e}")))
}
