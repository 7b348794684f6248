//! Output artifacts: field snapshots, CSV tables and the run manifest.
//!
//! A field snapshot is plain text: a header line `n m` (grid size and the
//! regularity index of the run) followed by `n * n` whitespace-separated
//! physical values in row-major order, one row per `x2` grid line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Partition;
use crate::linear_control::FAMILY_LABELS;
use crate::localization::zeta_labels;
use crate::spectral::SpectralField;
use crate::steering::ScheduleRow;

pub fn write_values(path: &Path, n: usize, m: usize, values: &[f64]) -> Result<()> {
    if values.len() != n * n {
        return Err(Error::InvalidArgument(format!("{} values for an {n} x {n} grid", values.len())));
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{n} {m}")?;
    for row in values.chunks(n) {
        let line: Vec<String> = row.iter().map(|x| format!("{x:.17e}")).collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_field(path: &Path, field: &SpectralField, m: usize) -> Result<()> {
    write_values(path, field.n(), m, &field.to_physical())
}

/// Reads a snapshot; returns the field and the header's `m`.
pub fn read_snapshot(path: &Path) -> Result<(SpectralField, usize)> {
    let text = fs::read_to_string(path)?;
    let bad = |what: String| Error::Config(format!("{}: {what}", path.display()));
    let mut tokens = text.split_whitespace();
    let mut header = || -> Result<usize> {
        let t = tokens.next().ok_or_else(|| bad("missing header".into()))?;
        t.parse::<usize>().map_err(|e| bad(format!("header {t}: {e}")))
    };
    let n = header()?;
    let m = header()?;
    let values = tokens.map(|t| t.parse::<f64>().map_err(|e| bad(format!("{t}: {e}")))).collect::<Result<Vec<_>>>()?;
    if values.len() != n * n {
        return Err(bad(format!("{} values for n = {n}", values.len())));
    }
    Ok((SpectralField::from_physical(n, &values)?, m))
}

pub fn read_field(path: &Path) -> Result<SpectralField> {
    read_snapshot(path).map(|(f, _)| f)
}

/// Writes serializable rows as CSV with a header.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `t, gamma_bar, gamma, gamma_1 .. gamma_14`.
pub fn write_schedule(path: &Path, rows: &[ScheduleRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string(), "gamma_bar".into(), "gamma".into()];
    header.extend((1..=rows.first().map_or(14, |r| r.gammas.len())).map(|l| format!("gamma_{l}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![format!("{:e}", r.t), format!("{:e}", r.gamma_bar), format!("{:e}", r.gamma)];
        rec.extend(r.gammas.iter().map(|g| format!("{g:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `name, value` rows.
pub fn write_metrics(path: &Path, metrics: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["name", "value"])?;
    for (k, v) in metrics {
        w.write_record([k.clone(), format!("{v:e}")])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct PartitionRecord {
    pub a: f64,
    pub b: f64,
    pub k: usize,
    pub l_k: f64,
    pub t_delta: f64,
    pub h1: f64,
    pub h2: f64,
    pub strips: Vec<(f64, f64)>,
}

impl PartitionRecord {
    pub fn of(p: &Partition) -> Self {
        PartitionRecord {
            a: p.domain.a,
            b: p.domain.b,
            k: p.k,
            l_k: p.lk,
            t_delta: p.time_grid().t_delta,
            h1: p.h1,
            h2: p.h2,
            strips: p.strips.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub version: String,
    pub family_order: Vec<String>,
    pub zeta_order: Vec<String>,
    pub partition: Option<PartitionRecord>,
}

impl Manifest {
    pub fn new(command: &str, config_hash: &str, partition: Option<&Partition>) -> Self {
        Manifest {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            family_order: FAMILY_LABELS.iter().map(|s| s.to_string()).collect(),
            zeta_order: zeta_labels(),
            partition: partition.map(PartitionRecord::of),
        }
    }
}

/// Output directory `runs/<id>` of one invocation.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<root>/<command>-<first 12 hash digits>`.
    pub fn create(root: &Path, command: &str, config_hash: &str) -> Result<Self> {
        let id = format!("{command}-{}", &config_hash[..12.min(config_hash.len())]);
        let path = root.join(id);
        fs::create_dir_all(&path)?;
        Ok(RunDir { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_manifest(&self, m: &Manifest) -> Result<()> {
        let text = toml::to_string(m).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(self.file("manifest.toml"), text)?;
        Ok(())
    }

    /// Writes `config.toml` next to the outputs.
    pub fn write_config(&self, text: &str) -> Result<()> {
        fs::write(self.file("config.toml"), text)?;
        Ok(())
    }
}
