//! Metrics CSV files: a header row, then one row per epoch or evaluation.
//!
//! Cells are `.`-decimal numbers in shortest round-trip form; a cell is
//! empty when the quantity does not exist for that row (no training yet,
//! no probe this epoch).

use std::fs::File;
use std::path::Path;

use crate::error::{CliError, Result};

pub const RL_COLUMNS: [&str; 11] = [
    "env_steps",
    "episode_return",
    "model_loss",
    "rew_loss",
    "con_loss",
    "rec_loss",
    "obs_loss",
    "actor_loss",
    "critic_loss",
    "entropy",
    "S",
];

/// `epoch, p_1..p_n, acc_1..acc_n, L_z, probe_acc`.
pub fn pretrain_columns(n: usize) -> Vec<String> {
    let mut cols = vec!["epoch".to_string()];
    cols.extend((1..=n).map(|i| format!("p_{i}")));
    cols.extend((1..=n).map(|i| format!("acc_{i}")));
    cols.push("L_z".into());
    cols.push("probe_acc".into());
    cols
}

pub fn rl_columns() -> Vec<String> {
    RL_COLUMNS.iter().map(|s| s.to_string()).collect()
}

pub struct MetricsWriter {
    inner: csv::Writer<File>,
    width: usize,
}

impl MetricsWriter {
    /// Starts a new file, replacing any existing one.
    pub fn create(path: &Path, columns: &[String]) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut inner = csv::Writer::from_writer(File::create(path)?);
        inner.write_record(columns)?;
        inner.flush()?;
        Ok(Self {
            inner,
            width: columns.len(),
        })
    }

    /// Continues an existing file whose header must equal `columns`; rows
    /// after `keep` data rows are dropped first, so a resumed run does not
    /// duplicate rows written after its checkpoint.
    pub fn resume(path: &Path, columns: &[String], keep: usize) -> Result<Self> {
        let table = Table::read(path)?;
        if table.columns != columns {
            return Err(CliError::Metrics(format!(
                "{} has columns {:?}, expected {:?}",
                path.display(),
                table.columns,
                columns
            )));
        }
        if table.rows.len() < keep {
            return Err(CliError::Metrics(format!(
                "{} has {} rows but the checkpoint follows row {keep}",
                path.display(),
                table.rows.len()
            )));
        }
        let mut writer = Self::create(path, columns)?;
        for row in &table.rows[..keep] {
            writer.row(row)?;
        }
        Ok(writer)
    }

    pub fn row(&mut self, cells: &[Option<f64>]) -> Result<()> {
        if cells.len() != self.width {
            return Err(CliError::Metrics(format!("row of {} cells for {} columns", cells.len(), self.width)));
        }
        self.inner
            .write_record(cells.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()))?;
        self.inner.flush()?;
        Ok(())
    }
}

/// A parsed metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let columns: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let row = record
                .iter()
                .map(|cell| match cell.trim() {
                    "" => Ok(None),
                    s => s.parse().map(Some).map_err(|_| {
                        CliError::Metrics(format!("{} row {}: `{s}` is not a number", path.display(), i + 1))
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}
