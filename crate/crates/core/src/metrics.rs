//! Comma-separated metrics table, one row per epoch.
//!
//! Floats are written as `{:.9e}` (ten significant digits) so two runs can be
//! compared byte for byte.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trainer::TrainMetrics;

pub const HEADER: [&str; 17] = [
    "epoch",
    "iter",
    "probe_loss",
    "r1_i2t",
    "r1_t2i",
    "tau",
    "tau_q10",
    "tau_q50",
    "tau_q90",
    "gamma",
    "lr",
    "feature_gather",
    "u_gather",
    "tau_gather",
    "rs_grad",
    "grad_reduce",
    "tau_reduce",
];

pub fn header_line() -> String {
    HEADER.join(",")
}

pub fn format_row(m: &TrainMetrics) -> String {
    let mut cells = vec![m.epoch.to_string(), m.iter.to_string()];
    for v in [
        m.probe_loss,
        m.r1_i2t,
        m.r1_t2i,
        m.tau,
        m.tau_q10,
        m.tau_q50,
        m.tau_q90,
        m.gamma,
        m.lr,
    ] {
        cells.push(format!("{v:.9e}"));
    }
    cells.extend(m.ledger.iter().map(u64::to_string));
    cells.join(",")
}

pub fn parse_csv(text: &str) -> Result<Vec<TrainMetrics>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if headers.iter().ne(HEADER.iter().copied()) {
        return Err(Error::Format(format!("unexpected metrics header: {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut rows: Vec<TrainMetrics> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let bad = |col: usize| Error::Format(format!("row {}: cannot parse `{}`", line + 1, HEADER[col]));
        let int = |col: usize| rec[col].parse::<u64>().map_err(|_| bad(col));
        let float = |col: usize| rec[col].parse::<f64>().map_err(|_| bad(col));
        let mut ledger = [0u64; 6];
        for (j, slot) in ledger.iter_mut().enumerate() {
            *slot = int(11 + j)?;
        }
        let m = TrainMetrics {
            epoch: int(0)?,
            iter: int(1)?,
            probe_loss: float(2)?,
            r1_i2t: float(3)?,
            r1_t2i: float(4)?,
            tau: float(5)?,
            tau_q10: float(6)?,
            tau_q50: float(7)?,
            tau_q90: float(8)?,
            gamma: float(9)?,
            lr: float(10)?,
            ledger,
        };
        if let Some(prev) = rows.last() {
            if m.epoch <= prev.epoch {
                return Err(Error::Format(format!("row {}: epoch {} is not after {}", line + 1, m.epoch, prev.epoch)));
            }
        }
        rows.push(m);
    }
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<TrainMetrics>> {
    parse_csv(&std::fs::read_to_string(path)?)
}

/// Append-only writer. Opening an existing file keeps its rows and checks
/// the header.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
        if exists {
            let first = BufReader::new(File::open(path)?).lines().next().transpose()?.unwrap_or_default();
            if first != header_line() {
                return Err(Error::Format(format!("{} does not start with the metrics header", path.display())));
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if !exists {
            writeln!(file, "{}", header_line())?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, m: &TrainMetrics) -> Result<()> {
        writeln!(self.file, "{}", format_row(m))?;
        self.file.flush()?;
        Ok(())
    }
}
