use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub raw_loss: f64,
}

/// Run metadata written next to the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub technique: String,
    pub config_hash: String,
}

/// Append-only per-step log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog {
    pub meta: RunMeta,
    records: Vec<StepRecord>,
}

pub const METRICS_HEADER: &str = "step,lr,raw_loss";

impl MetricsLog {
    pub fn new(technique: impl Into<String>, config_hash: impl Into<String>) -> Self {
        MetricsLog {
            meta: RunMeta {
                technique: technique.into(),
                config_hash: config_hash.into(),
            },
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.step <= last.step {
                return Err(Error::InvalidArgument(format!(
                    "metrics step {} does not follow {}",
                    rec.step, last.step
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.raw_loss).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.raw_loss));
        }
        out
    }

    /// Writes the CSV and a `<path>.json` metadata sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv())?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(())
    }

    /// Reads a metrics CSV; the sidecar is optional.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let meta = match fs::read_to_string(sidecar_path(path)) {
            Ok(s) => serde_json::from_str(&s)?,
            Err(_) => RunMeta {
                technique: String::new(),
                config_hash: String::new(),
            },
        };
        let mut log = MetricsLog { meta, records: Vec::new() };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(METRICS_HEADER) {
            return Err(Error::Format(format!("{}: expected header `{METRICS_HEADER}`", path.display())));
        }
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("{}:{}: malformed row `{line}`", path.display(), i + 2));
            let mut it = line.split(',');
            let rec = StepRecord {
                step: it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?,
                lr: it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?,
                raw_loss: it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?,
            };
            if it.next().is_some() {
                return Err(bad());
            }
            log.push(rec)?;
        }
        Ok(log)
    }
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut p = csv.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Exponential smoothing `s_t = alpha * s_{t-1} + (1 - alpha) * v_t`, with `s_0 = v_0`.
pub fn smooth(values: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot smooth an empty series".into()));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1)")));
    }
    let mut out = Vec::with_capacity(values.len());
    let mut s = values[0];
    out.push(s);
    for &v in &values[1..] {
        s = alpha * s + (1.0 - alpha) * v;
        out.push(s);
    }
    Ok(out)
}
