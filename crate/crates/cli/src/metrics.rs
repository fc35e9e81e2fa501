//! Line-delimited metrics log.
//!
//! The first line is a header naming the schema and its version; every
//! following line is one [`StepRecord`]. Wall-clock times go to a separate
//! `timing.jsonl` so that the metrics log of a seeded run is reproducible
//! byte for byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unimlip::trainer::StepRecord;

use crate::error::CliError;

pub const SCHEMA: &str = "unimlip.metrics";
pub const SCHEMA_VERSION: u32 = 1;
pub const FIELDS: [&str; 11] = [
    "step",
    "phase",
    "epoch",
    "lr",
    "itc",
    "itc_pert_image",
    "itc_pert_text",
    "i2i",
    "mlm",
    "total",
    "tau",
];

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    pub version: u32,
    pub fields: Vec<String>,
}

impl Header {
    pub fn current() -> Self {
        Self {
            schema: SCHEMA.to_string(),
            version: SCHEMA_VERSION,
            fields: FIELDS.iter().map(|f| f.to_string()).collect(),
        }
    }
}

#[derive(Serialize)]
struct Timing {
    step: u64,
    wall_s: f64,
}

pub struct MetricsWriter {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    path: PathBuf,
    started: std::time::Instant,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(CliError::io(path))?))
}

impl MetricsWriter {
    /// Truncates `metrics.jsonl` and `timing.jsonl` in `dir`.
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("metrics.jsonl");
        let mut metrics = create(&path)?;
        let timing = create(&dir.join("timing.jsonl"))?;
        serde_json::to_writer(&mut metrics, &Header::current()).map_err(unimlip::Error::from)?;
        metrics.write_all(b"\n").map_err(CliError::io(&path))?;
        Ok(Self {
            metrics,
            timing,
            path,
            started: std::time::Instant::now(),
        })
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<(), CliError> {
        serde_json::to_writer(&mut self.metrics, r).map_err(unimlip::Error::from)?;
        self.metrics.write_all(b"\n").map_err(CliError::io(&self.path))?;
        let t = Timing {
            step: r.step,
            wall_s: self.started.elapsed().as_secs_f64(),
        };
        serde_json::to_writer(&mut self.timing, &t).map_err(unimlip::Error::from)?;
        self.timing.write_all(b"\n").map_err(CliError::io(&self.path))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), CliError> {
        self.metrics.flush().map_err(CliError::io(&self.path))?;
        self.timing.flush().map_err(CliError::io(&self.path))
    }
}

/// Reads a metrics log, checking the header.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>, CliError> {
    let bad = |message: String| CliError::Artifact {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(CliError::io(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| bad("empty metrics log".into()))?
        .map_err(CliError::io(path))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.schema != SCHEMA || header.version != SCHEMA_VERSION {
        return Err(bad(format!("unsupported schema {} v{}", header.schema, header.version)));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(CliError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 2)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use unimlip::losses::LossReport;

    #[test]
    fn header_fields_match_record_keys() {
        let r = StepRecord {
            step: 1,
            phase: 1,
            epoch: 0,
            lr: 1e-4,
            losses: LossReport::default(),
            tau: 0.07,
        };
        let v = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        let mut fields = FIELDS.to_vec();
        keys.sort_unstable();
        fields.sort_unstable();
        assert_eq!(keys, fields);
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path()).unwrap();
        let r = StepRecord {
            step: 3,
            phase: 2,
            epoch: 1,
            lr: 0.5,
            losses: LossReport {
                itc: 0.1,
                total: 0.3,
                ..LossReport::default()
            },
            tau: 0.07,
        };
        w.record(&r).unwrap();
        w.flush().unwrap();
        assert_eq!(read_metrics(&dir.path().join("metrics.jsonl")).unwrap(), vec![r]);
    }
}
