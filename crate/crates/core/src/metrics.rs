//! Line-delimited JSON metrics: one object per evaluation with the fields
//! `step`, `total`, `base_ce`, `shadow_ce`, `eval_acc`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    /// Optimizer steps completed.
    pub step: usize,
    pub total: f64,
    pub base_ce: f64,
    pub shadow_ce: f64,
    pub eval_acc: f64,
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

pub struct MetricsWriter<W: Write> {
    out: W,
}

impl MetricsWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        MetricsWriter { out }
    }

    pub fn write(&mut self, record: &MetricRecord) -> Result<()> {
        writeln!(self.out, "{}", record.to_line())?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Checkpoint(format!("metrics line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_round_trip() {
        let rec = MetricRecord {
            step: 100,
            total: 1.25,
            base_ce: 1.0,
            shadow_ce: 5.0,
            eval_acc: 0.5,
        };
        let mut w = MetricsWriter::new(Vec::new());
        w.write(&rec).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert_eq!(text.lines().count(), 1);
        let back: MetricRecord = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(back, rec);
    }
}
