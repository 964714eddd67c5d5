//! Line-oriented JSON metric records.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// `train`, `valid` or `test`.
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pair: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lr: Option<f64>,
}

impl MetricRecord {
    pub fn new(step: u64, split: &str) -> Self {
        MetricRecord {
            step,
            split: split.into(),
            pair: None,
            nll: None,
            bleu: None,
            lr: None,
        }
    }

    pub fn pair(mut self, pair: &str) -> Self {
        self.pair = Some(pair.into());
        self
    }

    pub fn nll(mut self, nll: f64) -> Self {
        self.nll = Some(nll);
        self
    }

    pub fn bleu(mut self, bleu: f64) -> Self {
        self.bleu = Some(bleu);
        self
    }

    pub fn lr(mut self, lr: f64) -> Self {
        self.lr = Some(lr);
        self
    }
}

/// Collects records in memory and mirrors them to a file when one is attached.
#[derive(Default)]
pub struct MetricsLog {
    records: Vec<MetricRecord>,
    sink: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(MetricsLog {
            records: Vec::new(),
            sink: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let Some(w) = &mut self.sink {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut log = MetricsLog::to_file(&path).unwrap();
        log.push(MetricRecord::new(0, "valid").nll(3.25)).unwrap();
        log.push(MetricRecord::new(100, "test").pair("a-en").bleu(41.5)).unwrap();
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"step":0,"split":"valid","nll":3.25}"#);
        assert_eq!(read_metrics(&path).unwrap().len(), 2);
    }
}
