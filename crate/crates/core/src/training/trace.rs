use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged point: the batch loss at `step` (before that step's update)
/// and held-out mean sequence log-likelihoods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub logp_w: f64,
    pub logp_l: f64,
    pub margin: f64,
}

/// Training log written as CSV with columns `step,loss,logp_w,logp_l,margin`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn push(&mut self, step: usize, loss: f64, logp_w: f64, logp_l: f64) {
        self.records.push(TraceRecord {
            step,
            loss,
            logp_w,
            logp_l,
            margin: logp_w - logp_l,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(csv_error)?;
        }
        if self.records.is_empty() {
            w.write_record(["step", "loss", "logp_w", "logp_l", "margin"])
                .map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<TraceRecord>, _>>()
            .map_err(csv_error)?;
        Ok(Self { records })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format {
        path: "<trace>".into(),
        reason: e.to_string(),
    }
}
