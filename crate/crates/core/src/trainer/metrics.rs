use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the per-epoch metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub phase: String,
    pub fold: String,
    pub loss: Option<f32>,
    pub accuracy: Option<f32>,
    pub eta: Option<f32>,
    pub mu: Option<f32>,
}

impl MetricRow {
    pub fn new(epoch: usize, phase: &str, fold: &str) -> Self {
        MetricRow {
            epoch,
            phase: phase.into(),
            fold: fold.into(),
            loss: None,
            accuracy: None,
            eta: None,
            mu: None,
        }
    }

    pub fn loss(mut self, v: f32) -> Self {
        self.loss = Some(v);
        self
    }

    pub fn accuracy(mut self, v: f32) -> Self {
        self.accuracy = Some(v);
        self
    }

    pub fn rates(mut self, eta: Option<f32>, mu: Option<f32>) -> Self {
        self.eta = eta;
        self.mu = mu;
        self
    }
}

/// Append rows, writing the header only when the file is new or empty.
pub fn append_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let fresh = std::fs::metadata(path)
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file);
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Config(format!("metrics csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r =
        csv::Reader::from_path(path).map_err(|e| Error::Config(format!("metrics csv: {e}")))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Config(format!("metrics csv: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_keeps_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let a = MetricRow::new(0, "search", "train_w")
            .loss(1.5)
            .accuracy(0.4)
            .rates(Some(3e-4), Some(1e-3));
        let b = MetricRow::new(1, "search", "val").accuracy(0.5);
        append_metrics(&p, std::slice::from_ref(&a)).unwrap();
        append_metrics(&p, std::slice::from_ref(&b)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,phase,fold,loss,accuracy,eta,mu\n"));
        assert_eq!(text.matches("epoch").count(), 1);
        assert_eq!(read_metrics(&p).unwrap(), vec![a, b]);
    }
}
