use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::zero_nonfinite;

/// Sidecar metadata of a score file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreMetadata {
    pub method: String,
    pub hyperparams: BTreeMap<String, serde_json::Value>,
    pub seeds: Vec<u64>,
    /// Non-finite intermediate values that were replaced by zero.
    pub nonfinite_count: usize,
    pub n_train: usize,
    pub n_test: usize,
}

/// `scores[j, t]`: attribution of training point `j` to test point `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n_train: usize,
    n_test: usize,
    /// Row-major `n_train × n_test`.
    scores: Vec<f64>,
    pub meta: ScoreMetadata,
}

impl ScoreMatrix {
    /// Non-finite scores are zeroed and added to the metadata count.
    pub fn new(n_train: usize, n_test: usize, mut scores: Vec<f64>, mut meta: ScoreMetadata) -> Result<Self> {
        if scores.len() != n_train * n_test {
            return Err(Error::Shape(format!("{} scores for a {n_train} × {n_test} matrix", scores.len())));
        }
        meta.nonfinite_count += zero_nonfinite(&mut scores);
        meta.n_train = n_train;
        meta.n_test = n_test;
        Ok(ScoreMatrix { n_train, n_test, scores, meta })
    }

    /// Builds from per-test columns.
    pub fn from_columns(n_train: usize, columns: Vec<Vec<f64>>, meta: ScoreMetadata) -> Result<Self> {
        let n_test = columns.len();
        let mut scores = vec![0.0; n_train * n_test];
        for (t, col) in columns.iter().enumerate() {
            if col.len() != n_train {
                return Err(Error::Shape(format!("column {t} has {} entries, expected {n_train}", col.len())));
            }
            for (j, s) in col.iter().enumerate() {
                scores[j * n_test + t] = *s;
            }
        }
        Self::new(n_train, n_test, scores, meta)
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn n_test(&self) -> usize {
        self.n_test
    }

    pub fn get(&self, train: usize, test: usize) -> f64 {
        self.scores[train * self.n_test + test]
    }

    pub fn values(&self) -> &[f64] {
        &self.scores
    }

    pub fn column(&self, test: usize) -> Vec<f64> {
        (0..self.n_train).map(|j| self.get(j, test)).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_train.min(self.n_test)).map(|j| self.get(j, j)).collect()
    }

    /// Sidecar path for a score CSV: `x.csv` → `x.json`.
    pub fn sidecar_path(csv: &Path) -> PathBuf {
        csv.with_extension("json")
    }

    /// CSV `train_idx,test_idx,score` with 17 significant digits, plus the
    /// JSON sidecar next to it.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path).map_err(|e| csv_err(csv_path, e))?;
        w.write_record(["train_idx", "test_idx", "score"]).map_err(|e| csv_err(csv_path, e))?;
        for j in 0..self.n_train {
            for t in 0..self.n_test {
                w.write_record([j.to_string(), t.to_string(), format!("{:.16e}", self.get(j, t))])
                    .map_err(|e| csv_err(csv_path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(csv_path, e))?;
        let side = Self::sidecar_path(csv_path);
        let json = serde_json::to_vec_pretty(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let side = Self::sidecar_path(csv_path);
        let raw = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let meta: ScoreMetadata =
            serde_json::from_slice(&raw).map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
        let (n_train, n_test) = (meta.n_train, meta.n_test);
        let mut r = csv::Reader::from_path(csv_path).map_err(|e| csv_err(csv_path, e))?;
        let header = r.headers().map_err(|e| csv_err(csv_path, e))?;
        if header != vec!["train_idx", "test_idx", "score"] {
            return Err(Error::Format(format!("{}: unexpected header {header:?}", csv_path.display())));
        }
        let mut scores = vec![f64::NAN; n_train * n_test];
        let mut seen = 0;
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(csv_path, e))?;
            let bad = || Error::Format(format!("{}: malformed row {rec:?}", csv_path.display()));
            let j: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let t: usize = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let s: f64 = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            if j >= n_train || t >= n_test {
                return Err(bad());
            }
            scores[j * n_test + t] = s;
            seen += 1;
        }
        if seen != n_train * n_test || scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Format(format!(
                "{}: expected {} scores, found {seen}",
                csv_path.display(),
                n_train * n_test
            )));
        }
        Ok(ScoreMatrix { n_train, n_test, scores, meta })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}
