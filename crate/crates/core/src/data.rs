//! Observation matrices with per-column type tags.

use serde::{Deserialize, Serialize};
use std::hash::{Hash, Hasher};

use crate::error::{BartError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorType {
    Continuous,
    Binary,
}

/// Whether the response column is continuous or 0/1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseKind {
    Continuous,
    Binary,
}

/// A dataset: predictor columns, response vector, type tags, and an optional
/// ground-truth set of relevant predictors (used by the benchmark harness).
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Column-major predictors: `columns[j][i]` is observation i of predictor j.
    pub columns: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub types: Vec<PredictorType>,
    pub names: Vec<String>,
    /// 0-based indices of the truly relevant predictors, when known.
    pub relevant: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(columns: Vec<Vec<f64>>, y: Vec<f64>, types: Vec<PredictorType>) -> Result<Self> {
        let n = y.len();
        if columns.is_empty() {
            return Err(BartError::InvalidData("no predictor columns".into()));
        }
        if columns.iter().any(|c| c.len() != n) {
            return Err(BartError::InvalidData(
                "predictor columns and response differ in length".into(),
            ));
        }
        if types.len() != columns.len() {
            return Err(BartError::DimensionMismatch {
                expected: columns.len(),
                got: types.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite())
            || columns.iter().any(|c| c.iter().any(|v| !v.is_finite()))
        {
            return Err(BartError::InvalidData("non-finite values".into()));
        }
        let names = (0..columns.len()).map(|j| format!("x{}", j + 1)).collect();
        Ok(Self {
            columns,
            y,
            types,
            names,
            relevant: None,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.columns.len() {
            return Err(BartError::DimensionMismatch {
                expected: self.columns.len(),
                got: names.len(),
            });
        }
        self.names = names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n()).map(|i| self.row(i)).collect()
    }

    pub fn response_kind(&self) -> ResponseKind {
        if self.y.iter().all(|&v| v == 0.0 || v == 1.0) {
            ResponseKind::Binary
        } else {
            ResponseKind::Continuous
        }
    }

    /// Same predictors with a replacement response (used for permutation nulls).
    pub fn with_response(&self, y: Vec<f64>) -> Self {
        let mut d = self.clone();
        d.y = y;
        d
    }

    /// Restrict to a subset of predictor columns (indices into this dataset).
    pub fn select_columns(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(BartError::InvalidData("empty column subset".into()));
        }
        let mut columns = Vec::with_capacity(keep.len());
        let mut types = Vec::with_capacity(keep.len());
        let mut names = Vec::with_capacity(keep.len());
        for &j in keep {
            if j >= self.p() {
                return Err(BartError::DimensionMismatch {
                    expected: self.p(),
                    got: j,
                });
            }
            columns.push(self.columns[j].clone());
            types.push(self.types[j]);
            names.push(self.names[j].clone());
        }
        Ok(Self {
            columns,
            y: self.y.clone(),
            types,
            names,
            relevant: None,
        })
    }

    /// Restrict to a subset of observations.
    pub fn select_rows(&self, keep: &[usize]) -> Self {
        Self {
            columns: self
                .columns
                .iter()
                .map(|c| keep.iter().map(|&i| c[i]).collect())
                .collect(),
            y: keep.iter().map(|&i| self.y[i]).collect(),
            types: self.types.clone(),
            names: self.names.clone(),
            relevant: self.relevant.clone(),
        }
    }

    /// Order-insensitive content digest; chains record it so reports can be
    /// traced back to the data they were computed from.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.n().hash(&mut h);
        self.p().hash(&mut h);
        for v in &self.y {
            v.to_bits().hash(&mut h);
        }
        for c in &self.columns {
            for v in c {
                v.to_bits().hash(&mut h);
            }
        }
        for t in &self.types {
            (*t == PredictorType::Binary).hash(&mut h);
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        Dataset::new(
            vec![vec![0.0, 1.0, 0.0], vec![0.1, 0.2, 0.3]],
            vec![1.0, 2.0, 3.0],
            vec![PredictorType::Binary, PredictorType::Continuous],
        )
        .unwrap()
    }

    #[test]
    fn rejects_ragged_columns() {
        let err = Dataset::new(
            vec![vec![0.0, 1.0], vec![0.1]],
            vec![1.0, 2.0],
            vec![PredictorType::Binary, PredictorType::Continuous],
        );
        assert!(err.is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let err = Dataset::new(
            vec![vec![0.0, f64::NAN]],
            vec![1.0, 2.0],
            vec![PredictorType::Continuous],
        );
        assert!(err.is_err());
    }

    #[test]
    fn response_kind_detection() {
        assert_eq!(small().response_kind(), ResponseKind::Continuous);
        let d = small().with_response(vec![0.0, 1.0, 1.0]);
        assert_eq!(d.response_kind(), ResponseKind::Binary);
    }

    #[test]
    fn column_subset_keeps_rows() {
        let d = small().select_columns(&[1]).unwrap();
        assert_eq!(d.p(), 1);
        assert_eq!(d.columns[0], vec![0.1, 0.2, 0.3]);
        assert_eq!(d.names, vec!["x2".to_string()]);
    }

    #[test]
    fn fingerprint_sensitive_to_content() {
        let a = small();
        let mut b = small();
        b.y[0] += 1.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), small().fingerprint());
    }
}
