//! Aligned (X, Y, A) samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SampleMatrix;

/// A target or sensitive-attribute column: integer classes or real-valued vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Classes { ids: Vec<usize>, num_classes: usize },
    Real(SampleMatrix),
}

impl Column {
    /// Class column with `num_classes` inferred as `max + 1`.
    pub fn classes(ids: Vec<usize>) -> Self {
        let num_classes = ids.iter().copied().max().map_or(0, |m| m + 1);
        Column::Classes { ids, num_classes }
    }

    pub fn len(&self) -> usize {
        match self {
            Column::Classes { ids, .. } => ids.len(),
            Column::Real(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_ids(&self) -> Option<&[usize]> {
        match self {
            Column::Classes { ids, .. } => Some(ids),
            Column::Real(_) => None,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            Column::Classes { num_classes, .. } => Some(*num_classes),
            Column::Real(_) => None,
        }
    }

    /// Real-valued view used by the dependence estimators. Classes are one-hot
    /// encoded so that every pair of distinct classes sits at the same distance.
    pub fn to_matrix(&self) -> SampleMatrix {
        match self {
            Column::Real(m) => m.clone(),
            Column::Classes { ids, num_classes } => {
                let k = (*num_classes).max(1);
                let mut data = vec![0.0; ids.len() * k];
                for (i, &c) in ids.iter().enumerate() {
                    data[i * k + c] = 1.0;
                }
                SampleMatrix::from_raw(ids.len(), k, data)
            }
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            Column::Classes { ids, num_classes } => Column::Classes {
                ids: idx.iter().map(|&i| ids[i]).collect(),
                num_classes: *num_classes,
            },
            Column::Real(m) => Column::Real(m.select_rows(idx)),
        }
    }
}

/// Features with aligned target and sensitive columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub x: SampleMatrix,
    pub y: Column,
    pub a: Column,
    pub provenance: String,
}

impl SampleBatch {
    pub fn new(x: SampleMatrix, y: Column, a: Column, provenance: impl Into<String>) -> Result<Self> {
        if y.len() != x.rows() || a.len() != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "SampleBatch::new",
                left: vec![x.rows(), y.len()],
                right: vec![a.len()],
            });
        }
        for col in [&y, &a] {
            if let Column::Classes { ids, num_classes } = col {
                if ids.iter().any(|&c| c >= *num_classes) {
                    return Err(Error::invalid("class id outside declared domain"));
                }
            }
        }
        Ok(Self {
            x,
            y,
            a,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: self.y.select(idx),
            a: self.a.select(idx),
            provenance: self.provenance.clone(),
        }
    }
}
