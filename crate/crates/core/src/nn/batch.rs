use std::collections::BTreeMap;

use ndarray::Array2;

use super::ActivityId;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// One row per example.
    Regression(Array2<f64>),
    /// One class index per example.
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(m) => m.nrows(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn select_rows(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Regression(m) => Targets::Regression(m.select(ndarray::Axis(0), rows)),
            Targets::Classes(c) => Targets::Classes(rows.iter().map(|&r| c[r]).collect()),
        }
    }
}

/// A minibatch of inputs with targets for every activity of its dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub targets: BTreeMap<ActivityId, Targets>,
}

impl Batch {
    pub fn new(features: Array2<f64>, targets: BTreeMap<ActivityId, Targets>) -> Self {
        Self { features, targets }
    }

    pub fn size(&self) -> usize {
        self.features.nrows()
    }

    pub(crate) fn select_rows(&self, rows: &[usize]) -> Batch {
        Batch {
            features: self.features.select(ndarray::Axis(0), rows),
            targets: self
                .targets
                .iter()
                .map(|(id, t)| (*id, t.select_rows(rows)))
                .collect(),
        }
    }
}
