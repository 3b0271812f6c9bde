//! Self-check suites: analytic gradients against finite differences, and the
//! branch-and-bound solver against exhaustive enumeration.

use rand::Rng;

use crate::affinity::{AffinityMatrix, AffinitySource};
use crate::error::Result;
use crate::nn::gradcheck::{check_gradients, random_case};
use crate::nn::ActivityId;
use crate::partition::{branch_and_bound_best, enumerate_best, total_score};
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSuite {
    pub cases: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSuite {
    pub instances: usize,
    pub max_score_gap: f64,
    pub mismatches: usize,
}

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const SCORE_TOLERANCE: f64 = 1e-12;

pub fn gradient_suite(cases: usize, seed: u64) -> Result<GradientSuite> {
    let mut max_rel_error: f64 = 0.0;
    for k in 0..cases {
        let (model, batch) = random_case(SeedStream::new(seed).index(k as u64).seed())?;
        max_rel_error = max_rel_error.max(check_gradients(&model, &batch, 1e-5)?.max_rel_error);
    }
    Ok(GradientSuite { cases, max_rel_error })
}

/// Matrix with off-diagonals drawn uniformly from `[-1, 1]`.
pub fn random_matrix(n: usize, stream: SeedStream) -> Result<AffinityMatrix> {
    let mut rng = stream.rng();
    let values = (0..n * n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let ids = (0..n).map(|i| ActivityId(i as u16)).collect();
    AffinityMatrix::from_off_diagonal(ids, values, AffinitySource::Mean)
}

/// Compares both solvers on `per_cell` matrices for every `n` and `m`.
pub fn partition_suite(ns: &[usize], ms: &[usize], per_cell: usize, seed: u64) -> Result<PartitionSuite> {
    let mut suite = PartitionSuite {
        instances: 0,
        max_score_gap: 0.0,
        mismatches: 0,
    };
    let root = SeedStream::new(seed).label("partition");
    for &n in ns {
        for &m in ms.iter().filter(|&&m| m <= n) {
            for k in 0..per_cell {
                let matrix = random_matrix(n, root.index(n as u64).index(m as u64).index(k as u64))?;
                let exact = enumerate_best(&matrix, m)?;
                let bnb = branch_and_bound_best(&matrix, m)?;
                let gap = (exact.total_score() - bnb.total_score()).abs();
                let own = (total_score(bnb.groups(), &matrix)? - bnb.total_score()).abs();
                suite.instances += 1;
                suite.max_score_gap = suite.max_score_gap.max(gap);
                if gap > SCORE_TOLERANCE || own > SCORE_TOLERANCE || bnb.m() != m {
                    suite.mismatches += 1;
                }
            }
        }
    }
    Ok(suite)
}
