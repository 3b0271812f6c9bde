//! Lookahead affinities between activities and their aggregation into the
//! matrix used for grouping.
//!
//! `S(i→j) = 1 − L_j(θ'_{s,i}) / L_j(θ_s)`, where `θ'_{s,i}` is the trunk after
//! one plain gradient step on activity `i`'s batch loss. Raw self-lookahead
//! values are never computed; the diagonal is filled from the off-diagonals.

use std::collections::BTreeSet;
use std::io::Write;

use crate::error::{Error, Result};
use crate::nn::{ActivityId, Batch, Cache, MultiTaskModel, Work};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalizePolicy {
    LastActiveRound,
    MeanOverActive,
}

/// When and how often affinities are measured.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffinityProbe {
    /// Batches between measurements.
    pub frequency: usize,
    /// 1-based rounds in which clients measure.
    pub active_rounds: BTreeSet<usize>,
    pub finalize: FinalizePolicy,
}

impl Default for AffinityProbe {
    fn default() -> Self {
        Self {
            frequency: 5,
            active_rounds: (1..=10).collect(),
            finalize: FinalizePolicy::LastActiveRound,
        }
    }
}

impl AffinityProbe {
    pub fn is_active(&self, round: usize) -> bool {
        self.active_rounds.contains(&round)
    }

    /// Measurement time-steps in one epoch of `batches` batches.
    pub fn steps_per_epoch(&self, batches: usize) -> usize {
        batches / self.frequency
    }

    /// Whether the 0-based batch `index` of an epoch is a measurement step.
    pub fn measures_at(&self, index: usize) -> bool {
        (index + 1).is_multiple_of(self.frequency)
    }
}

/// Forward and backward evaluations spent on measurement.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCount {
    pub forwards: u64,
    pub backwards: u64,
}

/// Per-client running sums of `S(i→j)` over measurement steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityAccumulator {
    ids: Vec<ActivityId>,
    sums: Vec<f64>,
    counts: Vec<u64>,
    steps: u64,
    evaluations: EvalCount,
}

impl AffinityAccumulator {
    pub fn new(ids: Vec<ActivityId>) -> Self {
        let n = ids.len();
        Self {
            ids,
            sums: vec![0.0; n * n],
            counts: vec![0; n * n],
            steps: 0,
            evaluations: EvalCount::default(),
        }
    }

    pub fn ids(&self) -> &[ActivityId] {
        &self.ids
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn evaluations(&self) -> EvalCount {
        self.evaluations
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.n() + j]
    }

    /// Steps at which the pair was skipped because `L_j(θ_s)` was zero.
    pub fn skipped(&self, i: usize, j: usize) -> u64 {
        if i == j {
            0
        } else {
            self.steps - self.count(i, j)
        }
    }

    pub fn mean(&self, i: usize, j: usize) -> Option<f64> {
        let k = i * self.n() + j;
        (i != j && self.counts[k] > 0).then(|| self.sums[k] / self.counts[k] as f64)
    }

    pub fn record(&mut self, i: usize, j: usize, value: f64) {
        let k = i * self.n() + j;
        self.sums[k] += value;
        self.counts[k] += 1;
    }

    pub fn finish_step(&mut self) {
        self.steps += 1;
    }
}

fn position(ids: &[ActivityId], id: ActivityId) -> Result<usize> {
    ids.iter().position(|x| *x == id).ok_or(Error::UnknownActivity(id))
}

fn ratio_affinity(after: f64, before: f64) -> Option<f64> {
    (before != 0.0).then(|| 1.0 - after / before)
}

/// One `S(i→j)` sample on `batch`. `None` when `L_j(θ_s) = 0`.
pub fn step_affinity(model: &MultiTaskModel, batch: &Batch, i: ActivityId, j: ActivityId, lookahead_lr: f64) -> Result<Option<f64>> {
    let (before, _) = model.forward_loss(j, batch)?;
    let trunk = model.lookahead_shared(i, batch, lookahead_lr)?;
    let after = model.losses_with_trunk(&trunk, &[j], batch)?[&j];
    Ok(ratio_affinity(after, before))
}

/// Adds one measurement step over every ordered pair `i ≠ j`.
pub fn accumulate(acc: &mut AffinityAccumulator, model: &MultiTaskModel, batch: &Batch, lookahead_lr: f64) -> Result<Work> {
    let cache = model.forward_many(acc.ids(), batch)?;
    let mut work = model.forward_work(batch.size(), acc.ids().iter().copied());
    work += accumulate_cached(acc, model, &cache, batch, lookahead_lr)?;
    Ok(work)
}

/// As [`accumulate`], reusing a forward pass of all activities at the current
/// parameters. One lookahead trunk per source activity serves every target.
pub fn accumulate_cached(
    acc: &mut AffinityAccumulator,
    model: &MultiTaskModel,
    cache: &Cache,
    batch: &Batch,
    lookahead_lr: f64,
) -> Result<Work> {
    let ids = acc.ids().to_vec();
    let before: Vec<f64> = ids
        .iter()
        .map(|id| cache.loss(*id).ok_or(Error::UnknownActivity(*id)))
        .collect::<Result<_>>()?;
    let b = batch.size();
    let mut work = Work::default();
    for (si, &source) in ids.iter().enumerate() {
        let trunk = model.lookahead_from_cache(source, cache, lookahead_lr)?;
        acc.evaluations.backwards += 1;
        work.grad += (b * model.trunk_param_count()) as u64;
        let targets: Vec<ActivityId> = ids.iter().copied().filter(|t| *t != source).collect();
        let after = model.losses_with_trunk(&trunk, &targets, batch)?;
        acc.evaluations.forwards += targets.len() as u64;
        work += model.forward_work(b, targets.iter().copied());
        for (ti, &target) in ids.iter().enumerate() {
            if ti == si {
                continue;
            }
            if let Some(s) = ratio_affinity(after[&target], before[ti]) {
                acc.record(si, ti, s);
            }
        }
    }
    acc.finish_step();
    Ok(work)
}

/// Off-diagonal affinities of one round; `None` marks pairs no client measured.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundAffinity {
    pub ids: Vec<ActivityId>,
    pub values: Vec<Option<f64>>,
}

impl RoundAffinity {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.n() + j]
    }
}

/// Unweighted mean over clients of each client's per-pair mean.
pub fn aggregate_round(accs: &[AffinityAccumulator]) -> Result<RoundAffinity> {
    let first = accs.first().ok_or(Error::NoAffinityRounds)?;
    let ids = first.ids().to_vec();
    if accs.iter().any(|a| a.ids() != ids.as_slice()) {
        return Err(Error::Incompatible("accumulators cover different activities".into()));
    }
    let n = ids.len();
    let mut values = vec![None; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let means: Vec<f64> = accs.iter().filter_map(|a| a.mean(i, j)).collect();
            if !means.is_empty() {
                values[i * n + j] = Some(means.iter().sum::<f64>() / means.len() as f64);
            }
        }
    }
    Ok(RoundAffinity { ids, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffinitySource {
    Round(usize),
    Mean,
}

/// Square matrix of averaged affinities, `get(i, j)` = `Ŝ(i→j)`, with the
/// diagonal derived from the off-diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    ids: Vec<ActivityId>,
    values: Vec<f64>,
    pub source: AffinitySource,
}

/// `Σ_{j≠i} (Ŝ(i→j) + Ŝ(j→i)) / (2n − 2)` read from a row-major `n × n` buffer.
fn diagonal_value(values: &[f64], n: usize, i: usize) -> f64 {
    let sum: f64 = (0..n).filter(|&j| j != i).map(|j| values[i * n + j] + values[j * n + i]).sum();
    sum / (2 * n - 2) as f64
}

impl AffinityMatrix {
    /// Builds a matrix from off-diagonal values, ignoring whatever the
    /// diagonal of `values` holds.
    pub fn from_off_diagonal(ids: Vec<ActivityId>, mut values: Vec<f64>, source: AffinitySource) -> Result<Self> {
        let n = ids.len();
        if values.len() != n * n {
            return Err(Error::ShapeMismatch(format!("{} values for {n} activities", values.len())));
        }
        if n < 2 {
            return Err(Error::SingleActivity);
        }
        if let Some(bad) = values.iter().enumerate().find(|(k, v)| k / n != k % n && !v.is_finite()) {
            return Err(Error::ShapeMismatch(format!("non-finite affinity at {}", bad.0)));
        }
        for i in 0..n {
            values[i * n + i] = diagonal_value(&values, n, i);
        }
        Ok(Self { ids, values, source })
    }

    pub fn ids(&self) -> &[ActivityId] {
        &self.ids
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    pub fn index_of(&self, id: ActivityId) -> Result<usize> {
        position(&self.ids, id)
    }

    /// Principal submatrix over `indices`, keeping stored diagonals.
    pub fn submatrix(&self, indices: &[usize]) -> AffinityMatrix {
        let k = indices.len();
        let mut values = Vec::with_capacity(k * k);
        for &i in indices {
            for &j in indices {
                values.push(self.get(i, j));
            }
        }
        AffinityMatrix {
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            values,
            source: self.source,
        }
    }

    /// Writes rows as sources and columns as targets, headed by tags.
    pub fn write_csv<W: Write>(&self, out: W, tag: impl Fn(ActivityId) -> String) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["source".to_string()];
        header.extend(self.ids.iter().map(|id| tag(*id)));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut row = vec![tag(self.ids[i])];
            row.extend((0..self.n()).map(|j| self.get(i, j).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Self-affinity of position `i` computed from the off-diagonals of `matrix`.
pub fn self_affinity(matrix: &AffinityMatrix, i: usize) -> Result<f64> {
    let n = matrix.n();
    if n < 2 {
        return Err(Error::SingleActivity);
    }
    Ok(diagonal_value(&matrix.values, n, i))
}

/// Picks or averages the per-round matrices and fills the diagonal.
/// Pairs never measured are treated as 0.
pub fn finalize(rounds: &[(usize, RoundAffinity)], policy: FinalizePolicy) -> Result<AffinityMatrix> {
    let (last_round, last) = rounds.iter().max_by_key(|(r, _)| *r).ok_or(Error::NoAffinityRounds)?;
    let ids = last.ids.clone();
    let n = ids.len();
    let (values, source): (Vec<Option<f64>>, _) = match policy {
        FinalizePolicy::LastActiveRound => (last.values.clone(), AffinitySource::Round(*last_round)),
        FinalizePolicy::MeanOverActive => {
            let mut vals = vec![None; n * n];
            for (k, v) in vals.iter_mut().enumerate() {
                let present: Vec<f64> = rounds.iter().filter_map(|(_, m)| m.values[k]).collect();
                if !present.is_empty() {
                    *v = Some(present.iter().sum::<f64>() / present.len() as f64);
                }
            }
            (vals, AffinitySource::Mean)
        }
    };
    let filled: Vec<f64> = values
        .iter()
        .enumerate()
        .map(|(k, v)| {
            if v.is_none() && k / n != k % n {
                log::warn!("affinity {}→{} never measured; using 0", ids[k / n], ids[k % n]);
            }
            v.unwrap_or(0.0)
        })
        .collect();
    AffinityMatrix::from_off_diagonal(ids, filled, source)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<ActivityId> {
        (0..n).map(|i| ActivityId(i as u16)).collect()
    }

    #[test]
    fn two_activity_diagonal() {
        let m = AffinityMatrix::from_off_diagonal(ids(2), vec![0.0, 0.2, 0.4, 0.0], AffinitySource::Mean).unwrap();
        assert!((m.get(0, 0) - 0.3).abs() < 1e-15);
        assert!((m.get(1, 1) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn constant_off_diagonals_give_constant_diagonal() {
        let n = 4;
        let vals: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 9.0 } else { 0.37 }).collect();
        let m = AffinityMatrix::from_off_diagonal(ids(n), vals, AffinitySource::Mean).unwrap();
        for i in 0..n {
            assert!((m.get(i, i) - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_off_diagonals_give_zero() {
        let m = AffinityMatrix::from_off_diagonal(ids(3), vec![0.0; 9], AffinitySource::Mean).unwrap();
        assert_eq!(self_affinity(&m, 1).unwrap(), 0.0);
    }

    #[test]
    fn single_activity_rejected() {
        assert_eq!(
            AffinityMatrix::from_off_diagonal(ids(1), vec![0.0], AffinitySource::Mean),
            Err(Error::SingleActivity)
        );
    }

    #[test]
    fn accumulated_mean_of_two_steps() {
        let mut acc = AffinityAccumulator::new(ids(2));
        acc.record(0, 1, 0.2);
        acc.finish_step();
        acc.record(0, 1, 0.4);
        acc.finish_step();
        assert!((acc.mean(0, 1).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(acc.mean(1, 0), None);
        assert_eq!(acc.skipped(1, 0), 2);
    }

    fn round_with(ids_: Vec<ActivityId>, v01: Option<f64>) -> RoundAffinity {
        let mut values = vec![None; 4];
        values[1] = v01;
        values[2] = Some(0.5);
        RoundAffinity { ids: ids_, values }
    }

    #[test]
    fn client_means_are_averaged_unweighted() {
        let mut a = AffinityAccumulator::new(ids(2));
        a.record(0, 1, 0.1);
        a.finish_step();
        let mut b = AffinityAccumulator::new(ids(2));
        for _ in 0..3 {
            b.record(0, 1, 0.3);
            b.finish_step();
        }
        let r = aggregate_round(&[a.clone(), b.clone()]).unwrap();
        assert!((r.get(0, 1).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(r.get(1, 0), None);
        assert_eq!(aggregate_round(&[b, a]).unwrap(), r);
    }

    #[test]
    fn finalize_policies() {
        let rounds = vec![(1, round_with(ids(2), Some(0.0))), (2, round_with(ids(2), Some(0.2)))];
        let last = finalize(&rounds, FinalizePolicy::LastActiveRound).unwrap();
        assert_eq!(last.get(0, 1), 0.2);
        assert_eq!(last.source, AffinitySource::Round(2));
        let mean = finalize(&rounds, FinalizePolicy::MeanOverActive).unwrap();
        assert!((mean.get(0, 1) - 0.1).abs() < 1e-15);
        let single = vec![(4, round_with(ids(2), Some(0.7)))];
        assert_eq!(
            finalize(&single, FinalizePolicy::LastActiveRound).unwrap().get(0, 1),
            finalize(&single, FinalizePolicy::MeanOverActive).unwrap().get(0, 1)
        );
        assert_eq!(finalize(&[], FinalizePolicy::MeanOverActive), Err(Error::NoAffinityRounds));
    }

    #[test]
    fn missing_pair_becomes_zero() {
        let rounds = vec![(1, round_with(ids(2), None))];
        let m = finalize(&rounds, FinalizePolicy::LastActiveRound).unwrap();
        assert_eq!(m.get(0, 1), 0.0);
        assert!((m.get(0, 0) - 0.25).abs() < 1e-15);
    }
}
