//! Nonoverlapping activity groupings: scoring, exact enumeration, branch and
//! bound, and hierarchical refinement.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use crate::affinity::AffinityMatrix;
use crate::error::{Error, Result};
use crate::nn::ActivityId;

/// Disjoint, covering activity groups in canonical order: members sorted,
/// groups sorted by smallest member.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    groups: Vec<Vec<ActivityId>>,
    total_score: f64,
}

impl Partition {
    /// Validates `groups` against the activities of `matrix` and scores them.
    pub fn new(groups: Vec<Vec<ActivityId>>, matrix: &AffinityMatrix) -> Result<Self> {
        let groups = canonical(groups);
        validate(&groups, matrix.ids())?;
        let total_score = total_score(&groups, matrix)?;
        Ok(Self { groups, total_score })
    }

    /// A partition without a score, for callers that have no affinity matrix.
    pub fn unscored(groups: Vec<Vec<ActivityId>>) -> Result<Self> {
        let groups = canonical(groups);
        let all: Vec<ActivityId> = groups.iter().flatten().copied().collect();
        validate(&groups, &all)?;
        Ok(Self {
            groups,
            total_score: f64::NAN,
        })
    }

    pub fn groups(&self) -> &[Vec<ActivityId>] {
        &self.groups
    }

    pub fn m(&self) -> usize {
        self.groups.len()
    }

    pub fn total_score(&self) -> f64 {
        self.total_score
    }

    pub fn group_of(&self, id: ActivityId) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&id))
    }

    /// Comma-separated groups of concatenated tags, e.g. `sdn,kt`.
    pub fn to_text(&self, tag: impl Fn(ActivityId) -> char) -> String {
        self.groups
            .iter()
            .map(|g| g.iter().map(|id| tag(*id)).collect::<String>())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Inverse of [`Partition::to_text`].
    pub fn parse(text: &str, lookup: impl Fn(char) -> Option<ActivityId>) -> Result<Self> {
        let groups = text
            .trim()
            .split(',')
            .map(|g| {
                g.chars()
                    .map(|c| lookup(c).ok_or_else(|| Error::InvalidPartition(format!("unknown tag `{c}`"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::unscored(groups)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = self
            .groups
            .iter()
            .map(|g| g.iter().map(|id| id.0.to_string()).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join(" | ");
        write!(f, "{{{text}}}")
    }
}

fn canonical<T: Ord + Copy>(mut groups: Vec<Vec<T>>) -> Vec<Vec<T>> {
    for g in groups.iter_mut() {
        g.sort_unstable();
    }
    groups.sort_by(|a, b| a.first().cmp(&b.first()));
    groups
}

fn validate(groups: &[Vec<ActivityId>], universe: &[ActivityId]) -> Result<()> {
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(Error::InvalidPartition("groups must be nonempty".into()));
    }
    let mut seen = BTreeSet::new();
    for id in groups.iter().flatten() {
        if !seen.insert(*id) {
            return Err(Error::InvalidPartition(format!("activity {id} appears twice")));
        }
    }
    let expected: BTreeSet<ActivityId> = universe.iter().copied().collect();
    if seen != expected {
        return Err(Error::InvalidPartition("groups do not cover exactly the activity set".into()));
    }
    Ok(())
}

/// Score onto member `i`: the diagonal for a singleton, otherwise the mean
/// affinity from the other members onto `i`.
pub fn activity_score(group: &[ActivityId], i: ActivityId, matrix: &AffinityMatrix) -> Result<f64> {
    if !group.contains(&i) {
        return Err(Error::NotInGroup(i));
    }
    let ti = matrix.index_of(i)?;
    let idx = group.iter().map(|id| matrix.index_of(*id)).collect::<Result<Vec<_>>>()?;
    Ok(index_score(&idx, ti, matrix))
}

fn index_score(group: &[usize], i: usize, matrix: &AffinityMatrix) -> f64 {
    if group.len() == 1 {
        return matrix.get(i, i);
    }
    let sum: f64 = group.iter().filter(|&&j| j != i).map(|&j| matrix.get(j, i)).sum();
    sum / (group.len() - 1) as f64
}

/// Sum of every activity's score within its group.
pub fn total_score(groups: &[Vec<ActivityId>], matrix: &AffinityMatrix) -> Result<f64> {
    let idx = groups
        .iter()
        .map(|g| g.iter().map(|id| matrix.index_of(*id)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(index_total(&idx, matrix))
}

fn index_total(groups: &[Vec<usize>], matrix: &AffinityMatrix) -> f64 {
    groups
        .iter()
        .map(|g| g.iter().map(|&i| index_score(g, i, matrix)).sum::<f64>())
        .sum()
}

fn check_m(n: usize, m: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(Error::SplitCount { m, n });
    }
    Ok(())
}

/// Calls `visit` once per partition of `0..n` into exactly `m` nonempty
/// blocks, each in canonical form.
pub fn for_each_partition(n: usize, m: usize, mut visit: impl FnMut(&[Vec<usize>])) {
    fn rec(e: usize, n: usize, m: usize, blocks: &mut Vec<Vec<usize>>, visit: &mut dyn FnMut(&[Vec<usize>])) {
        if e == n {
            if blocks.len() == m {
                visit(blocks);
            }
            return;
        }
        let remaining = n - e;
        for b in 0..blocks.len() {
            if remaining > m - blocks.len() {
                blocks[b].push(e);
                rec(e + 1, n, m, blocks, visit);
                blocks[b].pop();
            }
        }
        if blocks.len() < m {
            blocks.push(vec![e]);
            rec(e + 1, n, m, blocks, visit);
            blocks.pop();
        }
    }
    if m == 0 || m > n {
        return;
    }
    rec(0, n, m, &mut Vec::with_capacity(m), &mut visit);
}

/// Number of partitions of an `n`-set into exactly `m` blocks, by enumeration.
pub fn count_partitions(n: usize, m: usize) -> usize {
    let mut count = 0;
    for_each_partition(n, m, |_| count += 1);
    count
}

fn better(score: f64, groups: &[Vec<usize>], best: &Option<(f64, Vec<Vec<usize>>)>) -> bool {
    match best {
        None => true,
        Some((s, g)) => match score.partial_cmp(s) {
            Some(Ordering::Greater) => true,
            Some(Ordering::Equal) => groups < g.as_slice(),
            _ => false,
        },
    }
}

fn to_partition(groups: Vec<Vec<usize>>, matrix: &AffinityMatrix) -> Result<Partition> {
    let ids = groups
        .into_iter()
        .map(|g| g.into_iter().map(|i| matrix.ids()[i]).collect())
        .collect();
    Partition::new(ids, matrix)
}

/// Exact maximizer over all partitions into exactly `m` groups; ties go to
/// the lexicographically smallest canonical form.
pub fn enumerate_best(matrix: &AffinityMatrix, m: usize) -> Result<Partition> {
    let n = matrix.n();
    check_m(n, m)?;
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    for_each_partition(n, m, |groups| {
        let score = index_total(groups, matrix);
        if better(score, groups, &best) {
            best = Some((score, groups.to_vec()));
        }
    });
    to_partition(best.expect("at least one partition").1, matrix)
}

/// Search statistics of one branch-and-bound run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub nodes: u64,
    pub leaves: u64,
    pub pruned: u64,
}

struct Bounds {
    /// `incoming[i][e]`: affinities onto `i` from sources `u ≥ e`, `u ≠ i`,
    /// sorted descending, as prefix sums starting at 0.
    incoming: Vec<Vec<Vec<f64>>>,
    diag: Vec<f64>,
}

/// Largest `(fixed + top_k) / (count + k)` over `k`, with `k ≥ 1` when `count = 0`.
fn best_mean(fixed: f64, count: usize, prefix: &[f64]) -> f64 {
    let first = usize::from(count == 0);
    prefix
        .iter()
        .enumerate()
        .skip(first)
        .map(|(k, p)| (fixed + p) / (count + k) as f64)
        .fold(f64::NEG_INFINITY, f64::max)
}

impl Bounds {
    fn new(matrix: &AffinityMatrix) -> Self {
        let n = matrix.n();
        let diag: Vec<f64> = (0..n).map(|i| matrix.get(i, i)).collect();
        let incoming = (0..n)
            .map(|i| {
                (0..=n)
                    .map(|e| {
                        let mut vals: Vec<f64> = (e..n).filter(|&u| u != i).map(|u| matrix.get(u, i)).collect();
                        vals.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                        let mut prefix = Vec::with_capacity(vals.len() + 1);
                        prefix.push(0.0);
                        for v in vals {
                            prefix.push(prefix.last().expect("seeded") + v);
                        }
                        prefix
                    })
                    .collect()
            })
            .collect();
        Self { incoming, diag }
    }

    /// Upper bound on the total of any completion of `blocks` where elements
    /// `e..` are still unassigned and at most `m` blocks may exist.
    fn upper(&self, blocks: &[Vec<usize>], e: usize, m: usize, matrix: &AffinityMatrix) -> f64 {
        let n = self.diag.len();
        let mut ub = 0.0;
        for block in blocks {
            for &i in block {
                let prefix = &self.incoming[i][e];
                let fixed: f64 = block.iter().filter(|&&j| j != i).map(|&j| matrix.get(j, i)).sum();
                let mut best = best_mean(fixed, block.len() - 1, prefix);
                if block.len() == 1 {
                    best = best.max(self.diag[i]);
                }
                ub += best;
            }
        }
        let can_open = blocks.len() < m;
        for u in e..n {
            let prefix = &self.incoming[u][e];
            let mut best = f64::NEG_INFINITY;
            if can_open {
                best = self.diag[u].max(best_mean(0.0, 0, prefix));
            }
            for block in blocks {
                let fixed: f64 = block.iter().map(|&j| matrix.get(j, u)).sum();
                best = best.max(best_mean(fixed, block.len(), prefix));
            }
            ub += best;
        }
        ub
    }
}

/// Greedy assignment followed by single-element moves, as a starting incumbent.
fn greedy_incumbent(matrix: &AffinityMatrix, m: usize) -> Vec<Vec<usize>> {
    let n = matrix.n();
    let mut label: Vec<usize> = (0..n).map(|i| if i < m { i } else { 0 }).collect();
    let score_of = |label: &[usize]| {
        let mut groups = vec![Vec::new(); m];
        for (i, &g) in label.iter().enumerate() {
            groups[g].push(i);
        }
        if groups.iter().any(Vec::is_empty) {
            return f64::NEG_INFINITY;
        }
        index_total(&groups, matrix)
    };
    for i in m..n {
        let mut best = (f64::NEG_INFINITY, 0);
        for g in 0..m {
            label[i] = g;
            let partial: Vec<usize> = label[..=i].to_vec();
            let s = score_of(&partial);
            if s > best.0 {
                best = (s, g);
            }
        }
        label[i] = best.1;
    }
    let mut current = score_of(&label);
    loop {
        let mut improved = false;
        for i in 0..n {
            let orig = label[i];
            for g in 0..m {
                if g == orig {
                    continue;
                }
                label[i] = g;
                let s = score_of(&label);
                if s > current {
                    current = s;
                    improved = true;
                    break;
                }
                label[i] = orig;
            }
        }
        if !improved {
            break;
        }
    }
    let mut groups = vec![Vec::new(); m];
    for (i, &g) in label.iter().enumerate() {
        groups[g].push(i);
    }
    canonical(groups)
}

/// Exact maximizer by depth-first branch and bound over canonical label
/// sequences. Agrees with [`enumerate_best`], tie-breaking included.
pub fn branch_and_bound_best(matrix: &AffinityMatrix, m: usize) -> Result<Partition> {
    branch_and_bound_with_stats(matrix, m).map(|(p, _)| p)
}

pub fn branch_and_bound_with_stats(matrix: &AffinityMatrix, m: usize) -> Result<(Partition, SearchStats)> {
    let n = matrix.n();
    check_m(n, m)?;
    let bounds = Bounds::new(matrix);
    let seed = greedy_incumbent(matrix, m);
    let mut best = Some((index_total(&seed, matrix), seed));
    let mut stats = SearchStats::default();

    struct Search<'a> {
        matrix: &'a AffinityMatrix,
        bounds: &'a Bounds,
        n: usize,
        m: usize,
    }

    fn rec(
        s: &Search<'_>,
        e: usize,
        blocks: &mut Vec<Vec<usize>>,
        best: &mut Option<(f64, Vec<Vec<usize>>)>,
        stats: &mut SearchStats,
    ) {
        stats.nodes += 1;
        if e == s.n {
            stats.leaves += 1;
            let score = index_total(blocks, s.matrix);
            if better(score, blocks, best) {
                *best = Some((score, blocks.clone()));
            }
            return;
        }
        if let Some((b, _)) = best {
            let ub = s.bounds.upper(blocks, e, s.m, s.matrix);
            let tol = 1e-9 * (1.0 + b.abs() + ub.abs());
            if ub < *b - tol {
                stats.pruned += 1;
                return;
            }
        }
        let remaining = s.n - e;
        for b in 0..blocks.len() {
            if remaining > s.m - blocks.len() {
                blocks[b].push(e);
                rec(s, e + 1, blocks, best, stats);
                blocks[b].pop();
            }
        }
        if blocks.len() < s.m {
            blocks.push(vec![e]);
            rec(s, e + 1, blocks, best, stats);
            blocks.pop();
        }
    }

    let search = Search {
        matrix,
        bounds: &bounds,
        n,
        m,
    };
    rec(&search, 0, &mut Vec::with_capacity(m), &mut best, &mut stats);
    let groups = best.expect("incumbent").1;
    Ok((to_partition(groups, matrix)?, stats))
}

/// Splits the largest group (ties: the one holding the smallest activity)
/// into its best two-way sub-partition over the principal submatrix.
pub fn hierarchical_refine(current: &Partition, matrix: &AffinityMatrix) -> Result<Partition> {
    let target = current
        .groups()
        .iter()
        .enumerate()
        .filter(|(_, g)| g.len() >= 2)
        .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
        .map(|(i, _)| i)
        .ok_or(Error::NothingToRefine)?;
    let members = &current.groups()[target];
    let idx = members.iter().map(|id| matrix.index_of(*id)).collect::<Result<Vec<_>>>()?;
    let sub = matrix.submatrix(&idx);
    let split = branch_and_bound_best(&sub, 2)?;
    let mut groups: Vec<Vec<ActivityId>> = current
        .groups()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(_, g)| g.clone())
        .collect();
    groups.extend(split.groups().iter().cloned());
    Partition::new(groups, matrix)
}
