//! The server side: regimes, consolidation, splitting and the round loop.

mod regimes;
mod round;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use regimes::{run, run_all_in_one, run_hierarchical, run_mufl, run_one_by_one, run_standalone, RunResult};
pub use round::{run_round, RoundContext, RoundOutcome, RoundRecord};

use crate::affinity::AffinityProbe;
use crate::error::{config_err, Error, Result};
use crate::federation::{ClientPool, SyntheticTaskSpec};
use crate::nn::{ActivityId, HeadSpec, HyperParams, LossKind, ModelShape, MultiTaskModel};
use crate::partition::Partition;
use crate::rng::SeedStream;

/// One federated training job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingActivity {
    pub id: ActivityId,
    pub loss: LossKind,
    pub out_dim: usize,
    pub tag: char,
}

/// The activities described by a synthetic task.
pub fn activities_from(spec: &SyntheticTaskSpec) -> Vec<TrainingActivity> {
    (0..spec.n_activities)
        .map(|a| TrainingActivity {
            id: ActivityId(a as u16),
            loss: spec.loss_kind(a),
            out_dim: spec.output_dim,
            tag: spec.tag(a),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OneByOne,
    AllInOne,
    Standalone,
    Mufl,
    Hierarchical,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::OneByOne => "one_by_one",
            Mode::AllInOne => "all_in_one",
            Mode::Standalone => "standalone",
            Mode::Mufl => "mufl",
            Mode::Hierarchical => "hierarchical",
        }
    }
}

/// How the step size is anchored after a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Each phase decays over its own round count.
    Restart,
    /// One decay over all rounds of the run.
    ContinueGlobal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Enumerate,
    BranchAndBound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeConfig {
    pub mode: Mode,
    /// Total rounds `R`.
    pub rounds: usize,
    /// Consolidated rounds before the first split.
    pub r0: usize,
    /// Hierarchical rounds with two groups.
    pub r1: usize,
    /// Hierarchical rounds after refinement.
    pub r2: usize,
    /// Split count `m`.
    pub splits: usize,
    /// Clients per round `K`.
    pub clients_per_round: usize,
    /// Local epochs `E`.
    pub local_epochs: usize,
    pub probe: AffinityProbe,
    /// `None` probes in the splitting regimes only.
    pub probe_enabled: Option<bool>,
    pub lr_schedule: LrSchedule,
    pub solver: Solver,
    /// Skip affinity measurement and split into this canonical text partition.
    pub partition: Option<String>,
    /// Evaluate on the held-out set after every round.
    pub validate_rounds: bool,
    pub seed: u64,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Mufl,
            rounds: 100,
            r0: 30,
            r1: 40,
            r2: 30,
            splits: 2,
            clients_per_round: 4,
            local_epochs: 1,
            probe: AffinityProbe::default(),
            probe_enabled: None,
            lr_schedule: LrSchedule::Restart,
            solver: Solver::BranchAndBound,
            partition: None,
            validate_rounds: true,
            seed: 0,
        }
    }
}

impl RegimeConfig {
    /// The probe in effect, if any.
    pub fn active_probe(&self) -> Option<&AffinityProbe> {
        let on = self
            .probe_enabled
            .unwrap_or(matches!(self.mode, Mode::Mufl | Mode::Hierarchical));
        on.then_some(&self.probe)
    }

    pub fn validate(&self, n_activities: usize, n_clients: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(config_err("regime.rounds", "must be at least 1"));
        }
        if self.clients_per_round == 0 {
            return Err(config_err("regime.clients_per_round", "must be at least 1"));
        }
        if self.clients_per_round > n_clients && self.mode != Mode::Standalone {
            return Err(config_err(
                "regime.clients_per_round",
                format!("{} exceeds the pool of {n_clients} clients", self.clients_per_round),
            ));
        }
        if self.probe.frequency == 0 {
            return Err(config_err("probe.frequency", "must be at least 1"));
        }
        match self.mode {
            Mode::Mufl => {
                if self.r0 >= self.rounds {
                    return Err(config_err("regime.r0", format!("must be below rounds ({})", self.rounds)));
                }
                if n_activities > 1 && (self.splits == 0 || self.splits > n_activities) {
                    return Err(config_err(
                        "regime.splits",
                        format!("must lie in 1..={n_activities}"),
                    ));
                }
                if self.partition.is_none() && n_activities > 1 {
                    self.check_probe_rounds()?;
                }
            }
            Mode::Hierarchical => {
                if self.r0 + self.r1 + self.r2 != self.rounds {
                    return Err(config_err(
                        "regime.r1",
                        format!(
                            "r0 + r1 + r2 = {} must equal rounds ({})",
                            self.r0 + self.r1 + self.r2,
                            self.rounds
                        ),
                    ));
                }
                if self.partition.is_some() {
                    return Err(config_err("regime.partition", "not supported in hierarchical mode"));
                }
                if n_activities > 1 {
                    self.check_probe_rounds()?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn check_probe_rounds(&self) -> Result<()> {
        if self.active_probe().is_none() {
            return Err(config_err("probe.enabled", "splitting needs affinity measurement"));
        }
        if !self.probe.active_rounds.iter().any(|&r| r >= 1 && r <= self.r0) {
            return Err(config_err("probe.active_rounds", format!("no active round within 1..={}", self.r0)));
        }
        Ok(())
    }
}

/// Everything a regime trains against.
#[derive(Debug, Clone, Copy)]
pub struct Workload<'a> {
    pub pool: &'a ClientPool,
    pub activities: &'a [TrainingActivity],
    pub shape: &'a ModelShape,
    pub hyper: &'a HyperParams,
}

impl Workload<'_> {
    pub fn tag(&self, id: ActivityId) -> char {
        self.activities
            .iter()
            .find(|a| a.id == id)
            .map(|a| a.tag)
            .unwrap_or('?')
    }

    pub fn lookup(&self, tag: char) -> Option<ActivityId> {
        self.activities.iter().find(|a| a.tag == tag).map(|a| a.id)
    }

    /// Concatenated tags of a group, e.g. `sdn`.
    pub fn group_tag(&self, group: &[ActivityId]) -> String {
        group.iter().map(|id| self.tag(*id)).collect()
    }

    pub fn ids(&self) -> Vec<ActivityId> {
        self.activities.iter().map(|a| a.id).collect()
    }
}

pub(crate) fn group_stream(root: SeedStream, label: &str, group: &[ActivityId]) -> SeedStream {
    root.label(label).indices(group.iter().map(|id| u64::from(id.0)))
}

/// Fresh shared-trunk model with one head per activity. The trunk draw is
/// keyed by the activity set and each head draw by its activity id.
pub fn consolidate(activities: &[TrainingActivity], shape: &ModelShape, seed: u64) -> Result<MultiTaskModel> {
    if activities.is_empty() {
        return Err(Error::Incompatible("no activities to consolidate".into()));
    }
    let mut seen = BTreeSet::new();
    for a in activities {
        if !seen.insert(a.id) {
            return Err(Error::DuplicateActivity(a.id));
        }
    }
    let ids: Vec<ActivityId> = seen.into_iter().collect();
    let root = SeedStream::new(seed).label("init");
    let mut trunk_rng = group_stream(root, "trunk", &ids).rng();
    let heads: Vec<HeadSpec> = activities
        .iter()
        .map(|a| HeadSpec {
            id: a.id,
            out_dim: a.out_dim,
            loss: a.loss,
        })
        .collect();
    MultiTaskModel::init(shape, &heads, &mut trunk_rng, |id| root.label("head").index(u64::from(id.0)).rng())
}

/// One model per group: a deep copy of the trunk and of the group's heads,
/// momentum cleared.
pub fn split_models(model: &MultiTaskModel, partition: &Partition) -> Result<Vec<(Vec<ActivityId>, MultiTaskModel)>> {
    let covered: BTreeSet<ActivityId> = partition.groups().iter().flatten().copied().collect();
    if covered != model.activity_ids() {
        return Err(Error::Incompatible("partition and model cover different activities".into()));
    }
    partition
        .groups()
        .iter()
        .map(|g| {
            let set: BTreeSet<ActivityId> = g.iter().copied().collect();
            Ok((g.clone(), model.restrict(&set)?))
        })
        .collect()
}

/// Maps every activity to the index of the one model serving it.
pub fn reconstruct(models: &[(Vec<ActivityId>, MultiTaskModel)], expected: &[ActivityId]) -> Result<BTreeMap<ActivityId, usize>> {
    let mut owner = BTreeMap::new();
    for (k, (_, m)) in models.iter().enumerate() {
        for id in m.activity_ids() {
            if owner.insert(id, k).is_some() {
                return Err(Error::MultiplyServed(id));
            }
        }
    }
    if let Some(id) = expected.iter().find(|id| !owner.contains_key(id)) {
        return Err(Error::Unserved(*id));
    }
    if let Some(id) = owner.keys().find(|id| !expected.contains(id)) {
        return Err(Error::UnknownActivity(*id));
    }
    Ok(owner)
}
