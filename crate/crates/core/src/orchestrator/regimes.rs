use rayon::prelude::*;

use super::round::{run_round, RoundContext, RoundRecord};
use super::{consolidate, reconstruct, split_models, LrSchedule, Mode, RegimeConfig, Solver, Workload};
use crate::affinity::{finalize, AffinityMatrix, RoundAffinity};
use crate::error::{Error, Result};
use crate::federation::{evaluate, evaluate_model, local_train, EvalReport};
use crate::ledger::{CostDelta, CostLedger};
use crate::nn::{poly_lr, ActivityId, MultiTaskModel};
use crate::partition::{branch_and_bound_best, enumerate_best, hierarchical_refine, Partition};
use crate::rng::SeedStream;

/// Everything one regime run produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub mode: Mode,
    /// Final models with the activities each one serves.
    pub groups: Vec<(Vec<ActivityId>, MultiTaskModel)>,
    pub records: Vec<RoundRecord>,
    pub ledger: CostLedger,
    /// Per-round affinities of every probed round.
    pub affinity_rounds: Vec<(usize, RoundAffinity)>,
    pub matrix: Option<AffinityMatrix>,
    /// Partitions in the order they were applied.
    pub partitions: Vec<Partition>,
    pub final_eval: EvalReport,
    /// Standalone only: each client's summed test loss.
    pub client_losses: Vec<f64>,
    /// Failed invariant checks.
    pub violations: Vec<String>,
}

impl RunResult {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Runner<'a> {
    work: Workload<'a>,
    cfg: &'a RegimeConfig,
    seed: SeedStream,
    ledger: CostLedger,
    records: Vec<RoundRecord>,
    affinity_rounds: Vec<(usize, RoundAffinity)>,
    violations: Vec<String>,
}

impl<'a> Runner<'a> {
    fn new(work: Workload<'a>, cfg: &'a RegimeConfig) -> Result<Self> {
        cfg.validate(work.activities.len(), work.pool.len())?;
        work.hyper.validate()?;
        Ok(Self {
            work,
            cfg,
            seed: SeedStream::new(cfg.seed).label("run"),
            ledger: CostLedger::new(),
            records: Vec::new(),
            affinity_rounds: Vec::new(),
            violations: Vec::new(),
        })
    }

    fn lr(&self, phase_round: usize, phase_len: usize, global: usize) -> Result<f64> {
        let eta0 = self.work.hyper.eta0;
        match self.cfg.lr_schedule {
            LrSchedule::Restart => poly_lr(phase_round, phase_len, eta0),
            LrSchedule::ContinueGlobal => poly_lr(global, self.cfg.rounds, eta0),
        }
    }

    /// Trains `model` for `len` rounds starting after global round `start`.
    fn phase(
        &mut self,
        phase: &str,
        group: &[ActivityId],
        mut model: MultiTaskModel,
        start: usize,
        len: usize,
        probing: bool,
    ) -> Result<MultiTaskModel> {
        let tag = self.work.group_tag(group);
        for k in 0..len {
            let round = start + k + 1;
            let probe = if probing {
                self.cfg.active_probe().filter(|p| p.is_active(round))
            } else {
                None
            };
            let ctx = RoundContext {
                work: self.work,
                seed: self.seed,
                phase,
                group,
                round,
                phase_round: k + 1,
                clients_per_round: self.cfg.clients_per_round,
                local_epochs: self.cfg.local_epochs,
                lr: self.lr(k, len, start + k)?,
                probe,
                validate: self.cfg.validate_rounds,
            };
            let out = run_round(&model, &ctx)?;
            if !out.model.all_finite() {
                self.violations.push(format!("non-finite parameters after round {round} of group {tag}"));
            }
            self.ledger.record(phase, &tag, out.record.cost);
            if let Some(a) = out.affinity {
                self.affinity_rounds.push((round, a));
            }
            self.records.push(out.record);
            model = out.model;
        }
        Ok(model)
    }

    fn solve(&self, matrix: &AffinityMatrix, m: usize) -> Result<Partition> {
        match self.cfg.solver {
            Solver::Enumerate => enumerate_best(matrix, m),
            Solver::BranchAndBound => branch_and_bound_best(matrix, m),
        }
    }

    fn matrix(&mut self) -> Result<AffinityMatrix> {
        let policy = self.cfg.probe.finalize;
        let rounds: Vec<(usize, RoundAffinity)> = self
            .affinity_rounds
            .iter()
            .filter(|(r, _)| *r <= self.cfg.r0)
            .cloned()
            .collect();
        let matrix = finalize(&rounds, policy)?;
        for i in 0..matrix.n() {
            let d = crate::affinity::self_affinity(&matrix, i)?;
            if (d - matrix.get(i, i)).abs() > 1e-12 {
                self.violations.push(format!("self-affinity of activity {i} disagrees with its off-diagonals"));
            }
        }
        Ok(matrix)
    }

    fn finish(
        mut self,
        groups: Vec<(Vec<ActivityId>, MultiTaskModel)>,
        matrix: Option<AffinityMatrix>,
        partitions: Vec<Partition>,
    ) -> Result<RunResult> {
        let ids = self.work.ids();
        if let Err(e) = reconstruct(&groups, &ids) {
            self.violations.push(format!("reconstruction failed: {e}"));
        }
        let mut from_records = CostDelta::default();
        for r in &self.records {
            from_records += r.cost;
        }
        if from_records != self.ledger.totals() {
            self.violations.push("ledger total differs from the sum of round costs".into());
        }
        let models: Vec<&MultiTaskModel> = groups.iter().map(|(_, m)| m).collect();
        let final_eval = evaluate(&models, &self.work.pool.test_sets)?;
        if !final_eval.total.is_finite() {
            self.violations.push("final test loss is not finite".into());
        }
        Ok(RunResult {
            mode: self.cfg.mode,
            groups,
            records: self.records,
            ledger: self.ledger,
            affinity_rounds: self.affinity_rounds,
            matrix,
            partitions,
            final_eval,
            client_losses: Vec::new(),
            violations: self.violations,
        })
    }
}

/// Runs the regime selected by `cfg.mode`.
pub fn run(work: Workload<'_>, cfg: &RegimeConfig) -> Result<RunResult> {
    match cfg.mode {
        Mode::OneByOne => run_one_by_one(work, cfg),
        Mode::AllInOne => run_all_in_one(work, cfg),
        Mode::Standalone => run_standalone(work, cfg),
        Mode::Mufl => run_mufl(work, cfg),
        Mode::Hierarchical => run_hierarchical(work, cfg),
    }
}

/// Independent single-activity runs, one after another.
pub fn run_one_by_one(work: Workload<'_>, cfg: &RegimeConfig) -> Result<RunResult> {
    let mut runner = Runner::new(work, cfg)?;
    let mut groups = Vec::new();
    for a in work.activities {
        let group = vec![a.id];
        let model = consolidate(std::slice::from_ref(a), work.shape, cfg.seed)?;
        let model = runner.phase("solo", &group, model, 0, cfg.rounds, false)?;
        groups.push((group, model));
    }
    runner.finish(groups, None, Vec::new())
}

/// All activities consolidated into one model for every round.
pub fn run_all_in_one(work: Workload<'_>, cfg: &RegimeConfig) -> Result<RunResult> {
    let mut runner = Runner::new(work, cfg)?;
    let ids = work.ids();
    let model = consolidate(work.activities, work.shape, cfg.seed)?;
    let model = runner.phase("consolidated", &ids, model, 0, cfg.rounds, true)?;
    runner.finish(vec![(ids, model)], None, Vec::new())
}

/// Consolidated training for `r0` rounds, then `m` groups chosen by affinity
/// for the remaining rounds.
pub fn run_mufl(work: Workload<'_>, cfg: &RegimeConfig) -> Result<RunResult> {
    if work.activities.len() == 1 {
        let mut result = run_all_in_one(work, cfg)?;
        result.mode = Mode::Mufl;
        return Ok(result);
    }
    let mut runner = Runner::new(work, cfg)?;
    let ids = work.ids();
    let model = consolidate(work.activities, work.shape, cfg.seed)?;
    let model = runner.phase("consolidated", &ids, model, 0, cfg.r0, true)?;
    let (matrix, partition) = match &cfg.partition {
        Some(text) => {
            let p = Partition::parse(text, |c| work.lookup(c))?;
            (None, p)
        }
        None => {
            let matrix = runner.matrix()?;
            let p = runner.solve(&matrix, cfg.splits)?;
            (Some(matrix), p)
        }
    };
    log::info!("split into {}", partition.to_text(|id| work.tag(id)));
    let mut groups = Vec::new();
    for (group, m) in split_models(&model, &partition)? {
        let trained = runner.phase("split", &group, m, cfg.r0, cfg.rounds - cfg.r0, false)?;
        groups.push((group, trained));
    }
    runner.finish(groups, matrix, vec![partition])
}

/// Consolidated for `r0` rounds, two groups for `r1`, then the largest group
/// split again for the last `r2`.
pub fn run_hierarchical(work: Workload<'_>, cfg: &RegimeConfig) -> Result<RunResult> {
    if work.activities.len() == 1 {
        let mut result = run_all_in_one(work, cfg)?;
        result.mode = Mode::Hierarchical;
        return Ok(result);
    }
    let mut runner = Runner::new(work, cfg)?;
    let ids = work.ids();
    let model = consolidate(work.activities, work.shape, cfg.seed)?;
    let model = runner.phase("consolidated", &ids, model, 0, cfg.r0, true)?;
    let matrix = runner.matrix()?;
    let two = runner.solve(&matrix, 2)?;
    let mut mid = Vec::new();
    for (group, m) in split_models(&model, &two)? {
        let trained = runner.phase("split", &group, m, cfg.r0, cfg.r1, false)?;
        mid.push((group, trained));
    }
    let (three, refined) = match hierarchical_refine(&two, &matrix) {
        Ok(p) => (p, true),
        Err(Error::NothingToRefine) => (two.clone(), false),
        Err(e) => return Err(e),
    };
    let start = cfg.r0 + cfg.r1;
    let mut groups = Vec::new();
    for group in three.groups() {
        let parent = mid
            .iter()
            .find(|(g, _)| group.iter().all(|id| g.contains(id)))
            .ok_or_else(|| Error::InvalidPartition("refinement left its parent groups".into()))?;
        let set = group.iter().copied().collect();
        let init = if parent.0 == *group { parent.1.clone() } else { parent.1.restrict(&set)? };
        let trained = runner.phase("refined", group, init, start, cfg.r2, false)?;
        groups.push((group.clone(), trained));
    }
    let partitions = if refined { vec![two, three] } else { vec![two] };
    runner.finish(groups, Some(matrix), partitions)
}

/// Every client trains a private consolidated model with no aggregation.
pub fn run_standalone(work: Workload<'_>, cfg: &RegimeConfig) -> Result<RunResult> {
    let runner = Runner::new(work, cfg)?;
    let ids = work.ids();
    let init = consolidate(work.activities, work.shape, cfg.seed)?;
    let shuffle = runner.seed.label("standalone");
    let per_client: Vec<(MultiTaskModel, Vec<CostDelta>)> = work
        .pool
        .clients
        .par_iter()
        .map(|data| {
            let mut model = init.clone();
            let mut costs = Vec::with_capacity(cfg.rounds);
            for r in 0..cfg.rounds {
                let lr = poly_lr(r, cfg.rounds, work.hyper.eta0)?;
                let seed = shuffle.index(data.client_id as u64).index(r as u64);
                let out = local_train(&model, data, cfg.local_epochs, lr, work.hyper, None, seed)?;
                costs.push(CostDelta {
                    train: out.train_work,
                    client_updates: 1,
                    ..CostDelta::default()
                });
                model = out.model;
            }
            Ok((model, costs))
        })
        .collect::<Result<_>>()?;

    let mut runner = runner;
    let tag = work.group_tag(&ids);
    for r in 0..cfg.rounds {
        let mut cost = CostDelta::default();
        for (_, costs) in &per_client {
            cost += costs[r];
        }
        runner.ledger.record("standalone", &tag, cost);
        runner.records.push(RoundRecord {
            phase: "standalone".into(),
            group: tag.clone(),
            round: r + 1,
            phase_round: r + 1,
            clients: (0..work.pool.len()).collect(),
            lr: poly_lr(r, cfg.rounds, work.hyper.eta0)?,
            train_loss: Default::default(),
            val_loss: Default::default(),
            cost,
        });
    }
    let reports = per_client
        .iter()
        .map(|(m, _)| evaluate_model(m, &work.pool.test_sets))
        .collect::<Result<Vec<_>>>()?;
    let client_losses: Vec<f64> = reports.iter().map(|r| r.total).collect();
    let n = reports.len().max(1) as f64;
    let mut mean = EvalReport {
        per_activity: ids.iter().map(|id| (*id, 0.0)).collect(),
        total: 0.0,
        work: Default::default(),
    };
    for r in &reports {
        for (id, l) in &r.per_activity {
            *mean.per_activity.get_mut(id).expect("activity") += l / n;
        }
        mean.work += r.work;
    }
    mean.total = mean.per_activity.values().sum();
    if client_losses.iter().any(|l| !l.is_finite()) {
        runner.violations.push("non-finite standalone test loss".into());
    }
    let groups = vec![(ids, init)];
    Ok(RunResult {
        mode: Mode::Standalone,
        groups,
        records: runner.records,
        ledger: runner.ledger,
        affinity_rounds: Vec::new(),
        matrix: None,
        partitions: Vec::new(),
        final_eval: mean,
        client_losses,
        violations: runner.violations,
    })
}
