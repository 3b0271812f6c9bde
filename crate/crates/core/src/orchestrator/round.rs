use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{group_stream, Workload};
use crate::affinity::{aggregate_round, AffinityProbe, RoundAffinity};
use crate::error::{Error, Result};
use crate::federation::{evaluate_model, fedavg, local_train, sample_clients, size_weights, LocalOutcome};
use crate::ledger::CostDelta;
use crate::nn::{ActivityId, MultiTaskModel};
use crate::rng::SeedStream;

/// One row of the round log.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub phase: String,
    pub group: String,
    /// 1-based round over the whole run.
    pub round: usize,
    /// 1-based round within the phase.
    pub phase_round: usize,
    pub clients: Vec<usize>,
    pub lr: f64,
    pub train_loss: BTreeMap<ActivityId, f64>,
    pub val_loss: BTreeMap<ActivityId, f64>,
    pub cost: CostDelta,
}

/// Inputs of one federated round for one group.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub work: Workload<'a>,
    pub seed: SeedStream,
    pub phase: &'a str,
    pub group: &'a [ActivityId],
    pub round: usize,
    pub phase_round: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub probe: Option<&'a AffinityProbe>,
    pub validate: bool,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub model: MultiTaskModel,
    pub record: RoundRecord,
    pub affinity: Option<RoundAffinity>,
}

/// Samples clients, trains them from `model`, and aggregates by dataset size.
pub fn run_round(model: &MultiTaskModel, ctx: &RoundContext<'_>) -> Result<RoundOutcome> {
    let pool = ctx.work.pool;
    let sample_seed = group_stream(ctx.seed, "sample", ctx.group).index(ctx.round as u64);
    let mut clients = sample_clients(pool.len(), ctx.clients_per_round, sample_seed)?;
    clients.sort_unstable();
    let shuffle = group_stream(ctx.seed, "shuffle", ctx.group).index(ctx.round as u64);
    let hyper = ctx.work.hyper;
    let outcomes: Vec<LocalOutcome> = clients
        .par_iter()
        .map(|&c| {
            let data = pool.client(c).ok_or(Error::TooManyClients {
                requested: c + 1,
                available: pool.len(),
            })?;
            local_train(model, data, ctx.local_epochs, ctx.lr, hyper, ctx.probe, shuffle.index(c as u64))
        })
        .collect::<Result<_>>()?;

    let sizes: Vec<usize> = clients.iter().map(|&c| pool.clients[c].n_examples()).collect();
    let weights = size_weights(&sizes);
    let locals: Vec<&MultiTaskModel> = outcomes.iter().map(|o| &o.model).collect();
    let aggregated = fedavg(&locals, &weights)?;

    let mut cost = CostDelta {
        aggregations: 1,
        client_updates: clients.len() as u64,
        ..CostDelta::default()
    };
    let mut train_loss: BTreeMap<ActivityId, f64> = BTreeMap::new();
    for (o, w) in outcomes.iter().zip(&weights) {
        cost.train += o.train_work;
        cost.probe += o.probe_work;
        for (id, l) in &o.train_loss {
            *train_loss.entry(*id).or_insert(0.0) += w * l;
        }
    }
    let accs: Vec<_> = outcomes.iter().filter_map(|o| o.affinity.clone()).collect();
    let affinity = if accs.is_empty() { None } else { Some(aggregate_round(&accs)?) };

    let mut val_loss = BTreeMap::new();
    if ctx.validate {
        let report = evaluate_model(&aggregated, &pool.test_sets)?;
        cost.eval += report.work;
        val_loss = report.per_activity;
    }
    let record = RoundRecord {
        phase: ctx.phase.to_string(),
        group: ctx.work.group_tag(ctx.group),
        round: ctx.round,
        phase_round: ctx.phase_round,
        clients,
        lr: ctx.lr,
        train_loss,
        val_loss,
        cost,
    };
    Ok(RoundOutcome {
        model: aggregated,
        record,
        affinity,
    })
}
