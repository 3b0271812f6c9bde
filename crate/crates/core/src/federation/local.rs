use std::collections::BTreeMap;

use rand::seq::index;

use super::ClientDataset;
use crate::affinity::{accumulate_cached, AffinityAccumulator, AffinityProbe};
use crate::error::{Error, Result};
use crate::nn::{sgd_step, ActivityId, HyperParams, MultiTaskModel, Work};
use crate::rng::SeedStream;

/// `k` distinct client ids drawn uniformly without replacement.
pub fn sample_clients(n_clients: usize, k: usize, stream: SeedStream) -> Result<Vec<usize>> {
    if k == 0 || k > n_clients {
        return Err(Error::TooManyClients {
            requested: k,
            available: n_clients,
        });
    }
    Ok(index::sample(&mut stream.rng(), n_clients, k).into_vec())
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub client_id: usize,
    pub model: MultiTaskModel,
    pub affinity: Option<AffinityAccumulator>,
    pub train_work: Work,
    pub probe_work: Work,
    /// Mean per-batch training loss of each activity.
    pub train_loss: BTreeMap<ActivityId, f64>,
    pub batches: usize,
}

/// Trains a copy of `model` for `epochs` passes over `dataset`.
///
/// Every batch takes one joint step on the summed activity losses. When
/// `probe` is given, affinities are measured on every `frequency`-th batch
/// before that batch's update, with the lookahead step size equal to `lr`.
pub fn local_train(
    model: &MultiTaskModel,
    dataset: &ClientDataset,
    epochs: usize,
    lr: f64,
    hyper: &HyperParams,
    probe: Option<&AffinityProbe>,
    shuffle: SeedStream,
) -> Result<LocalOutcome> {
    let ids: Vec<ActivityId> = model.activity_ids().into_iter().collect();
    if let Some(id) = ids.iter().find(|id| !dataset.examples().targets.contains_key(id)) {
        return Err(Error::MissingTargets(*id));
    }
    let mut local = model.clone();
    let probe = probe.filter(|_| ids.len() >= 2);
    let mut affinity = probe.map(|_| AffinityAccumulator::new(ids.clone()));
    let mut train_work = Work::default();
    let mut probe_work = Work::default();
    let mut loss_sums: BTreeMap<ActivityId, f64> = ids.iter().map(|id| (*id, 0.0)).collect();
    let mut batches = 0usize;
    for epoch in 0..epochs {
        let mut rng = shuffle.index(epoch as u64).rng();
        for (b, batch) in dataset.epoch_batches(hyper.batch_size, Some(&mut rng)).iter().enumerate() {
            let cache = local.forward_many(&ids, batch)?;
            if let (Some(p), Some(acc)) = (probe, affinity.as_mut()) {
                if p.measures_at(b) {
                    probe_work += accumulate_cached(acc, &local, &cache, batch, lr)?;
                }
            }
            for (id, loss) in cache.losses() {
                *loss_sums.get_mut(&id).expect("activity") += loss;
            }
            let grads = local.backward_joint(&cache)?;
            sgd_step(&mut local, &grads, lr, hyper)?;
            train_work += local.joint_step_work(batch.size());
            batches += 1;
        }
    }
    let train_loss = loss_sums
        .into_iter()
        .map(|(id, s)| (id, if batches > 0 { s / batches as f64 } else { 0.0 }))
        .collect();
    Ok(LocalOutcome {
        client_id: dataset.client_id,
        model: local,
        affinity,
        train_work,
        probe_work,
        train_loss,
        batches,
    })
}
