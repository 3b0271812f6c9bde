use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{ActivityId, Batch, MultiTaskModel, Work};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_activity: BTreeMap<ActivityId, f64>,
    pub total: f64,
    pub work: Work,
}

/// Mean test loss of each of `model`'s activities over `test`.
pub fn evaluate_model(model: &MultiTaskModel, test: &[Batch]) -> Result<EvalReport> {
    let ids: Vec<ActivityId> = model.activity_ids().into_iter().collect();
    let mut sums: BTreeMap<ActivityId, f64> = ids.iter().map(|id| (*id, 0.0)).collect();
    let mut count = 0usize;
    let mut work = Work::default();
    for batch in test {
        let cache = model.forward_many(&ids, batch)?;
        for (id, loss) in cache.losses() {
            *sums.get_mut(&id).expect("requested") += loss * batch.size() as f64;
        }
        count += batch.size();
        work += model.forward_work(batch.size(), ids.iter().copied());
    }
    let per_activity: BTreeMap<_, _> = sums.into_iter().map(|(id, s)| (id, s / count as f64)).collect();
    let total = per_activity.values().sum();
    Ok(EvalReport { per_activity, total, work })
}

/// Evaluates a model set in which each test activity must be owned by exactly one model.
pub fn evaluate(models: &[&MultiTaskModel], test: &[Batch]) -> Result<EvalReport> {
    let mut owner: BTreeMap<ActivityId, usize> = BTreeMap::new();
    for (k, m) in models.iter().enumerate() {
        for id in m.activity_ids() {
            if owner.insert(id, k).is_some() {
                return Err(Error::MultiplyServed(id));
            }
        }
    }
    if let Some(batch) = test.first() {
        if let Some(id) = batch.targets.keys().find(|id| !owner.contains_key(id)) {
            return Err(Error::Unserved(*id));
        }
    }
    let mut per_activity = BTreeMap::new();
    let mut work = Work::default();
    for m in models {
        let r = evaluate_model(m, test)?;
        per_activity.extend(r.per_activity);
        work += r.work;
    }
    let total = per_activity.values().sum();
    Ok(EvalReport { per_activity, total, work })
}
