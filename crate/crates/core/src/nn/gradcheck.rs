//! Central finite differences against analytic gradients.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{ActivityId, Batch, HeadSpec, LossKind, ModelShape, MultiTaskModel, Targets};
use crate::error::Result;
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Below this combined magnitude, errors are measured absolutely.
pub const ERROR_FLOOR: f64 = 1e-6;

fn joint_loss(model: &MultiTaskModel, ids: &[ActivityId], batch: &Batch) -> Result<f64> {
    Ok(model.forward_many(ids, batch)?.losses().values().sum())
}

/// Compares the joint backward pass with `(L(w+h) − L(w−h)) / 2h` for every
/// scalar parameter.
pub fn check_gradients(model: &MultiTaskModel, batch: &Batch, h: f64) -> Result<GradCheck> {
    let ids: Vec<ActivityId> = model.activity_ids().into_iter().collect();
    let cache = model.forward_many(&ids, batch)?;
    let grads = model.backward_joint(&cache)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
    let mut probe = model.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    let n_blocks = model.blocks().count();
    for b in 0..n_blocks {
        let len = probe.blocks().nth(b).expect("block").values.len();
        for k in 0..len {
            let orig = probe.blocks().nth(b).expect("block").values.as_slice().expect("contiguous")[k];
            let set = |m: &mut MultiTaskModel, v: f64| {
                m.blocks_mut().nth(b).expect("block").values.as_slice_mut().expect("contiguous")[k] = v;
            };
            set(&mut probe, orig + h);
            let up = joint_loss(&probe, &ids, batch)?;
            set(&mut probe, orig - h);
            let down = joint_loss(&probe, &ids, batch)?;
            set(&mut probe, orig);
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(ERROR_FLOOR))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        checked: numeric.len(),
    })
}

/// A small random model and batch mixing regression and classification heads.
pub fn random_case(seed: u64) -> Result<(MultiTaskModel, Batch)> {
    let s = SeedStream::new(seed).label("gradcheck");
    let mut rng = s.label("shape").rng();
    let input_dim = rng.random_range(1..=4);
    let depth = rng.random_range(0..=2);
    let trunk_hidden = (0..depth).map(|_| rng.random_range(1..=4)).collect();
    let head_hidden = if rng.random_bool(0.5) { vec![rng.random_range(1..=3)] } else { vec![] };
    let n_heads = rng.random_range(1..=3u16);
    let heads: Vec<HeadSpec> = (0..n_heads)
        .map(|i| {
            let classify = rng.random_bool(0.4);
            HeadSpec {
                id: ActivityId(i),
                out_dim: rng.random_range(if classify { 2..=3 } else { 1..=3 }),
                loss: if classify { LossKind::CrossEntropy } else { LossKind::SquaredError },
            }
        })
        .collect();
    let shape = ModelShape {
        input_dim,
        trunk_hidden,
        head_hidden,
    };
    let model = MultiTaskModel::init(&shape, &heads, &mut s.label("trunk").rng(), |id| {
        s.label("head").index(u64::from(id.0)).rng()
    })?;
    let b = rng.random_range(1..=5);
    let features = Array2::from_shape_fn((b, input_dim), |_| rng.sample::<f64, _>(StandardNormal));
    let mut targets = BTreeMap::new();
    for spec in &heads {
        let t = match spec.loss {
            LossKind::SquaredError => {
                Targets::Regression(Array2::from_shape_fn((b, spec.out_dim), |_| rng.sample::<f64, _>(StandardNormal)))
            }
            LossKind::CrossEntropy => Targets::Classes((0..b).map(|_| rng.random_range(0..spec.out_dim)).collect()),
        };
        targets.insert(spec.id, t);
    }
    Ok((model, Batch::new(features, targets)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_cases_pass() {
        for seed in 0..10 {
            let (model, batch) = random_case(seed).unwrap();
            let r = check_gradients(&model, &batch, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
            assert!(r.checked > 0);
        }
    }
}
