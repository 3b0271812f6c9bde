use std::collections::{BTreeMap, BTreeSet};

use mufl::affinity::step_affinity;
use mufl::nn::{
    poly_lr, sgd_step, Activation, ActivityId, Batch, DenseLayer, Head, HeadSpec, HyperParams, LossKind, ModelShape,
    MultiTaskModel, Targets,
};
use mufl::rng::SeedStream;
use mufl::Error;
use ndarray::{arr1, arr2, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

const A: ActivityId = ActivityId(0);
const B: ActivityId = ActivityId(1);

/// Model `y = θ·x` with a fixed unit head per activity, so the loss of an
/// activity with target `t` at input 1 is `(θ − t)²`.
fn scalar_model(theta: f64, ids: &[ActivityId]) -> MultiTaskModel {
    let trunk = vec![DenseLayer::from_values(arr2(&[[theta]]), None, Activation::Identity)];
    let heads = ids
        .iter()
        .map(|id| {
            let head = Head {
                layers: vec![DenseLayer::from_values(arr2(&[[1.0]]), None, Activation::Identity)],
                loss: LossKind::SquaredError,
            };
            (*id, head)
        })
        .collect();
    MultiTaskModel::from_parts(trunk, heads).unwrap()
}

fn scalar_batch(targets: &[(ActivityId, f64)]) -> Batch {
    let t = targets
        .iter()
        .map(|(id, v)| (*id, Targets::Regression(arr2(&[[*v]]))))
        .collect();
    Batch::new(arr2(&[[1.0]]), t)
}

fn theta(model: &MultiTaskModel) -> f64 {
    model.trunk()[0].weight.values[[0, 0]]
}

fn plain() -> HyperParams {
    HyperParams {
        momentum: 0.0,
        weight_decay: 0.0,
        ..HyperParams::default()
    }
}

#[test]
fn quadratic_loss_and_gradient() {
    let model = scalar_model(0.0, &[A]);
    let (loss, cache) = model.forward_loss(A, &scalar_batch(&[(A, 1.0)])).unwrap();
    assert_eq!(loss, 1.0);
    let g = model.backward(A, &cache).unwrap();
    assert_eq!(g.trunk.as_ref().unwrap()[0].weight[[0, 0]], -2.0);
}

#[test]
fn zero_weights_zero_target_zero_loss() {
    let model = scalar_model(0.0, &[A]);
    let (loss, cache) = model.forward_loss(A, &scalar_batch(&[(A, 0.0)])).unwrap();
    assert_eq!(loss, 0.0);
    assert!(model.backward(A, &cache).unwrap().is_zero());
}

#[test]
fn forward_is_deterministic() {
    let (model, batch) = mufl::nn::gradcheck::random_case(11).unwrap();
    let ids: Vec<_> = model.activity_ids().into_iter().collect();
    let a = model.forward_many(&ids, &batch).unwrap().losses();
    let b = model.forward_many(&ids, &batch).unwrap().losses();
    assert_eq!(a, b);
}

#[test]
fn unknown_activity_and_shape_errors() {
    let model = scalar_model(0.0, &[A]);
    let batch = scalar_batch(&[(A, 1.0)]);
    assert_eq!(model.forward_loss(B, &batch).unwrap_err(), Error::UnknownActivity(B));
    let wide = Batch::new(arr2(&[[1.0, 2.0]]), batch.targets.clone());
    assert!(matches!(model.forward_loss(A, &wide), Err(Error::ShapeMismatch(_))));
}

#[test]
fn stale_cache_rejected() {
    let mut model = scalar_model(0.0, &[A]);
    let (_, cache) = model.forward_loss(A, &scalar_batch(&[(A, 1.0)])).unwrap();
    model.trunk_mut()[0].weight.values[[0, 0]] = 0.5;
    assert!(matches!(model.backward(A, &cache), Err(Error::StaleCache { .. })));
}

#[test]
fn backward_touches_trunk_and_selected_head_only() {
    let model = scalar_model(0.3, &[A, B]);
    let (_, cache) = model.forward_loss(A, &scalar_batch(&[(A, 1.0), (B, 2.0)])).unwrap();
    let g = model.backward(A, &cache).unwrap();
    assert!(g.trunk.is_some());
    assert_eq!(g.heads.keys().copied().collect::<Vec<_>>(), vec![A]);
}

/// Central differences on every parameter of the loss of one activity.
fn numeric_gradient(model: &MultiTaskModel, id: ActivityId, batch: &Batch, h: f64) -> Vec<Vec<f64>> {
    let mut probe = model.clone();
    let n_blocks = model.blocks().count();
    let mut out = Vec::new();
    for b in 0..n_blocks {
        let len = model.blocks().nth(b).unwrap().values.len();
        let mut g = Vec::with_capacity(len);
        for k in 0..len {
            let orig = model.blocks().nth(b).unwrap().values.as_slice().unwrap()[k];
            let mut at = |v: f64| {
                probe.blocks_mut().nth(b).unwrap().values.as_slice_mut().unwrap()[k] = v;
                probe.forward_loss(id, batch).unwrap().0
            };
            let up = at(orig + h);
            let down = at(orig - h);
            at(orig);
            g.push((up - down) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

fn random_model(seed: u64) -> (MultiTaskModel, Batch) {
    let s = SeedStream::new(seed);
    let mut rng = s.label("shape").rng();
    let input_dim = rng.random_range(1..=5);
    let trunk_hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(1..=16)).collect();
    let head_hidden = if rng.random_bool(0.3) { vec![rng.random_range(1..=4)] } else { vec![] };
    let heads = vec![
        HeadSpec {
            id: A,
            out_dim: rng.random_range(1..=3),
            loss: LossKind::SquaredError,
        },
        HeadSpec {
            id: B,
            out_dim: rng.random_range(2..=4),
            loss: LossKind::CrossEntropy,
        },
    ];
    let shape = ModelShape {
        input_dim,
        trunk_hidden,
        head_hidden,
    };
    let model = MultiTaskModel::init(&shape, &heads, &mut s.label("t").rng(), |id| s.label("h").index(u64::from(id.0)).rng())
        .unwrap();
    let b = rng.random_range(1..=6);
    let x = Array2::from_shape_fn((b, input_dim), |_| rng.sample::<f64, _>(StandardNormal));
    let ya = Array2::from_shape_fn((b, heads[0].out_dim), |_| rng.sample::<f64, _>(StandardNormal));
    let yb: Vec<usize> = (0..b).map(|_| rng.random_range(0..heads[1].out_dim)).collect();
    let targets = BTreeMap::from([(A, Targets::Regression(ya)), (B, Targets::Classes(yb))]);
    (model, Batch::new(x, targets))
}

#[test]
fn per_activity_backward_matches_finite_differences() {
    for seed in 0..100 {
        let (model, batch) = random_model(seed);
        for id in [A, B] {
            let (_, cache) = model.forward_loss(id, &batch).unwrap();
            let g = model.backward(id, &cache).unwrap();
            let numeric = numeric_gradient(&model, id, &batch, 1e-5);
            // Blocks of the other head carry no gradient.
            let mut analytic: Vec<Vec<f64>> = Vec::new();
            for layer in g.trunk.as_ref().unwrap() {
                analytic.extend(layer.iter().map(|a| a.iter().copied().collect()));
            }
            for (hid, head) in model.heads() {
                for (li, layer) in head.layers.iter().enumerate() {
                    for (bi, block) in layer.blocks().enumerate() {
                        analytic.push(match g.heads.get(hid) {
                            Some(hg) => hg[li].iter().nth(bi).unwrap().iter().copied().collect(),
                            None => vec![0.0; block.values.len()],
                        });
                    }
                }
            }
            assert_eq!(analytic.len(), numeric.len());
            for (a, n) in analytic.iter().flatten().zip(numeric.iter().flatten()) {
                let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
                assert!(rel < 1e-4, "seed {seed} activity {id}: analytic {a} numeric {n}");
            }
        }
    }
}

#[test]
fn poly_lr_values() {
    assert_eq!(poly_lr(0, 100, 0.1).unwrap(), 0.1);
    assert_eq!(poly_lr(100, 100, 0.1).unwrap(), 0.0);
    let expected = 0.1 * 0.5f64.powf(0.9);
    assert!((poly_lr(50, 100, 0.1).unwrap() - expected).abs() < 1e-15);
    assert!((expected - 0.053589).abs() < 1e-6);
    assert_eq!(poly_lr(101, 100, 0.1), Err(Error::RoundOutOfRange { round: 101, total: 100 }));
    for r in 0..100 {
        assert!(poly_lr(r + 1, 100, 0.1).unwrap() < poly_lr(r, 100, 0.1).unwrap());
    }
}

#[test]
fn sgd_hand_step() {
    let mut model = scalar_model(0.0, &[A]);
    let (_, cache) = model.forward_loss(A, &scalar_batch(&[(A, 1.0)])).unwrap();
    let mut g = model.backward(A, &cache).unwrap();
    g.heads.clear();
    sgd_step(&mut model, &g, 0.25, &plain()).unwrap();
    assert_eq!(theta(&model), 0.5);
}

#[test]
fn sgd_zero_lr_is_identity() {
    let (mut model, batch) = random_model(3);
    let before = model.clone();
    let ids: Vec<_> = model.activity_ids().into_iter().collect();
    let cache = model.forward_many(&ids, &batch).unwrap();
    let g = model.backward_joint(&cache).unwrap();
    sgd_step(&mut model, &g, 0.0, &HyperParams::default()).unwrap();
    assert!(model.blocks().zip(before.blocks()).all(|(a, b)| a.values == b.values));
}

#[test]
fn momentum_second_step_is_1_9x() {
    let mut model = scalar_model(0.0, &[A]);
    let (_, cache) = model.forward_loss(A, &scalar_batch(&[(A, 1.0)])).unwrap();
    let mut g = model.backward(A, &cache).unwrap();
    g.heads.clear();
    let hyper = HyperParams {
        momentum: 0.9,
        weight_decay: 0.0,
        ..HyperParams::default()
    };
    sgd_step(&mut model, &g, 0.1, &hyper).unwrap();
    let first = theta(&model);
    sgd_step(&mut model, &g, 0.1, &hyper).unwrap();
    let second = theta(&model) - first;
    assert!((second / first - 1.9).abs() < 1e-12);
}

#[test]
fn weight_decay_enters_velocity() {
    let mut model = scalar_model(2.0, &[A]);
    let (_, cache) = model.forward_loss(A, &scalar_batch(&[(A, 2.0)])).unwrap();
    let mut g = model.backward(A, &cache).unwrap();
    g.heads.clear();
    let hyper = HyperParams {
        momentum: 0.0,
        weight_decay: 0.5,
        ..HyperParams::default()
    };
    sgd_step(&mut model, &g, 0.1, &hyper).unwrap();
    assert!((theta(&model) - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
}

#[test]
fn sgd_shape_mismatch() {
    let mut small = scalar_model(0.0, &[A]);
    let (big, batch) = random_model(5);
    let ids: Vec<_> = big.activity_ids().into_iter().collect();
    let g = big.backward_joint(&big.forward_many(&ids, &batch).unwrap()).unwrap();
    assert!(sgd_step(&mut small, &g, 0.1, &plain()).is_err());
}

#[test]
fn lookahead_step_and_purity() {
    let model = scalar_model(0.0, &[A]);
    let before = model.fingerprint();
    let batch = scalar_batch(&[(A, 1.0)]);
    let (loss_before, _) = model.forward_loss(A, &batch).unwrap();
    let trunk = model.lookahead_shared(A, &batch, 0.25).unwrap();
    assert_eq!(trunk[0].weight.values[[0, 0]], 0.5);
    assert_eq!(model.fingerprint(), before);
    assert_eq!(model.forward_loss(A, &batch).unwrap().0.to_bits(), loss_before.to_bits());
    let flat = scalar_model(1.0, &[A]);
    assert_eq!(flat.lookahead_shared(A, &batch, 0.25).unwrap(), flat.trunk());
}

#[test]
fn lookahead_ignores_momentum() {
    let mut model = scalar_model(0.0, &[A]);
    model.trunk_mut()[0].weight.momentum = arr2(&[[5.0]]);
    let trunk = model.lookahead_shared(A, &scalar_batch(&[(A, 1.0)]), 0.25).unwrap();
    assert_eq!(trunk[0].weight.values[[0, 0]], 0.5);
}

#[test]
fn quadratic_affinities() {
    let model = scalar_model(0.0, &[A, B]);
    let same = scalar_batch(&[(A, 1.0), (B, 1.0)]);
    assert!((step_affinity(&model, &same, A, B, 0.25).unwrap().unwrap() - 0.75).abs() < 1e-12);
    let opposite = scalar_batch(&[(A, 1.0), (B, -1.0)]);
    assert!((step_affinity(&model, &opposite, A, B, 0.25).unwrap().unwrap() + 1.25).abs() < 1e-12);
    let settled = scalar_model(1.0, &[A, B]);
    assert_eq!(step_affinity(&settled, &opposite, A, B, 0.25).unwrap(), Some(0.0));
}

#[test]
fn zero_denominator_is_skipped() {
    let model = scalar_model(1.0, &[A, B]);
    let batch = scalar_batch(&[(A, 0.0), (B, 1.0)]);
    assert_eq!(step_affinity(&model, &batch, A, B, 0.25).unwrap(), None);
}

#[test]
fn restrict_keeps_subset_and_zeroes_momentum() {
    let (mut model, _) = random_model(8);
    model.blocks_mut().for_each(|b| b.momentum.fill(1.0));
    let sub = model.restrict(&BTreeSet::from([B])).unwrap();
    assert_eq!(sub.activity_ids(), BTreeSet::from([B]));
    assert!(sub.blocks().all(|b| b.momentum.iter().all(|&m| m == 0.0)));
    assert_eq!(sub.trunk()[0].weight.values, model.trunk()[0].weight.values);
}

#[test]
fn bias_layers_round_trip() {
    let layer = DenseLayer::from_values(arr2(&[[1.0, 2.0]]), Some(arr1(&[0.5, -0.5])), Activation::Tanh);
    assert_eq!(layer.param_count(), 4);
    assert_eq!(layer.fan_out(), 2);
}
