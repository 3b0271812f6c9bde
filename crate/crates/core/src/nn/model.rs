use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use ndarray::Array2;
use rand::Rng;

use super::layer::{Activation, DenseLayer, LayerGrad, ParamBlock};
use super::{ActivityId, Batch, Targets, Work};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

/// Layer widths of a consolidated model. Trunk layers use tanh; head hidden
/// layers use tanh and the head output is linear (logits for classifiers).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub trunk_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
}

impl ModelShape {
    pub fn trunk_width(&self) -> usize {
        self.trunk_hidden.last().copied().unwrap_or(self.input_dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSpec {
    pub id: ActivityId,
    pub out_dim: usize,
    pub loss: LossKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub layers: Vec<DenseLayer>,
    pub loss: LossKind,
}

impl Head {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn macs(&self) -> usize {
        self.layers.iter().map(DenseLayer::macs).sum()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::fan_out)
    }
}

/// Shared trunk plus one head per activity.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel {
    trunk: Vec<DenseLayer>,
    heads: BTreeMap<ActivityId, Head>,
    version: u64,
}

#[derive(Debug, Clone)]
struct HeadCache {
    outputs: Vec<Array2<f64>>,
    loss: f64,
    dloss: Array2<f64>,
}

/// Activation record of a forward pass over one batch.
#[derive(Debug, Clone)]
pub struct Cache {
    version: u64,
    trunk_acts: Vec<Array2<f64>>,
    heads: BTreeMap<ActivityId, HeadCache>,
}

impl Cache {
    pub fn batch_size(&self) -> usize {
        self.trunk_acts[0].nrows()
    }

    pub fn loss(&self, id: ActivityId) -> Option<f64> {
        self.heads.get(&id).map(|h| h.loss)
    }

    pub fn losses(&self) -> BTreeMap<ActivityId, f64> {
        self.heads.iter().map(|(id, h)| (*id, h.loss)).collect()
    }

    pub fn activities(&self) -> impl Iterator<Item = ActivityId> + '_ {
        self.heads.keys().copied()
    }
}

/// Gradients for the trunk (when present) and a subset of heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub trunk: Option<Vec<LayerGrad>>,
    pub heads: BTreeMap<ActivityId, Vec<LayerGrad>>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.trunk
            .iter()
            .flatten()
            .chain(self.heads.values().flatten())
            .flat_map(LayerGrad::iter)
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|g| g.iter().all(|&v| v == 0.0))
    }
}

fn chain_layers<R: Rng>(rng: &mut R, dims: &[usize], last: Activation) -> Vec<DenseLayer> {
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i + 2 == dims.len() { last } else { Activation::Tanh };
            DenseLayer::init(rng, w[0], w[1], act)
        })
        .collect()
}

fn check_chain(layers: &[DenseLayer], input: usize, what: &str) -> Result<usize> {
    let mut width = input;
    for (i, l) in layers.iter().enumerate() {
        if l.fan_in() != width {
            return Err(Error::ShapeMismatch(format!(
                "{what} layer {i} expects width {} but receives {width}",
                l.fan_in()
            )));
        }
        width = l.fan_out();
    }
    Ok(width)
}

fn loss_and_delta(kind: LossKind, out: &Array2<f64>, targets: &Targets, id: ActivityId) -> Result<(f64, Array2<f64>)> {
    let b = out.nrows();
    if targets.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "activity {id}: {} targets for batch of {b}",
            targets.len()
        )));
    }
    let scale = 1.0 / b as f64;
    match (kind, targets) {
        (LossKind::SquaredError, Targets::Regression(t)) => {
            if t.dim() != out.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "activity {id}: targets {:?} vs predictions {:?}",
                    t.dim(),
                    out.dim()
                )));
            }
            let resid = out - t;
            let loss = resid.iter().map(|r| r * r).sum::<f64>() * scale;
            Ok((loss, resid * (2.0 * scale)))
        }
        (LossKind::CrossEntropy, Targets::Classes(classes)) => {
            let k = out.ncols();
            let mut delta = Array2::zeros(out.raw_dim());
            let mut loss = 0.0;
            for (r, &c) in classes.iter().enumerate() {
                if c >= k {
                    return Err(Error::ShapeMismatch(format!(
                        "activity {id}: class {c} out of range for {k} logits"
                    )));
                }
                let row = out.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
                let lse = max + sum.ln();
                loss += lse - row[c];
                for j in 0..k {
                    let p = (row[j] - lse).exp();
                    delta[[r, j]] = (p - if j == c { 1.0 } else { 0.0 }) * scale;
                }
            }
            Ok((loss * scale, delta))
        }
        _ => Err(Error::ShapeMismatch(format!(
            "activity {id}: target kind does not match loss {kind:?}"
        ))),
    }
}

fn trunk_forward(trunk: &[DenseLayer], x: &Array2<f64>) -> Vec<Array2<f64>> {
    let mut acts = Vec::with_capacity(trunk.len() + 1);
    acts.push(x.clone());
    for layer in trunk {
        let next = layer.forward(acts.last().expect("nonempty"));
        acts.push(next);
    }
    acts
}

fn head_forward(head: &Head, features: &Array2<f64>) -> Vec<Array2<f64>> {
    let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(head.layers.len());
    for layer in &head.layers {
        let next = layer.forward(outputs.last().unwrap_or(features));
        outputs.push(next);
    }
    outputs
}

impl MultiTaskModel {
    /// Fresh model: trunk drawn from `trunk_rng`, each head from `head_rng(id)`.
    pub fn init<R: Rng>(
        shape: &ModelShape,
        heads: &[HeadSpec],
        trunk_rng: &mut R,
        mut head_rng: impl FnMut(ActivityId) -> R,
    ) -> Result<Self> {
        if shape.input_dim == 0 {
            return Err(Error::ShapeMismatch("input width is zero".into()));
        }
        let mut dims = vec![shape.input_dim];
        dims.extend(&shape.trunk_hidden);
        let trunk = chain_layers(trunk_rng, &dims, Activation::Tanh);
        let mut map = BTreeMap::new();
        for spec in heads {
            let mut hd = vec![shape.trunk_width()];
            hd.extend(&shape.head_hidden);
            hd.push(spec.out_dim);
            let mut rng = head_rng(spec.id);
            let head = Head {
                layers: chain_layers(&mut rng, &hd, Activation::Identity),
                loss: spec.loss,
            };
            if map.insert(spec.id, head).is_some() {
                return Err(Error::DuplicateActivity(spec.id));
            }
        }
        Self::from_parts(trunk, map)
    }

    pub fn from_parts(trunk: Vec<DenseLayer>, heads: BTreeMap<ActivityId, Head>) -> Result<Self> {
        let input = trunk.first().map(DenseLayer::fan_in);
        let width = match input {
            Some(w) => check_chain(&trunk, w, "trunk")?,
            None => heads
                .values()
                .next()
                .and_then(|h| h.layers.first())
                .map(DenseLayer::fan_in)
                .ok_or_else(|| Error::ShapeMismatch("empty model".into()))?,
        };
        for (id, head) in &heads {
            if head.layers.is_empty() {
                return Err(Error::ShapeMismatch(format!("head {id} has no layers")));
            }
            check_chain(&head.layers, width, "head")?;
        }
        Ok(Self {
            trunk,
            heads,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        match self.trunk.first() {
            Some(l) => l.fan_in(),
            None => self.trunk_width(),
        }
    }

    pub fn trunk_width(&self) -> usize {
        match self.trunk.last() {
            Some(l) => l.fan_out(),
            None => self.heads.values().next().map_or(0, |h| h.layers[0].fan_in()),
        }
    }

    pub fn activity_ids(&self) -> BTreeSet<ActivityId> {
        self.heads.keys().copied().collect()
    }

    pub fn has_activity(&self, id: ActivityId) -> bool {
        self.heads.contains_key(&id)
    }

    pub fn trunk(&self) -> &[DenseLayer] {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut [DenseLayer] {
        self.version += 1;
        &mut self.trunk
    }

    pub fn head(&self, id: ActivityId) -> Option<&Head> {
        self.heads.get(&id)
    }

    pub fn head_mut(&mut self, id: ActivityId) -> Option<&mut Head> {
        self.version += 1;
        self.heads.get_mut(&id)
    }

    pub fn heads(&self) -> &BTreeMap<ActivityId, Head> {
        &self.heads
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn trunk_param_count(&self) -> usize {
        self.trunk.iter().map(DenseLayer::param_count).sum()
    }

    pub fn trunk_macs(&self) -> usize {
        self.trunk.iter().map(DenseLayer::macs).sum()
    }

    pub fn param_count(&self) -> usize {
        self.trunk_param_count() + self.heads.values().map(Head::param_count).sum::<usize>()
    }

    /// Work of one joint forward pass plus backward pass over `b` examples.
    pub fn joint_step_work(&self, b: usize) -> Work {
        let macs = self.trunk_macs() + self.heads.values().map(Head::macs).sum::<usize>();
        Work {
            grad: (b * self.param_count()) as u64,
            forward: (b * macs) as u64,
        }
    }

    /// Work of a forward pass over `b` examples for the listed heads.
    pub fn forward_work(&self, b: usize, ids: impl IntoIterator<Item = ActivityId>) -> Work {
        let heads: usize = ids.into_iter().filter_map(|id| self.heads.get(&id)).map(Head::macs).sum();
        Work {
            grad: 0,
            forward: (b * (self.trunk_macs() + heads)) as u64,
        }
    }

    /// Every parameter block in a fixed order: trunk layers, then heads by id.
    pub fn blocks(&self) -> impl Iterator<Item = &ParamBlock> {
        self.trunk
            .iter()
            .chain(self.heads.values().flat_map(|h| h.layers.iter()))
            .flat_map(DenseLayer::blocks)
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ParamBlock> {
        self.version += 1;
        self.trunk
            .iter_mut()
            .chain(self.heads.values_mut().flat_map(|h| h.layers.iter_mut()))
            .flat_map(DenseLayer::blocks_mut)
    }

    pub fn reset_momentum(&mut self) {
        self.blocks_mut().for_each(ParamBlock::reset_momentum);
    }

    /// True when layer shapes and activity sets agree.
    pub fn compatible_with(&self, other: &MultiTaskModel) -> bool {
        self.trunk.len() == other.trunk.len()
            && self.trunk.iter().zip(&other.trunk).all(|(a, b)| a.same_shape(b))
            && self.heads.len() == other.heads.len()
            && self.heads.iter().zip(&other.heads).all(|((ia, ha), (ib, hb))| {
                ia == ib
                    && ha.loss == hb.loss
                    && ha.layers.len() == hb.layers.len()
                    && ha.layers.iter().zip(&hb.layers).all(|(a, b)| a.same_shape(b))
            })
    }

    /// Deep copy of the trunk plus the listed heads, with zeroed momentum.
    pub fn restrict(&self, ids: &BTreeSet<ActivityId>) -> Result<MultiTaskModel> {
        let mut heads = BTreeMap::new();
        for id in ids {
            let head = self.heads.get(id).ok_or(Error::UnknownActivity(*id))?;
            heads.insert(*id, head.clone());
        }
        let mut m = MultiTaskModel {
            trunk: self.trunk.clone(),
            heads,
            version: 0,
        };
        m.reset_momentum();
        Ok(m)
    }

    /// Hash of every parameter value, momentum entry, and the version.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.version.hash(&mut h);
        for id in self.heads.keys() {
            id.hash(&mut h);
        }
        for block in self.blocks() {
            for v in block.values.iter().chain(block.momentum.iter()) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks()
            .all(|b| b.values.iter().chain(b.momentum.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, batch: &Batch) -> Result<()> {
        if batch.size() == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        if batch.features.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "batch width {} but model expects {}",
                batch.features.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn forward_parts(
        &self,
        trunk: &[DenseLayer],
        ids: &[ActivityId],
        batch: &Batch,
    ) -> Result<Cache> {
        self.check_input(batch)?;
        for id in ids {
            if !self.heads.contains_key(id) {
                return Err(Error::UnknownActivity(*id));
            }
            if !batch.targets.contains_key(id) {
                return Err(Error::MissingTargets(*id));
            }
        }
        let trunk_acts = trunk_forward(trunk, &batch.features);
        let features = trunk_acts.last().expect("inputs present");
        let mut heads = BTreeMap::new();
        for id in ids {
            let head = &self.heads[id];
            let outputs = head_forward(head, features);
            let (loss, dloss) = loss_and_delta(head.loss, outputs.last().expect("head layers"), &batch.targets[id], *id)?;
            heads.insert(*id, HeadCache { outputs, loss, dloss });
        }
        Ok(Cache {
            version: self.version,
            trunk_acts,
            heads,
        })
    }

    /// Batch-mean loss of one activity.
    pub fn forward_loss(&self, id: ActivityId, batch: &Batch) -> Result<(f64, Cache)> {
        let cache = self.forward_parts(&self.trunk, &[id], batch)?;
        Ok((cache.heads[&id].loss, cache))
    }

    /// One trunk pass feeding every listed head.
    pub fn forward_many(&self, ids: &[ActivityId], batch: &Batch) -> Result<Cache> {
        self.forward_parts(&self.trunk, ids, batch)
    }

    /// Per-activity losses when the trunk is replaced by `trunk`.
    pub fn losses_with_trunk(&self, trunk: &[DenseLayer], ids: &[ActivityId], batch: &Batch) -> Result<BTreeMap<ActivityId, f64>> {
        check_chain(trunk, self.input_dim(), "trunk")?;
        Ok(self.forward_parts(trunk, ids, batch)?.losses())
    }

    fn check_cache(&self, cache: &Cache) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                model: self.version,
                cache: cache.version,
            });
        }
        Ok(())
    }

    fn backprop(&self, cache: &Cache, ids: &[ActivityId], head_grads: bool) -> Result<Gradients> {
        self.check_cache(cache)?;
        let features = cache.trunk_acts.last().expect("inputs present");
        let mut trunk_delta = Array2::<f64>::zeros(features.raw_dim());
        let mut heads = BTreeMap::new();
        for id in ids {
            let hc = cache.heads.get(id).ok_or(Error::UnknownActivity(*id))?;
            let head = &self.heads[id];
            let mut delta = hc.dloss.clone();
            let mut grads = Vec::with_capacity(head.layers.len());
            for (l, layer) in head.layers.iter().enumerate().rev() {
                let input = if l == 0 { features } else { &hc.outputs[l - 1] };
                let (g, d) = layer.backward(input, &hc.outputs[l], delta, head_grads, true);
                if let Some(g) = g {
                    grads.push(g);
                }
                delta = d.expect("input delta requested");
            }
            trunk_delta += &delta;
            if head_grads {
                grads.reverse();
                heads.insert(*id, grads);
            }
        }
        let mut trunk = Vec::with_capacity(self.trunk.len());
        let mut delta = trunk_delta;
        for (l, layer) in self.trunk.iter().enumerate().rev() {
            let (g, d) = layer.backward(&cache.trunk_acts[l], &cache.trunk_acts[l + 1], delta, true, l > 0);
            trunk.push(g.expect("grad requested"));
            delta = d.unwrap_or_default();
        }
        trunk.reverse();
        Ok(Gradients {
            trunk: Some(trunk),
            heads,
        })
    }

    /// Exact gradient of one activity's loss over the trunk and its head.
    pub fn backward(&self, id: ActivityId, cache: &Cache) -> Result<Gradients> {
        self.backprop(cache, &[id], true)
    }

    /// Gradient of the summed loss of every activity recorded in `cache`.
    pub fn backward_joint(&self, cache: &Cache) -> Result<Gradients> {
        let ids: Vec<_> = cache.activities().collect();
        self.backprop(cache, &ids, true)
    }

    /// Trunk-only gradient of one activity's loss.
    pub fn trunk_gradient(&self, id: ActivityId, cache: &Cache) -> Result<Vec<LayerGrad>> {
        Ok(self.backprop(cache, &[id], false)?.trunk.expect("trunk gradient"))
    }

    /// Trunk parameters after one plain gradient step on `id`'s loss,
    /// leaving this model untouched.
    pub fn lookahead_shared(&self, id: ActivityId, batch: &Batch, lr: f64) -> Result<Vec<DenseLayer>> {
        let (_, cache) = self.forward_loss(id, batch)?;
        self.lookahead_from_cache(id, &cache, lr)
    }

    pub fn lookahead_from_cache(&self, id: ActivityId, cache: &Cache, lr: f64) -> Result<Vec<DenseLayer>> {
        let grads = self.trunk_gradient(id, cache)?;
        let mut trunk = self.trunk.clone();
        for (layer, g) in trunk.iter_mut().zip(&grads) {
            layer.weight.values.scaled_add(-lr, &g.weight);
            if let (Some(b), Some(gb)) = (layer.bias.as_mut(), g.bias.as_ref()) {
                b.values.scaled_add(-lr, gb);
            }
        }
        Ok(trunk)
    }

    pub(crate) fn apply_update(&mut self, grads: &Gradients, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        if let Some(tg) = &grads.trunk {
            if tg.len() != self.trunk.len() || !tg.iter().zip(&self.trunk).all(|(g, l)| g.matches(l)) {
                return Err(Error::ShapeMismatch("trunk gradient does not match trunk".into()));
            }
        }
        for (id, hg) in &grads.heads {
            let head = self.heads.get(id).ok_or(Error::UnknownActivity(*id))?;
            if hg.len() != head.layers.len() || !hg.iter().zip(&head.layers).all(|(g, l)| g.matches(l)) {
                return Err(Error::ShapeMismatch(format!("head {id} gradient does not match head")));
            }
        }
        self.version += 1;
        let step = |layer: &mut DenseLayer, g: &LayerGrad| {
            let pairs = std::iter::once((&mut layer.weight, &g.weight)).chain(layer.bias.as_mut().zip(g.bias.as_ref()));
            for (block, grad) in pairs {
                ndarray::Zip::from(&mut block.values)
                    .and(&mut block.momentum)
                    .and(grad)
                    .for_each(|w, v, &g| {
                        *v = momentum * *v + (g + weight_decay * *w);
                        *w -= lr * *v;
                    });
            }
        };
        if let Some(tg) = &grads.trunk {
            for (layer, g) in self.trunk.iter_mut().zip(tg) {
                step(layer, g);
            }
        }
        for (id, hg) in &grads.heads {
            let head = self.heads.get_mut(id).expect("checked above");
            for (layer, g) in head.layers.iter_mut().zip(hg) {
                step(layer, g);
            }
        }
        Ok(())
    }
}
