use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Error, Result};
use crate::nn::{ActivityId, Batch, LossKind, Targets};
use crate::rng::SeedStream;

/// Seeded description of a synthetic multi-task population.
///
/// Activities sharing a cluster draw targets from one generator
/// `y = Q_a · A_c · tanh(G_c x + c_c)`, where `Q_a` is a small per-activity
/// rotation. Different clusters use independent `(G_c, c_c, A_c)`. Client `k`
/// draws inputs from `N(μ_k, I)` with `μ_k = heterogeneity · N(0, I)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub n_activities: usize,
    /// Ground-truth cluster per activity; empty means every activity is its own cluster.
    pub clusters: Vec<usize>,
    pub input_dim: usize,
    /// Width of the generator's feature transform.
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub heterogeneity: f64,
    pub noise_std: f64,
    /// Angle scale of the per-activity output rotation.
    pub rotation: f64,
    /// Fraction of every cluster's feature transform drawn from one common transform.
    pub feature_sharing: f64,
    /// Activities trained with softmax cross-entropy on `argmax` labels.
    pub classification: Vec<u16>,
    /// Relative spread of client dataset sizes, in `[0, 1)`.
    pub size_jitter: f64,
    pub test_examples: usize,
    /// Single-character display tag per activity.
    pub tags: String,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            n_activities: 5,
            clusters: vec![0, 0, 1, 1, 2],
            input_dim: 8,
            hidden_dim: 8,
            output_dim: 3,
            heterogeneity: 0.5,
            noise_std: 0.05,
            rotation: 0.2,
            feature_sharing: 0.0,
            classification: Vec::new(),
            size_jitter: 0.0,
            test_examples: 512,
            tags: String::new(),
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_activities == 0 {
            return Err(config_err("task.n_activities", "must be at least 1"));
        }
        if self.input_dim == 0 {
            return Err(config_err("task.input_dim", "must be at least 1"));
        }
        if self.hidden_dim == 0 {
            return Err(config_err("task.hidden_dim", "must be at least 1"));
        }
        if self.output_dim == 0 {
            return Err(config_err("task.output_dim", "must be at least 1"));
        }
        if !self.clusters.is_empty() && self.clusters.len() != self.n_activities {
            return Err(config_err("task.clusters", "needs one cluster per activity"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(config_err("task.noise_std", "must be non-negative"));
        }
        if !(self.heterogeneity >= 0.0) {
            return Err(config_err("task.heterogeneity", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.feature_sharing) {
            return Err(config_err("task.feature_sharing", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return Err(config_err("task.size_jitter", "must lie in [0, 1)"));
        }
        if let Some(c) = self.classification.iter().find(|&&c| usize::from(c) >= self.n_activities) {
            return Err(config_err("task.classification", format!("activity {c} does not exist")));
        }
        if self.classification.iter().any(|_| self.output_dim < 2) {
            return Err(config_err("task.classification", "classifiers need output_dim >= 2"));
        }
        if !self.tags.is_empty() {
            let tags: Vec<char> = self.tags.chars().collect();
            if tags.len() != self.n_activities {
                return Err(config_err("task.tags", "needs one character per activity"));
            }
            let mut sorted = tags.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != tags.len() || tags.iter().any(|c| *c == ',' || c.is_whitespace()) {
                return Err(config_err("task.tags", "tags must be distinct printable characters"));
            }
        }
        if self.test_examples == 0 {
            return Err(config_err("task.test_examples", "must be at least 1"));
        }
        Ok(())
    }

    pub fn cluster_of(&self, activity: usize) -> usize {
        self.clusters.get(activity).copied().unwrap_or(activity)
    }

    pub fn loss_kind(&self, activity: usize) -> LossKind {
        if self.classification.iter().any(|&c| usize::from(c) == activity) {
            LossKind::CrossEntropy
        } else {
            LossKind::SquaredError
        }
    }

    pub fn tag(&self, activity: usize) -> char {
        match self.tags.chars().nth(activity) {
            Some(c) => c,
            None => (b'a' + (activity % 26) as u8) as char,
        }
    }

    pub fn activity_ids(&self) -> Vec<ActivityId> {
        (0..self.n_activities).map(|i| ActivityId(i as u16)).collect()
    }
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    examples: Batch,
}

impl ClientDataset {
    pub fn new(client_id: usize, examples: Batch) -> Self {
        Self { client_id, examples }
    }

    pub fn n_examples(&self) -> usize {
        self.examples.size()
    }

    pub fn examples(&self) -> &Batch {
        &self.examples
    }

    pub fn num_batches(&self, batch_size: usize) -> usize {
        self.n_examples().div_ceil(batch_size)
    }

    /// Batches for one epoch: examples permuted by `rng` when given, then chunked.
    pub fn epoch_batches<R: Rng>(&self, batch_size: usize, rng: Option<&mut R>) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.n_examples()).collect();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        order.chunks(batch_size).map(|rows| self.examples.select_rows(rows)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientPool {
    pub clients: Vec<ClientDataset>,
    /// Held-out batches carrying targets for every activity.
    pub test_sets: Vec<Batch>,
    /// Mean of each client's input distribution.
    pub input_shifts: Vec<Array1<f64>>,
}

impl ClientPool {
    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn client(&self, id: usize) -> Option<&ClientDataset> {
        self.clients.get(id)
    }
}

struct ClusterGenerator {
    features: Array2<f64>,
    offset: Array1<f64>,
    readout: Array2<f64>,
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Product of Givens rotations with angles `angle_scale · N(0, 1)`.
fn small_rotation<R: Rng>(rng: &mut R, dim: usize, angle_scale: f64) -> Array2<f64> {
    let mut q = Array2::<f64>::eye(dim);
    for p in 0..dim {
        for r in (p + 1)..dim {
            let theta = angle_scale * rng.sample::<f64, _>(StandardNormal);
            let (s, c) = theta.sin_cos();
            let mut g = Array2::<f64>::eye(dim);
            g[[p, p]] = c;
            g[[r, r]] = c;
            g[[p, r]] = -s;
            g[[r, p]] = s;
            q = g.dot(&q);
        }
    }
    q
}

struct Generator {
    clusters: BTreeMap<usize, ClusterGenerator>,
    activity_maps: Vec<Array2<f64>>,
}

impl Generator {
    fn new(spec: &SyntheticTaskSpec, stream: SeedStream) -> Self {
        let mut common_rng = stream.label("common-features").rng();
        let common = normal_matrix(&mut common_rng, spec.hidden_dim, spec.input_dim, 1.0);
        let common_offset = normal_matrix(&mut common_rng, spec.hidden_dim, 1, 0.5);
        let share = spec.feature_sharing;
        let own = (1.0 - share * share).sqrt();
        let in_scale = 1.0 / (spec.input_dim as f64).sqrt();
        let mut clusters = BTreeMap::new();
        for a in 0..spec.n_activities {
            let c = spec.cluster_of(a);
            clusters.entry(c).or_insert_with(|| {
                let mut rng = stream.label("cluster").index(c as u64).rng();
                let g = normal_matrix(&mut rng, spec.hidden_dim, spec.input_dim, 1.0);
                let o = normal_matrix(&mut rng, spec.hidden_dim, 1, 0.5);
                let readout = normal_matrix(&mut rng, spec.output_dim, spec.hidden_dim, 1.0 / (spec.hidden_dim as f64).sqrt());
                ClusterGenerator {
                    features: (g * own + &common * share) * in_scale,
                    offset: (o * own + &common_offset * share).column(0).to_owned(),
                    readout,
                }
            });
        }
        let activity_maps = (0..spec.n_activities)
            .map(|a| {
                let mut rng = stream.label("rotation").index(a as u64).rng();
                small_rotation(&mut rng, spec.output_dim, spec.rotation)
            })
            .collect();
        Self { clusters, activity_maps }
    }

    fn targets<R: Rng>(&self, spec: &SyntheticTaskSpec, x: &Array2<f64>, rng: &mut R) -> BTreeMap<ActivityId, Targets> {
        let mut latent = BTreeMap::new();
        for (c, g) in &self.clusters {
            let mut h = x.dot(&g.features.t());
            h += &g.offset;
            h.mapv_inplace(f64::tanh);
            latent.insert(*c, h.dot(&g.readout.t()));
        }
        (0..spec.n_activities)
            .map(|a| {
                let z = &latent[&spec.cluster_of(a)];
                let mut y = z.dot(&self.activity_maps[a].t());
                if spec.noise_std > 0.0 {
                    y.mapv_inplace(|v| v + spec.noise_std * rng.sample::<f64, _>(StandardNormal));
                }
                let t = match spec.loss_kind(a) {
                    LossKind::SquaredError => Targets::Regression(y),
                    LossKind::CrossEntropy => Targets::Classes(
                        y.rows()
                            .into_iter()
                            .map(|row| {
                                row.iter()
                                    .enumerate()
                                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                                    .0
                            })
                            .collect(),
                    ),
                };
                (ActivityId(a as u16), t)
            })
            .collect()
    }
}

fn client_inputs<R: Rng>(rng: &mut R, shift: &Array1<f64>, count: usize) -> Array2<f64> {
    let mut x = normal_matrix(rng, count, shift.len(), 1.0);
    x += shift;
    x
}

const TEST_BATCH: usize = 256;

/// Builds `n_clients` datasets of about `examples_per_client` examples each,
/// plus a held-out test set drawn from the same client mixture.
pub fn generate_population(spec: &SyntheticTaskSpec, n_clients: usize, examples_per_client: usize) -> Result<ClientPool> {
    spec.validate()?;
    if n_clients == 0 {
        return Err(config_err("population.n_clients", "must be at least 1"));
    }
    if examples_per_client == 0 {
        return Err(Error::ShapeMismatch("clients need at least one example".into()));
    }
    let root = SeedStream::new(spec.seed).label("population");
    let generator = Generator::new(spec, root.label("generator"));
    let shifts: Vec<Array1<f64>> = (0..n_clients)
        .map(|k| {
            let mut rng = root.label("shift").index(k as u64).rng();
            Array1::from_shape_fn(spec.input_dim, |_| spec.heterogeneity * rng.sample::<f64, _>(StandardNormal))
        })
        .collect();
    let clients = (0..n_clients)
        .map(|k| {
            let mut rng = root.label("client").index(k as u64).rng();
            let jitter = if spec.size_jitter > 0.0 {
                spec.size_jitter * rng.random_range(-1.0..=1.0)
            } else {
                0.0
            };
            let count = ((examples_per_client as f64) * (1.0 + jitter)).round().max(1.0) as usize;
            let x = client_inputs(&mut rng, &shifts[k], count);
            let targets = generator.targets(spec, &x, &mut rng);
            ClientDataset::new(k, Batch::new(x, targets))
        })
        .collect();
    let mut rng = root.label("test").rng();
    let mut test_sets = Vec::new();
    let mut produced = 0;
    while produced < spec.test_examples {
        let count = TEST_BATCH.min(spec.test_examples - produced);
        let mut x = normal_matrix(&mut rng, count, spec.input_dim, 1.0);
        for (r, mut row) in x.rows_mut().into_iter().enumerate() {
            row += &shifts[(produced + r) % n_clients];
        }
        let targets = generator.targets(spec, &x, &mut rng);
        test_sets.push(Batch::new(x, targets));
        produced += count;
    }
    Ok(ClientPool {
        clients,
        test_sets,
        input_shifts: shifts,
    })
}
