#![allow(dead_code)]

use mufl::config::RunSpec;
use mufl::federation::{generate_population, ClientPool};
use mufl::nn::{HyperParams, ModelShape};
use mufl::orchestrator::{activities_from, run, Mode, RegimeConfig, RunResult, TrainingActivity, Workload};

/// Everything needed to run one repeat of a spec.
pub struct Fixture {
    pub spec: RunSpec,
    pub seed: u64,
    pub pool: ClientPool,
    pub activities: Vec<TrainingActivity>,
    pub shape: ModelShape,
    pub hyper: HyperParams,
}

impl Fixture {
    pub fn new(spec: &RunSpec, seed: u64) -> Self {
        let task = spec.task_for(seed);
        let pool = generate_population(&task, spec.run.clients, spec.run.examples_per_client).unwrap();
        Self {
            spec: spec.clone(),
            seed,
            pool,
            activities: activities_from(&task),
            shape: spec.shape(),
            hyper: spec.hyper,
        }
    }

    pub fn work(&self) -> Workload<'_> {
        Workload {
            pool: &self.pool,
            activities: &self.activities,
            shape: &self.shape,
            hyper: &self.hyper,
        }
    }

    /// The spec's regime with `mode` and `splits` overridden.
    pub fn config(&self, mode: Mode, splits: usize) -> RegimeConfig {
        let cell = self.spec.cells().remove(0);
        RegimeConfig {
            mode,
            splits,
            ..self.spec.regime_config(&cell, self.seed)
        }
    }

    pub fn run(&self, cfg: &RegimeConfig) -> RunResult {
        let result = run(self.work(), cfg).unwrap();
        assert!(result.passed(), "{:?}", result.violations);
        result
    }

    pub fn partition_text(&self, result: &RunResult, k: usize) -> String {
        let work = self.work();
        result.partitions[k].to_text(|id| work.tag(id))
    }
}

pub fn spec_file(name: &str) -> RunSpec {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("specs").join(name);
    RunSpec::from_file(&path).unwrap()
}

/// Units of the default architecture (input 8, trunk 16 then 4, linear heads
/// of width 3) with 32 clients of 160 examples, batches of 16, `K = 4`, `E = 1`.
pub mod closed_form {
    const B: f64 = 16.0;
    const BATCHES: f64 = 10.0;
    const K: f64 = 4.0;
    // 8·16 + 16 and 16·4 + 4 parameters; 8·16 + 16·4 multiply-accumulates.
    const TRUNK_PARAMS: f64 = 212.0;
    const TRUNK_MACS: f64 = 192.0;
    const HEAD_PARAMS: f64 = 15.0;
    const HEAD_MACS: f64 = 12.0;
    const STEPS_PER_EPOCH: f64 = 2.0;

    /// One federated round of a model serving `g` activities.
    pub fn round(g: usize) -> f64 {
        let g = g as f64;
        K * BATCHES * B * ((TRUNK_PARAMS + g * HEAD_PARAMS) + 0.5 * (TRUNK_MACS + g * HEAD_MACS))
    }

    /// Measurement work added to one round of a model serving `g` activities.
    pub fn probe(g: usize) -> f64 {
        let per_source = B * TRUNK_PARAMS + 0.5 * B * (TRUNK_MACS + (g as f64 - 1.0) * HEAD_MACS);
        K * STEPS_PER_EPOCH * g as f64 * per_source
    }

    /// `rounds` rounds for each listed group size.
    pub fn phase(rounds: usize, sizes: &[usize]) -> f64 {
        rounds as f64 * sizes.iter().map(|&g| round(g)).sum::<f64>()
    }
}
