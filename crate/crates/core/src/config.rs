//! TOML run specifications.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::affinity::{AffinityProbe, FinalizePolicy};
use crate::error::{config_err, Error, Result};
use crate::federation::SyntheticTaskSpec;
use crate::nn::{HyperParams, ModelShape};
use crate::orchestrator::{LrSchedule, Mode, RegimeConfig, Solver};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub seed: u64,
    pub repeat: usize,
    pub clients: usize,
    pub examples_per_client: usize,
    pub out: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            repeat: 1,
            clients: 32,
            examples_per_client: 160,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeSection {
    pub mode: Mode,
    pub rounds: usize,
    pub r0: usize,
    pub r1: usize,
    pub r2: usize,
    pub splits: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub lr_schedule: LrSchedule,
    pub solver: Solver,
    pub partition: Option<String>,
    pub validate_rounds: bool,
}

impl Default for RegimeSection {
    fn default() -> Self {
        let d = RegimeConfig::default();
        Self {
            mode: d.mode,
            rounds: d.rounds,
            r0: d.r0,
            r1: d.r1,
            r2: d.r2,
            splits: d.splits,
            clients_per_round: d.clients_per_round,
            local_epochs: d.local_epochs,
            lr_schedule: d.lr_schedule,
            solver: d.solver,
            partition: d.partition,
            validate_rounds: d.validate_rounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub enabled: Option<bool>,
    pub frequency: usize,
    pub active_rounds: Vec<usize>,
    pub finalize: FinalizePolicy,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let d = AffinityProbe::default();
        Self {
            enabled: None,
            frequency: d.frequency,
            active_rounds: d.active_rounds.into_iter().collect(),
            finalize: d.finalize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub trunk_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            trunk_hidden: vec![16, 4],
            head_hidden: vec![],
        }
    }
}

/// List-valued fields expanded into a grid of cells.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub mode: Vec<Mode>,
    pub splits: Vec<usize>,
    pub r0: Vec<usize>,
    pub local_epochs: Vec<usize>,
    pub clients_per_round: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub run: RunSection,
    pub regime: RegimeSection,
    pub probe: ProbeSection,
    pub hyper: HyperParams,
    pub task: SyntheticTaskSpec,
    pub model: ModelSection,
    pub sweep: SweepSection,
}

/// One grid cell: a label and the values it overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub regime: RegimeSection,
}

impl RunSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: RunSpec = toml::from_str(text).map_err(|e| Error::Config {
            field: e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_default(),
            reason: e.message().to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.task.input_dim,
            trunk_hidden: self.model.trunk_hidden.clone(),
            head_hidden: self.model.head_hidden.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.repeat == 0 {
            return Err(config_err("run.repeat", "must be at least 1"));
        }
        if self.run.clients == 0 {
            return Err(config_err("run.clients", "must be at least 1"));
        }
        if self.run.examples_per_client == 0 {
            return Err(config_err("run.examples_per_client", "must be at least 1"));
        }
        if self.model.trunk_hidden.contains(&0) {
            return Err(config_err("model.trunk_hidden", "layer widths must be positive"));
        }
        if self.model.head_hidden.contains(&0) {
            return Err(config_err("model.head_hidden", "layer widths must be positive"));
        }
        self.task.validate()?;
        self.hyper.validate()?;
        for cell in self.cells() {
            self.regime_config(&cell, self.run.seed)
                .validate(self.task.n_activities, self.run.clients)
                .map_err(|e| match e {
                    Error::Config { field, reason } if !cell.label.is_empty() => Error::Config {
                        field,
                        reason: format!("{reason} (sweep cell {})", cell.label),
                    },
                    other => other,
                })?;
        }
        Ok(())
    }

    /// The sweep grid in a fixed order; a single unlabeled cell without sweeps.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = vec![Cell {
            label: String::new(),
            regime: self.regime.clone(),
        }];
        fn expand<T: Clone + std::fmt::Debug>(
            cells: Vec<Cell>,
            values: &[T],
            name: &str,
            show: impl Fn(&T) -> String,
            set: impl Fn(&mut RegimeSection, T),
        ) -> Vec<Cell> {
            if values.is_empty() {
                return cells;
            }
            let mut out = Vec::new();
            for c in cells {
                for v in values {
                    let mut regime = c.regime.clone();
                    set(&mut regime, v.clone());
                    let part = format!("{name}={}", show(v));
                    let label = if c.label.is_empty() { part } else { format!("{}_{part}", c.label) };
                    out.push(Cell { label, regime });
                }
            }
            out
        }
        let s = &self.sweep;
        cells = expand(cells, &s.mode, "mode", |m| m.name().to_string(), |r, v| r.mode = v);
        cells = expand(cells, &s.splits, "m", usize::to_string, |r, v| r.splits = v);
        cells = expand(cells, &s.r0, "r0", usize::to_string, |r, v| r.r0 = v);
        cells = expand(cells, &s.local_epochs, "e", usize::to_string, |r, v| r.local_epochs = v);
        cells = expand(cells, &s.clients_per_round, "k", usize::to_string, |r, v| r.clients_per_round = v);
        cells
    }

    pub fn regime_config(&self, cell: &Cell, seed: u64) -> RegimeConfig {
        let r = &cell.regime;
        RegimeConfig {
            mode: r.mode,
            rounds: r.rounds,
            r0: r.r0,
            r1: r.r1,
            r2: r.r2,
            splits: r.splits,
            clients_per_round: r.clients_per_round,
            local_epochs: r.local_epochs,
            probe: AffinityProbe {
                frequency: self.probe.frequency,
                active_rounds: self.probe.active_rounds.iter().copied().collect::<BTreeSet<_>>(),
                finalize: self.probe.finalize,
            },
            probe_enabled: self.probe.enabled,
            lr_schedule: r.lr_schedule,
            solver: r.solver,
            partition: r.partition.clone(),
            validate_rounds: r.validate_rounds,
            seed,
        }
    }

    /// The task for repeat `k`, with its data seed offset by `k`.
    pub fn task_for(&self, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            seed: self.task.seed.wrapping_add(seed),
            ..self.task.clone()
        }
    }
}
