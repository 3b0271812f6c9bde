//! Deterministic compute accounting.
//!
//! One unit is one scalar parameter gradient evaluation; forward work counts
//! half a unit per multiply-accumulate. Evaluation work is tracked apart from
//! the training total.

use std::io::Write;
use std::ops::AddAssign;

use crate::error::Result;
use crate::nn::Work;

/// Work attributed to one round or one phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostDelta {
    pub train: Work,
    pub probe: Work,
    pub eval: Work,
    pub aggregations: u64,
    pub client_updates: u64,
}

impl CostDelta {
    /// Training plus probing; evaluation excluded.
    pub fn work(&self) -> Work {
        self.train + self.probe
    }

    pub fn units(&self) -> f64 {
        self.work().units()
    }
}

impl AddAssign for CostDelta {
    fn add_assign(&mut self, rhs: Self) {
        self.train += rhs.train;
        self.probe += rhs.probe;
        self.eval += rhs.eval;
        self.aggregations += rhs.aggregations;
        self.client_updates += rhs.client_updates;
    }
}

/// Subtotal of one `(phase, group)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseCost {
    pub phase: String,
    pub group: String,
    pub rounds: u64,
    pub cost: CostDelta,
}

/// Running totals in first-use order of `(phase, group)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostLedger {
    entries: Vec<PhaseCost>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, phase: &str, group: &str, delta: CostDelta) {
        match self.entries.iter_mut().find(|e| e.phase == phase && e.group == group) {
            Some(e) => {
                e.rounds += 1;
                e.cost += delta;
            }
            None => self.entries.push(PhaseCost {
                phase: phase.to_string(),
                group: group.to_string(),
                rounds: 1,
                cost: delta,
            }),
        }
    }

    pub fn merge(&mut self, other: &CostLedger) {
        for e in &other.entries {
            match self.entries.iter_mut().find(|s| s.phase == e.phase && s.group == e.group) {
                Some(s) => {
                    s.rounds += e.rounds;
                    s.cost += e.cost;
                }
                None => self.entries.push(e.clone()),
            }
        }
    }

    pub fn entries(&self) -> &[PhaseCost] {
        &self.entries
    }

    pub fn totals(&self) -> CostDelta {
        let mut t = CostDelta::default();
        for e in &self.entries {
            t += e.cost;
        }
        t
    }

    /// Sum over every entry whose phase equals `phase`.
    pub fn phase_total(&self, phase: &str) -> CostDelta {
        let mut t = CostDelta::default();
        for e in self.entries.iter().filter(|e| e.phase == phase) {
            t += e.cost;
        }
        t
    }

    /// Training plus probe units.
    pub fn units(&self) -> f64 {
        self.totals().units()
    }

    pub fn probe_units(&self) -> f64 {
        self.totals().probe.units()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "phase",
            "group",
            "rounds",
            "aggregations",
            "client_updates",
            "train_grad",
            "train_forward",
            "probe_grad",
            "probe_forward",
            "eval_grad",
            "eval_forward",
            "units",
        ])?;
        let row = |w: &mut csv::Writer<W>, phase: &str, group: &str, rounds: u64, c: &CostDelta| {
            w.write_record([
                phase.to_string(),
                group.to_string(),
                rounds.to_string(),
                c.aggregations.to_string(),
                c.client_updates.to_string(),
                c.train.grad.to_string(),
                c.train.forward.to_string(),
                c.probe.grad.to_string(),
                c.probe.forward.to_string(),
                c.eval.grad.to_string(),
                c.eval.forward.to_string(),
                c.units().to_string(),
            ])
        };
        for e in &self.entries {
            row(&mut w, &e.phase, &e.group, e.rounds, &e.cost)?;
        }
        let rounds = self.entries.iter().map(|e| e.rounds).sum();
        row(&mut w, "total", "", rounds, &self.totals())?;
        w.flush()?;
        Ok(())
    }
}
