//! Run artifacts: CSV writers and readers, and the spec executor.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::affinity::RoundAffinity;
use crate::config::RunSpec;
use crate::error::{Error, Result};
use crate::federation::generate_population;
use crate::nn::ActivityId;
use crate::orchestrator::{activities_from, run, RoundRecord, RunResult, TrainingActivity, Workload};

pub const INCOMPLETE: &str = "INCOMPLETE";

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn opt(v: Option<&f64>) -> String {
    v.map(f64::to_string).unwrap_or_default()
}

pub fn write_rounds_csv<W: Write>(records: &[RoundRecord], activities: &[TrainingActivity], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["phase", "group", "round", "phase_round", "lr", "clients"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(activities.iter().map(|a| format!("train_{}", a.tag)));
    header.extend(activities.iter().map(|a| format!("val_{}", a.tag)));
    header.extend(
        ["train_grad", "train_forward", "probe_grad", "probe_forward", "eval_forward", "units"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.phase.clone(),
            r.group.clone(),
            r.round.to_string(),
            r.phase_round.to_string(),
            r.lr.to_string(),
            r.clients.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
        ];
        row.extend(activities.iter().map(|a| opt(r.train_loss.get(&a.id))));
        row.extend(activities.iter().map(|a| opt(r.val_loss.get(&a.id))));
        row.extend([
            r.cost.train.grad.to_string(),
            r.cost.train.forward.to_string(),
            r.cost.probe.grad.to_string(),
            r.cost.probe.forward.to_string(),
            r.cost.eval.forward.to_string(),
            r.cost.units().to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Off-diagonal affinities of one round; the diagonal and unmeasured pairs
/// are left empty.
pub fn write_round_affinity<W: Write>(round: &RoundAffinity, tag: impl Fn(ActivityId) -> char, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["source".to_string()];
    header.extend(round.ids.iter().map(|id| tag(*id).to_string()));
    w.write_record(&header)?;
    for i in 0..round.n() {
        let mut row = vec![tag(round.ids[i]).to_string()];
        row.extend((0..round.n()).map(|j| if i == j { String::new() } else { opt(round.get(i, j).as_ref()) }));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Final losses and cost of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    /// Per-activity test loss in activity order.
    pub losses: Vec<(char, f64)>,
    pub total: f64,
    pub units: f64,
    pub probe_units: f64,
}

impl RunSummary {
    pub fn from_result(seed: u64, result: &RunResult, activities: &[TrainingActivity]) -> Self {
        let losses = activities
            .iter()
            .map(|a| (a.tag, result.final_eval.per_activity.get(&a.id).copied().unwrap_or(f64::NAN)))
            .collect();
        Self {
            seed,
            losses,
            total: result.final_eval.total,
            units: result.ledger.units(),
            probe_units: result.ledger.probe_units(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "value"])?;
        w.write_record(["seed".to_string(), self.seed.to_string()])?;
        for (tag, l) in &self.losses {
            w.write_record([format!("loss_{tag}"), l.to_string()])?;
        }
        w.write_record(["total".to_string(), self.total.to_string()])?;
        w.write_record(["units".to_string(), self.units.to_string()])?;
        w.write_record(["probe_units".to_string(), self.probe_units.to_string()])?;
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut s = RunSummary {
            seed: 0,
            losses: Vec::new(),
            total: f64::NAN,
            units: f64::NAN,
            probe_units: f64::NAN,
        };
        let bad = |v: &str| Error::Io(format!("{}: cannot parse `{v}`", path.display()));
        for rec in r.records() {
            let rec = rec?;
            let (key, val) = (&rec[0], &rec[1]);
            match key {
                "seed" => s.seed = val.parse().map_err(|_| bad(val))?,
                "total" => s.total = val.parse().map_err(|_| bad(val))?,
                "units" => s.units = val.parse().map_err(|_| bad(val))?,
                "probe_units" => s.probe_units = val.parse().map_err(|_| bad(val))?,
                k => {
                    let tag = k
                        .strip_prefix("loss_")
                        .and_then(|t| t.chars().next())
                        .ok_or_else(|| bad(k))?;
                    s.losses.push((tag, val.parse().map_err(|_| bad(val))?));
                }
            }
        }
        Ok(s)
    }
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregate of every repeat of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub label: String,
    pub mode: String,
    pub repeats: usize,
    pub losses: Vec<(char, (f64, f64))>,
    pub total: (f64, f64),
    pub units: (f64, f64),
}

impl CellSummary {
    pub fn aggregate(label: &str, mode: &str, runs: &[RunSummary]) -> Self {
        let col = |f: &dyn Fn(&RunSummary) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
        let tags: Vec<char> = runs.first().map(|r| r.losses.iter().map(|(t, _)| *t).collect()).unwrap_or_default();
        let losses = tags
            .iter()
            .enumerate()
            .map(|(k, t)| (*t, col(&|r| r.losses.get(k).map(|(_, l)| *l).unwrap_or(f64::NAN))))
            .collect();
        Self {
            label: label.to_string(),
            mode: mode.to_string(),
            repeats: runs.len(),
            losses,
            total: col(&|r| r.total),
            units: col(&|r| r.units),
        }
    }
}

pub fn write_cell_summaries<W: Write>(cells: &[CellSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let tags: Vec<char> = cells.first().map(|c| c.losses.iter().map(|(t, _)| *t).collect()).unwrap_or_default();
    let mut header: Vec<String> = vec!["cell".into(), "mode".into(), "repeats".into()];
    for t in &tags {
        header.push(format!("loss_{t}_mean"));
        header.push(format!("loss_{t}_std"));
    }
    header.extend(["total_mean", "total_std", "units_mean", "units_std"].map(String::from));
    w.write_record(&header)?;
    for c in cells {
        let mut row = vec![c.label.clone(), c.mode.clone(), c.repeats.to_string()];
        for (_, (m, s)) in &c.losses {
            row.push(m.to_string());
            row.push(s.to_string());
        }
        row.extend([c.total.0, c.total.1, c.units.0, c.units.1].map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every artifact of one run into `dir`.
pub fn write_run(dir: &Path, seed: u64, result: &RunResult, activities: &[TrainingActivity]) -> Result<RunSummary> {
    let tag = |id: ActivityId| activities.iter().find(|a| a.id == id).map(|a| a.tag).unwrap_or('?');
    write_rounds_csv(&result.records, activities, create(&dir.join("rounds.csv"))?)?;
    for (r, a) in &result.affinity_rounds {
        write_round_affinity(a, tag, create(&dir.join(format!("affinity_round_{r}.csv")))?)?;
    }
    if let Some(m) = &result.matrix {
        m.write_csv(create(&dir.join("affinity.csv"))?, |id| tag(id).to_string())?;
    }
    if !result.partitions.is_empty() {
        let mut f = create(&dir.join("partition.txt"))?;
        for p in &result.partitions {
            writeln!(f, "{}", p.to_text(tag))?;
        }
    }
    result.ledger.write_csv(create(&dir.join("ledger.csv"))?)?;
    if !result.client_losses.is_empty() {
        let mut w = csv::Writer::from_writer(create(&dir.join("clients.csv"))?);
        w.write_record(["client", "total_loss"])?;
        for (c, l) in result.client_losses.iter().enumerate() {
            w.write_record([c.to_string(), l.to_string()])?;
        }
        w.flush()?;
    }
    let summary = RunSummary::from_result(seed, result, activities);
    summary.write_csv(create(&dir.join("summary.csv"))?)?;
    Ok(summary)
}

/// Outcome of executing a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub cells: Vec<CellSummary>,
    pub run_dirs: Vec<PathBuf>,
    pub violations: Vec<String>,
}

impl Execution {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Runs every cell and repeat of `spec`, writing artifacts under `out`.
/// A run directory holds an `INCOMPLETE` marker until its artifacts are done.
pub fn execute(spec: &RunSpec, out: &Path) -> Result<Execution> {
    fs::create_dir_all(out)?;
    let shape = spec.shape();
    let mut cells = Vec::new();
    let mut run_dirs = Vec::new();
    let mut violations = Vec::new();
    for cell in spec.cells() {
        let cell_dir = if cell.label.is_empty() { out.to_path_buf() } else { out.join(&cell.label) };
        let mut runs = Vec::new();
        for k in 0..spec.run.repeat {
            let seed = spec.run.seed.wrapping_add(k as u64);
            let dir = cell_dir.join(format!("seed_{seed}"));
            fs::create_dir_all(&dir)?;
            let marker = dir.join(INCOMPLETE);
            fs::write(&marker, "run started\n")?;
            let attempt = (|| {
                let task = spec.task_for(seed);
                let pool = generate_population(&task, spec.run.clients, spec.run.examples_per_client)?;
                let activities = activities_from(&task);
                let work = Workload {
                    pool: &pool,
                    activities: &activities,
                    shape: &shape,
                    hyper: &spec.hyper,
                };
                let result = run(work, &spec.regime_config(&cell, seed))?;
                let summary = write_run(&dir, seed, &result, &activities)?;
                Ok::<_, Error>((summary, result.violations))
            })();
            match attempt {
                Ok((summary, v)) => {
                    let label = if cell.label.is_empty() { "base" } else { cell.label.as_str() };
                    violations.extend(v.into_iter().map(|m| format!("{label} seed {seed}: {m}")));
                    fs::remove_file(&marker)?;
                    runs.push(summary);
                    run_dirs.push(dir);
                }
                Err(e) => {
                    fs::write(&marker, format!("{e}\n"))?;
                    return Err(e);
                }
            }
        }
        let label = if cell.label.is_empty() { spec.run.name.clone() } else { cell.label.clone() };
        cells.push(CellSummary::aggregate(&label, cell.regime.mode.name(), &runs));
    }
    write_cell_summaries(&cells, create(&out.join("summary.csv"))?)?;
    Ok(Execution {
        cells,
        run_dirs,
        violations,
    })
}

/// Re-reads the per-run summaries under each cell and re-aggregates them.
pub fn reaggregate(spec: &RunSpec, out: &Path) -> Result<Vec<CellSummary>> {
    spec.cells()
        .iter()
        .map(|cell| {
            let cell_dir = if cell.label.is_empty() { out.to_path_buf() } else { out.join(&cell.label) };
            let runs = (0..spec.run.repeat)
                .map(|k| {
                    let seed = spec.run.seed.wrapping_add(k as u64);
                    RunSummary::read_csv(&cell_dir.join(format!("seed_{seed}")).join("summary.csv"))
                })
                .collect::<Result<Vec<_>>>()?;
            let label = if cell.label.is_empty() { spec.run.name.clone() } else { cell.label.clone() };
            Ok(CellSummary::aggregate(&label, cell.regime.mode.name(), &runs))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn summary_round_trip() {
        let s = RunSummary {
            seed: 7,
            losses: vec![('b', 0.1 + 0.2), ('a', 1.0 / 3.0)],
            total: 0.1 + 0.2 + 1.0 / 3.0,
            units: 12345.5,
            probe_units: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        s.write_csv(create(&path).unwrap()).unwrap();
        assert_eq!(RunSummary::read_csv(&path).unwrap(), s);
    }
}
