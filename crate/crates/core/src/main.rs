use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mufl::config::RunSpec;
use mufl::oracle::{gradient_suite, partition_suite, GRADIENT_TOLERANCE};
use mufl::report::{execute, reaggregate};

#[derive(Parser)]
#[command(name = "mufl", version, about = "Multi-activity federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a run spec, or just validate it with --check.
    Run {
        /// TOML run spec.
        spec: Option<PathBuf>,
        /// Output directory; overrides `run.out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed; overrides `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Validate the spec and exit.
        #[arg(long)]
        check: bool,
        /// Run the gradient and partition-solver self-checks first.
        #[arg(long)]
        oracle: bool,
    },
}

fn oracles() -> bool {
    let mut ok = true;
    match gradient_suite(100, 0) {
        Ok(g) => {
            let pass = g.max_rel_error < GRADIENT_TOLERANCE;
            ok &= pass;
            println!(
                "gradient check: {} cases, max relative error {:.3e} [{}]",
                g.cases,
                g.max_rel_error,
                if pass { "ok" } else { "FAIL" }
            );
        }
        Err(e) => {
            eprintln!("gradient check failed: {e}");
            ok = false;
        }
    }
    match partition_suite(&[4, 5, 6, 7, 8], &[2, 3, 4], 200, 0) {
        Ok(p) => {
            let pass = p.mismatches == 0;
            ok &= pass;
            println!(
                "partition solvers: {} instances, {} mismatches, max gap {:.3e} [{}]",
                p.instances,
                p.mismatches,
                p.max_score_gap,
                if pass { "ok" } else { "FAIL" }
            );
        }
        Err(e) => {
            eprintln!("partition check failed: {e}");
            ok = false;
        }
    }
    ok
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let Cli { command } = Cli::parse();
    let Command::Run {
        spec,
        out,
        seed,
        check,
        oracle,
    } = command;

    let mut ok = true;
    if oracle {
        ok &= oracles();
    }
    let Some(path) = spec else {
        if !oracle {
            eprintln!("error: a spec file is required unless --oracle is given");
            return ExitCode::from(2);
        }
        return if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE };
    };
    let mut spec = match RunSpec::from_file(&path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(s) = seed {
        spec.run.seed = s;
    }
    if check {
        println!("{}: ok ({} cell(s) x {} repeat(s))", path.display(), spec.cells().len(), spec.run.repeat);
        return if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE };
    }
    let out = out
        .or_else(|| spec.run.out.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&spec.run.name));
    let exec = match execute(&spec, &out) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    for c in &exec.cells {
        println!(
            "{:<24} {:<13} total test loss {:.5} ± {:.5}  cost {:.4e} units",
            c.label, c.mode, c.total.0, c.total.1, c.units.0
        );
    }
    match reaggregate(&spec, &out) {
        Ok(again) if again == exec.cells => {}
        Ok(_) => {
            eprintln!("invariant: re-aggregated artifacts differ from the summary");
            ok = false;
        }
        Err(e) => {
            eprintln!("invariant: cannot re-read artifacts: {e}");
            ok = false;
        }
    }
    for v in &exec.violations {
        eprintln!("invariant: {v}");
    }
    ok &= exec.passed();
    println!("artifacts in {}", out.display());
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
