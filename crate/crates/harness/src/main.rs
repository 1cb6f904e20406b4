use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualenkf::{simulate_truth, NoiseStreams};
use dualenkf_harness::records::{write_records_to, write_truth_to};
use dualenkf_harness::{
    convergence_study, load_scenario, read_records, run_experiment, summarize, sweep_gamma, verify_suite, write_records,
    HarnessError, OutputFormat, Result, RunRecord, Scenario,
};

#[derive(Parser)]
#[command(name = "dualenkf", version, about = "Twin experiments for ensemble Kalman filter variants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate truth trajectories and observations only.
    Simulate(Common),
    /// Run the scenario's filter variants against the exact filter.
    Filter(Common),
    /// Sweep the scenario's gamma grid, or fit error vs N over its ensemble sizes.
    Sweep(Common),
    /// Check the estimation/control identities on the scenario's model.
    Verify(Common),
    /// Summarize a records file.
    Report {
        /// CSV or .jsonl records file.
        records: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    /// Output path; defaults to the scenario's, else stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<OutputFormat>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

fn parse_format(s: &str) -> std::result::Result<OutputFormat, String> {
    s.parse()
}

impl Common {
    fn load(&self) -> Result<Scenario> {
        let mut scenario = load_scenario(&self.scenario)?;
        if let Some(seed) = self.seed {
            scenario.seed = seed;
        }
        if let Some(k) = self.replicates {
            scenario.replicates = k;
        }
        if let Some(format) = self.format {
            scenario.format = format;
        }
        if let Some(out) = &self.out {
            scenario.output = Some(out.clone());
        }
        scenario.validate()?;
        Ok(scenario)
    }

    fn info(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn emit_records(common: &Common, scenario: &Scenario, records: &[RunRecord]) -> Result<()> {
    match &scenario.output {
        Some(path) => {
            let script = write_records(records, path, scenario.format)?;
            common.info(format!(
                "wrote {} records to {} (plot: {})",
                records.len(),
                path.display(),
                script.display()
            ));
        }
        None => {
            let stdout = std::io::stdout().lock();
            write_records_to(records, stdout, scenario.format).map_err(|e| HarnessError::io("<stdout>", e))?;
        }
    }
    Ok(())
}

fn simulate(common: &Common) -> Result<()> {
    let scenario = common.load()?;
    let runs = (0..scenario.replicates as u64)
        .map(|r| {
            let streams = NoiseStreams::new(scenario.seed).for_replicate(r);
            simulate_truth(&scenario.model, scenario.horizon, &streams).map(|tr| (r, tr))
        })
        .collect::<dualenkf::Result<Vec<_>>>()?;
    match &scenario.output {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
            write_truth_to(&runs, file, scenario.format).map_err(|e| HarnessError::io(path, e))?;
            common.info(format!("wrote {} trajectories to {}", runs.len(), path.display()));
        }
        None => {
            write_truth_to(&runs, std::io::stdout().lock(), scenario.format)
                .map_err(|e| HarnessError::io("<stdout>", e))?;
        }
    }
    Ok(())
}

fn filter(common: &Common) -> Result<()> {
    let scenario = common.load()?;
    let out = run_experiment(&scenario)?;
    emit_records(common, &scenario, &out.records)?;
    for f in &out.failures {
        eprintln!("run {} failed: {}", f.run_id, f.error);
    }
    match out.failure_error() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn sweep(common: &Common) -> Result<()> {
    let scenario = common.load()?;
    if scenario.variants.len() > 1 {
        let grid: Vec<_> = scenario.variants.iter().map(|v| v.gammas).collect();
        let out = sweep_gamma(&scenario, &grid)?;
        emit_records(common, &scenario, &out.experiment.records)?;
        for p in &out.points {
            common.info(format!(
                "gamma=({}, {}) {} failed_replicates={}",
                p.gammas.gamma1(),
                p.gammas.gamma2(),
                if p.feasible { "feasible" } else { "INFEASIBLE" },
                p.failed_replicates
            ));
        }
        for f in &out.experiment.failures {
            eprintln!("run {} failed: {}", f.run_id, f.error);
        }
        return Ok(());
    }
    if scenario.ensemble_sizes.len() >= 3 {
        let out = convergence_study(&scenario, &scenario.ensemble_sizes, scenario.replicates)?;
        emit_records(common, &scenario, &out.records)?;
        for w in &out.warnings {
            eprintln!("warning: {w}");
        }
        for (n, err) in &out.points {
            common.info(format!("N={n:<8} rms final mean error {err:.6e}"));
        }
        common.info(format!("log-log slope {:.4}", out.slope));
        return Ok(());
    }
    Err(HarnessError::validation(
        "variant",
        "sweep needs a gamma_grid or at least 3 ensemble sizes",
    ))
}

fn verify(common: &Common) -> Result<()> {
    let scenario = common.load()?;
    let report = verify_suite(&scenario);
    if !common.quiet {
        println!("{report}");
    }
    let failed: Vec<_> = report.failures().collect();
    match failed.first() {
        None => Ok(()),
        Some(first) => Err(HarnessError::ReplicatesFailed {
            count: failed.len(),
            first: format!("check {} failed", first.name),
        }),
    }
}

fn report(path: &Path, quiet: bool) -> Result<()> {
    let records = read_records(path)?;
    if !quiet {
        let mut out = std::io::stdout().lock();
        writeln!(out, "{}", summarize(&records)).map_err(|e| HarnessError::io("<stdout>", e))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Filter(c) => filter(c),
        Command::Sweep(c) => sweep(c),
        Command::Verify(c) => verify(c),
        Command::Report { records, quiet } => report(records, *quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
