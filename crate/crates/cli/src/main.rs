use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{Days, NaiveDate};
use clap::{Args, Parser, Subcommand};

use mptt_core::data::generate_synthetic;
use mptt_core::experiment::{self, Emit, ExperimentSpec, RunResult};
use mptt_core::Error;

#[derive(Parser)]
#[command(name = "mptt", version, about = "Train and compare recurrent sequence strategies on long time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, infer and evaluate one configuration (or each run of its sweep).
    Run(RunArgs),
    /// Run several configurations and print a comparison grid.
    Compare(CompareArgs),
    /// Write the synthetic dataset of a configuration as CSV. Dates count
    /// days from 2000-01-01 so the file loads back as a CSV source.
    Generate(GenerateArgs),
    /// Print the accepted train/inference pairs.
    Pairs,
}

#[derive(Args)]
struct Common {
    /// Worker threads for seeds.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Replace the configured seed list with this single seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// What to write besides the manifest and epoch log.
    #[arg(long, value_parser = parse_emit)]
    emit: Vec<Emit>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CompareArgs {
    /// One or more configurations; sweeps are expanded.
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_emit(s: &str) -> Result<Emit, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(&a),
        Command::Compare(a) => compare(&a),
        Command::Generate(a) => generate(&a),
        Command::Pairs => {
            print!("{}", experiment::compatibility_table());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn load_specs(paths: &[PathBuf], common: &Common) -> mptt_core::Result<Vec<ExperimentSpec>> {
    let mut out = Vec::new();
    for p in paths {
        let mut spec = ExperimentSpec::load(p)?;
        if let Some(seed) = common.seed_override {
            spec.model.seeds = vec![seed];
        }
        if let Some(dir) = &common.out {
            spec.output.dir = Some(dir.clone());
        }
        if !common.emit.is_empty() {
            spec.output.emit = common.emit.clone();
        }
        out.extend(experiment::expand_sweep(&spec)?);
    }
    Ok(out)
}

fn run_all(specs: &[ExperimentSpec], jobs: usize) -> mptt_core::Result<Vec<RunResult>> {
    let many = specs.len() > 1;
    let mut results = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let result = experiment::run_experiment(spec, jobs)?;
        println!(
            "{:<20} fraction={:<6} W={:<4} rmse={:.6} r2={:.4} s/epoch={:.5}",
            spec.pair_label(),
            spec.dataset.data_fraction,
            spec.segmentation.window,
            result.mean.scalar("rmse").unwrap_or(f64::NAN),
            result.mean.scalar("r2").unwrap_or(f64::NAN),
            result.mean.seconds_per_epoch
        );
        if let Some(dir) = &spec.output.dir {
            let dir = if many { dir.join(format!("run{i:03}")) } else { dir.clone() };
            experiment::write_bundle(&result, &dir)?;
        }
        results.push(result);
    }
    Ok(results)
}

fn run(a: &RunArgs) -> mptt_core::Result<()> {
    let specs = load_specs(std::slice::from_ref(&a.config), &a.common)?;
    run_all(&specs, a.common.jobs)?;
    Ok(())
}

fn compare(a: &CompareArgs) -> mptt_core::Result<()> {
    let specs = load_specs(&a.config, &a.common)?;
    let results = run_all(&specs, a.common.jobs)?;
    let grid = experiment::compare(&results)?;
    let csv = grid.to_csv();
    print!("{csv}");
    if let Some(dir) = &a.common.out {
        write_file(&dir.join("comparison.csv"), &csv)?;
    }
    Ok(())
}

fn generate(a: &GenerateArgs) -> mptt_core::Result<()> {
    let spec = ExperimentSpec::load(&a.config)?;
    let entities = generate_synthetic(&spec.synthetic, spec.dataset.seed)?;
    let first = &entities[0];
    let start = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
    let mut s = format!(
        "entity,date,step,doy,{},{}\n",
        first.driver_names.join(","),
        first.response_names.join(",")
    );
    for e in &entities {
        for t in 0..e.len() {
            let vals: Vec<String> = e
                .inputs
                .row(t)
                .iter()
                .chain(e.responses.row(t))
                .map(|v| v.to_string())
                .collect();
            let date = start + Days::new(t as u64);
            s.push_str(&format!("{},{date},{t},{},{}\n", e.entity_id, e.day_of_year[t], vals.join(",")));
        }
    }
    write_file(&a.out, &s)
}

fn write_file(path: &Path, contents: &str) -> mptt_core::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.to_path_buf(), source: e })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}
