use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use chronoprobe::embedcache::validate_tree;
use chronoprobe::runner::{self, JobInput, RunConfig};

#[derive(Parser)]
#[command(
    name = "chronoprobe",
    version,
    about = "Probe checkpoint series for linguistic knowledge"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "run.toml")]
    config: PathBuf,
    /// Worker threads; 0 uses every hardware thread.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Dataset split seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Stabilization tolerance.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// List the planned jobs and where their inputs stand.
    Plan,
    /// Execute the grid and write results and reports.
    Run,
    /// Rebuild the report bundle from existing results.
    Report,
    /// Decode and checksum every cache file under the cache root.
    ValidateCache {
        /// Cache root; defaults to the one in the config.
        #[arg(long)]
        root: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)
        .with_context(|| format!("loading {}", cli.config.display()))?;
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = cli.epsilon {
        cfg.epsilon = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn real_main(cli: Cli) -> Result<bool> {
    match &cli.command {
        Cmd::Plan => {
            let cfg = load_config(&cli)?;
            let plan = runner::plan(&cfg)?;
            for w in &plan.warnings {
                eprintln!("warning: {w}");
            }
            for job in &plan.jobs {
                let state = match &job.input {
                    JobInput::Ready(files) => format!("ready ({} file(s))", files.len()),
                    JobInput::PendingExtraction => "pending_extraction".into(),
                    JobInput::Missing => "skipped_missing_cache".into(),
                    JobInput::Unsupported(why) => format!("unsupported: {why}"),
                };
                println!("{}\t{state}", job.key);
            }
            println!("{} job(s)", plan.jobs.len());
            Ok(true)
        }
        Cmd::Run => {
            let cfg = load_config(&cli)?;
            let (_, outcome) = runner::run(&cfg)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            for r in outcome.results.iter().filter(|r| r.error.is_some()) {
                println!(
                    "{}\t{}\t{}",
                    r.key,
                    r.status.as_str(),
                    r.error.as_deref().unwrap_or("")
                );
            }
            let counts: Vec<String> = outcome
                .counts()
                .iter()
                .map(|(s, n)| format!("{}={n}", s.as_str()))
                .collect();
            println!(
                "{} job(s): {} ({} resumed); outputs in {}",
                outcome.results.len(),
                counts.join(" "),
                outcome.resumed,
                cfg.output_dir.display()
            );
            Ok(outcome.all_ok())
        }
        Cmd::Report => {
            let cfg = load_config(&cli)?;
            let files = runner::report_from_results(&cfg)?;
            for w in &files.warnings {
                eprintln!("warning: {w}");
            }
            for f in &files.files {
                println!("{}", cfg.output_dir.join(f).display());
            }
            Ok(true)
        }
        Cmd::ValidateCache { root } => {
            let root = match root {
                Some(r) => r.clone(),
                None => load_config(&cli)?.cache_root,
            };
            let checks = validate_tree(&root)?;
            let mut ok = true;
            for c in &checks {
                match &c.result {
                    Ok((_, n)) => println!("ok\t{}\t{n} record(s)", c.path.display()),
                    Err(e) => {
                        ok = false;
                        println!("{}\t{}\t{e}", e.code(), c.path.display());
                    }
                }
            }
            println!("{} file(s) checked", checks.len());
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
