use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use guardfl_core::attacks::AttackKind;
use guardfl_core::harness::{read_jsonl, run_experiment, write_summary_csv, ExperimentConfig};
use guardfl_core::sim::DefenseKind;

#[derive(Parser)]
#[command(name = "guardfl", version, about = "Federated-learning backdoor defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// none, guardfl, krum, multi_krum, ndc, weak_dp
        #[arg(long)]
        defense: Option<String>,
        /// none, blackbox, pgd_no_replace, pgd_replace, constrain_and_scale, dba
        #[arg(long)]
        attack: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for the JSON-lines report and CSV summary, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dump_graph: Option<PathBuf>,
        #[arg(long)]
        dump_clustering: Option<PathBuf>,
    },
    /// Convert a JSON-lines report into the CSV summary.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, defense, attack, seed, out, dump_graph, dump_clustering } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = ExperimentConfig::from_json(&text).context("parsing config")?;
            if let Some(d) = defense {
                cfg.sim.defense = d.parse::<DefenseKind>()?;
            }
            if let Some(a) = attack {
                cfg.attack.kind = a.parse::<AttackKind>()?;
            }
            if let Some(s) = seed {
                cfg.sim.seed = s;
            }
            if let Some(dir) = out {
                cfg.output.jsonl = Some(dir.join("results.jsonl"));
                cfg.output.csv = Some(dir.join("summary.csv"));
            }
            if dump_graph.is_some() {
                cfg.output.dump_graph = dump_graph;
            }
            if dump_clustering.is_some() {
                cfg.output.dump_clustering = dump_clustering;
            }
            cfg.validate().context("invalid config")?;
            let result = run_experiment(&cfg)?;
            println!("{}", result.summary.table());
        }
        Command::Report { input, out } => {
            let file = File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let reports = read_jsonl(BufReader::new(file))?;
            let w = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_summary_csv(w, &reports)?;
            println!("wrote {} rounds to {}", reports.len(), out.display());
        }
    }
    Ok(())
}
