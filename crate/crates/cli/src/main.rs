use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semloc::io;
use semloc::pipeline::batch_localize;
use semloc::synth::{evaluate, generate_scene, parse_thresholds, SceneConfig};

#[derive(Parser)]
#[command(name = "semloc", version, about = "Visual localization against a labelled 3D map")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a map file from a reconstruction and its database image assets.
    BuildMap {
        #[arg(long)]
        assets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize one query directory, or every query of an asset bundle.
    Localize {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Generate a synthetic scene with ground truth.
    SynthGen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Score localization results against ground-truth poses.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Pairs `translation,degrees` separated by `;`.
        #[arg(long, default_value = "0.25,2;0.5,5;5,10")]
        thresholds: String,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(String),
}

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::BuildMap { assets, out } => {
            let map = io::build_map(&assets).map_err(data)?;
            io::save_map(&map, &out).map_err(data)?;
            println!("map: {} images, {} points", map.images.len(), map.points.len());
        }
        Command::Localize { map, query, config, out, seed, workers } => {
            if workers == 0 {
                return Err(Failure::Usage("--workers must be at least 1".into()));
            }
            let mut cfg = io::parse_pipeline_config(&config, &io::read_text(&config).map_err(data)?).map_err(data)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let map = io::load_map(&map).map_err(data)?;
            let queries = io::load_query(&query, &map.families).map_err(data)?;
            let results = batch_localize(&queries, &map, &cfg, workers);
            io::write_results(&results, &out).map_err(data)?;
            let ok = results.iter().filter(|r| r.pose.is_some()).count();
            println!("localized {ok}/{}", results.len());
        }
        Command::SynthGen { config, out, seed } => {
            let text = io::read_text(&config).map_err(data)?;
            let mut cfg = SceneConfig::parse(&config, &text).map_err(data)?;
            cfg.seed = seed;
            let g = generate_scene(cfg, &out).map_err(data)?;
            println!(
                "scene: {} db images, {} queries, {} map points",
                g.database().len(),
                g.config().n_queries,
                g.sfm().points.len()
            );
        }
        Command::Eval { results, gt, thresholds, out } => {
            let thresholds = parse_thresholds(&thresholds).map_err(|e| Failure::Usage(e.to_string()))?;
            let results = io::load_results(&results).map_err(data)?;
            let gt = io::load_ground_truth(&gt).map_err(data)?;
            let report = evaluate(&results, &gt, &thresholds).map_err(data)?;
            io::write_text(&out, &report.format()).map_err(data)?;
            print!("{}", report.format());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
