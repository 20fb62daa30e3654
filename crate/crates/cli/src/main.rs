use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aufed::data::{partition_clients, Dataset, DATASET_MAGIC};
use aufed::experiment::{self, ExperimentConfig};
use aufed::fed::Strategy;
use aufed::params::PARAMS_MAGIC;
use aufed::{Error, ParamSet};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "aufed", version, about = "Synthetic micro-expression experiments with simulated federated training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data, train every listed strategy and write the results.
    Run(RunArgs),
    /// Write the per-client datasets only.
    Generate(Overrides),
    /// Dump a dataset or parameter file as JSON lines.
    Inspect {
        file: PathBuf,
        /// Samples to print from a dataset; all when unset.
        #[arg(long)]
        limit: Option<usize>,
        /// Include the raw ROI and flow values.
        #[arg(long)]
        full: bool,
    },
    /// Print the strategy ids.
    ListStrategies,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    clients: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Overrides,
    /// Repeat to run several; replaces the configured list.
    #[arg(long)]
    strategy: Vec<Strategy>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    list_strategies: bool,
}

impl Overrides {
    fn load(&self) -> aufed::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(c) = self.clients {
            cfg.clients = c;
        }
        Ok(cfg)
    }
}

fn list_strategies() {
    for s in Strategy::ALL {
        println!("{s}");
    }
}

fn run(args: &RunArgs) -> aufed::Result<()> {
    if args.list_strategies {
        list_strategies();
        return Ok(());
    }
    let mut cfg = args.common.load()?;
    if !args.strategy.is_empty() {
        cfg.strategies = args.strategy.clone();
    }
    if let Some(r) = args.rounds {
        cfg.federation.rounds = r;
    }
    cfg.validate()?;
    let report = experiment::run(&cfg)?;
    report.write(&cfg.out_dir)?;
    for r in &report.runs {
        println!("{:<10} mean per-client UF1 {:.4}", r.strategy.id(), r.mean_final_uf1());
    }
    println!("results in {}", cfg.out_dir.display());
    Ok(())
}

fn generate(args: &Overrides) -> aufed::Result<()> {
    let cfg = args.load()?;
    let priors = cfg.validate()?;
    let data = experiment::generate(&cfg, &priors)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    for (i, part) in partition_clients(&data, cfg.clients)?.iter().enumerate() {
        let path = cfg.out_dir.join(format!("client_{i}.dset"));
        part.write(&path)?;
        println!("{}: {} samples, subjects {:?}", path.display(), part.len(), part.subjects());
    }
    Ok(())
}

fn inspect(path: &Path, limit: Option<usize>, full: bool) -> aufed::Result<()> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(DATASET_MAGIC) {
        let data = Dataset::from_bytes(&bytes)?;
        let header = json!({
            "kind": "dataset",
            "samples": data.len(),
            "roi_count": data.roi_count,
            "of_side": data.of_side,
            "au_count": data.au_count,
            "classes": data.classes,
            "class_counts": data.class_counts(),
            "subjects": data.subjects(),
        });
        println!("{header}");
        for (i, s) in data.samples.iter().take(limit.unwrap_or(usize::MAX)).enumerate() {
            let aus: Vec<usize> = (0..data.au_count).filter(|&m| s.aus.contains(m)).collect();
            let mut line = json!({
                "index": i,
                "subject": s.subject,
                "emotion": s.emotion,
                "aus": aus,
                "roi_abs_mean": s.rois.iter().map(|v| v.abs()).sum::<f64>() / s.rois.len() as f64,
                "flow_abs_mean": s.flow.iter().map(|v| v.abs()).sum::<f64>() / s.flow.len() as f64,
            });
            if full {
                line["rois"] = json!(s.rois);
                line["flow"] = json!(s.flow);
            }
            println!("{line}");
        }
        Ok(())
    } else if bytes.starts_with(PARAMS_MAGIC) {
        let params = ParamSet::<f64>::from_bytes(&bytes)?;
        println!("{}", json!({"kind": "params", "entries": params.len(), "values": params.numel()}));
        for (name, t) in params.iter() {
            let n = t.len().max(1) as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let mut line = json!({
                "name": name,
                "shape": t.shape(),
                "mean": mean,
                "std": (t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt(),
            });
            if full {
                line["values"] = json!(t.data());
            }
            println!("{line}");
        }
        Ok(())
    } else {
        Err(Error::Format {
            offset: 0,
            message: format!("{} is neither a dataset nor a parameter file", path.display()),
        })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Generate(args) => generate(args),
        Command::Inspect { file, limit, full } => inspect(file, *limit, *full),
        Command::ListStrategies => {
            list_strategies();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
