use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::Value;

use ssl_positioning::bench::experiments::{
    ablate_confidence, ablate_weight_scale, sweep_labeled, uchs_loop, ExperimentConfig,
};
use ssl_positioning::bench::metrics::{position_errors, EvalReport};
use ssl_positioning::channel_sim::{build_scenario, generate_dataset};
use ssl_positioning::channel_stats::{extract_statistics, update_simulator_params};
use ssl_positioning::dataset::{read_dataset, write_dataset};
use ssl_positioning::neural_net::{load_model, save_model};
use ssl_positioning::sslb::{write_pseudo_labels, Confidence, Pipeline, Scheme, Variant};

#[derive(Parser)]
#[command(name = "sslpos", version, about = "Semi-supervised CIR fingerprint positioning workbench")]
struct Cli {
    /// JSON file overriding fields of the experiment configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Use the desk-scale preset
    #[arg(long, global = true)]
    fast: bool,
    /// Number of consecutive seeds for experiment commands
    #[arg(long, global = true)]
    n_seeds: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from the real or base simulator
    Simulate(SimulateArgs),
    /// Measure delay/angle spread statistics of a dataset
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit the base simulator to labeled data and generate unlabeled data
    Uchs {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one scheme
    Train(TrainArgs),
    /// Evaluate a trained model on a test set
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Labeled set that provides reference CIRs
        #[arg(long)]
        labeled: PathBuf,
    },
    /// err@90 of each scheme over the labeled counts
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "SL,SLR,SSLR,SSLB")]
        schemes: Vec<String>,
    },
    /// Pseudo-label weight scaling ablation
    AblateWeight,
    /// Confidence function ablation
    AblateConfidence,
    /// Full simulator-update loop with all schemes
    UchsLoop {
        #[arg(long)]
        n_labeled: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Real,
    Base,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, value_enum, default_value = "real")]
    source: Source,
    /// Omit positions
    #[arg(long)]
    unlabeled: bool,
    #[arg(long, default_value = "dataset")]
    name: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfidenceArg {
    Uniform,
    Kde,
    Linear,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scheme: String,
    #[arg(long)]
    labeled: PathBuf,
    #[arg(long)]
    unlabeled: Option<PathBuf>,
    #[arg(long, value_enum)]
    confidence: Option<ConfidenceArg>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value = "model")]
    name: String,
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let preset = if cli.fast {
        ExperimentConfig::fast()
    } else {
        ExperimentConfig::default()
    };
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let overlay: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let mut value = serde_json::to_value(&preset)?;
            merge(&mut value, overlay);
            serde_json::from_value(value).with_context(|| format!("invalid configuration in {}", path.display()))?
        }
        None => preset,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.n_seeds {
        cfg.n_seeds = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = &cli.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Simulate(args) => {
            let params = match args.source {
                Source::Real => &cfg.real,
                Source::Base => &cfg.base,
            };
            let scenario = build_scenario(cfg.scenario())?;
            let data = generate_dataset(&scenario, params, args.n, !args.unlabeled, cfg.seed)?;
            let path = out.join(format!("{}.sslb", args.name));
            write_dataset(&data, &path)?;
            println!("wrote {} samples to {}", data.len(), path.display());
        }
        Command::Stats { data } => {
            let data = read_dataset(data)?;
            let stats = extract_statistics(&data, cfg.scenario(), &cfg.extraction)?;
            write_json(&out.join("stats.json"), &stats)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Uchs { labeled, n } => {
            let labeled = read_dataset(labeled)?;
            let stats = extract_statistics(&labeled, cfg.scenario(), &cfg.extraction)?;
            let params = update_simulator_params(&cfg.base, &stats);
            let scenario = build_scenario(cfg.scenario())?;
            let data = generate_dataset(&scenario, &params, n.unwrap_or(cfg.n_unlabeled), false, cfg.seed)?;
            write_json(&out.join("uchs_params.json"), &params)?;
            let path = out.join("unlabeled.sslb");
            write_dataset(&data, &path)?;
            println!("fitted {stats:?}; wrote {} unlabeled samples to {}", data.len(), path.display());
        }
        Command::Train(args) => train(&cfg, args, out)?,
        Command::Eval { model, test, labeled } => {
            let model = load_model(model)?;
            let test = read_dataset(test)?;
            let labeled = read_dataset(labeled)?;
            let start = std::time::Instant::now();
            let errors = position_errors(&model, &test, &labeled, None)?;
            let report = EvalReport::from_errors(
                model.provenance.scheme.clone(),
                model.provenance.seed,
                model.provenance.config_hash,
                errors,
                start.elapsed().as_secs_f64(),
            )?;
            write_json(&out.join("eval.json"), &report)?;
            println!("{}: err@90 {:.3} m, mean {:.3} m", report.scheme, report.err_at_90, report.mean_err);
        }
        Command::Sweep { schemes } => {
            let schemes = schemes.iter().map(|s| Scheme::parse(s)).collect::<Result<Vec<_>, _>>()?;
            let table = sweep_labeled(&cfg, &schemes)?;
            table.write_all(out, "sweep")?;
            println!("wrote {}", out.join("sweep.csv").display());
        }
        Command::AblateWeight => {
            let table = ablate_weight_scale(&cfg)?;
            table.write_all(out, "ablate_weight")?;
            println!("wrote {}", out.join("ablate_weight.csv").display());
        }
        Command::AblateConfidence => {
            let table = ablate_confidence(&cfg)?;
            table.write_all(out, "ablate_confidence")?;
            println!("wrote {}", out.join("ablate_confidence.csv").display());
        }
        Command::UchsLoop { n_labeled } => {
            let n = n_labeled.unwrap_or_else(|| cfg.counts.iter().copied().max().unwrap_or(cfg.n_train));
            let report = uchs_loop(&cfg, n)?;
            write_json(&out.join("uchs_loop.json"), &report)?;
            for s in &report.seeds {
                println!(
                    "seed {}: ds mean {:+.3}, ds std {:+.3} vs real; err90 {:?}",
                    s.seed, s.fitted_minus_real.ds_log_mean, s.fitted_minus_real.ds_log_std, s.err90
                );
            }
        }
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig, args: &TrainArgs, out: &Path) -> Result<()> {
    let scheme = Scheme::parse(&args.scheme)?;
    let labeled = read_dataset(&args.labeled)?;
    let unlabeled = args.unlabeled.as_deref().map(read_dataset).transpose()?;
    if scheme.needs_unlabeled() && unlabeled.is_none() {
        bail!("{scheme} needs --unlabeled");
    }
    let mut variant = Variant::new(scheme).with_alpha(args.alpha);
    if let Some(c) = args.confidence {
        variant = variant.with_confidence(match c {
            ConfidenceArg::Uniform => Confidence::Uniform,
            ConfidenceArg::Kde => Confidence::Kde,
            ConfidenceArg::Linear => Confidence::Linear,
        });
    }
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let mut pipeline = Pipeline::new(&labeled, unlabeled.as_ref(), cfg.network_spec(), train_cfg)?;
    let model = pipeline.run(&variant)?;
    if scheme.needs_unlabeled() {
        let weights = pipeline.variant_weights(&variant)?;
        let mut pseudo = pipeline.pseudo_labels()?.to_vec();
        for (p, w) in pseudo.iter_mut().zip(weights) {
            p.weight = Some(w);
        }
        write_pseudo_labels(&out.join("pseudo_labels.jsonl"), &pseudo)?;
    }
    let path = out.join(format!("{}.bin", args.name));
    save_model(&model, &path)?;
    info!("final training loss {:?}", model.loss_history.last());
    println!("wrote {} ({})", path.display(), model.provenance.scheme);
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
