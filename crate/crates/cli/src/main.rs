use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use snowlane::agents::Variant;
use snowlane::config::RunConfig;
use snowlane::env::LateralSource;
use snowlane::evaluation::{validate, Controller};
use snowlane::nn::gradcheck::{run_suite, LayerKind};
use snowlane::perception::{build_dataset, write_dataset, CoeffRegressor};
use snowlane::training::{load_run, run, TrainError, Trainer};

const PERCEPTION_FILE: &str = "perception.json";

#[derive(Parser)]
#[command(name = "snowlane", version, about = "Lane keeping on snow-covered roads with action-robust agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent variant and write its run directory.
    Train(TrainArgs),
    /// Validate trained runs on shared seeded routes.
    Eval(EvalArgs),
    /// Finite-difference check of every network layer.
    Gradcheck(GradcheckArgs),
    /// Render labeled frames as PGM images with JSON sidecars.
    RenderDataset(DatasetArgs),
    /// Print the default configuration as TOML.
    Defaults,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    variant: Variant,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory written by `train`; repeat for several variants.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    routes: Option<usize>,
    #[arg(long)]
    friction: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Corrupt one layer's analytic gradient (exercises the failure path).
    #[arg(long, hide = true, value_parser = parse_layer)]
    inject_fault: Option<LayerKind>,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of frames; the first half clear, the rest snowy.
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: snowlane::agents::UnknownVariant| e.to_string())
}

fn parse_layer(s: &str) -> Result<LayerKind, String> {
    LayerKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = LayerKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown layer {s:?}; expected one of {}", names.join(", "))
    })
}

/// A failure with its exit code: 2 for bad input, 1 for runtime faults.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Self { code: 2, message: message.to_string() }
    }

    fn runtime(message: impl ToString) -> Self {
        Self { code: 1, message: message.to_string() }
    }
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, Option<String>), Failure> {
    match path {
        None => Ok((RunConfig::default(), None)),
        Some(p) => RunConfig::load(p).map(|(c, h)| (c, Some(h))).map_err(Failure::usage),
    }
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let (mut cfg, file_hash) = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let out = args.out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", args.variant, cfg.train.seed)));
    let mut trainer = Trainer::new(args.variant, &cfg.train).map_err(Failure::usage)?;
    trainer.config_file_hash = file_hash;
    fs::create_dir_all(&out).map_err(|e| Failure::usage(format!("cannot create {}: {e}", out.display())))?;

    let perception = if cfg.train.env.lateral_source == LateralSource::Perception {
        let (model, report) = cfg.perception.fit(&cfg.train.env).map_err(Failure::runtime)?;
        eprintln!("perception regressor held-out MSE per coefficient: {:?}", report.heldout_mse);
        let path = out.join(PERCEPTION_FILE);
        fs::write(&path, model.to_json()).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        Some(model)
    } else {
        None
    };

    match run(&mut trainer, Some(&out), perception.as_ref()) {
        Ok(outcome) => {
            let ma = outcome.moving_average.last().copied().unwrap_or(0.0);
            println!(
                "{}: {} episodes, {} updates, final moving-average return {ma:.3}; artifacts in {}",
                args.variant,
                outcome.episodes,
                outcome.agent.updates,
                out.display()
            );
            Ok(())
        }
        Err(e @ TrainError::NonFinite { .. }) => Err(Failure::runtime(e)),
        Err(e @ TrainError::Config(_)) => Err(Failure::usage(e)),
        Err(e) => Err(Failure::runtime(e)),
    }
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let (cfg, _) = load_config(args.config.as_deref())?;
    let mut controllers: Vec<(String, Controller)> = Vec::new();
    let mut perception: Option<CoeffRegressor> = None;
    let mut env = None;
    for dir in &args.runs {
        let (manifest, agent) =
            load_run(dir).map_err(|e| Failure::usage(format!("cannot load run {}: {e}", dir.display())))?;
        let mut name = manifest.variant.to_string();
        if controllers.iter().any(|(n, _)| *n == name) {
            name = format!("{name}@{}", dir.display());
        }
        if perception.is_none() {
            if let Ok(text) = fs::read_to_string(dir.join(PERCEPTION_FILE)) {
                perception = Some(CoeffRegressor::from_json(&text).map_err(Failure::usage)?);
            }
        }
        env.get_or_insert(manifest.config.env.clone());
        controllers.push((name, Controller::Agent(Box::new(agent))));
    }
    let mut vcfg = cfg.validation();
    if args.config.is_none() {
        vcfg.env = env.expect("at least one run");
    }
    vcfg.routes = args.routes.unwrap_or(vcfg.routes);
    vcfg.friction = args.friction.unwrap_or(vcfg.friction);
    vcfg.alpha = args.alpha.unwrap_or(vcfg.alpha);
    vcfg.seed = args.seed.unwrap_or(vcfg.seed);
    if vcfg.env.lateral_source == LateralSource::Perception && perception.is_none() {
        return Err(Failure::usage("the environment uses perception but no run directory holds a regressor"));
    }
    let report = match validate(&controllers, &vcfg, perception.as_ref()) {
        Ok(r) => r,
        Err(e @ snowlane::evaluation::EvalError::Config(_)) => return Err(Failure::usage(e)),
        Err(e) => return Err(Failure::runtime(e)),
    };
    report.write(&args.out).map_err(Failure::usage)?;
    print!("{}", report.to_table());
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    let reports = run_suite(args.seeds, args.inject_fault);
    println!("{:<18} {:>6} {:>9} {:>12} {:>10}  status", "layer", "seeds", "entries", "max rel err", "tolerance");
    for r in &reports {
        println!(
            "{:<18} {:>6} {:>9} {:>12.3e} {:>10.0e}  {}",
            r.layer.name(),
            r.seeds,
            r.checked_entries,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.layer.name()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn render_dataset(args: DatasetArgs) -> Result<(), Failure> {
    let (cfg, _) = load_config(args.config.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.perception.seed);
    let snowy = args.count / 2;
    let frames = build_dataset(&cfg.train.env, &cfg.perception.sampling, args.count - snowy, snowy, seed)
        .map_err(Failure::usage)?;
    write_dataset(&frames, seed, &args.out)
        .map_err(|e| Failure::usage(format!("cannot write dataset to {}: {e}", args.out.display())))?;
    println!("wrote {} frames to {}", frames.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::RenderDataset(a) => render_dataset(a),
        Command::Defaults => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
