use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use stigmergy::arena::EnvKind;
use stigmergy::forest::{
    collect_samples, holdout_split, read_dataset_csv, write_dataset_csv, ForestConfig, ForestModel,
};
use stigmergy::orchestrator::{
    ablate, ablate_with, metrics_from_rows, read_episodes_csv, run_abstract, run_embodied,
    write_ablation_csv, write_episodes_csv, write_pheromones_csv, write_steps_csv, AblationGrid,
    EmbodiedConfig, EpisodeLog, PushPrimitive, RunError, RunMetrics,
};
use stigmergy::qnet::{CheckpointMeta, QNetwork};
use stigmergy::scenario::{bundled, Mode, ScenarioSpec};
use stigmergy::trainer::{evaluate, train, write_train_log, Controller, TrainConfig};

/// Output directory used when `--out` is not given.
const OUT_ENV: &str = "STIGMERGY_OUT";

#[derive(Parser)]
#[command(
    name = "stigmergy",
    version,
    about = "Pheromone-coordinated box pushing"
)]
struct Cli {
    /// Output directory; defaults to $STIGMERGY_OUT, then the current directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the push primitive and write a checkpoint plus training log.
    Train(TrainArgs),
    /// Roll out a checkpoint and write a labeled classifier dataset.
    Collect(CollectArgs),
    /// Fit the feasibility forest on a dataset.
    FitClassifier(FitArgs),
    /// Run a scenario and write step, episode and pheromone logs.
    Run(RunArgs),
    /// Sweep hyperparameters over a grid file.
    Ablate(AblateArgs),
    /// Summarize an episodes CSV.
    Metrics(MetricsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvChoice {
    Flat,
    Slope,
    Hole,
    /// Flat, slope and hole mixed 0.3 / 0.2 / 0.5.
    All,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 400)]
    episodes: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = EnvChoice::All)]
    env: EnvChoice,
    /// Test episodes per env kind after training.
    #[arg(long, default_value_t = 100)]
    eval: u32,
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 8.0)]
    beta: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 10)]
    depth: usize,
    /// Share of the dataset held out for the reported accuracy.
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file, or the name of a bundled scenario.
    scenario: String,
    #[arg(long, value_enum)]
    mode: Option<ModeChoice>,
    #[arg(long)]
    episodes: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embodied push primitive; the scripted oracle when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8.0)]
    beta: f64,
    /// Embodied feasibility forest.
    #[arg(long)]
    forest: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeChoice {
    Abstract,
    Embodied,
}

#[derive(Args)]
struct AblateArgs {
    scenario: String,
    grid: PathBuf,
    /// Run cells in embodied mode with the scripted oracle pusher.
    #[arg(long)]
    embodied: bool,
}

#[derive(Args)]
struct MetricsArgs {
    log: PathBuf,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let out = cli
        .out
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(runtime)?;
    match cli.command {
        Command::Train(a) => cmd_train(&a, &out),
        Command::Collect(a) => cmd_collect(&a, &out),
        Command::FitClassifier(a) => cmd_fit(&a, &out),
        Command::Run(a) => cmd_run(&a, &out),
        Command::Ablate(a) => cmd_ablate(&a, &out),
        Command::Metrics(a) => cmd_metrics(&a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn cmd_train(a: &TrainArgs, out: &Path) -> Result<(), CliError> {
    let config = match a.env {
        EnvChoice::Flat => TrainConfig::single_env(EnvKind::Flat),
        EnvChoice::Slope => TrainConfig::single_env(EnvKind::Slope),
        EnvChoice::Hole => TrainConfig::single_env(EnvKind::Hole),
        EnvChoice::All => TrainConfig::default(),
    };
    config.validate().map_err(invalid)?;
    info!("training {} episodes, seed {}", a.episodes, a.seed);
    let outcome = train(&config, a.episodes, a.seed).map_err(runtime)?;
    let meta = CheckpointMeta {
        seed: a.seed,
        episodes: u64::from(a.episodes),
    };
    let ckpt = out.join("qnet.bin");
    outcome.network.save(meta, &ckpt).map_err(runtime)?;
    write_train_log(&outcome.log, create(&out.join("train_log.csv"))?).map_err(runtime)?;
    let controller = Controller::Trained {
        network: outcome.network,
        beta: config.beta,
    };
    for (kind, _) in &config.env_distribution {
        let e = evaluate(&controller, *kind, a.eval, &config.arena, a.seed ^ 0x5eed)
            .map_err(runtime)?;
        println!(
            "{kind}: success {:.3}, mean reward {:.3}",
            e.success_rate, e.mean_reward
        );
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn load_network(path: &Path) -> Result<QNetwork, CliError> {
    QNetwork::load(path)
        .map(|(net, _)| net)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn cmd_collect(a: &CollectArgs, out: &Path) -> Result<(), CliError> {
    let controller = Controller::Trained {
        network: load_network(&a.checkpoint)?,
        beta: a.beta,
    };
    let arena = TrainConfig::default().arena;
    let samples = collect_samples(&controller, a.samples, &arena, a.seed).map_err(runtime)?;
    let path = out.join("dataset.csv");
    write_dataset_csv(&samples, create(&path)?).map_err(runtime)?;
    let positive = samples.iter().filter(|s| s.label == 1).count();
    println!(
        "{} samples ({positive} feasible) -> {}",
        samples.len(),
        path.display()
    );
    Ok(())
}

fn cmd_fit(a: &FitArgs, out: &Path) -> Result<(), CliError> {
    let data = read_dataset_csv(open(&a.dataset)?).map_err(invalid)?;
    let (train_set, test_set) = holdout_split(&data, a.holdout, a.seed);
    let config = ForestConfig {
        trees: a.trees,
        max_depth: a.depth,
        ..ForestConfig::default()
    };
    let model = ForestModel::fit(&train_set, config, a.seed).map_err(invalid)?;
    let path = out.join("forest.txt");
    std::fs::write(&path, model.to_text()).map_err(runtime)?;
    println!(
        "trees {}, max depth {}, train accuracy {:.3}, held-out accuracy {:.3} -> {}",
        model.trees.len(),
        model.max_depth(),
        model.accuracy(&train_set),
        if test_set.is_empty() {
            f64::NAN
        } else {
            model.accuracy(&test_set)
        },
        path.display()
    );
    Ok(())
}

fn load_scenario(name_or_path: &str) -> Result<ScenarioSpec, CliError> {
    match bundled::by_name(name_or_path) {
        Some(text) if !Path::new(name_or_path).exists() => {
            ScenarioSpec::from_toml_str(text).map_err(invalid)
        }
        _ => ScenarioSpec::load(Path::new(name_or_path)).map_err(invalid),
    }
}

fn embodied_config(checkpoint: Option<&Path>, beta: f64) -> Result<EmbodiedConfig, CliError> {
    let primitive = match checkpoint {
        Some(p) => PushPrimitive::Trained {
            network: load_network(p)?,
            beta,
        },
        None => PushPrimitive::Oracle,
    };
    Ok(EmbodiedConfig::new(primitive))
}

fn print_metrics(m: &RunMetrics) {
    println!(
        "episodes {}, steps {:.3} ± {:.3}, proportion {:.4} ± {:.4}",
        m.episodes, m.steps_mean, m.steps_std, m.proportion_mean, m.proportion_std
    );
}

fn cmd_run(a: &RunArgs, out: &Path) -> Result<(), CliError> {
    let mut spec = load_scenario(&a.scenario)?;
    if let Some(m) = a.mode {
        spec.mode = match m {
            ModeChoice::Abstract => Mode::Abstract,
            ModeChoice::Embodied => Mode::Embodied,
        };
    }
    if let Some(e) = a.episodes {
        spec.episodes = e;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate().map_err(invalid)?;
    let (logs, metrics): (Vec<EpisodeLog>, RunMetrics) = match spec.mode {
        Mode::Abstract => run_abstract(&spec).map_err(runtime)?,
        Mode::Embodied => {
            let config = embodied_config(a.checkpoint.as_deref(), a.beta)?;
            let forest = match &a.forest {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| invalid(format!("{}: {e}", p.display())))?;
                    Some(ForestModel::from_text(&text).map_err(invalid)?)
                }
                None => None,
            };
            run_embodied(&spec, config, forest.as_ref()).map_err(runtime)?
        }
    };
    write_steps_csv(&logs, create(&out.join("steps.csv"))?).map_err(runtime)?;
    write_episodes_csv(&logs, create(&out.join("episodes.csv"))?).map_err(runtime)?;
    write_pheromones_csv(&logs, create(&out.join("pheromones.csv"))?).map_err(runtime)?;
    print_metrics(&metrics);
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, out: &Path) -> Result<(), CliError> {
    let spec = load_scenario(&a.scenario)?;
    let text = std::fs::read_to_string(&a.grid)
        .map_err(|e| invalid(format!("{}: {e}", a.grid.display())))?;
    let grid = AblationGrid::from_toml_str(&text).map_err(invalid)?;
    let cells = if a.embodied {
        let mut s = spec.clone();
        s.mode = Mode::Embodied;
        ablate_with(&s, &grid, |cell| {
            run_embodied(cell, EmbodiedConfig::new(PushPrimitive::Oracle), None)
                .map(|(logs, _)| logs)
        })
    } else {
        ablate(&spec, &grid)
    }
    .map_err(|e| match e {
        RunError::Scenario(_) | RunError::Grid(_) => invalid(e),
        other => runtime(other),
    })?;
    let path = out.join("ablation.csv");
    write_ablation_csv(&cells, create(&path)?).map_err(runtime)?;
    for c in &cells {
        let p = c.params;
        print!(
            "eps0 {} d_eps {} R {} beta {} b_decay {}: ",
            p.epsilon0, p.epsilon_decay, p.radius, p.beta, p.b_decay
        );
        print_metrics(&c.metrics);
    }
    println!("-> {}", path.display());
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<(), CliError> {
    let rows = read_episodes_csv(open(&a.log)?).map_err(invalid)?;
    if rows.is_empty() {
        return Err(invalid("log holds no episodes"));
    }
    print_metrics(&metrics_from_rows(&rows));
    Ok(())
}
