use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use promptdfo::bench::{run_suite, write_bench_csv};
use promptdfo::config::{BackendConfig, ExperimentConfig};
use promptdfo::initseek::select_demonstration;
use promptdfo::oracle::server::{spawn_server, ServerOptions};
use promptdfo::oracle::{make_fixture_task, Backend};
use promptdfo::pipeline::{Experiment, TaskData, TaskFile};
use promptdfo::report::{load_runs, summary_table, write_curves};

/// Derivative-free prompt tuning against a black-box scoring oracle.
#[derive(Debug, Parser)]
#[command(name = "promptdfo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the full pipeline for one or more seeds and write per-seed artifacts.
    Optimize(OptimizeArgs),
    /// Convergence of both optimizers on a standard test function, as CSV.
    Bench(BenchArgs),
    /// Label-word tools.
    #[command(subcommand)]
    Verbalizer(VerbalizerCommand),
    /// Score every training example as a demonstration and report the winner.
    DemoSearch(DemoSearchArgs),
    /// Aggregate finished seed runs into a summary table and call-aligned curves.
    Report(ReportArgs),
    /// Serve the simulated fixture model over HTTP until interrupted.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct BackendOverrides {
    /// Replaces `Endpoint` of a remote config.
    #[arg(long, env = "PROMPTDFO_ENDPOINT")]
    endpoint: Option<String>,
}

#[derive(Debug, Args)]
struct OptimizeArgs {
    /// TOML experiment config.
    config: PathBuf,
    /// Comma-separated seeds; defaults to the config's `Seed`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Replaces `OutputDir` of the config.
    #[arg(long, env = "PROMPTDFO_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendOverrides,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// One of: sphere, rosenbrock, rastrigin.
    suite: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum VerbalizerCommand {
    /// Assemble the multi-source label-word set and write it as JSON.
    Build(VerbalizerBuildArgs),
}

#[derive(Debug, Args)]
struct VerbalizerBuildArgs {
    /// TOML experiment config.
    config: PathBuf,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    backend: BackendOverrides,
}

#[derive(Debug, Args)]
struct DemoSearchArgs {
    /// TOML experiment config.
    config: PathBuf,
    /// Write the per-example score table as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendOverrides,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory holding `seed-*` run folders.
    run_dir: PathBuf,
    /// Curve CSV path; defaults to `<run_dir>/curves.csv`.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Seed of the fixture task and model.
    #[arg(long, default_value_t = 42)]
    fixture_seed: u64,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    shots: usize,
    /// TCP port; 0 picks a free one.
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Also write the fixture task as a JSON task file for remote configs.
    #[arg(long)]
    task_out: Option<PathBuf>,
}

fn load_config(path: &Path, overrides: &BackendOverrides) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(url) = &overrides.endpoint {
        match &mut config.backend {
            BackendConfig::Remote { endpoint, .. } => *endpoint = url.clone(),
            BackendConfig::Fixture { .. } => log::warn!("endpoint override ignored: config uses the fixture backend"),
        }
    }
    Ok(config)
}

fn optimize(args: OptimizeArgs) -> Result<()> {
    let mut config = load_config(&args.config, &args.backend)?;
    if let Some(dir) = args.output_dir {
        config.output_dir = dir;
    }
    let seeds = if args.seeds.is_empty() { vec![config.seed] } else { args.seeds };
    let out_dir = config.output_dir.clone();
    let exp = Experiment::prepare(config)?;
    for seed in seeds {
        log::info!("seed {seed}: starting");
        let outcome = exp.run_seed(seed).map_err(|e| {
            if let Some(partial) = &e.partial {
                log::error!("seed {seed} stopped after {} oracle calls", partial.calls());
            }
            anyhow::Error::new(e.source)
        })?;
        let dir = outcome.write(&exp, &out_dir)?;
        let r = &outcome.record;
        let acc = r.selected_reading.map(|s| s.accuracy).unwrap_or(f64::NAN);
        println!(
            "seed {seed}: {} calls, train loss {:.4}, val accuracy {:.4} -> {}",
            r.calls(),
            r.best_train_loss,
            acc,
            dir.display()
        );
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let rows = run_suite(&args.suite, args.seed)?;
    match args.out {
        Some(path) => {
            let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_bench_csv(std::io::BufWriter::new(file), &rows)?;
        }
        None => write_bench_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn verbalizer_build(args: VerbalizerBuildArgs) -> Result<()> {
    let exp = Experiment::prepare(load_config(&args.config, &args.backend)?)?;
    let set = exp.build_m2(&exp.oracle())?;
    std::fs::write(&args.out, set.to_json(&exp.data.vocab)? + "\n")
        .with_context(|| format!("writing {}", args.out.display()))?;
    for c in 0..set.num_classes() {
        let words: Vec<&str> = set
            .class_tokens(c)
            .iter()
            .map(|&t| exp.data.vocab.token(t))
            .collect::<promptdfo::Result<_>>()?;
        println!("class {c}: {}", words.join(" "));
    }
    Ok(())
}

fn demo_search(args: DemoSearchArgs) -> Result<()> {
    let exp = Experiment::prepare(load_config(&args.config, &args.backend)?)?;
    let oracle = exp.oracle();
    let verbalizers = exp.verbalizers(&oracle.fork())?;
    let d = &exp.data;
    let selection = select_demonstration(&d.corpus, &d.instruction, &d.template, &oracle, &verbalizers)
        .map_err(|e| anyhow::Error::new(e.source).context(format!("after {} of {} evaluations", e.partial.len(), e.total)))?;
    if let Some(path) = &args.out {
        let mut csv = String::from("index,accuracy,loss\n");
        for s in &selection.scores {
            csv.push_str(&format!("{},{},{}\n", s.index, s.accuracy, s.loss));
        }
        std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    let best = &selection.scores[selection.demonstration.index];
    println!(
        "selected example {} (accuracy {:.4}, loss {:.4}) after {} evaluations: {}",
        best.index,
        best.accuracy,
        best.loss,
        oracle.calls(),
        d.vocab.decode(&selection.demonstration.tokens)?
    );
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let runs = load_runs(&args.run_dir)?;
    print!("{}", summary_table(&runs));
    let path = args.curves.unwrap_or_else(|| args.run_dir.join("curves.csv"));
    let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_curves(std::io::BufWriter::new(file), &runs)?;
    println!("curves: {}", path.display());
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let task = make_fixture_task(args.fixture_seed, args.classes, args.shots)?;
    if let Some(path) = &args.task_out {
        let file = TaskFile::from_task(&TaskData::from(&task))?;
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    let backend: Arc<dyn Backend> = Arc::new(task.backend());
    let info = backend.info();
    let handle = spawn_server(
        backend,
        SocketAddr::new(args.host, args.port),
        ServerOptions { stop_on_interrupt: true },
    )?;
    println!(
        "serving {} (layers {}, prompt dim {}, vocab {}, classes {})",
        handle.endpoint(),
        info.layers,
        info.prompt_dim,
        info.vocab_size,
        info.num_classes
    );
    handle.wait()?;
    log::info!("stopped");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Optimize(a) => optimize(a),
        Command::Bench(a) => bench(a),
        Command::Verbalizer(VerbalizerCommand::Build(a)) => verbalizer_build(a),
        Command::DemoSearch(a) => demo_search(a),
        Command::Report(a) => report(a),
        Command::Serve(a) => serve(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
