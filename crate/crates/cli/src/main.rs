//! `protolab`: run active learning experiments, grids and baselines, and
//! serve the human-oracle API.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error or invalid
//! configuration, 3 some grid runs failed.

use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Parser, Subcommand, ValueEnum};
use protolab_core::config::{ExperimentConfig, OracleMode, ARTIFACT_ROOT_ENV};
use protolab_core::dal::{total_iterations, IterationRecord, LoopObserver, Phase};
use protolab_core::data::write_synthetic;
use protolab_core::error::Error;
use protolab_core::experiment::{
    effective_config, enumerate_grid, eval_artifact, export_curves, load_dataset, materialize_grid, run_id, run_in,
    Artifact, GridSpec, GridSummary, RunKind,
};
use protolab_core::train::{plan_for_iteration, Schedule};

#[derive(Parser)]
#[command(name = "protolab", version, about)]
struct Cli {
    /// Directory that receives run artifacts.
    #[arg(long, global = true, env = ARTIFACT_ROOT_ENV, default_value = "artifacts")]
    root: PathBuf,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the active learning loop with the simulated oracle.
    Run {
        config: PathBuf,
        /// Print the resolved config and iteration plan, then exit.
        #[arg(long)]
        dry_run: bool,
        /// Replace an existing run directory.
        #[arg(long)]
        overwrite: bool,
        #[arg(long, value_enum, default_value_t = KindArg::Dal, hide = true)]
        kind: KindArg,
    },
    /// Run every configuration of a grid and write a summary table.
    Grid {
        grid: PathBuf,
        /// Number of runs executing at once, each in its own process.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Rerun configurations that already finished.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a baseline: vanilla, protopnet_full or protoal_random.
    Baseline {
        kind: String,
        config: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Evaluate an artifact's best checkpoint.
    Eval {
        artifact: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Validation AUPRC per training step as CSV.
    ExportCurves {
        #[arg(required = true)]
        artifacts: Vec<PathBuf>,
        /// Output file; stdout when absent.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Write the synthetic dataset as PNGs plus a manifest.
    SynthData {
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the loop with a human oracle behind the HTTP API.
    Serve {
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory with the built labeling console.
        #[arg(long)]
        console: Option<PathBuf>,
        /// Use random queries instead of the configured strategy.
        #[arg(long)]
        random: bool,
        /// Stop serving once the loop finishes.
        #[arg(long)]
        exit_when_done: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Dal,
    Vanilla,
    ProtopnetFull,
    ProtoalRandom,
}

impl From<KindArg> for RunKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Dal => RunKind::Dal,
            KindArg::Vanilla => RunKind::Vanilla,
            KindArg::ProtopnetFull => RunKind::ProtopnetFull,
            KindArg::ProtoalRandom => RunKind::ProtoalRandom,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Logs one line per finished iteration.
struct Progress;

impl LoopObserver for Progress {
    fn phase(&mut self, iteration: usize, phase: Phase) {
        log::debug!("iteration {iteration}: {phase:?}");
    }

    fn record(&mut self, r: &IterationRecord) -> protolab_core::Result<()> {
        log::info!(
            "iteration {}: {} labeled ({:.1}%), val auprc {:.4}, queried {}",
            r.iteration,
            r.cumulative_labeled,
            100.0 * r.labeled_fraction,
            r.validation.auprc,
            r.queried_ids.len()
        );
        Ok(())
    }
}

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate().map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn execute(cfg: &ExperimentConfig, kind: RunKind, root: &Path, overwrite: bool) -> CliResult<Artifact> {
    let data = load_dataset(cfg)?;
    let dir = root.join(run_id(cfg, kind));
    log::info!("{kind} run into {}", dir.display());
    let artifact = run_in(cfg, kind, &data, &dir, overwrite, None, &mut Progress)?;
    Ok(artifact)
}

fn summarize(a: &Artifact) {
    if let Some(fm) = &a.final_metrics {
        let test = fm
            .test
            .as_ref()
            .map(|t| format!(", test auprc {:.4} accuracy {:.4}", t.auprc, t.accuracy))
            .unwrap_or_default();
        println!(
            "{}: best iteration {} of {}, val auprc {:.4}{test}",
            a.dir.display(),
            fm.best_iteration,
            fm.iterations,
            fm.validation.auprc
        );
    }
}

fn dry_run(cfg: &ExperimentConfig, kind: RunKind) -> CliResult {
    let eff = effective_config(cfg, kind);
    println!("# run id: {}", run_id(cfg, kind));
    println!("# config hash: {}", eff.hash());
    print!("{}", eff.to_toml()?);
    let n_train = eff.data.split[0];
    let d = &eff.dal;
    let total = total_iterations(n_train, d.init_size, d.query_size)?;
    let schedule = Schedule {
        warm_epochs: eff.train.warm_epochs,
        joint_epochs: eff.train.joint_epochs,
        last_layer_steps: eff.train.last_layer_steps,
    };
    println!("\n# plan: at most {total} iterations over {n_train} pool instances");
    for it in 1..=total {
        let cap = d.budget.unwrap_or(n_train).min(n_train);
        let labeled = (d.init_size + (it - 1) * d.query_size).min(cap);
        let plan = plan_for_iteration(it, &schedule)?;
        let steps: Vec<String> = plan
            .steps
            .iter()
            .map(|s| match s.duration() {
                Some(n) => format!("{:?} {n}", s.stage().expect("timed steps have a stage")),
                None => "Push".to_string(),
            })
            .collect();
        println!("# iteration {it}: {labeled} labeled; {}", steps.join(", "));
        if labeled == cap {
            break;
        }
    }
    Ok(())
}

fn cmd_grid(root: &Path, grid: &Path, parallel: usize, overwrite: bool) -> CliResult {
    if parallel == 0 {
        return Err(Failure::usage("--parallel must be at least 1"));
    }
    let (spec, base) = GridSpec::load(grid)?;
    let configs = enumerate_grid(&base, &spec.axes)?;
    let grid_dir = root.join(&spec.name);
    let runs_dir = grid_dir.join("runs");
    let entries = materialize_grid(&grid_dir, &configs)?;
    log::info!("grid {}: {} configurations", spec.name, entries.len());

    let todo: Vec<&(String, PathBuf)> = entries
        .iter()
        .filter(|(id, _)| overwrite || !runs_dir.join(id).join("final_metrics.json").exists())
        .collect();
    if todo.len() < entries.len() {
        log::info!("{} already finished", entries.len() - todo.len());
    }
    let mut failed = Vec::new();
    if parallel == 1 {
        for (i, (id, _)) in todo.iter().enumerate() {
            let cfg = &configs[entries.iter().position(|e| &e.0 == id).expect("entry")];
            log::info!("[{}/{}] {id}", i + 1, todo.len());
            if let Err(e) = execute(cfg, RunKind::Dal, &runs_dir, true) {
                log::error!("{id}: {e}");
                failed.push(id.clone());
            }
        }
    } else {
        let exe = std::env::current_exe()?;
        let mut queue = todo.iter();
        let mut running: Vec<(String, std::process::Child)> = Vec::new();
        loop {
            while running.len() < parallel {
                let Some((id, path)) = queue.next() else { break };
                let child = Command::new(&exe)
                    .arg("--root")
                    .arg(&runs_dir)
                    .args(["run", "--overwrite"])
                    .arg(path)
                    .spawn()?;
                running.push((id.clone(), child));
            }
            if running.is_empty() {
                break;
            }
            let mut still = Vec::new();
            for (id, mut child) in running {
                match child.try_wait()? {
                    Some(status) if status.success() => log::info!("{id} finished"),
                    Some(status) => {
                        log::error!("{id} exited with {status}");
                        failed.push(id);
                    }
                    None => still.push((id, child)),
                }
            }
            running = still;
            std::thread::sleep(std::time::Duration::from_millis(200));
        }
    }

    let summary = GridSummary::from_dir(&grid_dir)?;
    let path = grid_dir.join("summary.csv");
    std::fs::write(&path, summary.to_csv()?)?;
    println!("summary: {} ({} runs)", path.display(), summary.rows.len());
    if let Some(b) = summary.best {
        let r = &summary.rows[b];
        println!("best by validation auprc: {} ({:.4})", r.run_id, r.val_auprc);
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: format!("{} grid runs failed: {}", failed.len(), failed.join(", ")),
        })
    }
}

fn cmd_eval(artifact: &Path, split: SplitArg) -> CliResult {
    let a = Artifact::open(artifact)?;
    let ids = match split {
        SplitArg::Test => None,
        SplitArg::Val => Some(load_dataset(&a.config)?.splits.val),
    };
    let m = eval_artifact(&a, ids.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&m).map_err(Error::from)?);
    Ok(())
}

fn cmd_export(artifacts: &[PathBuf], output: Option<&Path>) -> CliResult {
    let opened = artifacts.iter().map(|p| Artifact::open(p)).collect::<Result<Vec<_>, _>>()?;
    let csv = export_curves(&opened)?;
    match output {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_serve(
    root: &Path,
    config: &Path,
    addr: SocketAddr,
    console: Option<PathBuf>,
    random: bool,
    exit_when_done: bool,
) -> CliResult {
    let cfg = load_config(config)?;
    if cfg.oracle.mode != OracleMode::Human {
        log::warn!("config sets oracle.mode = simulated; serving with a human oracle anyway");
    }
    let kind = if random { RunKind::ProtoalRandom } else { RunKind::Dal };
    let data = load_dataset(&cfg)?;
    let id = run_id(&cfg, kind);
    let journal = root.join(format!("{id}.labels.jsonl"));
    let shared = protolab_service::session(&cfg, &data, &journal)?;
    if !shared.journal().replayed().is_empty() {
        log::info!("replaying {} journaled answers", shared.journal().replayed().len());
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        println!("listening on http://{}", listener.local_addr()?);
        let handle = protolab_service::spawn_loop(cfg, kind, data, root.join(&id), shared.clone());
        let (done_tx, done_rx) = tokio::sync::oneshot::channel();
        std::thread::spawn(move || {
            let out = handle.join();
            let _ = done_tx.send(out);
        });
        let shutdown = async move {
            if exit_when_done {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = done_rx => {}
                }
            } else {
                let _ = tokio::signal::ctrl_c().await;
            }
        };
        protolab_service::serve(listener, shared.clone(), console, shutdown).await?;
        match shared.state().error {
            Some(e) => Err(Failure {
                code: 1,
                message: format!("loop failed: {e}"),
            }),
            None => Ok(()),
        }
    })
}

fn dispatch(cli: Cli) -> CliResult {
    let root = cli.root;
    match cli.command {
        Cmd::Run {
            config,
            dry_run: dry,
            overwrite,
            kind,
        } => {
            let cfg = load_config(&config)?;
            let kind = RunKind::from(kind);
            if dry {
                return dry_run(&cfg, kind);
            }
            if cfg.oracle.mode == OracleMode::Human {
                return Err(Failure::usage("oracle.mode = human needs `protolab serve`"));
            }
            summarize(&execute(&cfg, kind, &root, overwrite)?);
            Ok(())
        }
        Cmd::Grid {
            grid,
            parallel,
            overwrite,
        } => cmd_grid(&root, &grid, parallel, overwrite),
        Cmd::Baseline {
            kind,
            config,
            overwrite,
        } => {
            let kind: RunKind = kind.parse().map_err(|e: Error| Failure::usage(e.to_string()))?;
            if !RunKind::BASELINES.contains(&kind) {
                return Err(Failure::usage(format!("{kind} is not a baseline")));
            }
            let cfg = load_config(&config)?;
            summarize(&execute(&cfg, kind, &root, overwrite)?);
            Ok(())
        }
        Cmd::Eval { artifact, split } => cmd_eval(&artifact, split),
        Cmd::ExportCurves { artifacts, output } => cmd_export(&artifacts, output.as_deref()),
        Cmd::SynthData {
            out,
            per_class,
            size,
            seed,
        } => {
            let m = write_synthetic(&out, per_class, size, seed)?;
            println!("wrote {} images and {}", m.records.len(), out.join("manifest.csv").display());
            Ok(())
        }
        Cmd::Serve {
            config,
            addr,
            console,
            random,
            exit_when_done,
        } => cmd_serve(&root, &config, addr, console, random, exit_when_done),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
