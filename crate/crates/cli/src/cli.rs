//! Command-line surface.

use std::io::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use atomic_nli::{Error, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::dataset::{parse_dataset, sha256_hex, TaskKind};
use crate::run::{run_id, timestamp, RunDir, RunManifest};
use crate::server::{serve, AppState};
use crate::stages::{fixture_fingerprint, Pipeline};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "atomic-nli", version, about = "Atomic decomposition and consistency evaluation for NLI and defeasible NLI")]
pub struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run directory. Defaults to <RUNS_ROOT>/<run id>.
    #[arg(long, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// Parent of run directories named by run id.
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub runs_root: PathBuf,
    /// Dataset file (one JSON object per line). Starts a run, or checks that
    /// an existing run was built from the same file. Missing upstream model
    /// stages are run automatically when given.
    #[arg(long, value_name = "FILE")]
    pub dataset: Option<PathBuf>,
    /// Dataset kind. Inferred from the command or the dataset when omitted.
    #[arg(long, value_enum)]
    pub task: Option<TaskKind>,
    /// TOML configuration file. Credentials come from the environment
    /// variables it names.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Replace every backend with the offline fixture backends.
    #[arg(long)]
    pub mock: bool,
    /// Fixture directory used with --mock.
    #[arg(long, value_name = "DIR", default_value = "fixtures/mock")]
    pub fixtures: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split each hypothesis into atomic facts.
    Decompose(RunArgs),
    /// Drop atoms not entailed by the hypothesis, and (defeasible runs) atoms
    /// already entailed by the premise.
    Prune(RunArgs),
    /// Serve the annotation API (and UI assets) for this run.
    AnnotateServe {
        #[command(flatten)]
        run: RunArgs,
        /// Listen address.
        #[arg(long, default_value = "127.0.0.1:8787")]
        addr: SocketAddr,
        /// Directory of built UI assets to serve at /.
        #[arg(long, value_name = "DIR")]
        ui_dir: Option<PathBuf>,
        /// Hand each atom to two annotators (for agreement statistics).
        #[arg(long)]
        dual: bool,
        /// Seconds an assigned atom stays reserved for its annotator.
        #[arg(long, value_name = "SECS")]
        lease_seconds: Option<u64>,
    },
    /// Traditional NLI: full and atomic predictions, consistency report.
    EvalNli(RunArgs),
    /// Defeasible NLI: sub-problems, critical atoms, accuracy report.
    EvalDefeasible {
        #[command(flatten)]
        run: RunArgs,
        /// Import annotation records (one JSON object per line) first.
        #[arg(long, value_name = "FILE")]
        annotations: Option<PathBuf>,
    },
    /// Group critical atoms and compute inferential consistency.
    Group {
        #[command(flatten)]
        run: RunArgs,
        /// Cosine similarity threshold for candidate pairs [default: 0.75,
        /// or grouping.threshold from the config].
        #[arg(long, value_name = "THETA", allow_negative_numbers = true)]
        threshold: Option<f64>,
        /// Also generate a question under discussion for each critical atom.
        #[arg(long)]
        quds: bool,
    },
    /// Collect finished reports into reports/summary.{json,txt}.
    Report(RunArgs),
    /// Draw the per-example effect distribution plot (SVG and CSV).
    Rugplot(RunArgs),
}

/// Reads the dataset kind from its first record: `update` marks defeasible.
fn sniff_task(bytes: &[u8]) -> TaskKind {
    let first = String::from_utf8_lossy(bytes).lines().find(|l| !l.trim().is_empty()).map(str::to_string);
    let has_update = first
        .and_then(|l| serde_json::from_str::<serde_json::Value>(&l).ok())
        .is_some_and(|v| v.get("update").is_some());
    if has_update {
        TaskKind::Defeasible
    } else {
        TaskKind::Nli
    }
}

fn effective_config(base: Config, args: &RunArgs) -> Result<(Config, Option<PathBuf>)> {
    if args.mock {
        let fingerprint = fixture_fingerprint(&args.fixtures)?;
        Ok((base.with_mock(&fingerprint), Some(args.fixtures.clone())))
    } else {
        Ok((base, None))
    }
}

/// Opens the run named by the arguments, creating it when a dataset is given
/// and no run exists yet.
pub fn open_pipeline(args: &RunArgs, hint: Option<TaskKind>) -> Result<Pipeline> {
    let dataset_bytes = match &args.dataset {
        Some(p) => Some(std::fs::read(p).map_err(|e| Error::from(e).context(p.display().to_string()))?),
        None => None,
    };
    let base = args.config.as_deref().map(Config::load).transpose()?;

    let existing = match &args.run_dir {
        Some(dir) if RunDir::manifest_exists(dir) => Some(dir.clone()),
        Some(_) => None,
        None => None,
    };
    let (run, config, fixtures) = if let Some(root) = existing {
        let run = RunDir::open(&root)?;
        let (config, fixtures) = effective_config(base.unwrap_or_else(|| run.manifest.config.clone()), args)?;
        let fixtures = fixtures.or_else(|| run.manifest.fixtures.clone().map(PathBuf::from));
        (run, config, fixtures)
    } else {
        let bytes = dataset_bytes.as_deref().ok_or_else(|| match &args.run_dir {
            Some(dir) => Error::Precondition(format!("no run at {}; pass --dataset to start one", dir.display())),
            None => Error::Precondition("pass --run-dir for an existing run, or --dataset to start one".into()),
        })?;
        let task = args.task.or(hint).unwrap_or_else(|| sniff_task(bytes));
        let dataset = parse_dataset(&String::from_utf8_lossy(bytes), task)
            .map_err(|e| e.context(args.dataset.as_ref().expect("dataset").display().to_string()))?;
        if dataset.is_empty() {
            return Err(Error::Precondition("dataset has no examples".into()));
        }
        let (config, fixtures) = effective_config(base.unwrap_or_default(), args)?;
        config.validate()?;
        let dataset_sha256 = sha256_hex(bytes);
        let id = run_id(task, &dataset_sha256, &config.hash());
        let root = args.run_dir.clone().unwrap_or_else(|| args.runs_root.join(&id));
        let run = if RunDir::manifest_exists(&root) {
            RunDir::open(&root)?
        } else {
            let manifest = RunManifest {
                run_id: id,
                task,
                dataset_sha256,
                examples: dataset.len(),
                config_hash: config.hash(),
                config: config.clone(),
                fixtures: fixtures.as_ref().map(|p| p.display().to_string()),
                backends: Default::default(),
                stages: Default::default(),
                created_at: timestamp(),
            };
            RunDir::create(&root, manifest, bytes)?
        };
        (run, config, fixtures)
    };

    let m = &run.manifest;
    if config.hash() != m.config_hash {
        return Err(Error::Precondition(format!(
            "configuration differs from the one run {} was created with; a changed configuration needs a new run directory",
            m.run_id
        )));
    }
    if let Some(bytes) = &dataset_bytes {
        if sha256_hex(bytes) != m.dataset_sha256 {
            return Err(Error::Integrity(format!("dataset differs from the one run {} was created with", m.run_id)));
        }
    }
    if let Some(task) = args.task {
        if task != m.task {
            return Err(Error::Precondition(format!("run {} is a {} run", m.run_id, m.task.as_str())));
        }
    }
    let mut pipeline = Pipeline::new(run, config, fixtures)?;
    pipeline.run_upstream = args.dataset.is_some();
    Ok(pipeline)
}

fn say(out: &mut impl std::io::Write, text: &str) {
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
}

pub async fn execute(command: Command) -> Result<()> {
    let mut stdout = std::io::stdout();
    match command {
        Command::Decompose(args) => {
            let mut p = open_pipeline(&args, None)?;
            let n = p.decompose().await?;
            say(&mut stdout, &format!("{}: {n} atoms from {} examples\n", p.run.run_id(), p.run.manifest.examples));
        }
        Command::Prune(args) => {
            let mut p = open_pipeline(&args, None)?;
            let (kept, total) = p.prune().await?;
            say(&mut stdout, &format!("{}: kept {kept} of {total} atoms\n", p.run.run_id()));
        }
        Command::AnnotateServe { run, addr, ui_dir, dual, lease_seconds } => {
            let p = open_pipeline(&run, None)?;
            let dataset = p.dataset()?;
            let dual = dual || p.config.annotation.dual;
            let lease = Duration::from_secs(lease_seconds.unwrap_or(p.config.annotation.lease_seconds));
            let state = AppState::load(p.run, &dataset, dual, lease)?;
            serve(state, addr, ui_dir.as_deref()).await?;
        }
        Command::EvalNli(args) => {
            let mut p = open_pipeline(&args, Some(TaskKind::Nli))?;
            let report = p.eval_nli().await?;
            say(&mut stdout, &format!("run_id: {}\n{}", p.run.run_id(), report.to_text()));
        }
        Command::EvalDefeasible { run, annotations } => {
            let mut p = open_pipeline(&run, Some(TaskKind::Defeasible))?;
            if let Some(path) = annotations {
                p.ensure_pruned().await?;
                let added = p.import_annotations(&path)?;
                log::info!("imported {added} annotation records");
            }
            let report = p.eval_defeasible().await?;
            say(&mut stdout, &format!("run_id: {}\n{}", p.run.run_id(), report.to_text()));
        }
        Command::Group { run, threshold, quds } => {
            let mut p = open_pipeline(&run, Some(TaskKind::Defeasible))?;
            let report = p.group(threshold, quds).await?;
            say(&mut stdout, &format!("run_id: {}\n{}", p.run.run_id(), report.to_text()));
        }
        Command::Report(args) => {
            let mut p = open_pipeline(&args, None)?;
            let summary = p.report()?;
            say(&mut stdout, &format!("run_id: {}\n{}", p.run.run_id(), summary.to_text()));
        }
        Command::Rugplot(args) => {
            let mut p = open_pipeline(&args, Some(TaskKind::Defeasible))?;
            let n = p.rugplot()?;
            let path = p.run.path(crate::stages::RUGPLOT_SVG);
            say(&mut stdout, &format!("{}: {n} slices -> {}\n", p.run.run_id(), path.display()));
        }
    }
    Ok(())
}

pub fn exit_code(error: &Error) -> i32 {
    if error.is_backend() {
        EXIT_BACKEND
    } else {
        EXIT_VALIDATION
    }
}

/// Parses `argv`, runs the command, and returns the process exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return EXIT_VALIDATION;
        }
    };
    match runtime.block_on(execute(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn task_sniffing() {
        assert_eq!(sniff_task(br#"{"id":"1","premise":"p","hypothesis":"h","update":"u","gold":"weakener"}"#), TaskKind::Defeasible);
        assert_eq!(sniff_task(b"\n{\"id\":\"1\"}"), TaskKind::Nli);
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(main_with_args(["atomic-nli", "report", "--bogus"]), EXIT_USAGE);
        assert_eq!(main_with_args(["atomic-nli", "--help"]), EXIT_OK);
    }

    #[test]
    fn group_threshold_defaults_to_config() {
        let cli = Cli::try_parse_from(["atomic-nli", "group", "--run-dir", "x"]).unwrap();
        let Command::Group { threshold, .. } = cli.command else { panic!() };
        assert_eq!(threshold, None);
        assert_eq!(Config::default().grouping.threshold, 0.75);
    }
}
