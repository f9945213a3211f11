//! `wmrb` command line: `train | evaluate | simulate | popularity`.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data error
//! (unreadable data, missing or corrupt model, unwritable output), 3 training
//! diverged. Only the requested artifact is written to stdout.

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use crate::data::{popularity_ranking, DataError, DatasetManifest, LoadedData};
use crate::estimator::{self, BatchContribution, SimulationConfig};
use crate::eval::{self, ModelScorer, PopularityScorer};
use crate::model::{load_model, save_model};
use crate::trainer::{self, LossKind, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Diverged { .. } => EXIT_DIVERGED,
            TrainError::EmptyDataset => EXIT_DATA,
            TrainError::Config(_) | TrainError::Model(_) => EXIT_CONFIG,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "wmrb", version, about = "Train and evaluate ranking-loss recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write it with a per-epoch report.
    Train(TrainArgs),
    /// Compute precision, recall and NDCG on the held-out split.
    Evaluate(EvalArgs),
    /// Tabulate rank-estimator statistics as CSV.
    Simulate(SimulateArgs),
    /// Print training-split item counts, most popular first.
    Popularity(PopularityArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest; overrides the config file.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// warp, wmrb or ce.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    max_trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Model output path.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Report output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model file to evaluate.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Evaluate a baseline instead of a model (only `pop`).
    #[arg(long)]
    baseline: Option<String>,
    /// Cutoffs, comma separated.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Report metrics in percent.
    #[arg(long)]
    percent: bool,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 100_000)]
    item_set_size: usize,
    /// Candidate fractions |Z|/N, comma separated.
    #[arg(long, value_delimiter = ',')]
    q: Option<Vec<f64>>,
    /// Normalized ranks, comma separated; default is 30 log-spaced points.
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<f64>>,
    /// Monte Carlo draws per point; 0 for closed forms only.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Online draw cap; default N - 1.
    #[arg(long)]
    max_trials: Option<usize>,
    /// Sum hinge magnitudes instead of violator indicators in the batch estimator.
    #[arg(long)]
    hinge: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PopularityArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Print only the top k items.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Contents of a `--config` file: dataset manifest, training settings,
/// cutoffs and output paths. Relative paths are resolved against the
/// file's directory; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfigFile {
    pub manifest: Option<PathBuf>,
    pub train: TrainConfig,
    pub k: Option<Vec<usize>>,
    pub model: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl RunConfigFile {
    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let value: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let Value::Object(mut map) = value else {
            return Err("config must be a JSON object".into());
        };
        let path = |map: &mut Map<String, Value>, key: &str| -> Result<Option<PathBuf>, String> {
            match map.remove(key) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => {
                    let p = PathBuf::from(s);
                    Ok(Some(if p.is_relative() { base.join(p) } else { p }))
                }
                Some(other) => Err(format!("{key} must be a path string, got {other}")),
            }
        };
        let manifest = path(&mut map, "manifest")?;
        let model = path(&mut map, "model")?;
        let report = path(&mut map, "report")?;
        let metrics = path(&mut map, "metrics")?;
        let k = match map.remove("k") {
            None | Some(Value::Null) => None,
            Some(v) => Some(serde_json::from_value(v).map_err(|e| format!("k: {e}"))?),
        };
        let train = serde_json::from_value(Value::Object(map)).map_err(|e| e.to_string())?;
        Ok(RunConfigFile {
            manifest,
            train,
            k,
            model,
            report,
            metrics,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base).map_err(|e| CliError::config(format!("config {}: {e}", path.display())))
    }
}

fn load_config(data: &DataArgs) -> Result<RunConfigFile, CliError> {
    let mut cfg = match &data.config {
        Some(p) => RunConfigFile::from_file(p)?,
        None => RunConfigFile::default(),
    };
    if let Some(m) = &data.manifest {
        cfg.manifest = Some(m.clone());
    }
    Ok(cfg)
}

fn load_data(cfg: &RunConfigFile) -> Result<LoadedData, CliError> {
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::config("no dataset manifest given (use --manifest or the config's \"manifest\")"))?;
    let manifest = DatasetManifest::from_file(path)?;
    Ok(manifest.load()?)
}

/// Writes `f`'s output to `path`, or to `stdout` when `path` is absent.
fn emit(
    path: Option<&Path>,
    stdout: &mut dyn Write,
    f: &dyn Fn(&mut dyn Write) -> io::Result<()>,
) -> Result<(), CliError> {
    let result = match path {
        Some(p) => File::create(p).and_then(|file| {
            let mut w = BufWriter::new(file);
            f(&mut w)?;
            w.flush()
        }),
        None => f(stdout).and_then(|_| stdout.flush()),
    };
    result.map_err(|e| {
        let target = path.map_or("stdout".to_string(), |p| p.display().to_string());
        CliError::data(format!("cannot write {target}: {e}"))
    })
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, CliError> {
    if threads == 0 {
        return Err(CliError::config("threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::config(e.to_string()))
}

fn cmd_train(args: TrainArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(&args.data)?;
    let t = &mut cfg.train;
    if let Some(loss) = &args.loss {
        t.loss = loss.parse::<LossKind>().map_err(CliError::config)?;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag { t.$field = v; })*
        };
    }
    set!(dim => dim, epochs => epochs, lr => learning_rate, l2 => l2, batch_size => batch_size,
         seed => seed, threads => threads);
    if args.candidates.is_some() {
        t.candidates = args.candidates;
    }
    if args.max_trials.is_some() {
        t.max_trials = args.max_trials;
    }
    let model_path = args
        .model
        .or(cfg.model.clone())
        .ok_or_else(|| CliError::config("no model output path given (use --model)"))?;
    let report_path = args.out.or(cfg.report.clone());

    let data = load_data(&cfg)?;
    cfg.train.validate(data.dataset.num_items())?;
    let _ = writeln!(
        stderr,
        "training {} on {} users, {} items, {} pairs",
        cfg.train.loss,
        data.dataset.num_users(),
        data.dataset.num_items(),
        data.dataset.num_train()
    );
    let (params, report) = trainer::train(&data.dataset, &data.user_features, &data.item_features, &cfg.train)?;
    for (i, e) in report.epochs.iter().enumerate() {
        let _ = writeln!(stderr, "epoch {}: loss {:.6} ({:.3}s)", i + 1, e.loss, e.seconds);
    }
    save_model(&params, &model_path).map_err(|e| CliError::data(e.to_string()))?;
    emit(report_path.as_deref(), stdout, &|w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)
    })
}

fn cmd_evaluate(args: EvalArgs, stdout: &mut dyn Write, _stderr: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(&args.data)?;
    let k_list = args.k.or(cfg.k.clone()).unwrap_or_else(|| vec![5, 30]);
    let out = args.out.or(cfg.metrics.clone());
    let pool = thread_pool(args.threads.unwrap_or(cfg.train.threads))?;
    let model_path = match (&args.baseline, &args.model) {
        (Some(b), _) if b != "pop" => {
            return Err(CliError::config(format!("unknown baseline {b:?}; valid options: pop")));
        }
        (Some(_), Some(_)) => return Err(CliError::config("--baseline and --model are mutually exclusive")),
        (Some(_), None) => None,
        (None, Some(m)) => Some(m.clone()),
        (None, None) => Some(
            cfg.model
                .clone()
                .ok_or_else(|| CliError::config("no model given (use --model or --baseline pop)"))?,
        ),
    };

    let data = load_data(&cfg)?;
    let report = match model_path {
        None => pool.install(|| eval::evaluate(&PopularityScorer::new(&data.dataset), &data.dataset, &k_list)),
        Some(path) => {
            let params = load_model(&path, None).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            let shape = params.shape();
            if shape.num_user_features != data.user_features.num_features()
                || shape.num_item_features != data.item_features.num_features()
            {
                return Err(CliError::data(format!(
                    "{}: model has {} user / {} item features, dataset has {} / {}",
                    path.display(),
                    shape.num_user_features,
                    shape.num_item_features,
                    data.user_features.num_features(),
                    data.item_features.num_features()
                )));
            }
            let scorer = ModelScorer::new(&params, &data.user_features, &data.item_features);
            pool.install(|| eval::evaluate(&scorer, &data.dataset, &k_list))
        }
    }
    .map_err(|e| match e {
        eval::EvalError::InvalidCutoffs => CliError::config(e.to_string()),
        eval::EvalError::NoEvaluableUsers => CliError::data(e.to_string()),
    })?;
    let report = if args.percent { report.to_percent() } else { report };
    emit(out.as_deref(), stdout, &|w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)
    })
}

fn cmd_simulate(args: SimulateArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let defaults = SimulationConfig::default();
    let config = SimulationConfig {
        item_set_size: args.item_set_size,
        p_grid: args.p.unwrap_or(defaults.p_grid),
        q_values: args.q.unwrap_or(defaults.q_values),
        trials: args.trials,
        seed: args.seed,
        max_trials: args.max_trials,
        contribution: if args.hinge {
            BatchContribution::Hinge
        } else {
            BatchContribution::Indicator
        },
    };
    config.validate().map_err(|e| CliError::config(e.to_string()))?;
    let pool = thread_pool(args.threads)?;
    let stats = pool
        .install(|| estimator::simulate_fig1(&config))
        .map_err(|e| CliError::config(e.to_string()))?;
    let _ = writeln!(
        stderr,
        "simulated {} grid points, N = {}, {} Monte Carlo draws each",
        stats.rows.len(),
        config.item_set_size,
        config.trials
    );
    emit(args.out.as_deref(), stdout, &|w| stats.write_csv(w))
}

fn cmd_popularity(args: PopularityArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(&args.data)?;
    let data = load_data(&cfg)?;
    let counts = data.dataset.item_counts();
    let mut ranking = popularity_ranking(&data.dataset);
    if let Some(k) = args.k {
        ranking.truncate(k);
    }
    emit(args.out.as_deref(), stdout, &|w| {
        for &item in &ranking {
            writeln!(w, "{item}\t{}", counts[item])?;
        }
        Ok(())
    })
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() {
                EXIT_CONFIG
            } else {
                let _ = write!(stdout, "{}", e.render());
                EXIT_OK
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, stdout, stderr),
        Command::Evaluate(a) => cmd_evaluate(a, stdout, stderr),
        Command::Simulate(a) => cmd_simulate(a, stdout, stderr),
        Command::Popularity(a) => cmd_popularity(a, stdout),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.code
        }
    }
}

pub fn run() -> i32 {
    let stdout = io::stdout();
    let stderr = io::stderr();
    run_with(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(std::iter::once("wmrb").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn config_file_splits_paths_and_train_fields() {
        let text = r#"{"manifest": "m.json", "loss": "ce", "dim": 4, "k": [5, 30], "model": "/abs/model.bin"}"#;
        let cfg = RunConfigFile::parse(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.manifest, Some(PathBuf::from("/base/m.json")));
        assert_eq!(cfg.model, Some(PathBuf::from("/abs/model.bin")));
        assert_eq!(cfg.train.loss, LossKind::Ce);
        assert_eq!(cfg.train.dim, 4);
        assert_eq!(cfg.k, Some(vec![5, 30]));
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        assert!(RunConfigFile::parse(r#"{"dimension": 4}"#, Path::new(".")).is_err());
        assert!(RunConfigFile::parse(r#"[1]"#, Path::new(".")).is_err());
        assert!(RunConfigFile::parse(r#"{"model": 3}"#, Path::new(".")).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_capture(&["bogus"]).0, EXIT_CONFIG);
        assert_eq!(run_capture(&["simulate", "--trials", "x"]).0, EXIT_CONFIG);
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("simulate"));
    }

    #[test]
    fn invalid_loss_names_the_options() {
        let (code, _, err) = run_capture(&["train", "--loss", "bpr", "--model", "/nonexistent/m.bin"]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(err.contains("warp, wmrb, ce"), "{err}");
    }

    #[test]
    fn simulate_invalid_grid_exits_one() {
        let (code, out, _) = run_capture(&["simulate", "--q", "0", "--trials", "0"]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(out.is_empty());
        assert_eq!(run_capture(&["simulate", "--p", "1.5", "--trials", "0"]).0, EXIT_CONFIG);
    }

    #[test]
    fn simulate_closed_form_to_stdout() {
        let (code, out, _) = run_capture(&["simulate", "--trials", "0", "--item-set-size", "1000", "--q", "0.1"]);
        assert_eq!(code, EXIT_OK);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(
            lines[0],
            "p,true_rank,online_rel_std,online_rel_bias,batch_rel_std_q0.1"
        );
        assert_eq!(lines.len(), 31);
    }

    #[test]
    fn missing_manifest_is_data_error() {
        let (code, _, _) = run_capture(&["popularity", "--manifest", "/nonexistent/manifest.json"]);
        assert_eq!(code, EXIT_DATA);
    }
}
