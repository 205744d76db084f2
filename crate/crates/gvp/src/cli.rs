//! Command-line surface.
//!
//! Exit codes: 0 success, 2 input error, 3 numeric failure, 4 undefined
//! metric, 5 property violation.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gvp_core::audit::{audit_equivariance, TransformClass};
use gvp_core::checkpoint::{parse_prefixes, transfer_load, Checkpoint, CheckpointError};
use gvp_core::config::parse_entries;
use gvp_core::graph::{featurize, ElementVocab, GraphError, DEFAULT_CUTOFF};
use gvp_core::model::{GvpGnnModel, ModelConfig, TaskMode};
use gvp_core::train::{evaluate, metric, metric_inputs, train_loop, LossKind, MetricError, MetricKind, TrainConfig, TrainError};

use crate::demos::{demo_approx, demo_gate, ApproxOptions, GateOptions};
use crate::io::{self, IoError};

#[derive(Debug, Parser)]
#[command(name = "gvp", version, about = "Geometric vector perceptron GNN toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Featurize an XYZ file into a native graph file.
    GraphBuild(GraphBuildArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Audit a model's rotation, reflection, translation and permutation symmetry.
    CheckEquivariance(CheckArgs),
    /// Scalar-to-vector information flow: gated vs ungated GVP stacks.
    DemoGate(DemoGateArgs),
    /// Fit an equivariant vector-valued map with GVP stacks of increasing width.
    DemoApprox(DemoApproxArgs),
}

#[derive(Debug, Args)]
pub struct GraphBuildArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    pub cutoff: f64,
    #[arg(long)]
    pub keep_hydrogens: bool,
    /// Comma-separated element symbols; unknown elements map to a trailing
    /// "other" bucket.
    #[arg(long, value_delimiter = ',')]
    pub vocab: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    /// `key = value` run config (model and training keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV path; defaults to `<out>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[arg(long, default_value = "embed,layer.0,layer.1")]
    pub transfer_prefixes: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "mae,rmse")]
    pub metric: Vec<String>,
    #[arg(long, default_value = "mse")]
    pub loss: String,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, conflicts_with = "random_model", required_unless_present = "random_model")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub random_model: bool,
    /// Model config for --random-model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negative control: add a fixed vector to the embedded vector channels.
    #[arg(long, hide = true, value_delimiter = ',', allow_hyphen_values = true)]
    pub inject_vector_bias: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct DemoGateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DemoApproxArgs {
    #[arg(long, default_value_t = 5)]
    pub nu: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Narrower widths trained for comparison.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub compare: Vec<usize>,
}

/// A failed command and its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    UndefinedMetric(String),
    #[error("{0}")]
    Property(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::UndefinedMetric(_) => 4,
            CliError::Property(_) => 5,
        }
    }
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        input(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => input(e),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Undefined(..) => CliError::UndefinedMetric(e.to_string()),
            _ => input(e),
        }
    }
}

type Out<'a> = &'a mut dyn Write;

fn say(out: Out<'_>, text: impl AsRef<str>) -> Result<(), CliError> {
    out.write_all(text.as_ref().as_bytes()).map_err(input)
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Normal output goes to `out`, diagnostics to stderr.
pub fn run<I, T>(args: I, out: Out<'_>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(cmd: Command, out: Out<'_>) -> Result<(), CliError> {
    match cmd {
        Command::GraphBuild(a) => cmd_graph_build(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::CheckEquivariance(a) => cmd_check_equivariance(&a, out),
        Command::DemoGate(a) => cmd_demo_gate(&a, out),
        Command::DemoApprox(a) => cmd_demo_approx(&a, out),
    }
}

pub fn cmd_graph_build(a: &GraphBuildArgs, out: Out<'_>) -> Result<(), CliError> {
    let vocab = match &a.vocab {
        Some(v) => ElementVocab::new(v).map_err(input)?,
        None => ElementVocab::default(),
    };
    say(out, format!("# graph-build\ncutoff = {:?}\nkeep_hydrogens = {}\nvocab = {}\n", a.cutoff, a.keep_hydrogens, vocab.symbols().join(",")))?;
    let atoms = io::read_xyz(&a.input, a.keep_hydrogens)?;
    let g = featurize(&atoms, &vocab, a.cutoff).map_err(|e| match e {
        GraphError::Empty => CliError::Input(format!("{}: empty graph (no atoms left)", a.input.display())),
        e => CliError::Input(format!("{}: {e}", a.input.display())),
    })?;
    io::write_graph(&a.out, &g)?;
    say(out, format!("{} nodes, {} edges\n", g.num_nodes(), g.num_edges()))
}

/// Model and training configuration resolved from a config file, the data
/// and flags.
pub fn resolve_train_config(a: &TrainArgs, node_width: usize) -> Result<(ModelConfig, TrainConfig), CliError> {
    let mut model = ModelConfig { in_scalars: node_width, ..ModelConfig::default() };
    let mut train = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
        for e in parse_entries(&text).map_err(|e| input(format!("{}: {e}", path.display())))? {
            let known = model.set(&e.key, &e.value).map_err(|m| input(format!("{} line {}: {m}", path.display(), e.line)))?
                || train.set(&e.key, &e.value).map_err(|m| input(format!("{} line {}: {m}", path.display(), e.line)))?;
            if !known {
                return Err(input(format!("{} line {}: unknown key {:?}", path.display(), e.line, e.key)));
            }
        }
    }
    if let Some(s) = a.seed {
        train.seed = s;
    }
    if let Some(n) = a.epochs {
        train.max_epochs = n;
    }
    if let Some(lr) = a.lr {
        train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        train.batch_size = b;
    }
    model.validate().map_err(input)?;
    train.validate()?;
    Ok((model, train))
}

pub fn default_history_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".history.csv");
    PathBuf::from(s)
}

fn peek_paired(a: &TrainArgs) -> Result<bool, CliError> {
    let Some(path) = &a.config else { return Ok(false) };
    let text = std::fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let entries = parse_entries(&text).map_err(|e| input(format!("{}: {e}", path.display())))?;
    Ok(entries.iter().any(|e| e.key == "task_mode" && e.value == "paired"))
}

pub fn cmd_train(a: &TrainArgs, out: Out<'_>) -> Result<(), CliError> {
    let paired = peek_paired(a)?;
    let train_set = io::read_manifest(&a.manifest, paired)?;
    let val_set = match &a.val_manifest {
        Some(p) => io::read_manifest(p, paired)?,
        None => Vec::new(),
    };
    let width = train_set[0].graphs[0].node_scalars.first().map_or(0, Vec::len);
    let (mcfg, tcfg) = resolve_train_config(a, width)?;
    let history_path = a.history.clone().unwrap_or_else(|| default_history_path(&a.out));
    let mut resolved = format!("# train\n{}{}", mcfg.to_text(), tcfg.to_text());
    resolved.push_str(&format!("manifest = {}\n", a.manifest.display()));
    if let Some(p) = &a.val_manifest {
        resolved.push_str(&format!("val_manifest = {}\n", p.display()));
    }
    resolved.push_str(&format!("out = {}\nhistory = {}\n", a.out.display(), history_path.display()));
    if let Some(p) = &a.init_from {
        resolved.push_str(&format!("init_from = {}\ntransfer_prefixes = {}\n", p.display(), a.transfer_prefixes));
    }
    say(out, resolved)?;

    let mut model = GvpGnnModel::new(mcfg, tcfg.seed).map_err(input)?;
    if let Some(p) = &a.init_from {
        let src = io::load_checkpoint(p)?;
        let prefixes = parse_prefixes(&a.transfer_prefixes);
        let refs: Vec<&str> = prefixes.iter().map(String::as_str).collect();
        let (m, names) = transfer_load(&src, &model, &refs).map_err(|e| input(format!("{}: {e}", p.display())))?;
        model = m;
        say(out, format!("transferred {} tensors\n", names.len()))?;
    }
    let history = train_loop(&mut model, &train_set, &val_set, &tcfg)?;
    io::save_checkpoint(&a.out, &Checkpoint::from_model(&model))?;
    io::write(&history_path, io::history_csv(&history))?;
    let last = history.train_loss.last().copied().unwrap_or(f64::NAN);
    say(out, format!("epochs {}\nfinal_train_loss {last:?}\n", history.epochs()))
}

pub fn cmd_eval(a: &EvalArgs, out: Out<'_>) -> Result<(), CliError> {
    let loss: LossKind = a.loss.parse().map_err(input)?;
    let mut kinds = Vec::new();
    for m in &a.metric {
        kinds.push(m.parse::<MetricKind>().map_err(input)?);
    }
    say(out, format!("# eval\nmanifest = {}\nckpt = {}\nloss = {}\nmetric = {}\n", a.manifest.display(), a.ckpt.display(), loss.name(), a.metric.join(",")))?;
    let ckpt = io::load_checkpoint(&a.ckpt)?;
    let model = ckpt.to_model().map_err(|e| input(format!("{}: {e}", a.ckpt.display())))?;
    let data = io::read_manifest(&a.manifest, model.config().task_mode == TaskMode::Paired)?;
    let (_, outputs) = evaluate(&model, &data, loss)?;
    let (preds, targets) = metric_inputs(&outputs, &data, loss);
    for k in kinds {
        let v = metric(&preds, &targets, k)?;
        say(out, format!("{} {v:?}\n", k.name()))?;
    }
    Ok(())
}

pub fn cmd_check_equivariance(a: &CheckArgs, out: Out<'_>) -> Result<(), CliError> {
    let graph = io::read_graph(&a.graph)?;
    let width = graph.node_scalars.first().map_or(0, Vec::len);
    let mut model = match &a.ckpt {
        Some(p) => io::load_checkpoint(p)?.to_model().map_err(|e: CheckpointError| input(format!("{}: {e}", p.display())))?,
        None => {
            let mut cfg = ModelConfig { in_scalars: width, ..ModelConfig::default() };
            if let Some(path) = &a.config {
                let text = std::fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
                for e in parse_entries(&text).map_err(input)? {
                    if !cfg.set(&e.key, &e.value).map_err(input)? {
                        return Err(input(format!("{} line {}: unknown key {:?}", path.display(), e.line, e.key)));
                    }
                }
            }
            GvpGnnModel::new(cfg, a.seed).map_err(input)?
        }
    };
    if let Some(b) = &a.inject_vector_bias {
        let &[x, y, z] = b.as_slice() else {
            return Err(input(format!("--inject-vector-bias takes 3 components, got {}", b.len())));
        };
        model = model.with_vector_bias([x, y, z]);
    }
    say(
        out,
        format!(
            "# check-equivariance\ngraph = {}\nmodel = {}\ntrials = {}\ntol = {:?}\nseed = {}\n{}",
            a.graph.display(),
            a.ckpt.as_ref().map_or("random".to_string(), |p| p.display().to_string()),
            a.trials,
            a.tol,
            a.seed,
            model.config().to_text()
        ),
    )?;
    let report = audit_equivariance(&model, &graph, a.trials, a.seed).map_err(input)?;
    for c in TransformClass::ALL {
        let d = report.class(c);
        say(out, format!("{} max_rel_dev {:?}\n", c.name(), d.max_rel))?;
    }
    let worst = report.worst();
    if report.passes(a.tol) {
        say(out, "equivariance ok\n")
    } else {
        say(out, format!("violation: {} deviation {:?} > {:?} (transform seed {})\n", worst.class.name(), worst.max_rel, a.tol, worst.worst_seed))?;
        Err(CliError::Property(format!(
            "equivariance violated: {} max_rel_dev {:?} at transform seed {}",
            worst.class.name(),
            worst.max_rel,
            worst.worst_seed
        )))
    }
}

pub fn cmd_demo_gate(a: &DemoGateArgs, out: Out<'_>) -> Result<(), CliError> {
    let mut opts = GateOptions { seed: a.seed, ..GateOptions::default() };
    if let Some(s) = a.steps {
        opts.fit.steps = s;
    }
    let report = demo_gate(&opts).map_err(|e| CliError::Numeric(e.to_string()))?;
    let text = report.to_text();
    io::write(&a.out, &text)?;
    say(out, &text)?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Property("demo-gate assertions failed".into()))
    }
}

/// Held-out MAE threshold asserted by the approximation demo at width ≥ 64.
pub const APPROX_MAE_TOL: f64 = 0.05;

pub fn cmd_demo_approx(a: &DemoApproxArgs, out: Out<'_>) -> Result<(), CliError> {
    if a.nu < 3 {
        return Err(input(format!("--nu must be at least 3, got {}", a.nu)));
    }
    let mut opts = ApproxOptions { nu: a.nu, width: a.width, seed: a.seed, compare: a.compare.clone(), ..ApproxOptions::default() };
    if let Some(s) = a.steps {
        opts.fit.steps = s;
    }
    let report = demo_approx(&opts).map_err(|e| CliError::Numeric(e.to_string()))?;
    let text = report.to_text(APPROX_MAE_TOL);
    io::write(&a.out, &text)?;
    say(out, &text)?;
    if report.passed(APPROX_MAE_TOL) {
        Ok(())
    } else {
        Err(CliError::Property("demo-approx assertions failed".into()))
    }
}
