//! `hcsc`: generate data, train, evaluate and inspect hierarchical prototypes.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};
use hcsc_core::data::{generate_hierarchical_mixture, load_dataset, save_dataset, write_atomic, Dataset, GeneratorSpec};
use hcsc_core::eval::{clustering_agreement, holdout_split, knn_evaluate, linear_probe, prototype_label_ami};
use hcsc_core::trainer::{
    eval_tree, load_checkpoint, online_embeddings, run_training, training_tree, RunOptions, TrainingConfig,
};
use hcsc_core::{HcscError, Result};

const SUBCOMMANDS: &[&str] = &["generate", "train", "eval", "inspect-tree", "export"];

#[derive(Parser, Debug)]
#[command(name = "hcsc", version, about = "Hierarchical contrastive selective coding at desk scale")]
struct Cli {
    /// Worker threads (falls back to HCSC_THREADS, then to all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic hierarchical Gaussian mixture dataset
    Generate(GenerateArgs),
    /// Train an encoder and write checkpoints plus metrics.csv
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint (KNN, NMI/AMI, linear probe)
    Eval(EvalArgs),
    /// Print the prototype tree used at a checkpoint's epoch
    InspectTree(InspectArgs),
    /// Bundle metrics, tree dump and config echo of a run directory
    Export(ExportArgs),
}

/// Key-value config file (TOML); keys are flag names, command-line flags win.
#[derive(Args, Debug, Clone)]
struct ConfigArg {
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct GenerateArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Children per node, top level first
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    branching: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    per_leaf: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Norm of the top-level centers
    #[arg(long, default_value_t = 40.0)]
    radius: f64,
    /// Per-coordinate offset std below each level, top first (depth - 1 values)
    #[arg(long, value_delimiter = ',', default_value = "4,1.5")]
    offsets: Vec<f64>,
    #[arg(long, default_value_t = 0.3)]
    leaf_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints and metrics.csv
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint (its config is ignored in favour of the flags)
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    epochs: u64,
    #[arg(long, default_value_t = 6)]
    warmup: u64,
    #[arg(long, default_value = "icsc", value_parser = ["icsc", "plain_infonce"])]
    warmup_mode: String,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.03)]
    lr: f64,
    /// SGD momentum
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Negative queue capacity
    #[arg(long, default_value_t = 512)]
    queue: usize,
    /// Momentum-encoder EMA coefficient
    #[arg(long, default_value_t = 0.999)]
    ema: f64,
    /// Prototypes per level, finest first
    #[arg(long, value_delimiter = ',', default_value = "24,6,2")]
    levels: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    min_cluster_size: usize,
    /// Concentration smoothing
    #[arg(long, default_value_t = 10.0)]
    epsilon: f64,
    /// Instance-wise temperature
    #[arg(long, default_value_t = 0.2)]
    tau: f64,
    /// Mean prototype temperature per level
    #[arg(long, default_value_t = 0.2)]
    base_tau: f64,
    #[arg(long, default_value_t = 1e-3)]
    tau_floor: f64,
    #[arg(long, default_value_t = 10)]
    kmeans_restarts: usize,
    #[arg(long, default_value_t = 100)]
    kmeans_max_iters: usize,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value = "tanh", value_parser = ["tanh", "relu", "identity"])]
    activation: String,
    #[arg(long, default_value_t = 0.5)]
    aug_sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    aug_drop: f64,
    #[arg(long, default_value_t = 0.8)]
    aug_scale_min: f64,
    #[arg(long, default_value_t = 1.2)]
    aug_scale_max: f64,
    /// Instance-wise loss
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = true, default_missing_value = "true")]
    il: bool,
    /// Prototypical loss
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = true, default_missing_value = "true")]
    pl: bool,
    /// Instance negative selection
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = true, default_missing_value = "true")]
    is: bool,
    /// Prototype negative selection
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = true, default_missing_value = "true")]
    ps: bool,
    /// Hierarchical prototypes (off: one level holding all prototypes)
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = true, default_missing_value = "true")]
    hp: bool,
    /// Shorthand for --pl false --is false --ps false --hp false
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    infonce_only: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint cadence in epochs (0: final.ckpt only)
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    #[arg(long, default_value_t = 0.07)]
    knn_tau: f64,
    #[arg(long, value_delimiter = ',', default_value = "10,20,100,200")]
    knn_k: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    holdout_every: usize,
    /// Fraction of queries whose selection reports go to diagnostics.csv
    #[arg(long, default_value_t = 0.0)]
    diagnostic_rate: f64,
    #[arg(long, default_value_t = 300)]
    probe_epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    probe_lr: f64,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainingConfig> {
        fn s<T: Display>(x: T) -> String {
            x.to_string()
        }
        fn list<T: Display>(xs: &[T]) -> String {
            xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        let off = self.infonce_only;
        let pairs = [
            ("activation", self.activation.clone()),
            ("aug_sigma", s(self.aug_sigma)),
            ("aug_drop", s(self.aug_drop)),
            ("aug_scale_min", s(self.aug_scale_min)),
            ("aug_scale_max", s(self.aug_scale_max)),
            ("base_tau", s(self.base_tau)),
            ("batch_size", s(self.batch_size)),
            ("checkpoint_every", s(self.checkpoint_every)),
            ("diagnostic_rate", s(self.diagnostic_rate)),
            ("ema", s(self.ema)),
            ("embed_dim", s(self.embed_dim)),
            ("epochs", s(self.epochs)),
            ("epsilon", s(self.epsilon)),
            ("hidden", list(&self.hidden)),
            ("holdout_every", s(self.holdout_every)),
            ("hp", s(self.hp && !off)),
            ("il", s(self.il)),
            ("is", s(self.is && !off)),
            ("kmeans_max_iters", s(self.kmeans_max_iters)),
            ("kmeans_restarts", s(self.kmeans_restarts)),
            ("knn_k", list(&self.knn_k)),
            ("knn_tau", s(self.knn_tau)),
            ("levels", list(&self.levels)),
            ("lr", s(self.lr)),
            ("min_cluster_size", s(self.min_cluster_size)),
            ("momentum", s(self.momentum)),
            ("pl", s(self.pl && !off)),
            ("probe_epochs", s(self.probe_epochs)),
            ("probe_lr", s(self.probe_lr)),
            ("ps", s(self.ps && !off)),
            ("queue", s(self.queue)),
            ("seed", s(self.seed)),
            ("tau", s(self.tau)),
            ("tau_floor", s(self.tau_floor)),
            ("warmup", s(self.warmup)),
            ("warmup_mode", self.warmup_mode.clone()),
            ("weight_decay", s(self.weight_decay)),
        ];
        let mut c = TrainingConfig::default();
        for (k, v) in pairs {
            c.set(k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// KNN accuracy per k on the held-out split
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    knn: bool,
    /// NMI/AMI of a prototype tree against every label level
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    ami: bool,
    /// Linear probe accuracy on the held-out split
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    probe: bool,
    /// Label level (1 = finest) used for KNN and the probe
    #[arg(long, default_value_t = 1)]
    label_level: usize,
    /// CSV destination (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct InspectArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Dump destination (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct ExportArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Run directory holding metrics.csv and final.ckpt
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Bundle directory to create
    #[arg(long)]
    out: PathBuf,
}

/// Failure before any work starts: wrong invocation or unreadable config file.
enum Failure {
    Usage(String),
    Runtime(HcscError),
}

impl From<HcscError> for Failure {
    fn from(e: HcscError) -> Self {
        Failure::Runtime(e)
    }
}

fn toml_value(key: &str, v: &toml::Value) -> std::result::Result<String, String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => items
            .iter()
            .map(|x| toml_value(key, x))
            .collect::<std::result::Result<Vec<_>, _>>()?
            .join(","),
        _ => return Err(format!("unsupported value for {key:?} in config file")),
    })
}

/// Expands `--config FILE` into flags placed right after the subcommand, so explicit
/// flags given later on the command line override them.
fn expand_config(argv: Vec<String>) -> std::result::Result<Vec<String>, Failure> {
    let Some(sub) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(argv);
    };
    let mut path = None;
    let mut i = sub + 1;
    while i < argv.len() {
        if argv[i] == "--config" {
            path = argv.get(i + 1).cloned();
            i += 1;
        } else if let Some(p) = argv[i].strip_prefix("--config=") {
            path = Some(p.to_string());
        }
        i += 1;
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| Failure::Runtime(HcscError::io(&path, e)))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Failure::Usage(format!("config file {path}: {e}")))?;
    let mut injected = Vec::new();
    for (k, v) in &table {
        let key = k.replace('_', "-");
        if key == "config" {
            return Err(Failure::Usage("config files cannot nest".into()));
        }
        injected.push(format!("--{key}"));
        injected.push(toml_value(k, v).map_err(Failure::Usage)?);
    }
    let mut out = argv[..=sub].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[sub + 1..]);
    Ok(out)
}

fn thread_count(flag: Option<usize>) -> std::result::Result<Option<usize>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("HCSC_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("HCSC_THREADS={v:?} is not a thread count"))),
        _ => Ok(None),
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let spec = GeneratorSpec {
        depth: a.depth,
        branching: a.branching.clone(),
        samples_per_leaf: a.per_leaf,
        dim: a.dim,
        radius: a.radius,
        offset_scales: a.offsets.clone(),
        leaf_noise: a.leaf_noise,
    };
    let ds = generate_hierarchical_mixture(&spec, a.seed)?;
    save_dataset(&ds, &a.out)?;
    eprintln!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let config = a.config()?;
    let dataset = load_dataset(&a.data)?;
    let resume = match &a.resume {
        Some(p) => Some(load_checkpoint(p)?.1),
        None => None,
    };
    let outcome = run_training(
        &config,
        &dataset,
        RunOptions {
            out_dir: Some(a.out.clone()),
            resume,
        },
    )?;
    write_atomic(&a.out.join("config.txt"), config.echo().as_bytes())?;
    if let Some(e) = outcome.epochs.last() {
        eprintln!("epoch {} knn {:.4} ami {:?}", e.epoch, e.knn, e.ami);
    }
    Ok(())
}

fn labels_or_err(ds: &Dataset, level: usize) -> Result<Vec<usize>> {
    if level == 0 || level > ds.depth() {
        return Err(HcscError::config(format!("label level {level} outside 1..={}", ds.depth())));
    }
    Ok(ds.labels_at(level))
}

fn evaluate(a: &EvalArgs) -> Result<()> {
    let (config, state) = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    if ds.dim() != state.online.input_dim() {
        return Err(HcscError::config("dataset dimension does not match the checkpoint"));
    }
    let emb = online_embeddings(&state.online, &ds.features_f64())?;
    let labels = labels_or_err(&ds, a.label_level)?;
    let (train_idx, test_idx) = holdout_split(emb.len(), config.holdout_every);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) { idx.iter().map(|&i| (emb[i].clone(), labels[i])).unzip() };
    let (tr_x, tr_y) = pick(&train_idx);
    let (te_x, te_y) = pick(&test_idx);
    let (seed, epoch) = (config.seed, state.epoch);
    let mut csv = String::from("metric,level_or_k,value,seed,epoch\n");
    let mut row = |metric: &str, key: String, value: f64| csv.push_str(&format!("{metric},{key},{value},{seed},{epoch}\n"));
    let all = !(a.knn || a.ami || a.probe);
    if a.knn || all {
        let r = knn_evaluate(&tr_x, &tr_y, &te_x, &te_y, &config.eval)?;
        for w in &r.warnings {
            eprintln!("warning: {w}");
        }
        for (k, acc) in &r.per_k {
            row("knn", k.to_string(), *acc);
        }
        row("knn_best", r.best_k.to_string(), r.best_accuracy);
    }
    if a.ami || all {
        let tree = eval_tree(&config, &emb, epoch)?;
        let label_levels: Vec<Vec<usize>> = (1..=ds.depth()).map(|l| ds.labels_at(l)).collect();
        for l in 1..=tree.num_levels() {
            let (nmi, ami) = clustering_agreement(&tree.assignment_at(l), &label_levels[(l - 1).min(ds.depth() - 1)])?;
            row("nmi", l.to_string(), nmi);
            row("ami", l.to_string(), ami);
        }
        for (p, per_label) in prototype_label_ami(&tree, &label_levels)?.iter().enumerate() {
            for (g, v) in per_label.iter().enumerate() {
                row("proto_label_ami", format!("{}:{}", p + 1, g + 1), *v);
            }
        }
    }
    if a.probe || all {
        let r = linear_probe(&tr_x, &tr_y, &te_x, &te_y, &config.eval)?;
        row("probe", a.label_level.to_string(), r.accuracy);
    }
    write_output(a.out.as_deref(), &csv)
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let (config, state) = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let tree = training_tree(&config, &state, &ds)?;
    write_output(a.out.as_deref(), &tree.dump())
}

fn export(a: &ExportArgs) -> Result<()> {
    let metrics_path = a.run.join("metrics.csv");
    let metrics = fs::read(&metrics_path).map_err(|e| HcscError::io(&metrics_path, e))?;
    let (config, state) = load_checkpoint(&a.run.join("final.ckpt"))?;
    let ds = load_dataset(&a.data)?;
    let tree = training_tree(&config, &state, &ds)?;
    fs::create_dir_all(&a.out).map_err(|e| HcscError::io(&a.out, e))?;
    write_atomic(&a.out.join("metrics.csv"), &metrics)?;
    write_atomic(&a.out.join("tree.tsv"), tree.dump().as_bytes())?;
    write_atomic(&a.out.join("config.txt"), config.echo().as_bytes())?;
    let diag = a.run.join("diagnostics.csv");
    if diag.exists() {
        let bytes = fs::read(&diag).map_err(|e| HcscError::io(&diag, e))?;
        write_atomic(&a.out.join("diagnostics.csv"), &bytes)?;
    }
    Ok(())
}

fn dispatch(argv: Vec<String>) -> std::result::Result<(), Failure> {
    let argv = expand_config(argv)?;
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let mut msg = e.render().to_string();
            if !msg.contains("Usage:") {
                let mut cmd = Cli::command();
                cmd.build();
                let sub = argv.iter().find(|a| SUBCOMMANDS.contains(&a.as_str()));
                let usage = match sub.and_then(|s| cmd.find_subcommand_mut(s)) {
                    Some(sc) => sc.render_usage(),
                    None => cmd.render_usage(),
                };
                msg.push_str(&format!("\n{usage}"));
            }
            return Err(Failure::Usage(msg));
        }
    };
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Failure::Usage("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(HcscError::config(e.to_string())))?;
    }
    match &cli.command {
        Command::Generate(a) => generate(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => evaluate(a)?,
        Command::InspectTree(a) => inspect(a)?,
        Command::Export(a) => export(a)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("{}", msg.trim_end());
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
