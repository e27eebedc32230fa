//! Momentum-contrast training loop with per-epoch prototype refresh.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::data::{augment, kv_get, parse_kv_block, write_atomic, AugmentationPolicy, Dataset, Reader};
use crate::encoder::{
    ema_update, embed, encoder_backward, encoder_forward, Activation, EncoderConfig, EncoderParams, MomentumState,
    NegativeQueue, QueueKey,
};
use crate::error::{HcscError, Result};
use crate::eval::{knn_evaluate, negative_selection_diagnostics, prototype_label_ami, EvalConfig, SelectionDiagnostics};
use crate::hierarchy::{build_hierarchy, validate_level_sizes, HierarchyOptions, KMeansOptions, PrototypeTree, TreeBuilder};
use crate::losses::{hcsc_loss, icsc_loss, pcsc_loss, LossOutput, LossToggles, LossWeights};
use crate::rng::{substream, tag};
use crate::selection::{
    accept_all_instance, accept_all_proto, select_instance_negatives_with, select_proto_negatives_with,
    InstanceAffinity, ProtoAffinity, SelectionReport, SelectionStream, DIAGNOSTICS_HEADER,
};
use crate::vector::Embedding;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HCSC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Column order of `metrics.csv`. Per-level values are `;`-joined, finest level first.
pub const METRICS_HEADER: &str =
    "row,epoch,step,lr,loss,icsc,pcsc,sel_prob,inst_accepted,proto_accepted,fn_removal,tn_precision,knn,ami";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmupMode {
    /// Instance-wise selective loss only.
    Icsc,
    /// InfoNCE against the whole queue.
    PlainInfoNce,
}

impl WarmupMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Icsc => "icsc",
            Self::PlainInfoNce => "plain_infonce",
        }
    }
}

impl FromStr for WarmupMode {
    type Err = HcscError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icsc" => Ok(Self::Icsc),
            "plain_infonce" => Ok(Self::PlainInfoNce),
            other => Err(HcscError::config(format!("unknown warmup mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub epochs: u64,
    pub warmup_epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub queue_capacity: usize,
    pub ema: f64,
    /// Prototype counts per level, finest first.
    pub level_sizes: Vec<usize>,
    pub hierarchy: HierarchyOptions,
    /// Instance-wise temperature.
    pub tau: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub augmentation: AugmentationPolicy,
    pub warmup_mode: WarmupMode,
    pub toggles: LossToggles,
    pub seed: u64,
    /// Checkpoint cadence in epochs; 0 writes only `final.ckpt`.
    pub checkpoint_every: u64,
    pub eval: EvalConfig,
    /// Every `holdout_every`-th sample is held out for the per-epoch KNN.
    pub holdout_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            warmup_epochs: 6,
            batch_size: 64,
            lr: 0.03,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            queue_capacity: 512,
            ema: 0.999,
            level_sizes: vec![24, 6, 2],
            hierarchy: HierarchyOptions::default(),
            tau: 0.2,
            hidden: vec![64],
            embed_dim: 32,
            activation: Activation::Tanh,
            augmentation: AugmentationPolicy::default(),
            warmup_mode: WarmupMode::Icsc,
            toggles: LossToggles::FULL,
            seed: 0,
            checkpoint_every: 0,
            eval: EvalConfig::default(),
            holdout_every: 5,
        }
    }
}

fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| x.trim().parse().map_err(|_| bad_value(key, x)))
        .collect()
}

fn bad_value(key: &str, v: &str) -> HcscError {
    HcscError::config(format!("invalid value {v:?} for {key}"))
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| bad_value(key, v))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(bad_value(key, v)),
    }
}

impl TrainingConfig {
    /// Keys understood by [`TrainingConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "activation",
        "aug_drop",
        "aug_scale_max",
        "aug_scale_min",
        "aug_sigma",
        "base_tau",
        "batch_size",
        "checkpoint_every",
        "ema",
        "embed_dim",
        "epochs",
        "epsilon",
        "hidden",
        "holdout_every",
        "hp",
        "il",
        "is",
        "kmeans_max_iters",
        "kmeans_restarts",
        "knn_k",
        "knn_tau",
        "diagnostic_rate",
        "levels",
        "lr",
        "min_cluster_size",
        "momentum",
        "pl",
        "probe_epochs",
        "probe_lr",
        "ps",
        "queue",
        "seed",
        "tau",
        "tau_floor",
        "warmup",
        "warmup_mode",
        "weight_decay",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(HcscError::config("warmup epochs exceed total epochs"));
        }
        if self.batch_size < 2 {
            return Err(HcscError::config("batch size must be at least 2"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(HcscError::config("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(HcscError::config("sgd momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(HcscError::config("weight decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(HcscError::config("ema coefficient must lie in [0, 1]"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(HcscError::config("temperature must be positive"));
        }
        if self.queue_capacity == 0 || self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(HcscError::config("queue capacity and layer widths must be positive"));
        }
        if self.level_sizes.is_empty() || self.level_sizes.contains(&0) {
            return Err(HcscError::config("level sizes must be non-empty and positive"));
        }
        if self.holdout_every < 2 {
            return Err(HcscError::config("holdout_every must be at least 2"));
        }
        self.toggles.validate()?;
        self.hierarchy.validate()?;
        self.eval.validate()
    }

    /// Level sizes actually clustered; without hierarchy all prototypes share one level.
    pub fn effective_level_sizes(&self) -> Vec<usize> {
        if self.toggles.hierarchical {
            self.level_sizes.clone()
        } else {
            vec![self.level_sizes.iter().sum()]
        }
    }

    /// Toggles in force during `epoch` (0-based).
    pub fn phase_toggles(&self, epoch: u64) -> LossToggles {
        if epoch >= self.warmup_epochs {
            return self.toggles;
        }
        LossToggles {
            instance_loss: true,
            proto_loss: false,
            proto_selection: false,
            instance_selection: match self.warmup_mode {
                WarmupMode::Icsc => self.toggles.instance_selection,
                WarmupMode::PlainInfoNce => false,
            },
            hierarchical: self.toggles.hierarchical,
        }
    }

    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden: self.hidden.clone(),
            output_dim: self.embed_dim,
            activation: self.activation,
        }
    }

    pub fn tree_builder(&self) -> TreeBuilder {
        TreeBuilder {
            level_sizes: self.effective_level_sizes(),
            opts: self.hierarchy.clone(),
            seed: self.seed,
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let aug = &self.augmentation;
        match key {
            "activation" => self.activation = v.trim().parse()?,
            "aug_sigma" | "aug_drop" | "aug_scale_min" | "aug_scale_max" => {
                let (mut s, mut d, (mut a, mut b)) = (aug.noise_sigma(), aug.drop_prob(), aug.scale_range());
                let x: f64 = parse(key, v)?;
                match key {
                    "aug_sigma" => s = x,
                    "aug_drop" => d = x,
                    "aug_scale_min" => a = x,
                    _ => b = x,
                }
                // bounds may be set one at a time
                if a > b {
                    if key == "aug_scale_min" {
                        b = a;
                    } else {
                        a = b;
                    }
                }
                self.augmentation = AugmentationPolicy::new(s, d, (a, b))?;
            }
            "base_tau" => self.hierarchy.base_tau = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "diagnostic_rate" => self.eval.diagnostic_rate = parse(key, v)?,
            "ema" => self.ema = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "epsilon" => self.hierarchy.epsilon = parse(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "holdout_every" => self.holdout_every = parse(key, v)?,
            "hp" => self.toggles.hierarchical = parse_bool(key, v)?,
            "il" => self.toggles.instance_loss = parse_bool(key, v)?,
            "is" => self.toggles.instance_selection = parse_bool(key, v)?,
            "kmeans_max_iters" => self.hierarchy.kmeans.max_iters = parse(key, v)?,
            "kmeans_restarts" => self.hierarchy.kmeans.restarts = parse(key, v)?,
            "knn_k" => self.eval.knn_k_grid = parse_list(key, v)?,
            "knn_tau" => self.eval.knn_temperature = parse(key, v)?,
            "levels" => self.level_sizes = parse_list(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "min_cluster_size" => self.hierarchy.min_cluster_size = parse(key, v)?,
            "momentum" => self.sgd_momentum = parse(key, v)?,
            "pl" => self.toggles.proto_loss = parse_bool(key, v)?,
            "probe_epochs" => self.eval.probe_epochs = parse(key, v)?,
            "probe_lr" => self.eval.probe_lr = parse(key, v)?,
            "ps" => self.toggles.proto_selection = parse_bool(key, v)?,
            "queue" => self.queue_capacity = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "tau_floor" => self.hierarchy.tau_floor = parse(key, v)?,
            "warmup" => self.warmup_epochs = parse(key, v)?,
            "warmup_mode" => self.warmup_mode = v.trim().parse()?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            other => return Err(HcscError::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Textual echo of every field, readable by [`TrainingConfig::set`].
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let aug = &self.augmentation;
        let (a, b) = aug.scale_range();
        let t = &self.toggles;
        let entries: Vec<(&str, String)> = vec![
            ("activation", self.activation.name().to_string()),
            ("aug_drop", format!("{:?}", aug.drop_prob())),
            ("aug_scale_max", format!("{b:?}")),
            ("aug_scale_min", format!("{a:?}")),
            ("aug_sigma", format!("{:?}", aug.noise_sigma())),
            ("base_tau", format!("{:?}", self.hierarchy.base_tau)),
            ("batch_size", self.batch_size.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("diagnostic_rate", format!("{:?}", self.eval.diagnostic_rate)),
            ("ema", format!("{:?}", self.ema)),
            ("embed_dim", self.embed_dim.to_string()),
            ("epochs", self.epochs.to_string()),
            ("epsilon", format!("{:?}", self.hierarchy.epsilon)),
            ("hidden", join(&self.hidden, ",")),
            ("holdout_every", self.holdout_every.to_string()),
            ("hp", t.hierarchical.to_string()),
            ("il", t.instance_loss.to_string()),
            ("is", t.instance_selection.to_string()),
            ("kmeans_max_iters", self.hierarchy.kmeans.max_iters.to_string()),
            ("kmeans_restarts", self.hierarchy.kmeans.restarts.to_string()),
            ("knn_k", join(&self.eval.knn_k_grid, ",")),
            ("knn_tau", format!("{:?}", self.eval.knn_temperature)),
            ("levels", join(&self.level_sizes, ",")),
            ("lr", format!("{:?}", self.lr)),
            ("min_cluster_size", self.hierarchy.min_cluster_size.to_string()),
            ("momentum", format!("{:?}", self.sgd_momentum)),
            ("pl", t.proto_loss.to_string()),
            ("probe_epochs", self.eval.probe_epochs.to_string()),
            ("probe_lr", format!("{:?}", self.eval.probe_lr)),
            ("ps", t.proto_selection.to_string()),
            ("queue", self.queue_capacity.to_string()),
            ("seed", self.seed.to_string()),
            ("tau", format!("{:?}", self.tau)),
            ("tau_floor", format!("{:?}", self.hierarchy.tau_floor)),
            ("warmup", self.warmup_epochs.to_string()),
            ("warmup_mode", self.warmup_mode.name().to_string()),
            ("weight_decay", format!("{:?}", self.weight_decay)),
        ];
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in map {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn echo(&self) -> String {
        self.to_kv().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// `lr_init · (1 + cos(π·fraction)) / 2`
pub fn lr_schedule(fraction: f64, lr_init: f64) -> f64 {
    let f = fraction.clamp(0.0, 1.0);
    lr_init * 0.5 * (1.0 + (std::f64::consts::PI * f).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs; also the epoch the next step belongs to.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub online: EncoderParams,
    pub momentum: MomentumState,
    /// SGD momentum buffers.
    pub velocity: EncoderParams,
    pub queue: NegativeQueue,
    /// Prototypes for `epoch`; rebuilt on demand, never persisted.
    pub tree: Option<Arc<PrototypeTree>>,
}

fn rounded(e: &Embedding) -> Result<Embedding> {
    Embedding::from_unit(e.as_slice().iter().map(|&x| x as f32 as f64).collect())
}

impl TrainState {
    /// Fresh encoder and a queue filled with momentum keys of random samples.
    pub fn init(config: &TrainingConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(HcscError::config("dataset is empty"));
        }
        let enc = config.encoder_config(dataset.dim());
        let mut online = EncoderParams::init(&enc, &mut substream(config.seed, &[tag::INIT_PARAMS]))?;
        online.round_to_f32();
        let momentum = MomentumState::new(&online, config.ema)?;
        let velocity = online.zeros_like();
        let mut rng = substream(config.seed, &[tag::QUEUE_INIT]);
        let picks: Vec<usize> = (0..config.queue_capacity)
            .map(|_| rng.random_range(0..dataset.len()))
            .collect();
        let inputs: Vec<Vec<f64>> = picks.iter().map(|&i| dataset.samples[i].features_f64()).collect();
        let keys = embed(&momentum.params, &inputs)?;
        let mut queue = NegativeQueue::new(config.queue_capacity, config.embed_dim)?;
        queue.push(
            picks
                .iter()
                .zip(&keys)
                .map(|(&i, e)| {
                    Ok(QueueKey {
                        sample_id: dataset.samples[i].id,
                        embedding: rounded(e)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        )?;
        Ok(Self {
            epoch: 0,
            step: 0,
            online,
            momentum,
            velocity,
            queue,
            tree: None,
        })
    }
}

/// Read-only inputs shared by every step of a run.
pub struct StepContext<'a> {
    pub config: &'a TrainingConfig,
    /// Raw features indexed by sample id.
    pub features: &'a [Vec<f64>],
    /// Finest ground-truth labels, used only for diagnostics.
    pub fine_labels: &'a [usize],
    pub total_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub epoch: u64,
    /// Global step index (0-based) of this update.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub icsc: f64,
    pub pcsc: f64,
    /// Mean instance-selection probability per level.
    pub selection_prob: Vec<f64>,
    /// Mean accepted instance negatives per query and level.
    pub instance_accepted: Vec<f64>,
    /// Mean accepted prototype negatives per query and level.
    pub proto_accepted: Vec<f64>,
    pub diagnostics: SelectionDiagnostics,
    /// Reports sampled for the diagnostics CSV.
    pub sampled_reports: Vec<SelectionReport>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "step,{},{},{},{},{},{},{},{},{},{},{},,",
            self.epoch,
            self.step,
            self.lr,
            self.loss,
            self.icsc,
            self.pcsc,
            join(&self.selection_prob, ";"),
            join(&self.instance_accepted, ";"),
            join(&self.proto_accepted, ";"),
            fmt_opt(self.diagnostics.false_negative_removal()),
            fmt_opt(self.diagnostics.true_negative_precision()),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    /// Steps completed at the end of the epoch.
    pub step: u64,
    pub loss: f64,
    pub icsc: f64,
    pub pcsc: f64,
    pub diagnostics: SelectionDiagnostics,
    /// Best KNN accuracy over the k grid on the held-out split.
    pub knn: f64,
    /// AMI of each eval-tree level against the matching ground-truth level.
    pub ami: Vec<f64>,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "epoch,{},{},,{},{},{},,,,{},{},{},{}",
            self.epoch,
            self.step,
            self.loss,
            self.icsc,
            self.pcsc,
            fmt_opt(self.diagnostics.false_negative_removal()),
            fmt_opt(self.diagnostics.true_negative_precision()),
            self.knn,
            join(&self.ami, ";"),
        )
    }
}

struct QueryOutcome {
    loss: LossOutput,
    icsc: f64,
    pcsc: f64,
    instance: Vec<SelectionReport>,
    proto: Vec<SelectionReport>,
}

fn dump_reports(reports: &[SelectionReport], step: u64) -> String {
    let mut s = String::from(DIAGNOSTICS_HEADER);
    s.push('\n');
    for r in reports {
        for row in r.csv_rows(step) {
            s.push_str(&row);
            s.push('\n');
        }
    }
    s
}

/// One optimizer update on the samples `batch` (indices into the dataset).
pub fn train_step(state: &mut TrainState, batch: &[usize], ctx: &StepContext) -> Result<StepMetrics> {
    let cfg = ctx.config;
    let tree = state
        .tree
        .clone()
        .filter(|t| t.epoch_stamp == state.epoch)
        .ok_or_else(|| HcscError::contract(format!("no prototype tree for epoch {}", state.epoch)))?;
    if batch.is_empty() {
        return Err(HcscError::contract("empty batch"));
    }
    let step = state.step;
    let toggles = cfg.phase_toggles(state.epoch);
    let levels = tree.num_levels();

    let views = |view: u64| -> Vec<Vec<f64>> {
        batch
            .iter()
            .map(|&i| {
                let mut rng = substream(cfg.seed, &[tag::AUGMENT, step, i as u64, view]);
                augment(&ctx.features[i], &cfg.augmentation, &mut rng)
            })
            .collect()
    };
    let (z, cache) = encoder_forward(&state.online, &views(0))?;
    let z_prime = embed(&state.momentum.params, &views(1))?;
    let snapshot = state.queue.snapshot();
    let inst_aff = toggles
        .instance_selection
        .then(|| InstanceAffinity::new(&snapshot, &tree));
    let proto_aff = (toggles.proto_loss && toggles.proto_selection).then(|| ProtoAffinity::new(&tree));
    let weights = LossWeights { tau: cfg.tau, toggles };

    let outcomes = batch
        .par_iter()
        .enumerate()
        .map(|(b, &i)| -> Result<QueryOutcome> {
            let zi = z[b].as_slice();
            let zpi = z_prime[b].as_slice();
            let id = i as u64;
            let stream = SelectionStream {
                seed: cfg.seed,
                step,
                query: id,
            };
            let instance = match &inst_aff {
                Some(aff) => select_instance_negatives_with(zi, &snapshot, &tree, aff, &stream),
                None => accept_all_instance(&snapshot, levels, id),
            };
            let icsc = if toggles.instance_loss {
                icsc_loss(zi, zpi, &instance, &snapshot, cfg.tau, levels)?
            } else {
                LossOutput::zero(zi.len())
            };
            let proto = match (&proto_aff, toggles.proto_loss) {
                (_, false) => Vec::new(),
                (Some(aff), true) => (1..=levels)
                    .map(|l| select_proto_negatives_with(zi, &tree, l, aff, &stream))
                    .collect(),
                (None, true) => accept_all_proto(zi, &tree, id),
            };
            let pcsc = if toggles.proto_loss {
                pcsc_loss(zi, &tree, &proto)?
            } else {
                LossOutput::zero(zi.len())
            };
            let loss = hcsc_loss(&icsc, &pcsc, &weights)?;
            if !loss.value.is_finite() || loss.grad_z.iter().any(|g| !g.is_finite()) {
                let all: Vec<SelectionReport> = instance.iter().chain(&proto).cloned().collect();
                return Err(HcscError::NonFiniteLoss {
                    step,
                    query: i,
                    dump: dump_reports(&all, step),
                });
            }
            Ok(QueryOutcome {
                icsc: icsc.value,
                pcsc: pcsc.value,
                loss,
                instance,
                proto,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let bf = batch.len() as f64;
    let grads: Vec<Vec<f64>> = outcomes
        .iter()
        .map(|o| o.loss.grad_z.iter().map(|g| g / bf).collect())
        .collect();
    let mut g = encoder_backward(&state.online, &cache, &grads)?;
    g.add_scaled(cfg.weight_decay, &state.online);
    let lr = lr_schedule(step as f64 / ctx.total_steps.max(1) as f64, cfg.lr);
    let mu = cfg.sgd_momentum;
    for ((v, gt), p) in state
        .velocity
        .tensors_mut()
        .zip(g.tensors())
        .zip(state.online.tensors_mut())
    {
        for ((vi, gi), pi) in v.iter_mut().zip(gt).zip(p.iter_mut()) {
            *vi = mu * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    ema_update(&mut state.momentum, &state.online)?;
    state.queue.push(
        batch
            .iter()
            .zip(&z_prime)
            .map(|(&i, e)| {
                Ok(QueueKey {
                    sample_id: i as u64,
                    embedding: rounded(e)?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    // state is held at f32 precision so checkpoints restore it exactly
    state.online.round_to_f32();
    state.momentum.params.round_to_f32();
    state.velocity.round_to_f32();
    state.step += 1;

    let mean = |f: &dyn Fn(&QueryOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / bf;
    let per_level = |f: &dyn Fn(&QueryOutcome, usize) -> f64, n: usize| -> Vec<f64> {
        (0..n).map(|l| mean(&|o| f(o, l))).collect()
    };
    let selection_prob = per_level(&|o, l| o.instance[l].mean_probability().unwrap_or(0.0), levels);
    let instance_accepted = per_level(&|o, l| o.instance[l].accepted_count() as f64, levels);
    let proto_accepted = if toggles.proto_loss {
        per_level(&|o, l| o.proto[l].accepted_count() as f64, levels)
    } else {
        Vec::new()
    };
    let mut diagnostics = SelectionDiagnostics::default();
    let mut sampled_reports = Vec::new();
    for (o, &i) in outcomes.iter().zip(batch) {
        if toggles.instance_selection {
            diagnostics += negative_selection_diagnostics(&o.instance, ctx.fine_labels);
        }
        let rate = cfg.eval.diagnostic_rate;
        if rate > 0.0 && substream(cfg.seed, &[tag::DIAGNOSTICS, step, i as u64]).random::<f64>() < rate {
            sampled_reports.extend(o.instance.iter().chain(&o.proto).cloned());
        }
    }
    Ok(StepMetrics {
        epoch: state.epoch,
        step,
        lr,
        loss: mean(&|o| o.loss.value),
        icsc: mean(&|o| o.icsc),
        pcsc: mean(&|o| o.pcsc),
        selection_prob,
        instance_accepted,
        proto_accepted,
        diagnostics,
        sampled_reports,
    })
}

/// Where a run writes its artifacts; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Continue from this state instead of initializing.
    pub resume: Option<TrainState>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub state: TrainState,
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochMetrics>,
    /// Eval tree of the last trained epoch (online embeddings, configured level sizes).
    pub eval_tree: Option<Arc<PrototypeTree>>,
}

impl TrainingOutcome {
    /// Metrics rows of this invocation, header first.
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        let mut steps = self.steps.iter().peekable();
        for e in &self.epochs {
            while let Some(m) = steps.next_if(|m| m.epoch <= e.epoch) {
                s.push_str(&m.csv_row());
                s.push('\n');
            }
            s.push_str(&e.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Momentum-encoder embeddings of the full dataset.
fn momentum_embeddings(state: &TrainState, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(embed(&state.momentum.params, features)?
        .into_iter()
        .map(Embedding::into_inner)
        .collect())
}

/// The prototype tree the trainer uses for `state.epoch`.
pub fn training_tree(config: &TrainingConfig, state: &TrainState, dataset: &Dataset) -> Result<Arc<PrototypeTree>> {
    config
        .tree_builder()
        .refresh(&momentum_embeddings(state, &dataset.features_f64())?, state.epoch)
}

/// Online-encoder embeddings of raw (unaugmented) features.
pub fn online_embeddings(params: &EncoderParams, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(embed(params, features)?.into_iter().map(Embedding::into_inner).collect())
}

/// Tree over `embeddings` with the configured (non-flattened) level sizes.
pub fn eval_tree(config: &TrainingConfig, embeddings: &[Vec<f64>], epoch: u64) -> Result<PrototypeTree> {
    let opts = HierarchyOptions {
        kmeans: KMeansOptions {
            parallel: true,
            ..config.hierarchy.kmeans.clone()
        },
        ..config.hierarchy.clone()
    };
    let mut rng = substream(config.seed, &[tag::EVAL_CLUSTER, epoch]);
    build_hierarchy(embeddings, &config.level_sizes, &opts, &mut rng)
}

/// Best-over-grid KNN accuracy on the deterministic holdout split.
pub fn holdout_knn(config: &TrainingConfig, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let (train, test) = crate::eval::holdout_split(embeddings.len(), config.holdout_every);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        idx.iter().map(|&i| (embeddings[i].clone(), labels[i])).unzip()
    };
    let (tr_x, tr_y) = pick(&train);
    let (te_x, te_y) = pick(&test);
    Ok(knn_evaluate(&tr_x, &tr_y, &te_x, &te_y, &config.eval)?.best_accuracy)
}

struct MetricsSink {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl MetricsSink {
    /// Opens `metrics.csv`, keeping rows of epochs before `resume_epoch`.
    fn open(dir: &Path, resume_epoch: u64) -> Result<Self> {
        let path = dir.join("metrics.csv");
        let mut kept = format!("{METRICS_HEADER}\n");
        if resume_epoch > 0 {
            if let Ok(text) = fs::read_to_string(&path) {
                for line in text.lines().skip(1) {
                    let epoch: Option<u64> = line.split(',').nth(1).and_then(|e| e.parse().ok());
                    if epoch.is_some_and(|e| e < resume_epoch) {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        write_atomic(&path, kept.as_bytes())?;
        let file = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| HcscError::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    fn row(&mut self, row: &str) -> Result<()> {
        writeln!(self.out, "{row}").map_err(|e| HcscError::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| HcscError::io(&self.path, e))
    }
}

fn append_diagnostics(dir: &Path, steps: &[StepMetrics], fresh: bool) -> Result<()> {
    let path = dir.join("diagnostics.csv");
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&path)
        .map_err(|e| HcscError::io(&path, e))?;
    let mut s = String::new();
    if fresh {
        s.push_str(DIAGNOSTICS_HEADER);
        s.push('\n');
    }
    for m in steps {
        for r in &m.sampled_reports {
            for row in r.csv_rows(m.step) {
                s.push_str(&row);
                s.push('\n');
            }
        }
    }
    f.write_all(s.as_bytes()).map_err(|e| HcscError::io(&path, e))
}

/// Runs the remaining epochs of `config` on `dataset`.
pub fn run_training(config: &TrainingConfig, dataset: &Dataset, opts: RunOptions) -> Result<TrainingOutcome> {
    config.validate()?;
    let n = dataset.len();
    validate_level_sizes(&config.effective_level_sizes(), n)?;
    validate_level_sizes(&config.level_sizes, n)?;
    if dataset.samples.iter().enumerate().any(|(i, s)| s.id != i as u64) {
        return Err(HcscError::contract("sample ids must equal their positions"));
    }
    let steps_per_epoch = (n / config.batch_size) as u64;
    if steps_per_epoch == 0 {
        return Err(HcscError::config(format!("batch size {} exceeds dataset size {n}", config.batch_size)));
    }
    let mut state = match opts.resume {
        Some(s) => {
            if s.online.input_dim() != dataset.dim() || s.online.output_dim() != config.embed_dim {
                return Err(HcscError::config("checkpoint does not match dataset or config"));
            }
            s
        }
        None => TrainState::init(config, dataset)?,
    };
    if state.step != state.epoch * steps_per_epoch {
        return Err(HcscError::config("checkpoint step count does not match the batch layout"));
    }
    let features = dataset.features_f64();
    let fine_labels = dataset.labels_at(1);
    let label_levels: Vec<Vec<usize>> = (1..=dataset.depth()).map(|l| dataset.labels_at(l)).collect();
    let ctx = StepContext {
        config,
        features: &features,
        fine_labels: &fine_labels,
        total_steps: config.epochs * steps_per_epoch,
    };
    let builder = config.tree_builder();

    let mut sink = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| HcscError::io(dir, e))?;
            Some(MetricsSink::open(dir, state.epoch)?)
        }
        None => None,
    };
    let mut outcome = TrainingOutcome {
        state: state.clone(),
        steps: Vec::new(),
        epochs: Vec::new(),
        eval_tree: None,
    };

    while state.epoch < config.epochs {
        let epoch = state.epoch;
        if state.tree.as_ref().is_none_or(|t| t.epoch_stamp != epoch) {
            state.tree = Some(builder.refresh(&momentum_embeddings(&state, &features)?, epoch)?);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(config.seed, &[tag::SHUFFLE, epoch]));
        let first = outcome.steps.len();
        for batch in order.chunks_exact(config.batch_size) {
            let m = train_step(&mut state, batch, &ctx)?;
            if let Some(s) = sink.as_mut() {
                s.row(&m.csv_row())?;
            }
            outcome.steps.push(m);
        }
        let epoch_steps = &outcome.steps[first..];
        let k = epoch_steps.len() as f64;
        let mut diagnostics = SelectionDiagnostics::default();
        for m in epoch_steps {
            diagnostics += m.diagnostics;
        }
        state.epoch += 1;

        let emb = online_embeddings(&state.online, &features)?;
        let tree = Arc::new(eval_tree(config, &emb, epoch)?);
        let ami = prototype_label_ami(&tree, &label_levels)?
            .iter()
            .enumerate()
            .map(|(l, row)| row[l.min(row.len() - 1)])
            .collect();
        let metrics = EpochMetrics {
            epoch,
            step: state.step,
            loss: epoch_steps.iter().map(|m| m.loss).sum::<f64>() / k,
            icsc: epoch_steps.iter().map(|m| m.icsc).sum::<f64>() / k,
            pcsc: epoch_steps.iter().map(|m| m.pcsc).sum::<f64>() / k,
            diagnostics,
            knn: holdout_knn(config, &emb, &fine_labels)?,
            ami,
        };
        if let Some(dir) = &opts.out_dir {
            let s = sink.as_mut().unwrap();
            s.row(&metrics.csv_row())?;
            s.flush()?;
            if config.eval.diagnostic_rate > 0.0 {
                append_diagnostics(dir, epoch_steps, epoch == 0)?;
            }
            if config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("epoch_{:04}.ckpt", state.epoch)), config, &state)?;
            }
        }
        outcome.epochs.push(metrics);
        outcome.eval_tree = Some(tree);
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&dir.join("final.ckpt"), config, &state)?;
    }
    outcome.state = state;
    Ok(outcome)
}

fn put_tensor(out: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn layout(params: &EncoderParams) -> String {
    params
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| format!("l{i}.w:{}x{},l{i}.b:{}", l.outputs, l.inputs, l.outputs))
        .collect::<Vec<_>>()
        .join(",")
}

/// Serializes config echo and state. The prototype tree is not stored; it is rebuilt
/// deterministically from the momentum encoder.
pub fn encode_checkpoint(config: &TrainingConfig, state: &TrainState) -> Result<Vec<u8>> {
    let mut kv = config.to_kv();
    kv.insert("state.epoch".into(), state.epoch.to_string());
    kv.insert("state.step".into(), state.step.to_string());
    kv.insert("state.input_dim".into(), state.online.input_dim().to_string());
    kv.insert("state.queue_len".into(), state.queue.len().to_string());
    kv.insert("state.layout".into(), layout(&state.online));
    let text: String = kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for t in state.online.tensors() {
        put_tensor(&mut out, t);
    }
    for t in state.momentum.params.tensors() {
        put_tensor(&mut out, t);
    }
    for k in state.queue.iter() {
        put_tensor(&mut out, k.embedding.as_slice());
    }
    for t in state.velocity.tensors() {
        put_tensor(&mut out, t);
    }
    for k in state.queue.iter() {
        out.extend_from_slice(&k.sample_id.to_le_bytes());
    }
    Ok(out)
}

fn read_params(r: &mut Reader, shape: &EncoderParams) -> Result<EncoderParams> {
    let mut p = shape.zeros_like();
    for t in p.tensors_mut() {
        for x in t.iter_mut() {
            let at = r.offset();
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(HcscError::format(at, "non-finite parameter"));
            }
            *x = v as f64;
        }
    }
    Ok(p)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TrainingConfig, TrainState)> {
    let mut r = Reader::new(bytes);
    if r.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(HcscError::format(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(HcscError::format(4, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let meta_at = r.offset();
    let text = std::str::from_utf8(r.bytes(len)?).map_err(|_| HcscError::format(meta_at, "config block is not UTF-8"))?;
    let mut kv = parse_kv_block(text, meta_at)?;
    let epoch: u64 = kv_get(&kv, "state.epoch", meta_at)?;
    let step: u64 = kv_get(&kv, "state.step", meta_at)?;
    let input_dim: usize = kv_get(&kv, "state.input_dim", meta_at)?;
    let queue_len: usize = kv_get(&kv, "state.queue_len", meta_at)?;
    let declared: String = kv_get(&kv, "state.layout", meta_at)?;
    kv.retain(|k, _| !k.starts_with("state."));
    let config = TrainingConfig::from_kv(&kv).map_err(|e| HcscError::format(meta_at, e.to_string()))?;

    let shape = EncoderParams::init(&config.encoder_config(input_dim), &mut substream(0, &[]))?;
    if layout(&shape) != declared {
        return Err(HcscError::format(meta_at, "tensor layout disagrees with config"));
    }
    if queue_len > config.queue_capacity {
        return Err(HcscError::format(meta_at, "queue longer than its capacity"));
    }
    let online = read_params(&mut r, &shape)?;
    let momentum_params = read_params(&mut r, &shape)?;
    let mut embeddings = Vec::with_capacity(queue_len);
    for _ in 0..queue_len {
        let at = r.offset();
        let v = (0..config.embed_dim)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<f64>>>()?;
        embeddings.push(Embedding::from_unit(v).map_err(|e| HcscError::format(at, e.to_string()))?);
    }
    let velocity = read_params(&mut r, &shape)?;
    let mut keys = Vec::with_capacity(queue_len);
    for embedding in embeddings {
        keys.push(QueueKey {
            sample_id: r.u64()?,
            embedding,
        });
    }
    r.finish()?;
    let mut momentum = MomentumState::new(&online, config.ema)?;
    momentum.params = momentum_params;
    let state = TrainState {
        epoch,
        step,
        online,
        momentum,
        velocity,
        queue: NegativeQueue::from_ordered(config.queue_capacity, config.embed_dim, keys)?,
        tree: None,
    };
    Ok((config, state))
}

pub fn save_checkpoint(path: &Path, config: &TrainingConfig, state: &TrainState) -> Result<()> {
    write_atomic(path, &encode_checkpoint(config, state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainingConfig, TrainState)> {
    let bytes = fs::read(path).map_err(|e| HcscError::io(path, e))?;
    decode_checkpoint(&bytes)
}
