//! Pretraining, finetuning and round-robin multi-task training.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ini::Ini;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::data::Corpora;
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{Checkpoint, HeadMode, Model, ModelConfig, PositionalScheme};
use crate::nn::{AdamW, AdamWConfig, Graph, ParamId, Tensor, Var};
use crate::synth::derived_rng;
use crate::tasks::{TaskExample, TaskTag};

/// Loss family used for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Token-level likelihood of the target text.
    Generative,
    /// Candidate classifier (vqa) or region scoring (ground, refexp).
    Discriminative,
}

/// How the next task is chosen when several are trained together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Sample a task with probability proportional to its corpus size.
    Proportional,
    /// Cycle through tasks in order.
    RoundRobin,
}

/// Linear warmup from 0 to `peak` over `⌈warmup·total⌉` steps, then constant.
pub fn lr_at(step: u64, total: u64, peak: f64, warmup: f64) -> f64 {
    let warm = (warmup * total as f64).ceil() as u64;
    if step >= warm {
        peak
    } else {
        peak * step as f64 / warm as f64
    }
}

/// Per-task overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskOverride {
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
}

/// Everything a training run needs besides data and an initial model.
///
/// On disk this is INI text with `[run]`, `[data]`, `[model]` and optional
/// `[task.<tag>]` sections. Any `[run]`, `[data]` or `[model]` key can be
/// overridden by an environment variable `UVLG_<SECTION>_<KEY>`, e.g.
/// `UVLG_RUN_STEPS=100`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    // [run]
    pub seed: u64,
    pub steps: u64,
    pub lr: f64,
    pub warmup: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub objective: Objective,
    pub log_every: u64,
    /// Held-out evaluation cadence in steps; 0 disables.
    pub eval_every: u64,
    /// Held-out examples per task at each evaluation.
    pub eval_examples: usize,
    /// Also compute task metrics (not just held-out loss) when evaluating.
    pub eval_metrics: bool,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub log: Option<PathBuf>,
    // [data]
    pub data_dir: PathBuf,
    pub tasks: Vec<TaskTag>,
    pub train_split: String,
    pub val_split: String,
    // [model]
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_text_len: usize,
    pub max_target_len: usize,
    /// Overrides the scheme implied by the data's masking variant.
    pub positional: Option<PositionalScheme>,
    pub head_mode: HeadMode,
    // [task.<tag>]
    pub task: BTreeMap<TaskTag, TaskOverride>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            seed: 42,
            steps: 2000,
            lr: 1e-4,
            warmup: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            batch_size: 32,
            schedule: Schedule::Proportional,
            objective: Objective::Generative,
            log_every: 10,
            eval_every: 0,
            eval_examples: 200,
            eval_metrics: false,
            checkpoint: None,
            checkpoint_every: 0,
            log: None,
            data_dir: PathBuf::from("data"),
            tasks: TaskTag::PRETRAIN.to_vec(),
            train_split: "train".into(),
            val_split: "val".into(),
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            d: m.d,
            heads: m.heads,
            d_ff: m.d_ff,
            max_text_len: m.max_text_len,
            max_target_len: m.max_target_len,
            positional: None,
            head_mode: HeadMode::Shared,
            task: BTreeMap::new(),
        }
    }
}

/// Learning rate of the toy presets. The small models here need a larger
/// step than the 1e-4 used at full scale to converge within the toy budgets.
pub const TOY_LR: f64 = 1e-3;

fn parse_value<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("[{section}] {key} = `{value}`: {e}")))
}

fn parse_enum<T: serde::de::DeserializeOwned>(section: &str, key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.trim().to_string()))
        .map_err(|e| Error::Config(format!("[{section}] {key} = `{value}`: {e}")))
}

fn enum_str<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

impl TrainConfig {
    /// 2k-step pretraining over the five pretraining tasks.
    pub fn toy_pretrain() -> Self {
        TrainConfig {
            steps: 2000,
            lr: TOY_LR,
            ..Default::default()
        }
    }

    /// 1k-step single-task finetuning.
    pub fn toy_finetune(task: TaskTag) -> Self {
        TrainConfig {
            steps: 1000,
            lr: TOY_LR,
            tasks: vec![task],
            ..Default::default()
        }
    }

    /// Round-robin finetuning over the seven downstream tasks.
    pub fn toy_multitask() -> Self {
        TrainConfig {
            steps: 7000,
            lr: TOY_LR,
            tasks: TaskTag::DOWNSTREAM.to_vec(),
            schedule: Schedule::RoundRobin,
            ..Default::default()
        }
    }

    /// Full-scale pretraining settings, kept for reference: 12+12 layers at
    /// width 768, batch 320, 30 epochs over 9.18M pairs.
    pub fn full_scale_pretrain() -> Self {
        let base = ModelConfig::base();
        TrainConfig {
            steps: 30 * 9_180_000 / 320,
            lr: 1e-4,
            batch_size: 320,
            enc_layers: base.enc_layers,
            dec_layers: base.dec_layers,
            d: base.d,
            heads: base.heads,
            d_ff: base.d_ff,
            max_text_len: base.max_text_len,
            max_target_len: base.max_target_len,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::Config(format!("[run] warmup = {} must lie in [0, 1)", self.warmup)));
        }
        if self.batch_size == 0 || self.task.values().any(|t| t.batch_size == Some(0)) {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("[data] tasks must list at least one task".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.task.values().any(|t| t.lr.is_some_and(|l| !(l >= 0.0))) {
            return Err(Error::Config("learning rates must be finite and nonnegative".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("[run] clip_norm must be nonnegative".into()));
        }
        if self.objective == Objective::Discriminative {
            if let Some(t) = self
                .tasks
                .iter()
                .find(|t| !matches!(t, TaskTag::Vqa | TaskTag::Ground | TaskTag::Refexp))
            {
                return Err(Error::Config(format!("task `{t}` has no discriminative baseline")));
            }
        }
        Ok(())
    }

    pub fn batch_size_for(&self, tag: TaskTag) -> usize {
        self.task.get(&tag).and_then(|t| t.batch_size).unwrap_or(self.batch_size)
    }

    pub fn lr_for(&self, tag: TaskTag) -> f64 {
        self.task.get(&tag).and_then(|t| t.lr).unwrap_or(self.lr)
    }

    /// Model configuration for this run over `data`.
    pub fn model_config(&self, data: &Corpora) -> ModelConfig {
        let mut m = data.model_config(&ModelConfig {
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            d: self.d,
            heads: self.heads,
            d_ff: self.d_ff,
            max_text_len: self.max_text_len,
            max_target_len: self.max_target_len,
            ..Default::default()
        });
        if let Some(p) = self.positional {
            m.positional = p;
        }
        m
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let s = section;
        match (section, key) {
            ("run", "seed") => self.seed = parse_value(s, key, value)?,
            ("run", "steps") => self.steps = parse_value(s, key, value)?,
            ("run", "lr") => self.lr = parse_value(s, key, value)?,
            ("run", "warmup") => self.warmup = parse_value(s, key, value)?,
            ("run", "beta1") => self.beta1 = parse_value(s, key, value)?,
            ("run", "beta2") => self.beta2 = parse_value(s, key, value)?,
            ("run", "eps") => self.eps = parse_value(s, key, value)?,
            ("run", "weight_decay") => self.weight_decay = parse_value(s, key, value)?,
            ("run", "clip_norm") => self.clip_norm = parse_value(s, key, value)?,
            ("run", "batch_size") => self.batch_size = parse_value(s, key, value)?,
            ("run", "schedule") => self.schedule = parse_enum(s, key, value)?,
            ("run", "objective") => self.objective = parse_enum(s, key, value)?,
            ("run", "log_every") => self.log_every = parse_value(s, key, value)?,
            ("run", "eval_every") => self.eval_every = parse_value(s, key, value)?,
            ("run", "eval_examples") => self.eval_examples = parse_value(s, key, value)?,
            ("run", "eval_metrics") => self.eval_metrics = parse_value(s, key, value)?,
            ("run", "checkpoint") => self.checkpoint = non_empty(value).map(PathBuf::from),
            ("run", "checkpoint_every") => self.checkpoint_every = parse_value(s, key, value)?,
            ("run", "log") => self.log = non_empty(value).map(PathBuf::from),
            ("data", "dir") => self.data_dir = PathBuf::from(value.trim()),
            ("data", "tasks") => {
                self.tasks = value
                    .split(',')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            ("data", "train_split") => self.train_split = value.trim().to_string(),
            ("data", "val_split") => self.val_split = value.trim().to_string(),
            ("model", "enc_layers") => self.enc_layers = parse_value(s, key, value)?,
            ("model", "dec_layers") => self.dec_layers = parse_value(s, key, value)?,
            ("model", "d") => self.d = parse_value(s, key, value)?,
            ("model", "heads") => self.heads = parse_value(s, key, value)?,
            ("model", "d_ff") => self.d_ff = parse_value(s, key, value)?,
            ("model", "max_text_len") => self.max_text_len = parse_value(s, key, value)?,
            ("model", "max_target_len") => self.max_target_len = parse_value(s, key, value)?,
            ("model", "positional") => {
                self.positional = match non_empty(value) {
                    None => None,
                    Some(v) => Some(parse_enum(s, key, &v)?),
                }
            }
            ("model", "head_mode") => self.head_mode = parse_enum(s, key, value)?,
            _ => {
                if let Some(tag) = section.strip_prefix("task.") {
                    let tag: TaskTag = tag.parse()?;
                    let entry = self.task.entry(tag).or_default();
                    match key {
                        "batch_size" => entry.batch_size = Some(parse_value(s, key, value)?),
                        "lr" => entry.lr = Some(parse_value(s, key, value)?),
                        _ => return Err(Error::Config(format!("unknown key `{key}` in [{section}]"))),
                    }
                } else {
                    return Err(Error::Config(format!("unknown key `{key}` in [{section}]")));
                }
            }
        }
        Ok(())
    }

    /// Parse INI text on top of the defaults.
    pub fn from_ini(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let mut cfg = TrainConfig::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if props.iter().next().is_some() {
                    return Err(Error::Config("config keys must sit under a [section]".into()));
                }
                continue;
            };
            for (key, value) in props.iter() {
                cfg.set(section, key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `UVLG_<SECTION>_<KEY>` overrides from `vars`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix("UVLG_") else {
                continue;
            };
            let rest = rest.to_ascii_lowercase();
            let Some((section, key)) = rest.split_once('_') else {
                return Err(Error::Config(format!("environment override `{name}` names no key")));
            };
            if !matches!(section, "run" | "data" | "model") {
                return Err(Error::Config(format!("environment override `{name}`: unknown section `{section}`")));
            }
            self.set(section, key, &value)
                .map_err(|e| Error::Config(format!("environment override `{name}`: {e}")))?;
        }
        self.validate()
    }

    /// Read a config file and apply environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_ini(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_env(std::env::vars())?;
        Ok(cfg)
    }

    /// INI text that parses back to this config.
    pub fn to_ini(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        s += "[run]\n";
        s += &format!("seed = {}\nsteps = {}\nlr = {}\nwarmup = {}\n", self.seed, self.steps, self.lr, self.warmup);
        s += &format!("beta1 = {}\nbeta2 = {}\neps = {}\n", self.beta1, self.beta2, self.eps);
        s += &format!("weight_decay = {}\nclip_norm = {}\nbatch_size = {}\n", self.weight_decay, self.clip_norm, self.batch_size);
        s += &format!("schedule = {}\nobjective = {}\n", enum_str(&self.schedule), enum_str(&self.objective));
        s += &format!("log_every = {}\neval_every = {}\neval_examples = {}\n", self.log_every, self.eval_every, self.eval_examples);
        s += &format!("eval_metrics = {}\n", self.eval_metrics);
        s += &format!("checkpoint = {}\ncheckpoint_every = {}\nlog = {}\n", path(&self.checkpoint), self.checkpoint_every, path(&self.log));
        s += "\n[data]\n";
        s += &format!("dir = {}\n", self.data_dir.display());
        let tasks: Vec<&str> = self.tasks.iter().map(|t| t.as_str()).collect();
        s += &format!("tasks = {}\ntrain_split = {}\nval_split = {}\n", tasks.join(", "), self.train_split, self.val_split);
        s += "\n[model]\n";
        s += &format!("enc_layers = {}\ndec_layers = {}\nd = {}\nheads = {}\nd_ff = {}\n", self.enc_layers, self.dec_layers, self.d, self.heads, self.d_ff);
        s += &format!("max_text_len = {}\nmax_target_len = {}\n", self.max_text_len, self.max_target_len);
        s += &format!("positional = {}\nhead_mode = {}\n", self.positional.map(|p| enum_str(&p)).unwrap_or_default(), enum_str(&self.head_mode));
        for (tag, o) in &self.task {
            s += &format!("\n[task.{tag}]\n");
            if let Some(b) = o.batch_size {
                s += &format!("batch_size = {b}\n");
            }
            if let Some(l) = o.lr {
                s += &format!("lr = {l}\n");
            }
        }
        s
    }
}

fn non_empty(v: &str) -> Option<String> {
    let v = v.trim();
    (!v.is_empty()).then(|| v.to_string())
}

/// Position of one example stream: the epoch and the cursor into its
/// permutation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPos {
    pub epoch: u64,
    pub cursor: usize,
}

/// Resumable training progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub task_steps: BTreeMap<String, u64>,
    pub rng: ChaCha8Rng,
    pub streams: BTreeMap<String, StreamPos>,
    pub best_metric: Option<f64>,
}

impl TrainState {
    fn new(seed: u64) -> Self {
        TrainState {
            step: 0,
            task_steps: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            streams: BTreeMap::new(),
            best_metric: None,
        }
    }
}

/// One JSON Lines log record. Training records carry `loss` and `lr`;
/// held-out records set `split`, and metric records set `metric`/`value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub task: TaskTag,
    pub loss: f64,
    pub lr: f64,
}

/// Loss of one batch under `objective`. All examples must share an image
/// count.
pub fn batch_loss(
    model: &Model<f32>,
    data: &Corpora,
    tag: TaskTag,
    batch: &[&TaskExample],
    objective: Objective,
    g: &mut Graph<f32>,
) -> Result<Var> {
    let cfg = model.config();
    let inputs = batch
        .iter()
        .map(|ex| data.encoder_input(ex, cfg))
        .collect::<Result<Vec<_>>>()?;
    let net = &model.net;
    match (objective, tag) {
        (Objective::Generative, _) => {
            let targets: Vec<Vec<u32>> = batch.iter().map(|ex| data.target_ids(ex, cfg)).collect();
            net.generation_loss(g, &model.params, &inputs, &targets, Some(tag.as_str()))
        }
        (Objective::Discriminative, TaskTag::Vqa) => {
            let scores: Vec<Vec<Option<f32>>> = batch
                .iter()
                .map(|ex| {
                    let humans = eval::human_answers(ex);
                    data.answers
                        .candidates
                        .iter()
                        .map(|c| Some(eval::vqa_score(c, &humans) as f32))
                        .collect()
                })
                .collect();
            net.discriminative_vqa_loss(g, &model.params, &inputs, &scores)
        }
        (Objective::Discriminative, TaskTag::Ground | TaskTag::Refexp) => {
            let targets = batch
                .iter()
                .map(|ex| {
                    ex.aux
                        .gold_region
                        .ok_or_else(|| Error::Data(format!("grounding example `{}` has no gold region", ex.input)))
                })
                .collect::<Result<Vec<_>>>()?;
            net.region_scoring_loss(g, &model.params, &inputs, &targets)
        }
        (Objective::Discriminative, other) => Err(Error::Config(format!("task `{other}` has no discriminative baseline"))),
    }
}

/// Split examples into image-count groups and chunks of at most `size`.
pub fn homogeneous_batches(examples: &[TaskExample], size: usize) -> Vec<Vec<&TaskExample>> {
    let mut groups: BTreeMap<usize, Vec<&TaskExample>> = BTreeMap::new();
    for ex in examples {
        groups.entry(ex.scene_ids.len()).or_default().push(ex);
    }
    groups
        .into_values()
        .flat_map(|g| g.chunks(size.max(1)).map(<[_]>::to_vec).collect::<Vec<_>>())
        .collect()
}

/// Mean per-batch loss over up to `limit` examples, without recording
/// gradients.
pub fn held_out_loss(
    model: &Model<f32>,
    data: &Corpora,
    tag: TaskTag,
    examples: &[TaskExample],
    objective: Objective,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut weight = 0usize;
    for batch in homogeneous_batches(examples, batch_size) {
        let mut g = Graph::inference();
        let loss = batch_loss(model, data, tag, &batch, objective, &mut g)?;
        total += g.value(loss).data()[0] as f64 * batch.len() as f64;
        weight += batch.len();
    }
    if weight == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(total / weight as f64)
}

struct TaskPlan {
    tag: TaskTag,
    batch_size: usize,
    lr: f64,
    /// Example indices grouped by image count.
    buckets: Vec<(usize, Vec<usize>)>,
    size: usize,
}

/// A model, its optimizer and the run state over fixed corpora.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub opt: AdamW<f32>,
    pub state: TrainState,
    data: &'a Corpora,
    plans: Vec<TaskPlan>,
    perms: HashMap<String, (u64, Vec<usize>)>,
}

const STATE_KEY: &str = "train";

impl<'a> Trainer<'a> {
    /// Prepare a run from `init` (or a fresh model built from the config).
    pub fn new(cfg: TrainConfig, data: &'a Corpora, init: Option<Model<f32>>) -> Result<Self> {
        cfg.validate()?;
        let mut model = match init {
            Some(m) => {
                data.check_model(m.config())?;
                m
            }
            None => Model::new(&cfg.model_config(data), cfg.seed)?,
        };
        if model.config().head_mode == HeadMode::PerTask && cfg.head_mode == HeadMode::Shared {
            return Err(Error::Config(
                "initial model has per-task heads but the run asks for a shared head".into(),
            ));
        }
        if cfg.head_mode == HeadMode::PerTask {
            let names: Vec<String> = cfg.tasks.iter().map(|t| t.as_str().to_string()).collect();
            model.add_task_heads(&names)?;
        }
        if cfg.objective == Objective::Discriminative {
            let mut rng = derived_rng(cfg.seed, 7, 0);
            for &t in &cfg.tasks {
                match t {
                    TaskTag::Vqa => model.add_vqa_head(&mut rng, data.answers.candidates.len())?,
                    _ => model.add_region_head(&mut rng)?,
                }
            }
        }
        let mut plans = Vec::new();
        for &tag in &cfg.tasks {
            let examples = data.examples(tag, &cfg.train_split)?;
            if examples.is_empty() {
                return Err(Error::Data(format!("`{tag}` training corpus is empty")));
            }
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, ex) in examples.iter().enumerate() {
                groups.entry(ex.scene_ids.len()).or_default().push(i);
            }
            plans.push(TaskPlan {
                tag,
                batch_size: cfg.batch_size_for(tag),
                lr: cfg.lr_for(tag),
                buckets: groups.into_iter().collect(),
                size: examples.len(),
            });
        }
        let opt = AdamW::new(AdamWConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        });
        let state = TrainState::new(cfg.seed);
        Ok(Trainer {
            cfg,
            model,
            opt,
            state,
            data,
            plans,
            perms: HashMap::new(),
        })
    }

    /// Continue a run from a checkpoint written by [`Trainer::save`].
    pub fn resume(cfg: TrainConfig, data: &'a Corpora, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (model, state, extras) = Checkpoint::from_bytes_with(&bytes)?;
        let saved = state
            .get(STATE_KEY)
            .ok_or_else(|| Error::Checkpoint(format!("{} carries no training state", path.display())))?;
        let train: TrainState = serde_json::from_value(saved["state"].clone())?;
        let steps: BTreeMap<String, u64> = serde_json::from_value(saved["optimizer_steps"].clone())?;
        let mut t = Trainer::new(cfg, data, Some(model))?;
        t.state = train;
        let n = t.model.params.len();
        t.opt.first = vec![None; n];
        t.opt.second = vec![None; n];
        t.opt.steps = vec![0; n];
        for (name, count) in steps {
            let id = t.param_id(&name)?;
            t.opt.steps[id.index()] = count;
        }
        for (name, tensor) in extras {
            let (slot, pname) = if let Some(p) = name.strip_prefix("optim.m.") {
                (0, p)
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                (1, p)
            } else {
                return Err(Error::Checkpoint(format!("unknown auxiliary tensor `{name}`")));
            };
            let id = t.param_id(pname)?;
            if tensor.shape() != t.model.params.value(id).shape() {
                return Err(Error::Checkpoint(format!("optimizer moment `{name}` has the wrong shape")));
            }
            if slot == 0 {
                t.opt.first[id.index()] = Some(tensor);
            } else {
                t.opt.second[id.index()] = Some(tensor);
            }
        }
        Ok(t)
    }

    fn param_id(&self, name: &str) -> Result<ParamId> {
        self.model
            .params
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown tensor `{name}`")))
    }

    pub fn data(&self) -> &Corpora {
        self.data
    }

    /// Checkpoint with model, optimizer moments and run state.
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut extras: Vec<(String, Tensor<f32>)> = Vec::new();
        let mut steps = BTreeMap::new();
        for id in self.model.params.ids() {
            let name = &self.model.params.get(id).name;
            let count = self.opt.step_count(id);
            if count > 0 {
                steps.insert(name.clone(), count);
            }
            if let Some((m, v)) = self.opt.moments(id) {
                extras.push((format!("optim.m.{name}"), m.clone()));
                extras.push((format!("optim.v.{name}"), v.clone()));
            }
        }
        let state = serde_json::json!({
            STATE_KEY: {
                "state": self.state,
                "optimizer_steps": steps,
                "config": self.cfg,
            }
        });
        Checkpoint::to_bytes_with(&self.model, &state, &extras)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    fn next_plan(&mut self) -> usize {
        let n = self.plans.len();
        if n == 1 {
            return 0;
        }
        match self.cfg.schedule {
            Schedule::RoundRobin => (self.state.step % n as u64) as usize,
            Schedule::Proportional => {
                let w = WeightedIndex::new(self.plans.iter().map(|p| p.size as f64)).expect("nonempty corpora");
                w.sample(&mut self.state.rng)
            }
        }
    }

    fn next_batch(&mut self, pi: usize) -> Vec<usize> {
        let plan = &self.plans[pi];
        let bi = if plan.buckets.len() == 1 {
            0
        } else {
            let w = WeightedIndex::new(plan.buckets.iter().map(|(_, b)| b.len() as f64)).expect("nonempty buckets");
            w.sample(&mut self.state.rng)
        };
        let (images, members) = &plan.buckets[bi];
        let key = format!("{}/{images}", plan.tag);
        let tag_index = TaskTag::ALL.iter().position(|t| *t == plan.tag).unwrap_or(0) as u64;
        let mut pos = self.state.streams.get(&key).copied().unwrap_or_default();
        let mut out = Vec::with_capacity(plan.batch_size);
        while out.len() < plan.batch_size {
            let cached = self.perms.get(&key).is_some_and(|(e, _)| *e == pos.epoch);
            if !cached {
                let mut perm = members.clone();
                perm.shuffle(&mut derived_rng(
                    self.cfg.seed,
                    100 + tag_index,
                    (pos.epoch << 8) | *images as u64,
                ));
                self.perms.insert(key.clone(), (pos.epoch, perm));
            }
            let perm = &self.perms[&key].1;
            let take = (plan.batch_size - out.len()).min(perm.len() - pos.cursor);
            out.extend_from_slice(&perm[pos.cursor..pos.cursor + take]);
            pos.cursor += take;
            if pos.cursor == perm.len() {
                pos.epoch += 1;
                pos.cursor = 0;
            }
        }
        self.state.streams.insert(key, pos);
        out
    }

    /// One optimizer step on one batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let pi = self.next_plan();
        let idx = self.next_batch(pi);
        let (tag, peak) = (self.plans[pi].tag, self.plans[pi].lr);
        let examples = self.data.examples(tag, &self.cfg.train_split)?;
        let batch: Vec<&TaskExample> = idx.iter().map(|&i| &examples[i]).collect();
        let lr = lr_at(self.state.step, self.cfg.steps, peak, self.cfg.warmup);
        self.model.params.zero_grad();
        let mut g = Graph::new();
        let loss = batch_loss(&self.model, self.data, tag, &batch, self.cfg.objective, &mut g)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {} on task `{tag}`",
                self.state.step + 1
            )));
        }
        g.backward(loss)?.accumulate_into(&mut self.model.params);
        if self.cfg.clip_norm > 0.0 {
            let norm = self.model.params.grad_norm();
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient norm at step {} on task `{tag}`",
                    self.state.step + 1
                )));
            }
            if norm > self.cfg.clip_norm {
                self.model.params.scale_grads((self.cfg.clip_norm / norm) as f32);
            }
        }
        let ids: Vec<ParamId> = g
            .param_ids()
            .into_iter()
            .filter(|&id| self.model.params.get(id).grad.is_some())
            .collect();
        drop(g);
        self.opt.step_subset(&mut self.model.params, lr, &ids)?;
        self.state.step += 1;
        *self.state.task_steps.entry(tag.as_str().to_string()).or_default() += 1;
        Ok(StepRecord {
            step: self.state.step,
            task: tag,
            loss: value,
            lr,
        })
    }

    /// Held-out loss (and metrics when enabled) for every task.
    pub fn evaluate(&mut self) -> Result<Vec<LogRecord>> {
        let mut out = Vec::new();
        let mut metrics = Vec::new();
        for plan in &self.plans {
            let Ok(examples) = self.data.examples(plan.tag, &self.cfg.val_split) else {
                continue;
            };
            let examples = &examples[..examples.len().min(self.cfg.eval_examples)];
            if examples.is_empty() {
                continue;
            }
            let lr = lr_at(self.state.step, self.cfg.steps, plan.lr, self.cfg.warmup);
            let loss = held_out_loss(&self.model, self.data, plan.tag, examples, self.cfg.objective, plan.batch_size)?;
            out.push(LogRecord {
                step: self.state.step,
                task: plan.tag.as_str().to_string(),
                loss: Some(loss),
                lr,
                split: Some(self.cfg.val_split.clone()),
                metric: None,
                value: None,
            });
            if self.cfg.eval_metrics {
                let opts = eval::EvalOptions {
                    limit: Some(self.cfg.eval_examples),
                    ..Default::default()
                };
                let mode = self.cfg.objective;
                for row in eval::evaluate(&self.model, self.data, plan.tag, &self.cfg.val_split, mode, &opts)? {
                    if row.subset == eval::Subset::All {
                        metrics.push(row.value);
                    }
                    out.push(LogRecord {
                        step: self.state.step,
                        task: plan.tag.as_str().to_string(),
                        loss: None,
                        lr,
                        split: Some(self.cfg.val_split.clone()),
                        metric: Some(format!("{}/{}", row.metric, row.subset.as_str())),
                        value: Some(row.value),
                    });
                }
            }
        }
        if !metrics.is_empty() {
            let mean = metrics.iter().sum::<f64>() / metrics.len() as f64;
            if self.state.best_metric.map_or(true, |b| mean > b) {
                self.state.best_metric = Some(mean);
            }
        }
        Ok(out)
    }

    /// Train until the configured step count, reporting log records to
    /// `sink` and writing checkpoints at the configured cadence.
    pub fn run(&mut self, sink: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<()> {
        while self.state.step < self.cfg.steps {
            let rec = self.step()?;
            let last = rec.step == self.cfg.steps;
            if self.cfg.log_every > 0 && (rec.step % self.cfg.log_every == 0 || last) {
                sink(&LogRecord {
                    step: rec.step,
                    task: rec.task.as_str().to_string(),
                    loss: Some(rec.loss),
                    lr: rec.lr,
                    split: None,
                    metric: None,
                    value: None,
                })?;
            }
            if self.cfg.eval_every > 0 && (rec.step % self.cfg.eval_every == 0 || last) {
                for r in self.evaluate()? {
                    sink(&r)?;
                }
            }
            if let Some(path) = &self.cfg.checkpoint {
                if self.cfg.checkpoint_every > 0 && rec.step % self.cfg.checkpoint_every == 0 && !last {
                    self.save(path)?;
                }
            }
        }
        if let Some(path) = &self.cfg.checkpoint {
            self.save(path)?;
        }
        Ok(())
    }

    /// Train `n` more steps, ignoring the cadence settings.
    pub fn run_steps(&mut self, n: u64) -> Result<Vec<StepRecord>> {
        (0..n).map(|_| self.step()).collect()
    }
}

/// Pretrain over the configured task mixture.
pub fn pretrain<'a>(
    cfg: TrainConfig,
    data: &'a Corpora,
    init: Option<Model<f32>>,
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<Trainer<'a>> {
    let mut t = Trainer::new(cfg, data, init)?;
    t.run(sink)?;
    Ok(t)
}

/// Train a single task.
pub fn finetune<'a>(
    task: TaskTag,
    cfg: TrainConfig,
    data: &'a Corpora,
    init: Option<Model<f32>>,
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<Trainer<'a>> {
    let cfg = TrainConfig {
        tasks: vec![task],
        ..cfg
    };
    let mut t = Trainer::new(cfg, data, init)?;
    t.run(sink)?;
    Ok(t)
}

/// Round-robin training over at least two tasks with one parameter set.
pub fn multitask_finetune<'a>(
    cfg: TrainConfig,
    data: &'a Corpora,
    init: Option<Model<f32>>,
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<Trainer<'a>> {
    if cfg.tasks.len() < 2 {
        return Err(Error::Config("multi-task training needs at least two tasks".into()));
    }
    let cfg = TrainConfig {
        schedule: Schedule::RoundRobin,
        ..cfg
    };
    let mut t = Trainer::new(cfg, data, init)?;
    t.run(sink)?;
    Ok(t)
}
