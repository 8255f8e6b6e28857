//! The `uvlg` command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::Corpora;
use crate::error::{Error, Result};
use crate::eval::{self, DecodeConfig, EvalOptions, Strategy};
use crate::model::{Checkpoint, HeadMode};
use crate::synth::{Dataset, Manifest};
use crate::tasks::TaskTag;
use crate::training::{self, LogRecord, Objective, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "uvlg", version, about = "Unified vision-and-language generation on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Gen,
    Disc,
}

impl From<Mode> for Objective {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Gen => Objective::Generative,
            Mode::Disc => Objective::Discriminative,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Dataset manifest (JSON); the built-in default when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain over the task mixture in the config.
    Pretrain(TrainArgs),
    /// Train a single task.
    Finetune {
        #[command(flatten)]
        args: TrainArgs,
        /// Task to train; overrides `[data] tasks`.
        #[arg(long)]
        task: Option<TaskTag>,
    },
    /// Round-robin training over the configured tasks.
    Multitask(TrainArgs),
    /// Evaluate a checkpoint on one task and split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: TaskTag,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "gen")]
        mode: Mode,
        /// Dataset directory; defaults to the one the checkpoint was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report file (JSON Lines); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        /// Beam width; 1 is greedy.
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Decode targets for JSON Lines inputs.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// One `{"input", "scene_ids", "task"?}` object per line.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Print tensor names, shapes and tying groups of a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Render loss and metric curves from training logs to SVG.
    Plot {
        /// Training logs or evaluation reports (JSON Lines).
        #[arg(long, required = true, num_args = 1..)]
        log: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Initial checkpoint; a fresh model when omitted.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue a run from a checkpoint written by the same config.
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
}

/// Run metadata written next to every output.
#[derive(Debug, Serialize, Deserialize)]
pub struct Stamp {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub unix_time: u64,
}

fn write_stamp(path: &Path, command: &str, seed: Option<u64>, config: serde_json::Value) -> Result<()> {
    let stamp = Stamp {
        command: command.to_string(),
        args: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config,
        unix_time: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    std::fs::write(path, serde_json::to_string_pretty(&stamp)? + "\n").map_err(|e| Error::io(path, e))
}

fn stamp_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(OsString::from).unwrap_or_default();
    name.push(".stamp.json");
    output.with_file_name(name)
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth { manifest, out } => synth(manifest.as_deref(), &out),
        Command::Pretrain(a) => train("pretrain", &a, None),
        Command::Finetune { args, task } => train("finetune", &args, task),
        Command::Multitask(a) => train("multitask", &a, None),
        Command::Eval {
            ckpt,
            task,
            split,
            mode,
            data,
            out,
            limit,
            beam,
            workers,
        } => {
            let opts = EvalOptions {
                limit,
                strategy: strategy(beam)?,
                workers: workers.max(1),
                ..Default::default()
            };
            eval_cmd(&ckpt, task, &split, mode.into(), data.as_deref(), out.as_deref(), &opts)
        }
        Command::Generate {
            ckpt,
            input,
            data,
            out,
            beam,
        } => generate_cmd(&ckpt, &input, data.as_deref(), out.as_deref(), strategy(beam)?),
        Command::Inspect { ckpt } => {
            let report = inspect(&ckpt)?;
            print!("{}", report.render());
            Ok(())
        }
        Command::Plot { log, out } => plot(&log, &out),
    }
}

fn strategy(beam: usize) -> Result<Strategy> {
    match beam {
        0 => Err(Error::InvalidArgument("beam width must be at least 1".into())),
        1 => Ok(Strategy::Greedy),
        w => Ok(Strategy::Beam(w)),
    }
}

pub fn synth(manifest: Option<&Path>, out: &Path) -> Result<()> {
    let m = match manifest {
        Some(p) => Manifest::load(p)?,
        None => Manifest::default(),
    };
    let ds = Dataset::generate(&m)?;
    if ds.answers.out_of_domain.is_empty() {
        eprintln!("warning: the candidate set covers every answer, so the out-of-domain subset is empty");
    }
    ds.write(out)?;
    write_stamp(&out.join("stamp.json"), "synth", Some(m.seed), serde_json::to_value(&m)?)?;
    let count: usize = ds.corpora.values().map(Vec::len).sum();
    eprintln!(
        "wrote {} scenes and {count} task examples to {}",
        ds.scenes.values().map(Vec::len).sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn train(kind: &str, args: &TrainArgs, task: Option<TaskTag>) -> Result<()> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(t) = task {
        cfg.tasks = vec![t];
    }
    if kind == "multitask" && cfg.tasks.len() < 2 {
        return Err(Error::Config("multitask needs at least two tasks".into()));
    }
    if kind == "multitask" {
        cfg.schedule = training::Schedule::RoundRobin;
    }
    let checkpoint = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("[run] checkpoint must name an output path".into()))?;
    let log_path = cfg.log.clone().unwrap_or_else(|| {
        let mut n = checkpoint.file_name().map(OsString::from).unwrap_or_default();
        n.push(".log.jsonl");
        checkpoint.with_file_name(n)
    });
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let data = Corpora::load(&cfg.data_dir, &cfg.tasks)?;
    write_stamp(&stamp_path(&checkpoint), kind, Some(cfg.seed), serde_json::Value::String(cfg.to_ini()))?;
    let mut trainer = match (&args.resume, &args.init) {
        (Some(r), _) => training::Trainer::resume(cfg, &data, r)?,
        (None, Some(p)) => {
            let (model, _) = Checkpoint::load(p)?;
            training::Trainer::new(cfg, &data, Some(model))?
        }
        (None, None) => training::Trainer::new(cfg, &data, None)?,
    };
    let append = args.resume.is_some();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let mut sink = |r: &LogRecord| -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        match (&r.metric, r.loss) {
            (Some(m), _) => eprintln!("step {:>6} {:<12} {m} = {:.4}", r.step, r.task, r.value.unwrap_or(f64::NAN)),
            (None, Some(l)) => eprintln!(
                "step {:>6} {:<12} {}loss {l:.4} lr {:.2e}",
                r.step,
                r.task,
                r.split.as_deref().map(|s| format!("{s} ")).unwrap_or_default(),
                r.lr
            ),
            _ => {}
        }
        Ok(())
    };
    trainer.run(&mut sink)?;
    drop(sink);
    eprintln!("saved {}", checkpoint.display());
    Ok(())
}

fn data_dir_of(ckpt_state: &serde_json::Value, explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    ckpt_state
        .pointer("/train/config/data_dir")
        .and_then(|v| v.as_str())
        .map(PathBuf::from)
        .ok_or_else(|| Error::InvalidArgument("checkpoint does not record its dataset; pass --data".into()))
}

pub fn eval_cmd(
    ckpt: &Path,
    task: TaskTag,
    split: &str,
    mode: Objective,
    data: Option<&Path>,
    out: Option<&Path>,
    opts: &EvalOptions,
) -> Result<()> {
    let (model, state) = Checkpoint::load(ckpt)?;
    let dir = data_dir_of(&state, data)?;
    let corpora = Corpora::load(&dir, &[task])?;
    let rows = eval::evaluate(&model, &corpora, task, split, mode, opts)?;
    match out {
        Some(p) => {
            eval::write_report(p, &rows)?;
            let cfg = serde_json::json!({
                "ckpt": ckpt, "task": task, "split": split, "mode": mode,
                "limit": opts.limit, "strategy": opts.strategy, "data": dir,
            });
            write_stamp(&stamp_path(p), "eval", None, cfg)?;
            for r in &rows {
                eprintln!("{} {} [{}] = {:.4} over {}", r.task, r.metric, r.subset.as_str(), r.value, r.count);
            }
        }
        None => {
            for r in &rows {
                println!("{}", serde_json::to_string(r)?);
            }
        }
    }
    Ok(())
}

/// One generation request.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub input: String,
    #[serde(default)]
    pub scene_ids: Vec<u64>,
    #[serde(default)]
    pub task: Option<TaskTag>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub input: String,
    pub output: String,
}

fn generate_cmd(ckpt: &Path, input: &Path, data: Option<&Path>, out: Option<&Path>, strategy: Strategy) -> Result<()> {
    let (model, state) = Checkpoint::load(ckpt)?;
    let dir = data_dir_of(&state, data)?;
    let corpora = Corpora::load(&dir, &[])?;
    corpora.check_model(model.config())?;
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let req: GenerateRequest =
            serde_json::from_str(line).map_err(|e| Error::Data(format!("{}:{}: {e}", input.display(), i + 1)))?;
        let ex = crate::tasks::TaskExample {
            task: req.task.unwrap_or(TaskTag::Vqa),
            input: req.input.clone(),
            target: String::new(),
            scene_ids: req.scene_ids.clone(),
            aux: Default::default(),
        };
        let grounding = matches!(req.task, Some(TaskTag::Ground | TaskTag::Refexp))
            || (req.task.is_none() && req.input.starts_with("visual grounding:"));
        let cfg = if grounding {
            DecodeConfig {
                strategy,
                ..DecodeConfig::grounding(&model, corpora.manifest.regions)
            }
        } else {
            DecodeConfig {
                strategy,
                ..DecodeConfig::greedy(model.config().max_target_len)
            }
        };
        let x = corpora.encoder_input(&ex, model.config())?;
        let task = req.task.map(|t| t.as_str());
        let toks = eval::generate(&model, &[x], task, &cfg)?.remove(0);
        let resp = GenerateResponse {
            input: req.input,
            output: corpora.vocab.decode(&toks),
        };
        lines.push(serde_json::to_string(&resp)?);
    }
    let body = lines.join("\n") + "\n";
    match out {
        Some(p) => {
            std::fs::write(p, &body).map_err(|e| Error::io(p, e))?;
            let cfg = serde_json::json!({"ckpt": ckpt, "input": input, "strategy": strategy, "data": dir});
            write_stamp(&stamp_path(p), "generate", None, cfg)?;
        }
        None => print!("{body}"),
    }
    Ok(())
}

/// Summary of a checkpoint's tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct InspectReport {
    pub tensors: Vec<(String, Vec<usize>)>,
    pub tying_groups: Vec<Vec<String>>,
    pub parameters: usize,
    pub head_mode: HeadMode,
    pub head_tasks: Vec<String>,
    pub vocab_size: usize,
    pub d: usize,
    pub auxiliary: usize,
}

impl InspectReport {
    /// Parameters held by per-task output heads.
    pub fn task_head_parameters(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with("lm_head."))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, shape) in &self.tensors {
            s += &format!("{name:<48} {shape:?}\n");
        }
        s += "\ntying groups:\n";
        for g in &self.tying_groups {
            s += &format!("  {}\n", g.join(" = "));
        }
        s += &format!("\nparameters: {}\n", self.parameters);
        s += &format!(
            "head mode: {:?} ({} task heads, {} parameters)\n",
            self.head_mode,
            self.head_tasks.len(),
            self.task_head_parameters()
        );
        if self.auxiliary > 0 {
            s += &format!("optimizer tensors: {}\n", self.auxiliary);
        }
        s
    }
}

pub fn inspect(ckpt: &Path) -> Result<InspectReport> {
    let bytes = std::fs::read(ckpt).map_err(|e| Error::io(ckpt, e))?;
    let (model, _, extras) = Checkpoint::from_bytes_with(&bytes)?;
    let p = &model.params;
    Ok(InspectReport {
        tensors: p.ids().map(|id| (p.get(id).name.clone(), p.value(id).shape().to_vec())).collect(),
        tying_groups: p.tying_groups(),
        parameters: model.num_parameters(),
        head_mode: model.config().head_mode,
        head_tasks: model.config().head_tasks.clone(),
        vocab_size: model.config().vocab_size,
        d: model.config().d,
        auxiliary: extras.len(),
    })
}

/// Line chart of every (task, split or metric) series against step.
pub fn plot(logs: &[PathBuf], out: &Path) -> Result<()> {
    let mut series: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    for path in logs {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: LogRecord =
                serde_json::from_str(line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let (key, y) = match (&r.metric, r.value, r.loss) {
                (Some(m), Some(v), _) => (format!("{} {m}", r.task), v),
                (None, _, Some(l)) => (format!("{} {}loss", r.task, r.split.as_deref().map(|s| format!("{s} ")).unwrap_or_default()), l),
                _ => continue,
            };
            series.entry(key).or_default().push((r.step as f64, y));
        }
    }
    if series.is_empty() {
        return Err(Error::Data("no plottable records".into()));
    }
    std::fs::write(out, render_svg(&series)).map_err(|e| Error::io(out, e))
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn render_svg(series: &std::collections::BTreeMap<String, Vec<(f64, f64)>>) -> String {
    let (w, h, left, right, top, bottom) = (760.0, 420.0, 60.0, 220.0, 20.0, 40.0);
    let pts = series.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        if y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * (h - top - bottom);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s += &format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n");
    s += &format!(
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - bottom,
        w - right,
        h - bottom
    );
    s += &format!("<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n", h - bottom);
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{fy:.3}</text>\n", left - 4.0, py(fy) + 4.0);
        s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{fx:.0}</text>\n", px(fx), h - bottom + 16.0);
    }
    s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">step</text>\n", (left + w - right) / 2.0, h - 6.0);
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|(_, y)| y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        s += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        );
        let ly = top + 14.0 * i as f64 + 10.0;
        s += &format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            w - right + 10.0,
            w - right + 28.0
        );
        let label = name.replace('&', "&amp;").replace('<', "&lt;");
        s += &format!("<text x=\"{}\" y=\"{}\">{label}</text>\n", w - right + 32.0, ly + 4.0);
    }
    s += "</svg>\n";
    s
}

/// Write a config file for a toy run over `data_dir`.
pub fn write_config(path: &Path, cfg: &TrainConfig) -> Result<()> {
    std::fs::write(path, cfg.to_ini()).map_err(|e| Error::io(path, e))
}
