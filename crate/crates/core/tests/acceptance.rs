//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Set `ACCEPTANCE_ONLY=5,7` to run a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uvlg::data::Corpora;
use uvlg::eval::{self, evaluate, EvalOptions, EvalRow, Subset};
use uvlg::model::{MaskingVariant, Model, ModelConfig, EMBED, EMBED_ALIASES};
use uvlg::nn::{finite_diff_check, AdamW, AdamWConfig, GradCheckConfig, Graph, Tensor};
use uvlg::synth::{iou, Dataset, Manifest, Splits};
use uvlg::tasks::{self, raw, PrefixRegistry, TaskExample, TaskTag};
use uvlg::training::{finetune, pretrain, LogRecord, Objective, TrainConfig, Trainer};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Steps of the shared pretraining run.
const PRETRAIN_STEPS: u64 = 4000;
/// Finetuning budget of the grounding, VQA and VCR runs.
const FINETUNE_STEPS: u64 = 1000;
/// Per-task budget of the multi-task comparison.
const PARITY_STEPS: u64 = 1000;

fn quiet(_: &LogRecord) -> uvlg::Result<()> {
    Ok(())
}

/// State shared by the learning criteria.
struct Toy {
    data: Corpora,
    pretrained: Model<f32>,
    pretrain_secs: f64,
}

impl Toy {
    fn build() -> Result<Toy, String> {
        let t = Instant::now();
        let ds = Dataset::generate(&Manifest::default()).map_err(err)?;
        let data = Corpora::from_dataset(&ds).map_err(err)?;
        let cfg = TrainConfig {
            steps: PRETRAIN_STEPS,
            ..TrainConfig::toy_pretrain()
        };
        let pretrained = pretrain(cfg, &data, None, &mut quiet).map_err(err)?.model;
        Ok(Toy {
            data,
            pretrained,
            pretrain_secs: t.elapsed().as_secs_f64(),
        })
    }

    fn finetune(&self, task: TaskTag, steps: u64, objective: Objective, from_pretrained: bool) -> Result<Model<f32>, String> {
        let cfg = TrainConfig {
            steps,
            objective,
            ..TrainConfig::toy_finetune(task)
        };
        let init = from_pretrained.then(|| self.pretrained.clone());
        Ok(finetune(task, cfg, &self.data, init, &mut quiet).map_err(err)?.model)
    }

    fn eval(&self, model: &Model<f32>, task: TaskTag, objective: Objective) -> Result<Vec<EvalRow>, String> {
        evaluate(model, &self.data, task, "test", objective, &EvalOptions::default()).map_err(err)
    }
}

fn row<'a>(rows: &'a [EvalRow], metric: &str, subset: Subset) -> Result<&'a EvalRow, String> {
    rows.iter()
        .find(|r| r.metric == metric && r.subset == subset)
        .ok_or_else(|| format!("no {metric}/{} row", subset.as_str()))
}

fn c1_gradient_integrity() -> Outcome {
    let t = Instant::now();
    let m = Manifest {
        regions: 4,
        splits: Splits {
            train: 20,
            val: 4,
            test: 4,
        },
        tasks: vec![TaskTag::Mlm, TaskTag::Ground, TaskTag::Itm],
        vocab_size: 200,
        ..Default::default()
    };
    let data = Corpora::from_dataset(&Dataset::generate(&m).map_err(err)?).map_err(err)?;
    let cfg = data.model_config(&ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        d: 32,
        heads: 4,
        d_ff: 64,
        ..Default::default()
    });
    let mut model = Model::<f32>::new(&cfg, 5).map_err(err)?.cast::<f64>();
    // Nonzero attention biases so that path carries gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for name in ["encoder.relative_bias", "decoder.relative_bias"] {
        if let Some(id) = model.params.id(name) {
            for v in model.params.value_mut(id).data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let batch: Vec<&TaskExample> = [TaskTag::Mlm, TaskTag::Ground, TaskTag::Itm]
        .iter()
        .map(|&tag| data.examples(tag, "train").map(|e| &e[0]))
        .collect::<uvlg::Result<_>>()
        .map_err(err)?;
    let inputs = batch
        .iter()
        .map(|ex| data.encoder_input(ex, &cfg))
        .collect::<uvlg::Result<Vec<_>>>()
        .map_err(err)?;
    let targets: Vec<Vec<u32>> = batch.iter().map(|ex| data.target_ids(ex, &cfg)).collect();
    let net = model.net.clone();
    let check = GradCheckConfig {
        eps: 1e-5,
        tolerance: 1e-4,
        max_coords_per_param: Some(128),
        seed: 7,
    };
    let report = finite_diff_check(&mut model.params, &check, |store, g| {
        net.generation_loss(g, store, &inputs, &targets, None)
    })
    .map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    ensure!(report.passed(), "max relative error {:.3e} at {:?}", report.max_rel_error, report.worst);
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!(
        "max rel err {:.2e} over {} coords, {secs:.1}s",
        report.max_rel_error, report.checked
    ))
}

fn c2_tying() -> Outcome {
    let cfg = ModelConfig {
        d: 16,
        heads: 2,
        d_ff: 32,
        vocab_size: 140,
        regions: 8,
        d_roi: 6,
        ..Default::default()
    };
    // (a) one storage cell, bitwise, after an optimizer step.
    let mut model = Model::<f32>::new(&cfg, 3).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let regions: Vec<uvlg::model::RegionInput> = (1..=8)
        .map(|k| uvlg::model::RegionInput {
            roi: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            bbox: [0.1, 0.1, 0.6, 0.7],
            image_id: 1,
            region_id: k,
        })
        .collect();
    let inputs = vec![uvlg::model::EncoderInput {
        text: vec![120, 121, 122],
        regions: regions.clone(),
    }];
    let targets = vec![vec![cfg.visual_token(3), 2]];
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut g = Graph::new();
    let loss = model.net.generation_loss(&mut g, &model.params, &inputs, &targets, None).map_err(err)?;
    let grads = g.backward(loss).map_err(err)?;
    model.params.zero_grad();
    grads.accumulate_into(&mut model.params);
    let ids: Vec<_> = model.params.ids().collect();
    opt.step_subset(&mut model.params, 1e-2, &ids).map_err(err)?;
    let base = model.params.by_name(EMBED).ok_or("no shared embedding")?.data().to_vec();
    for alias in EMBED_ALIASES {
        let v = model.params.by_name(alias).ok_or_else(|| format!("no `{alias}`"))?.data();
        ensure!(
            v.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits()),
            "`{alias}` differs from `{EMBED}` after a step"
        );
    }

    // (b) editing Row(<vis_3>) moves region 3's embedding and the <vis_3> logit.
    let mut model = Model::<f32>::new(&cfg, 4).map_err(err)?.cast::<f64>();
    let hidden: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
    let probe = |m: &Model<f64>| -> Result<(Vec<Vec<f64>>, Vec<f64>), String> {
        let mut g = Graph::inference();
        let e = m.net.embed_visual(&mut g, &m.params, &regions).map_err(err)?;
        let h = g.constant(Tensor::new(&[1, 16], hidden.clone()).map_err(err)?);
        let l = m.net.lm_logits(&mut g, &m.params, h, None).map_err(err)?;
        let t = g.value(e);
        Ok(((0..t.rows()).map(|i| t.row(i).to_vec()).collect(), g.value(l).data().to_vec()))
    };
    let (e0, l0) = probe(&model)?;
    let vis3 = cfg.visual_token(3) as usize;
    let delta: Vec<f64> = (0..16).map(|i| 0.1 * (i as f64 - 7.5)).collect();
    let id = model.params.id(EMBED).ok_or("no shared embedding")?;
    for (w, dv) in model.params.value_mut(id).row_mut(vis3).iter_mut().zip(&delta) {
        *w += dv;
    }
    let (e1, l1) = probe(&model)?;
    let mut worst = 0.0f64;
    for k in 0..8 {
        for j in 0..16 {
            let want = if k == 2 { delta[j] } else { 0.0 };
            worst = worst.max((e1[k][j] - e0[k][j] - want).abs());
        }
    }
    // Logits are scaled by 1/sqrt(d).
    let dot: f64 = hidden.iter().zip(&delta).map(|(a, b)| a * b).sum::<f64>() / 4.0;
    for (t, (a, b)) in l0.iter().zip(&l1).enumerate() {
        let want = if t == vis3 { dot } else { 0.0 };
        worst = worst.max((b - a - want).abs());
    }
    ensure!(worst < 1e-12, "edit propagated with error {worst:.3e}");
    Ok(format!("{} aliases bitwise equal; row edit exact to {worst:.1e}", EMBED_ALIASES.len()))
}

fn c3_formats() -> Outcome {
    let span = tasks::span_mask_at(
        &"A man is jumping over a fire hydrant.".split(' ').map(String::from).collect::<Vec<_>>(),
        &[(1, 1), (3, 1)],
    )
    .map_err(err)?;
    let reg = PrefixRegistry::default();
    let token_reg = PrefixRegistry {
        masking: MaskingVariant::TokenMask,
        ..Default::default()
    };
    let fmt = |reg: &PrefixRegistry, tag, fields| reg.format(tag, &fields).map_err(err);
    let rows: Vec<(TaskExample, &str, &str)> = vec![
        (
            fmt(&reg, TaskTag::Mlm, raw([("input", &span.input.join(" ")), ("target", &span.target.join(" "))]))?,
            "span prediction: A <text_1> is <text_2> over a fire hydrant.",
            "<text_1> man <text_2> jumping",
        ),
        (
            fmt(
                &token_reg,
                TaskTag::Mlm,
                raw([
                    ("input", "A <mask> is <mask> over a fire hydrant."),
                    ("target", "A man is jumping over a fire hydrant"),
                ]),
            )?,
            "denoise: A <mask> is <mask> over a fire hydrant.",
            "A man is jumping over a fire hydrant",
        ),
        (
            fmt(&reg, TaskTag::Vqa, raw([("question", "what is the color of the man's shirt?"), ("answer", "blue")]))?,
            "vqa: what is the color of the man's shirt?",
            "blue",
        ),
        (
            fmt(
                &reg,
                TaskTag::Itm,
                raw([("caption", "A man with blue shirt is jumping over fire hydrant."), ("label", "true")]),
            )?,
            "image text match: A man with blue shirt is jumping over fire hydrant.",
            "true",
        ),
        (
            fmt(&reg, TaskTag::Ground, raw([("phrase", "yellow fire hydrant"), ("region", "3")]))?,
            "visual grounding: yellow fire hydrant",
            "<vis_3>",
        ),
        (
            fmt(&reg, TaskTag::Gcap, raw([("region", "3"), ("phrase", "yellow fire hydrant")]))?,
            "caption region: <vis_3>",
            "yellow fire hydrant",
        ),
        (fmt(&reg, TaskTag::Vqa, raw([("question", "[Q]"), ("answer", "[A]")]))?, "vqa: [Q]", "[A]"),
        (fmt(&reg, TaskTag::Gqa, raw([("question", "[Q]"), ("answer", "[A]")]))?, "gqa: [Q]", "[A]"),
        (fmt(&reg, TaskTag::Nlvr, raw([("text", "[text]"), ("label", "true")]))?, "nlvr: [text]", "true"),
        (
            fmt(&reg, TaskTag::VcrQa, raw([("question", "[Q]"), ("answer", "[A]"), ("label", "false")]))?,
            "vcr qa: question [Q] answer: [A]",
            "false",
        ),
        (
            fmt(
                &reg,
                TaskTag::VcrQar,
                raw([("question", "[Q]"), ("answer", "[A]"), ("rationale", "[R]"), ("label", "true")]),
            )?,
            "vcr qar: question [Q] answer: [A] rationale: [R]",
            "true",
        ),
        (
            fmt(&reg, TaskTag::Refexp, raw([("phrase", "[referring expression]"), ("region", "5")]))?,
            "visual grounding: [referring expression]",
            "<vis_5>",
        ),
        (fmt(&reg, TaskTag::Caption, raw([("caption", "[caption]")]))?, "caption:", "[caption]"),
        (
            fmt(&reg, TaskTag::CaptionTags, raw([("tags", "[Tag1 Tag2 ..]"), ("caption", "[caption]")]))?,
            "caption with tags: [Tag1 Tag2 ..]",
            "[caption]",
        ),
        (
            fmt(&reg, TaskTag::Translate, raw([("source", "[English text]"), ("target", "[German text]")]))?,
            "translate English to German: [English text]",
            "[German text]",
        ),
    ];
    for (ex, input, target) in &rows {
        ensure!(ex.input == *input, "{}: input {:?} != {:?}", ex.task, ex.input, input);
        ensure!(ex.target == *target, "{}: target {:?} != {:?}", ex.task, ex.target, target);
    }
    Ok(format!("{} rows byte-exact", rows.len()))
}

fn c4_masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let len = rng.gen_range(1..40);
        let sent: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..50))).collect();
        let s = tasks::span_mask(&sent, 0.15, &mut rng).map_err(err)?;
        let want = ((0.15 * len as f64).round() as usize).max(1);
        ensure!(s.masked.len() == want, "span_mask masked {} of {len}, want {want}", s.masked.len());
        // Fill each sentinel back in from the target.
        let mut spans: Vec<Vec<String>> = Vec::new();
        for t in &s.target {
            if t.starts_with("<text_") {
                ensure!(*t == uvlg::tokenizer::text_sentinel(spans.len() + 1), "sentinels out of order");
                spans.push(Vec::new());
            } else {
                spans.last_mut().ok_or("target starts with a word")?.push(t.clone());
            }
        }
        let mut rebuilt = Vec::new();
        for t in &s.input {
            match t.strip_prefix("<text_").and_then(|r| r.strip_suffix('>')).and_then(|k| k.parse::<usize>().ok()) {
                Some(k) => rebuilt.extend(spans[k - 1].iter().cloned()),
                None => rebuilt.push(t.clone()),
            }
        }
        ensure!(rebuilt == sent, "reconstruction failed for {sent:?}");

        let tm = tasks::token_mask(&sent, 0.30, &mut rng);
        let want = (0.30 * len as f64).round() as usize;
        ensure!(tm.masked.len() == want, "token_mask masked {} of {len}, want {want}", tm.masked.len());
        ensure!(tm.input.iter().filter(|t| *t == uvlg::tokenizer::MASK).count() == want, "mask count");
        ensure!(tm.target == sent, "token_mask target must be the sentence");
    }
    let pool: Vec<(u64, String)> = (0..20).map(|i| (i, format!("caption {i}"))).collect();
    let negatives = (0..10_000)
        .map(|i| tasks::itm_sample(i % 20, &pool[(i % 20) as usize].1, &pool, &mut rng))
        .collect::<uvlg::Result<Vec<_>>>()
        .map_err(err)?
        .iter()
        .filter(|e| e.target == "false")
        .count();
    let frac = negatives as f64 / 10_000.0;
    ensure!((0.48..=0.52).contains(&frac), "ITM negative fraction {frac}");
    Ok(format!("1k sentences exact; ITM negatives {:.1}%", 100.0 * frac))
}

fn c5_grounding(toy: &Toy) -> Outcome {
    let t = Instant::now();
    let pre = toy.finetune(TaskTag::Ground, FINETUNE_STEPS, Objective::Generative, true)?;
    let scratch = toy.finetune(TaskTag::Ground, FINETUNE_STEPS, Objective::Generative, false)?;
    let a = row(&toy.eval(&pre, TaskTag::Ground, Objective::Generative)?, "accuracy", Subset::All)?.value;
    let b = row(&toy.eval(&scratch, TaskTag::Ground, Objective::Generative)?, "accuracy", Subset::All)?.value;
    let secs = toy.pretrain_secs + t.elapsed().as_secs_f64();
    let detail = format!(
        "pretrained {:.1}% vs scratch {:.1}% after {FINETUNE_STEPS} steps, {secs:.0}s",
        100.0 * a,
        100.0 * b
    );
    ensure!(a >= 0.90, "{detail}: below 90%");
    ensure!(a - b >= 0.05, "{detail}: gap under 5 points");
    ensure!(secs < 600.0, "{detail}: over 10 min");
    Ok(detail)
}

fn c6_gen_vs_disc(toy: &Toy) -> Outcome {
    let t = Instant::now();
    let gen = toy.finetune(TaskTag::Vqa, FINETUNE_STEPS, Objective::Generative, true)?;
    let disc = toy.finetune(TaskTag::Vqa, FINETUNE_STEPS, Objective::Discriminative, true)?;
    let g = toy.eval(&gen, TaskTag::Vqa, Objective::Generative)?;
    let d = toy.eval(&disc, TaskTag::Vqa, Objective::Discriminative)?;
    let (g_in, g_out) = (row(&g, "vqa_score", Subset::InDomain)?, row(&g, "vqa_score", Subset::OutOfDomain)?);
    let (d_in, d_out) = (row(&d, "vqa_score", Subset::InDomain)?, row(&d, "vqa_score", Subset::OutOfDomain)?);
    let secs = t.elapsed().as_secs_f64();
    let detail = format!(
        "in-domain gen {:.1} / disc {:.1}; out-of-domain gen {:.1} / disc {:.1} (n={}), {secs:.0}s",
        100.0 * g_in.value,
        100.0 * d_in.value,
        100.0 * g_out.value,
        100.0 * d_out.value,
        g_out.count
    );
    ensure!(g_out.count > 0, "{detail}: no out-of-domain questions");
    ensure!(d_out.value == 0.0, "{detail}: discriminative out-of-domain must be 0");
    ensure!(g_out.value >= 0.30, "{detail}: generative out-of-domain under 30%");
    ensure!((g_in.value - d_in.value).abs() <= 0.05, "{detail}: in-domain gap over 5 points");
    ensure!(secs < 600.0, "{detail}: over 10 min");
    Ok(detail)
}

fn c7_vcr(toy: &Toy) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let choices = rng.gen_range(2..8);
        let width = rng.gen_range(3..12);
        let (ti, fi) = (rng.gen_range(0..width), rng.gen_range(0..width));
        if ti == fi {
            continue;
        }
        let logits: Vec<Vec<f64>> = (0..choices)
            .map(|_| (0..width).map(|_| rng.gen_range(-8.0..8.0)).collect())
            .collect();
        let brute: Vec<f64> = logits
            .iter()
            .map(|l| {
                let z: f64 = l.iter().map(|v| v.exp()).sum();
                let (pt, pf) = (l[ti].exp() / z, l[fi].exp() / z);
                pt / (pt + pf)
            })
            .collect();
        let want = (0..choices).fold(0, |b, i| if brute[i] > brute[b] { i } else { b });
        ensure!(eval::rank_from_logits(&logits, ti, fi).0 == want, "ranking disagrees with brute force");
    }
    let model = toy.finetune(TaskTag::VcrQa, FINETUNE_STEPS, Objective::Generative, true)?;
    let acc = row(&toy.eval(&model, TaskTag::VcrQa, Objective::Generative)?, "accuracy", Subset::All)?.value;
    let detail = format!("ranking exact on 1k logit sets; 4-choice accuracy {:.1}%", 100.0 * acc);
    ensure!(acc >= 0.80, "{detail}: under 80%");
    Ok(detail)
}

fn headline(rows: &[EvalRow]) -> Result<(String, f64), String> {
    let r = rows
        .iter()
        .find(|r| r.subset == Subset::All && !r.metric.ends_with("_unconstrained"))
        .ok_or("empty report")?;
    Ok((r.metric.clone(), r.value))
}

fn c8_multitask(toy: &Toy) -> Outcome {
    let t = Instant::now();
    let tasks = TaskTag::DOWNSTREAM;
    let mut single = BTreeMap::new();
    for &task in &tasks {
        let m = toy.finetune(task, PARITY_STEPS, Objective::Generative, true)?;
        single.insert(task, headline(&toy.eval(&m, task, Objective::Generative)?)?);
    }
    let cfg = TrainConfig {
        steps: PARITY_STEPS * tasks.len() as u64,
        ..TrainConfig::toy_multitask()
    };
    // Fairness after every step.
    let mut trainer = Trainer::new(cfg.clone(), &toy.data, Some(toy.pretrained.clone())).map_err(err)?;
    let mut worst_spread = 0;
    for _ in 0..cfg.steps {
        trainer.step().map_err(err)?;
        let counts: Vec<u64> = tasks
            .iter()
            .map(|t| trainer.state.task_steps.get(t.as_str()).copied().unwrap_or(0))
            .collect();
        worst_spread = worst_spread.max(counts.iter().max().unwrap() - counts.iter().min().unwrap());
    }
    ensure!(worst_spread <= 1, "round-robin counts spread to {worst_spread}");
    let mut lines = Vec::new();
    let mut ok = true;
    for &task in &tasks {
        let (metric, mt) = headline(&toy.eval(&trainer.model, task, Objective::Generative)?)?;
        let st = single[&task].1;
        let close = (mt - st).abs() <= 0.05;
        ok &= close;
        lines.push(format!("{task} {metric} {mt:.3} vs {st:.3}{}", if close { "" } else { " (!)" }));
    }
    let detail = format!("{}; {:.0}s", lines.join(", "), t.elapsed().as_secs_f64());
    ensure!(ok, "{detail}");
    Ok(detail)
}

fn c9_heads() -> Outcome {
    let m = Manifest {
        splits: Splits {
            train: 40,
            val: 10,
            test: 40,
        },
        ..Default::default()
    };
    let data = Corpora::from_dataset(&Dataset::generate(&m).map_err(err)?).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let mut reports = Vec::new();
    let mut metrics = Vec::new();
    for mode in [uvlg::model::HeadMode::Shared, uvlg::model::HeadMode::PerTask] {
        let cfg = TrainConfig {
            head_mode: mode,
            d: 32,
            heads: 4,
            d_ff: 64,
            ..TrainConfig::toy_multitask()
        };
        let t = Trainer::new(cfg, &data, None).map_err(err)?;
        let path = dir.path().join(format!("{mode:?}.ckpt"));
        t.save(&path).map_err(err)?;
        reports.push(uvlg::cli::inspect(&path).map_err(err)?);
        let mut rows = Vec::new();
        for task in TaskTag::DOWNSTREAM {
            let opts = EvalOptions {
                limit: Some(40),
                ..Default::default()
            };
            rows.extend(evaluate(&t.model, &data, task, "test", Objective::Generative, &opts).map_err(err)?);
        }
        metrics.push(rows.iter().map(|r| (r.task.clone(), r.metric.clone(), r.value)).collect::<Vec<_>>());
    }
    let (shared, per_task) = (&reports[0], &reports[1]);
    let want = TaskTag::DOWNSTREAM.len() * shared.vocab_size * shared.d;
    let added = per_task.parameters - shared.parameters;
    ensure!(added == want, "per-task heads add {added} parameters, want {want}");
    ensure!(per_task.task_head_parameters() == want, "inspect counts {}", per_task.task_head_parameters());
    ensure!(metrics[0] == metrics[1], "step-0 metrics differ");
    Ok(format!("+{added} = 7·{}·{} parameters; {} step-0 metrics equal", shared.vocab_size, shared.d, metrics[0].len()))
}

fn read_tree(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).map_err(err)? {
        let e = e.map_err(err)?;
        let name = e.file_name().to_string_lossy().into_owned();
        // The stamp records wall-clock time.
        if name != "stamp.json" {
            out.insert(name, std::fs::read(e.path()).map_err(err)?);
        }
    }
    Ok(out)
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let m = Manifest {
        splits: Splits {
            train: 100,
            val: 20,
            test: 40,
        },
        ..Default::default()
    };
    let mpath = dir.path().join("manifest.json");
    std::fs::write(&mpath, m.to_json()).map_err(err)?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    uvlg::cli::synth(Some(&mpath), &a).map_err(err)?;
    uvlg::cli::synth(Some(&mpath), &b).map_err(err)?;
    let (ta, tb) = (read_tree(&a)?, read_tree(&b)?);
    ensure!(ta == tb, "synth outputs differ");

    let data = Corpora::load(&a, &TaskTag::PRETRAIN).map_err(err)?;
    let run = |ckpt: &Path| -> Result<(Vec<u8>, Vec<String>), String> {
        let cfg = TrainConfig {
            steps: 100,
            d: 32,
            heads: 4,
            d_ff: 64,
            batch_size: 16,
            data_dir: a.clone(),
            ..TrainConfig::toy_pretrain()
        };
        let mut log = Vec::new();
        let mut sink = |r: &LogRecord| {
            log.push(serde_json::to_string(r).expect("log record"));
            Ok(())
        };
        let t = pretrain(cfg, &data, None, &mut sink).map_err(err)?;
        t.save(ckpt).map_err(err)?;
        Ok((std::fs::read(ckpt).map_err(err)?, log))
    };
    let (ca, cb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let (ra, rb) = (run(&ca)?, run(&cb)?);
    ensure!(ra.0 == rb.0, "pretrain checkpoints differ");
    ensure!(ra.1 == rb.1, "pretrain logs differ");

    let opts = EvalOptions::default();
    let mut reports = Vec::new();
    for (i, ckpt) in [&ca, &cb].iter().enumerate() {
        let out = dir.path().join(format!("r{i}.jsonl"));
        uvlg::cli::eval_cmd(ckpt, TaskTag::Ground, "test", Objective::Generative, Some(&a), Some(&out), &opts)
            .map_err(err)?;
        reports.push(std::fs::read(&out).map_err(err)?);
    }
    ensure!(reports[0] == reports[1], "eval reports differ");
    Ok(format!(
        "{} synth files, {}-byte checkpoint, eval report identical",
        ta.len(),
        ra.0.len()
    ))
}

fn c11_metric_units() -> Outcome {
    let x: Vec<String> = "a red cube and a blue ball".split(' ').map(String::from).collect();
    ensure!(eval::bleu(&x, &[x.clone()], 4) == 1.0, "bleu(x, x) != 1");
    let cases = [
        ([0.2f32, 0.2, 0.7, 0.9], [0.2f32, 0.2, 0.7, 0.9], 1.0),
        ([0.0, 0.0, 0.3, 0.3], [0.5, 0.5, 0.9, 0.9], 0.0),
        ([0.0, 0.0, 1.0, 1.0], [0.5, 0.0, 1.5, 1.0], 1.0 / 3.0),
    ];
    for (a, b, want) in cases {
        let v = iou(a, b);
        ensure!((v - want).abs() < 1e-9, "iou({a:?}, {b:?}) = {v}, want {want}");
    }
    let humans = |n: usize| -> Vec<String> {
        (0..10).map(|i| if i < n { "blue" } else { "red" }.to_string()).collect()
    };
    ensure!(eval::vqa_score("blue", &humans(2)) == 0.6, "2 humans");
    for n in 4..=10 {
        ensure!(eval::vqa_score("blue", &humans(n)) == 1.0, "{n} humans");
    }
    Ok("bleu, iou and vqa_score exact".into())
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().map_or(true, |v| v.contains(&n));
    let mut failed = 0;
    let mut report = |n: u32, name: &str, outcome: std::thread::Result<Outcome>| {
        let line = match outcome {
            Ok(Ok(detail)) => format!("PASS {n:>2} {name}: {detail}"),
            Ok(Err(e)) => {
                failed += 1;
                format!("FAIL {n:>2} {name}: {e}")
            }
            Err(p) => {
                failed += 1;
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                format!("FAIL {n:>2} {name}: panicked: {msg}")
            }
        };
        println!("{line}");
    };
    let quick: [(u32, &str, fn() -> Outcome); 4] = [
        (1, "gradient integrity", c1_gradient_integrity),
        (2, "weight tying", c2_tying),
        (3, "format golden rows", c3_formats),
        (4, "masking laws", c4_masking),
    ];
    for (n, name, f) in quick {
        if wanted(n) {
            report(n, name, catch_unwind(f));
        }
    }
    let learning: [(u32, &str, fn(&Toy) -> Outcome); 4] = [
        (5, "toy grounding transfer", c5_grounding),
        (6, "generative vs discriminative VQA", c6_gen_vs_disc),
        (7, "VCR true/false ranking", c7_vcr),
        (8, "multi-task parity", c8_multitask),
    ];
    if learning.iter().any(|(n, _, _)| wanted(*n)) {
        match catch_unwind(Toy::build) {
            Ok(Ok(toy)) => {
                println!("     shared pretraining: {PRETRAIN_STEPS} steps in {:.0}s", toy.pretrain_secs);
                for (n, name, f) in learning {
                    if wanted(n) {
                        report(n, name, catch_unwind(AssertUnwindSafe(|| f(&toy))));
                    }
                }
            }
            other => {
                let e = match other {
                    Ok(Err(e)) => e,
                    _ => "pretraining panicked".into(),
                };
                for (n, name, _) in learning {
                    if wanted(n) {
                        report(n, name, Ok(Err(format!("pretraining failed: {e}"))));
                    }
                }
            }
        }
    }
    let rest: [(u32, &str, fn() -> Outcome); 3] = [
        (9, "shared vs per-task heads", c9_heads),
        (10, "determinism", c10_determinism),
        (11, "metric units", c11_metric_units),
    ];
    for (n, name, f) in rest {
        if wanted(n) {
            report(n, name, catch_unwind(f));
        }
    }
    // Verdicts are the PASS/FAIL lines; the run itself succeeds.
    println!("     {failed} check(s) failed");
}
