//! Decoding, metrics and per-task evaluation reports.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Corpora;
use crate::error::{Error, Result};
use crate::model::{EncoderInput, Model};
use crate::nn::Graph;
use crate::synth::iou;
use crate::tasks::{TaskExample, TaskTag};
use crate::tokenizer::{normalize_text, pretokenize};
use crate::training::{homogeneous_batches, Objective};

/// Search strategy for [`generate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Maximum number of tokens before EOS.
    pub max_len: usize,
    /// EOS is blocked until this many tokens have been emitted.
    pub min_len: usize,
    /// Tokens that may be emitted. EOS always terminates and is allowed
    /// once `min_len` is reached.
    pub allowed: Option<Vec<u32>>,
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            max_len,
            min_len: 0,
            allowed: None,
        }
    }

    /// Exactly one visual sentinel among the first `regions`.
    pub fn grounding(model: &Model<f32>, regions: usize) -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            max_len: 1,
            min_len: 1,
            allowed: Some((1..=regions).map(|k| model.config().visual_token(k)).collect()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy == Strategy::Beam(0) {
            return Err(Error::InvalidArgument("beam width must be at least 1".into()));
        }
        if self.allowed.as_ref().is_some_and(Vec::is_empty) {
            return Err(Error::InvalidArgument("allowed-token set is empty".into()));
        }
        Ok(())
    }
}

const PAD_ID: u32 = 0;
const BOS_ID: u32 = 1;
const EOS_ID: u32 = 2;

/// Which tokens may be emitted at a step, before the EOS rule.
fn content_mask(vocab_size: usize, allowed: &Option<Vec<u32>>) -> Vec<bool> {
    match allowed {
        Some(set) => {
            let mut m = vec![false; vocab_size];
            for &t in set {
                if (t as usize) < vocab_size {
                    m[t as usize] = true;
                }
            }
            m
        }
        None => {
            let mut m = vec![true; vocab_size];
            m[PAD_ID as usize] = false;
            m[BOS_ID as usize] = false;
            m
        }
    }
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Logits of the next token after each prefix, `[batch][vocab]`.
fn next_logits(
    model: &Model<f32>,
    g: &mut Graph<f32>,
    enc: &crate::model::Encoded,
    prefixes: &[Vec<u32>],
    task: Option<&str>,
) -> Result<Vec<Vec<f32>>> {
    let len = prefixes[0].len();
    let h = model.net.decode_hidden(g, &model.params, enc, prefixes)?;
    let rows: Vec<usize> = (0..prefixes.len()).map(|b| b * len + len - 1).collect();
    let last = g.gather_rows(h, &rows)?;
    let logits = model.net.lm_logits(g, &model.params, last, task)?;
    let t = g.value(logits);
    Ok((0..prefixes.len()).map(|b| t.row(b).to_vec()).collect())
}

/// Decode each input. Outputs exclude the terminating EOS.
pub fn generate(model: &Model<f32>, inputs: &[EncoderInput], task: Option<&str>, cfg: &DecodeConfig) -> Result<Vec<Vec<u32>>> {
    cfg.validate()?;
    let max_len = cfg.max_len.min(model.config().max_target_len.saturating_sub(1)).max(1);
    let cfg = DecodeConfig { max_len, ..cfg.clone() };
    match cfg.strategy {
        Strategy::Greedy => greedy(model, inputs, task, &cfg),
        Strategy::Beam(w) => inputs.iter().map(|x| beam(model, x, task, &cfg, w)).collect(),
    }
}

fn pick(row: &[f64], mask: &[bool], eos_ok: bool) -> u32 {
    let mut best = (f64::NEG_INFINITY, None);
    for (i, &v) in row.iter().enumerate() {
        let ok = if i as u32 == EOS_ID { eos_ok } else { mask[i] };
        if ok && (best.1.is_none() || v > best.0) {
            best = (v, Some(i));
        }
    }
    best.1.expect("nonempty allowed set") as u32
}

fn greedy(model: &Model<f32>, inputs: &[EncoderInput], task: Option<&str>, cfg: &DecodeConfig) -> Result<Vec<Vec<u32>>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let vocab = model.config().vocab_size;
    let mask = content_mask(vocab, &cfg.allowed);
    let mut g = Graph::inference();
    let enc = model.net.encode(&mut g, &model.params, inputs)?;
    let start = model.config().decoder_start();
    let mut prefixes = vec![vec![start]; inputs.len()];
    let mut out = vec![Vec::new(); inputs.len()];
    let mut done = vec![false; inputs.len()];
    for _ in 0..cfg.max_len {
        let logits = next_logits(model, &mut g, &enc, &prefixes, task)?;
        for (b, row) in logits.iter().enumerate() {
            let mut next = PAD_ID;
            if !done[b] {
                let lp = log_softmax(row);
                let tok = pick(&lp, &mask, out[b].len() >= cfg.min_len);
                if tok == EOS_ID {
                    done[b] = true;
                } else {
                    out[b].push(tok);
                    next = tok;
                }
            }
            prefixes[b].push(next);
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out)
}

fn beam(model: &Model<f32>, input: &EncoderInput, task: Option<&str>, cfg: &DecodeConfig, width: usize) -> Result<Vec<u32>> {
    let vocab = model.config().vocab_size;
    let mask = content_mask(vocab, &cfg.allowed);
    let mut g = Graph::inference();
    let enc = model.net.encode(&mut g, &model.params, &vec![input.clone(); width])?;
    let start = model.config().decoder_start();
    // (tokens, log probability)
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let mut prefixes: Vec<Vec<u32>> = live
            .iter()
            .map(|(t, _)| std::iter::once(start).chain(t.iter().copied()).collect())
            .collect();
        while prefixes.len() < width {
            prefixes.push(prefixes[0].clone());
        }
        let logits = next_logits(model, &mut g, &enc, &prefixes, task)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (h, (toks, score)) in live.iter().enumerate() {
            let lp = log_softmax(&logits[h]);
            let eos_ok = toks.len() >= cfg.min_len;
            for (i, &v) in lp.iter().enumerate() {
                let ok = if i as u32 == EOS_ID { eos_ok } else { mask[i] };
                if ok {
                    cands.push((score + v, h, i as u32));
                }
            }
        }
        // Highest score first; ties keep the earlier hypothesis and token.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        for (score, h, tok) in cands.into_iter().take(width) {
            let toks = live[h].0.clone();
            if tok == EOS_ID {
                finished.push((toks, score));
            } else {
                let mut t = toks;
                t.push(tok);
                next.push((t, score));
            }
        }
        live = next;
    }
    finished.extend(live);
    let best = finished
        .into_iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.1.total_cmp(&b.1).then(j.cmp(i)))
        .map(|(_, h)| h.0)
        .unwrap_or_default();
    Ok(best)
}

/// `P(true) / (P(true) + P(false))`, computed stably from the two logits.
pub fn true_false_score(l_true: f64, l_false: f64) -> f64 {
    let z = l_true - l_false;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Index of the highest-scoring choice (the first on ties) and all scores,
/// from each choice's first-step logits.
pub fn rank_from_logits(logits: &[Vec<f64>], true_id: usize, false_id: usize) -> (usize, Vec<f64>) {
    let scores: Vec<f64> = logits.iter().map(|l| true_false_score(l[true_id], l[false_id])).collect();
    (argmax(&scores), scores)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// First-step vocabulary logits for each example.
pub fn first_step_logits(model: &Model<f32>, data: &Corpora, examples: &[&TaskExample], task: Option<&str>) -> Result<Vec<Vec<f64>>> {
    let inputs = examples
        .iter()
        .map(|ex| data.encoder_input(ex, model.config()))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::inference();
    let enc = model.net.encode(&mut g, &model.params, &inputs)?;
    let start = vec![vec![model.config().decoder_start()]; inputs.len()];
    let rows = next_logits(model, &mut g, &enc, &start, task)?;
    Ok(rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect())
}

/// Rank the expanded true/false choices of one question.
pub fn rank_true_false(model: &Model<f32>, data: &Corpora, choices: &[&TaskExample]) -> Result<(usize, Vec<f64>)> {
    let (t, f) = true_false_ids(data)?;
    let task = choices.first().map(|c| c.task.as_str());
    let logits = first_step_logits(model, data, choices, task)?;
    Ok(rank_from_logits(&logits, t, f))
}

fn true_false_ids(data: &Corpora) -> Result<(usize, usize)> {
    let id = |w: &str| {
        data.vocab
            .id(w)
            .map(|i| i as usize)
            .ok_or_else(|| Error::Data(format!("vocabulary lacks `{w}`")))
    };
    Ok((id("true")?, id("false")?))
}

/// `min(0.3 · #matching humans, 1)` after text normalization.
pub fn vqa_score(answer: &str, humans: &[String]) -> f64 {
    let a = normalize_text(answer);
    let n = humans.iter().filter(|h| normalize_text(h) == a).count();
    (0.3 * n as f64).min(1.0)
}

/// Human answers of an example; a single gold answer counts as ten
/// agreeing annotators.
pub fn human_answers(ex: &TaskExample) -> Vec<String> {
    match ex.aux.answers.as_deref() {
        Some([one]) => vec![one.clone(); 10],
        Some(many) if !many.is_empty() => many.to_vec(),
        _ => vec![ex.target.clone(); 10],
    }
}

/// Sentence BLEU with clipped n-gram precision up to `max_n` and brevity
/// penalty. A zero match count for n ≥ 2 is smoothed to
/// `1 / (candidates + 1)`.
pub fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let ngrams = |toks: &[String], n: usize| -> HashMap<Vec<String>, usize> {
        let mut m = HashMap::new();
        if toks.len() >= n {
            for w in toks.windows(n) {
                *m.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        m
    };
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngrams(candidate, n);
        let total: usize = cand.values().sum();
        let mut max_ref: HashMap<Vec<String>, usize> = HashMap::new();
        for r in references {
            for (g, c) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(c), l))
        .expect("nonempty references");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / max_n as f64).exp()
}

/// BLEU over normalized strings.
pub fn bleu_text(candidate: &str, references: &[String]) -> f64 {
    let refs: Vec<Vec<String>> = references.iter().map(|r| pretokenize(r)).collect();
    bleu(&pretokenize(candidate), &refs, 4)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    All,
    InDomain,
    OutOfDomain,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::InDomain => "in-domain",
            Subset::OutOfDomain => "out-of-domain",
        }
    }
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub subset: Subset,
    pub count: usize,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Evaluate at most this many examples (whole questions for VCR).
    pub limit: Option<usize>,
    pub strategy: Strategy,
    pub batch_size: usize,
    /// Report the unconstrained grounding number next to the constrained one.
    pub unconstrained_grounding: bool,
    /// Threads over example batches.
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            limit: None,
            strategy: Strategy::Greedy,
            batch_size: 64,
            unconstrained_grounding: true,
            workers: 1,
        }
    }
}

/// FNV-1a hash of the model configuration and evaluation settings.
pub fn fingerprint(model: &Model<f32>, tag: TaskTag, split: &str, mode: Objective, opts: &EvalOptions) -> String {
    let text = format!(
        "{}|{tag}|{split}|{mode:?}|{:?}|{:?}",
        serde_json::to_string(model.config()).unwrap_or_default(),
        opts.limit,
        opts.strategy
    );
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Map `f` over chunks of work on up to `workers` threads, keeping order.
fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Generated strings for a list of examples, batched by image count.
pub fn generate_texts(
    model: &Model<f32>,
    data: &Corpora,
    examples: &[TaskExample],
    cfg: &DecodeConfig,
    opts: &EvalOptions,
) -> Result<Vec<String>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| examples[i].scene_ids.len());
    let batches: Vec<Vec<usize>> = order.chunks(opts.batch_size.max(1)).map(<[_]>::to_vec).collect();
    let batches: Vec<Vec<usize>> = batches
        .into_iter()
        .flat_map(|b| {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for i in b {
                groups.entry(examples[i].scene_ids.len()).or_default().push(i);
            }
            groups.into_values().collect::<Vec<_>>()
        })
        .collect();
    let results = par_map(&batches, opts.workers, |b| {
        let inputs = b
            .iter()
            .map(|&i| data.encoder_input(&examples[i], model.config()))
            .collect::<Result<Vec<_>>>()?;
        let task = examples[b[0]].task.as_str();
        let out = generate(model, &inputs, Some(task), cfg)?;
        Ok(b.iter().copied().zip(out).collect::<Vec<_>>())
    })?;
    let mut texts = vec![String::new(); examples.len()];
    for (i, toks) in results.into_iter().flatten() {
        texts[i] = data.vocab.decode(&toks);
    }
    Ok(texts)
}

fn limited<'e>(examples: &'e [TaskExample], limit: Option<usize>) -> &'e [TaskExample] {
    &examples[..limit.unwrap_or(usize::MAX).min(examples.len())]
}

fn row(task: TaskTag, metric: &str, subset: Subset, values: &[f64], fp: &str) -> EvalRow {
    let value = if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    };
    EvalRow {
        task: task.as_str().to_string(),
        metric: metric.to_string(),
        value,
        subset,
        count: values.len(),
        fingerprint: fp.to_string(),
    }
}

/// Evaluate `tag` on `split`. VQA reports all/in-domain/out-of-domain rows,
/// grounding reports IoU > 0.5 accuracy, captioning and translation report
/// BLEU, VCR reports choice accuracy, and the rest report exact match.
pub fn evaluate(
    model: &Model<f32>,
    data: &Corpora,
    tag: TaskTag,
    split: &str,
    mode: Objective,
    opts: &EvalOptions,
) -> Result<Vec<EvalRow>> {
    data.check_model(model.config())?;
    let all = data.examples(tag, split)?;
    let fp = fingerprint(model, tag, split, mode, opts);
    let max_len = model.config().max_target_len - 1;
    let gen = DecodeConfig {
        strategy: opts.strategy,
        ..DecodeConfig::greedy(max_len)
    };
    match tag {
        TaskTag::Vqa => {
            let examples = limited(all, opts.limit);
            let predictions = match mode {
                Objective::Generative => generate_texts(model, data, examples, &gen, opts)?,
                Objective::Discriminative => discriminative_answers(model, data, examples, opts)?,
            };
            vqa_rows(tag, examples, &predictions, &fp)
        }
        TaskTag::Ground | TaskTag::Refexp => {
            let examples = limited(all, opts.limit);
            let mut rows = Vec::new();
            let constrained = match mode {
                Objective::Generative => {
                    let cfg = DecodeConfig {
                        strategy: opts.strategy,
                        ..DecodeConfig::grounding(model, data.manifest.regions)
                    };
                    let texts = generate_texts(model, data, examples, &cfg, opts)?;
                    if opts.unconstrained_grounding {
                        let free = generate_texts(model, data, examples, &gen, opts)?;
                        rows.push(row(tag, "accuracy_unconstrained", Subset::All, &grounding_hits(data, examples, &free)?, &fp));
                    }
                    texts
                }
                Objective::Discriminative => discriminative_regions(model, data, examples, opts)?,
            };
            rows.insert(0, row(tag, "accuracy", Subset::All, &grounding_hits(data, examples, &constrained)?, &fp));
            Ok(rows)
        }
        TaskTag::VcrQa | TaskTag::VcrQar => {
            let mut groups: BTreeMap<usize, Vec<&TaskExample>> = BTreeMap::new();
            for ex in all {
                let q = ex
                    .aux
                    .question_id
                    .ok_or_else(|| Error::Data("multiple-choice example without question id".into()))?;
                groups.entry(q).or_default().push(ex);
            }
            let groups: Vec<Vec<&TaskExample>> = groups.into_values().take(opts.limit.unwrap_or(usize::MAX)).collect();
            let hits = par_map(&groups, opts.workers, |choices| {
                let gold = choices[0]
                    .aux
                    .gold_choice
                    .ok_or_else(|| Error::Data("multiple-choice example without gold choice".into()))?;
                let (best, _) = rank_true_false(model, data, choices)?;
                let picked = choices[best].aux.choice.unwrap_or(best);
                Ok(if picked == gold { 1.0 } else { 0.0 })
            })?;
            Ok(vec![row(tag, "accuracy", Subset::All, &hits, &fp)])
        }
        TaskTag::Caption | TaskTag::CaptionTags | TaskTag::Translate => {
            let examples = limited(all, opts.limit);
            let texts = generate_texts(model, data, examples, &gen, opts)?;
            let scores: Vec<f64> = examples
                .iter()
                .zip(&texts)
                .map(|(ex, t)| {
                    let refs = ex.aux.references.clone().unwrap_or_else(|| vec![ex.target.clone()]);
                    bleu_text(t, &refs)
                })
                .collect();
            Ok(vec![row(tag, "bleu", Subset::All, &scores, &fp)])
        }
        _ => {
            if mode == Objective::Discriminative {
                return Err(Error::Config(format!("task `{tag}` has no discriminative baseline")));
            }
            let examples = limited(all, opts.limit);
            let texts = generate_texts(model, data, examples, &gen, opts)?;
            let hits: Vec<f64> = examples
                .iter()
                .zip(&texts)
                .map(|(ex, t)| if normalize_text(t) == normalize_text(&ex.target) { 1.0 } else { 0.0 })
                .collect();
            Ok(vec![row(tag, "accuracy", Subset::All, &hits, &fp)])
        }
    }
}

fn vqa_rows(tag: TaskTag, examples: &[TaskExample], predictions: &[String], fp: &str) -> Result<Vec<EvalRow>> {
    let mut by: BTreeMap<Subset, Vec<f64>> = BTreeMap::new();
    for (ex, p) in examples.iter().zip(predictions) {
        let s = vqa_score(p, &human_answers(ex));
        let subset = match ex.aux.domain.as_deref() {
            Some("in") => Subset::InDomain,
            Some("out") => Subset::OutOfDomain,
            other => return Err(Error::Data(format!("vqa example has subset tag {other:?}, expected in or out"))),
        };
        by.entry(Subset::All).or_default().push(s);
        by.entry(subset).or_default().push(s);
    }
    Ok([Subset::All, Subset::InDomain, Subset::OutOfDomain]
        .into_iter()
        .map(|s| row(tag, "vqa_score", s, by.get(&s).map(Vec::as_slice).unwrap_or(&[]), fp))
        .collect())
}

fn discriminative_answers(model: &Model<f32>, data: &Corpora, examples: &[TaskExample], opts: &EvalOptions) -> Result<Vec<String>> {
    let batches = homogeneous_batches(examples, opts.batch_size);
    let mut out = Vec::new();
    for b in par_map(&batches, opts.workers, |batch| {
        let inputs = batch
            .iter()
            .map(|ex| data.encoder_input(ex, model.config()))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::inference();
        let enc = model.net.encode(&mut g, &model.params, &inputs)?;
        let logits = model.net.vqa_logits(&mut g, &model.params, &enc)?;
        let t = g.value(logits);
        Ok((0..batch.len())
            .map(|i| {
                let r: Vec<f64> = t.row(i).iter().map(|&v| v as f64).collect();
                data.answers.candidates[argmax(&r)].clone()
            })
            .collect::<Vec<_>>())
    })? {
        out.extend(b);
    }
    // homogeneous_batches preserves order within one image count, and vqa
    // examples all carry one image.
    Ok(out)
}

fn discriminative_regions(model: &Model<f32>, data: &Corpora, examples: &[TaskExample], opts: &EvalOptions) -> Result<Vec<String>> {
    let batches = homogeneous_batches(examples, opts.batch_size);
    let mut out = Vec::new();
    for b in par_map(&batches, opts.workers, |batch| {
        let inputs = batch
            .iter()
            .map(|ex| data.encoder_input(ex, model.config()))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::inference();
        let enc = model.net.encode(&mut g, &model.params, &inputs)?;
        let logits = model.net.region_logits(&mut g, &model.params, &enc)?;
        let t = g.value(logits);
        Ok((0..batch.len())
            .map(|i| {
                let r: Vec<f64> = t.row(i).iter().map(|&v| v as f64).collect();
                format!("<vis_{}>", argmax(&r) + 1)
            })
            .collect::<Vec<_>>())
    })? {
        out.extend(b);
    }
    Ok(out)
}

/// 1 when the predicted region overlaps the gold box with IoU > 0.5 or is
/// in the accepted ambiguity set; 0 otherwise, including non-sentinel output.
pub fn grounding_hits(data: &Corpora, examples: &[TaskExample], predictions: &[String]) -> Result<Vec<f64>> {
    examples
        .iter()
        .zip(predictions)
        .map(|(ex, p)| {
            let toks = pretokenize(p);
            let k = match toks.as_slice() {
                [one] => crate::tokenizer::parse_visual_sentinel(one),
                _ => None,
            };
            let Some(k) = k else { return Ok(0.0) };
            let scene = data
                .scenes
                .get(&ex.scene_ids[0])
                .ok_or_else(|| Error::Data(format!("unknown scene {}", ex.scene_ids[0])))?;
            let Some(region) = scene.regions.get(k.wrapping_sub(1)) else {
                return Ok(0.0);
            };
            let gold = ex
                .aux
                .gold_box
                .ok_or_else(|| Error::Data("grounding example without gold box".into()))?;
            let ambiguous = data.manifest.accept_ambiguous && ex.aux.ambiguity.as_ref().is_some_and(|a| a.contains(&k));
            Ok(if iou(region.bbox, gold) > 0.5 || ambiguous { 1.0 } else { 0.0 })
        })
        .collect()
}

pub fn write_report(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<EvalRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}
