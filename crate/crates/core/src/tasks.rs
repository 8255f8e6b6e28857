//! Task serialization and pretraining corruptions.
//!
//! Every task is a pair of texts: a prefixed input and a target. The prefix
//! registry maps each tag to its literal prefix.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MaskingVariant;
use crate::tokenizer::{text_sentinel, visual_sentinel, MASK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Mlm,
    Vqa,
    Gqa,
    Itm,
    Ground,
    Gcap,
    Nlvr,
    VcrQa,
    VcrQar,
    Refexp,
    Caption,
    CaptionTags,
    Translate,
}

impl TaskTag {
    pub const ALL: [TaskTag; 13] = [
        TaskTag::Mlm,
        TaskTag::Vqa,
        TaskTag::Gqa,
        TaskTag::Itm,
        TaskTag::Ground,
        TaskTag::Gcap,
        TaskTag::Nlvr,
        TaskTag::VcrQa,
        TaskTag::VcrQar,
        TaskTag::Refexp,
        TaskTag::Caption,
        TaskTag::CaptionTags,
        TaskTag::Translate,
    ];

    /// The five pretraining tasks.
    pub const PRETRAIN: [TaskTag; 5] = [TaskTag::Mlm, TaskTag::Vqa, TaskTag::Itm, TaskTag::Ground, TaskTag::Gcap];

    /// The seven downstream tasks used for multi-task finetuning.
    pub const DOWNSTREAM: [TaskTag; 7] = [
        TaskTag::Vqa,
        TaskTag::Gqa,
        TaskTag::Nlvr,
        TaskTag::VcrQa,
        TaskTag::Refexp,
        TaskTag::Caption,
        TaskTag::Translate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::Mlm => "mlm",
            TaskTag::Vqa => "vqa",
            TaskTag::Gqa => "gqa",
            TaskTag::Itm => "itm",
            TaskTag::Ground => "ground",
            TaskTag::Gcap => "gcap",
            TaskTag::Nlvr => "nlvr",
            TaskTag::VcrQa => "vcr_qa",
            TaskTag::VcrQar => "vcr_qar",
            TaskTag::Refexp => "refexp",
            TaskTag::Caption => "caption",
            TaskTag::CaptionTags => "caption_tags",
            TaskTag::Translate => "translate",
        }
    }

    /// Number of images the task reads.
    pub fn images(self) -> usize {
        if self == TaskTag::Nlvr {
            2
        } else {
            1
        }
    }

    /// Raw fields [`format`] needs for this tag.
    pub fn fields(self) -> &'static [&'static str] {
        match self {
            TaskTag::Mlm => &["input", "target"],
            TaskTag::Vqa | TaskTag::Gqa => &["question", "answer"],
            TaskTag::Itm => &["caption", "label"],
            TaskTag::Ground | TaskTag::Refexp => &["phrase", "region"],
            TaskTag::Gcap => &["region", "phrase"],
            TaskTag::Nlvr => &["text", "label"],
            TaskTag::VcrQa => &["question", "answer", "label"],
            TaskTag::VcrQar => &["question", "answer", "rationale", "label"],
            TaskTag::Caption => &["caption"],
            TaskTag::CaptionTags => &["tags", "caption"],
            TaskTag::Translate => &["source", "target"],
        }
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

/// Maps task tags to their prefixes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixRegistry {
    pub masking: MaskingVariant,
    /// Use `vqa:` for both VQA and GQA questions.
    pub merged_vqa: bool,
}

impl Default for PrefixRegistry {
    fn default() -> Self {
        PrefixRegistry {
            masking: MaskingVariant::SpanSentinel,
            merged_vqa: false,
        }
    }
}

impl PrefixRegistry {
    pub fn prefix(&self, tag: TaskTag) -> &'static str {
        match tag {
            TaskTag::Mlm => match self.masking {
                MaskingVariant::SpanSentinel => "span prediction:",
                MaskingVariant::TokenMask => "denoise:",
            },
            TaskTag::Vqa => "vqa:",
            TaskTag::Gqa if self.merged_vqa => "vqa:",
            TaskTag::Gqa => "gqa:",
            TaskTag::Itm => "image text match:",
            TaskTag::Ground | TaskTag::Refexp => "visual grounding:",
            TaskTag::Gcap => "caption region:",
            TaskTag::Nlvr => "nlvr:",
            TaskTag::VcrQa => "vcr qa:",
            TaskTag::VcrQar => "vcr qar:",
            TaskTag::Caption => "caption:",
            TaskTag::CaptionTags => "caption with tags:",
            TaskTag::Translate => "translate English to German:",
        }
    }

    /// Serialize raw fields into an `(input, target)` example.
    pub fn format(&self, tag: TaskTag, raw: &RawFields) -> Result<TaskExample> {
        let get = |field: &str| -> Result<&str> {
            raw.get(field).map(String::as_str).ok_or_else(|| Error::MissingField {
                tag: tag.to_string(),
                field: field.to_string(),
            })
        };
        let region = |field: &str| -> Result<String> {
            let v = get(field)?;
            let k: usize = v.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("region `{v}` is not a positive integer"))
            })?;
            if k == 0 {
                return Err(Error::InvalidArgument("regions are numbered from 1".into()));
            }
            Ok(visual_sentinel(k))
        };
        let (body, target) = match tag {
            TaskTag::Mlm => (get("input")?.to_string(), get("target")?.to_string()),
            TaskTag::Vqa | TaskTag::Gqa => (get("question")?.to_string(), get("answer")?.to_string()),
            TaskTag::Itm => (get("caption")?.to_string(), get("label")?.to_string()),
            TaskTag::Ground | TaskTag::Refexp => (get("phrase")?.to_string(), region("region")?),
            TaskTag::Gcap => (region("region")?, get("phrase")?.to_string()),
            TaskTag::Nlvr => (get("text")?.to_string(), get("label")?.to_string()),
            TaskTag::VcrQa => (
                format!("question {} answer: {}", get("question")?, get("answer")?),
                get("label")?.to_string(),
            ),
            TaskTag::VcrQar => (
                format!(
                    "question {} answer: {} rationale: {}",
                    get("question")?,
                    get("answer")?,
                    get("rationale")?
                ),
                get("label")?.to_string(),
            ),
            TaskTag::Caption => (String::new(), get("caption")?.to_string()),
            TaskTag::CaptionTags => (get("tags")?.to_string(), get("caption")?.to_string()),
            TaskTag::Translate => (get("source")?.to_string(), get("target")?.to_string()),
        };
        if target.trim().is_empty() {
            return Err(Error::InvalidArgument(format!("task `{tag}` has an empty target")));
        }
        let prefix = self.prefix(tag);
        let input = if body.is_empty() {
            prefix.to_string()
        } else {
            format!("{prefix} {body}")
        };
        Ok(TaskExample {
            task: tag,
            input,
            target,
            scene_ids: Vec::new(),
            aux: Aux::default(),
        })
    }
}

/// Raw per-task fields keyed by field name.
pub type RawFields = BTreeMap<String, String>;

/// Build [`RawFields`] from pairs.
pub fn raw<const N: usize>(pairs: [(&str, &str); N]) -> RawFields {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Auxiliary labels; absent fields are omitted from the corpus file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aux {
    /// Human answers for soft VQA scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
    /// `in` or `out` relative to the classifier's candidate set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_region: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_box: Option<[f32; 4]>,
    /// Regions sharing the gold description.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ambiguity: Option<Vec<usize>>,
    /// Groups the expanded choices of one multiple-choice question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_choice: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub task: TaskTag,
    pub input: String,
    pub target: String,
    pub scene_ids: Vec<u64>,
    pub aux: Aux,
}

impl TaskExample {
    pub fn with_scenes(mut self, ids: &[u64]) -> Self {
        self.scene_ids = ids.to_vec();
        self
    }
}

/// Write a corpus as JSON Lines.
pub fn write_corpus(path: &Path, examples: &[TaskExample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a JSON Lines corpus, reporting the line of the first bad record.
pub fn read_corpus(path: &Path) -> Result<Vec<TaskExample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TaskExample = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

/// Result of a pretraining corruption over whitespace tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingOutcome {
    pub input: Vec<String>,
    /// Target tokens; the end-of-sequence token is appended when ids are
    /// built.
    pub target: Vec<String>,
    /// Masked positions in the original sequence, ascending.
    pub masked: Vec<usize>,
}

/// Replace the given `(start, len)` spans with sentinels. Spans must be
/// sorted, nonempty, disjoint and within bounds.
pub fn span_mask_at(tokens: &[String], spans: &[(usize, usize)]) -> Result<MaskingOutcome> {
    let mut input = Vec::new();
    let mut target = Vec::new();
    let mut masked = Vec::new();
    let mut pos = 0;
    for (k, &(start, len)) in spans.iter().enumerate() {
        if len == 0 || start < pos || start + len > tokens.len() {
            return Err(Error::InvalidArgument(format!("bad span ({start}, {len})")));
        }
        input.extend_from_slice(&tokens[pos..start]);
        let s = text_sentinel(k + 1);
        input.push(s.clone());
        target.push(s);
        target.extend_from_slice(&tokens[start..start + len]);
        masked.extend(start..start + len);
        pos = start + len;
    }
    input.extend_from_slice(&tokens[pos..]);
    Ok(MaskingOutcome { input, target, masked })
}

/// Number of tokens span masking removes: `max(1, round(rate·len))`.
pub fn span_budget(len: usize, rate: f64) -> usize {
    ((rate * len as f64).round() as usize).max(1).min(len)
}

/// Mask contiguous spans covering `max(1, round(rate·len))` tokens. Span
/// lengths are geometric with mean 2, clipped to the remaining budget;
/// spans are separated by at least one kept token when the budget allows.
pub fn span_mask(tokens: &[String], rate: f64, rng: &mut impl Rng) -> Result<MaskingOutcome> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("span masking needs at least one token".into()));
    }
    let n = tokens.len();
    let budget = span_budget(n, rate);
    let mut lens = Vec::new();
    let mut left = budget;
    while left > 0 {
        let mut l = 1;
        while rng.gen_bool(0.5) {
            l += 1;
        }
        let l = l.min(left);
        lens.push(l);
        left -= l;
    }
    let kept = n - budget;
    // s spans need s - 1 separating tokens.
    while lens.len() > kept + 1 {
        let last = lens.pop().expect("nonempty");
        *lens.last_mut().expect("nonempty") += last;
    }
    let s = lens.len();
    let mut gaps = vec![0usize; s + 1];
    for g in gaps.iter_mut().take(s).skip(1) {
        *g = 1;
    }
    for _ in 0..kept - (s - 1) {
        gaps[rng.gen_range(0..=s)] += 1;
    }
    let mut spans = Vec::with_capacity(s);
    let mut pos = 0;
    for (i, &l) in lens.iter().enumerate() {
        pos += gaps[i];
        spans.push((pos, l));
        pos += l;
    }
    span_mask_at(tokens, &spans)
}

/// Replace `round(rate·len)` tokens with `<mask>`; the target is the whole
/// original sequence.
pub fn token_mask(tokens: &[String], rate: f64, rng: &mut impl Rng) -> MaskingOutcome {
    let n = tokens.len();
    let k = ((rate * n as f64).round() as usize).min(n);
    let mut masked: Vec<usize> = rand::seq::index::sample(rng, n, k).into_vec();
    masked.sort_unstable();
    let mut input = tokens.to_vec();
    for &i in &masked {
        input[i] = MASK.to_string();
    }
    MaskingOutcome {
        input,
        target: tokens.to_vec(),
        masked,
    }
}

/// A corrupted masked-LM example from a caption.
pub fn mlm_example(
    registry: &PrefixRegistry,
    caption: &str,
    rng: &mut impl Rng,
) -> Result<TaskExample> {
    let tokens: Vec<String> = caption.split_whitespace().map(str::to_string).collect();
    let out = match registry.masking {
        MaskingVariant::SpanSentinel => span_mask(&tokens, 0.15, rng)?,
        MaskingVariant::TokenMask => token_mask(&tokens, 0.30, rng),
    };
    registry.format(
        TaskTag::Mlm,
        &raw([("input", &out.input.join(" ")), ("target", &out.target.join(" "))]),
    )
}

/// Image-text matching: the scene's own caption with probability 0.5,
/// otherwise a caption drawn uniformly from the other scenes in `pool`.
pub fn itm_sample(
    scene_id: u64,
    caption: &str,
    pool: &[(u64, String)],
    rng: &mut impl Rng,
) -> Result<TaskExample> {
    let positive = rng.gen_bool(0.5);
    itm_sample_with(scene_id, caption, pool, positive, rng)
}

/// [`itm_sample`] with the positive/negative draw fixed.
pub fn itm_sample_with(
    scene_id: u64,
    caption: &str,
    pool: &[(u64, String)],
    positive: bool,
    rng: &mut impl Rng,
) -> Result<TaskExample> {
    let others: Vec<&(u64, String)> = pool.iter().filter(|(id, _)| *id != scene_id).collect();
    if others.is_empty() {
        return Err(Error::InvalidArgument(
            "image-text matching needs captions from at least two scenes".into(),
        ));
    }
    let (text, label) = if positive {
        (caption.to_string(), "true")
    } else {
        (others.choose(rng).expect("nonempty").1.clone(), "false")
    };
    Ok(PrefixRegistry::default()
        .format(TaskTag::Itm, &raw([("caption", &text), ("label", label)]))?
        .with_scenes(&[scene_id]))
}

/// Detector output for one region, as seen by the task builders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionLabel {
    pub object: String,
    pub attribute: String,
    pub bbox: [f32; 4],
}

impl RegionLabel {
    pub fn phrase(&self) -> String {
        format!("{} {}", self.attribute, self.object)
    }
}

fn ambiguity(labels: &[RegionLabel], k: usize) -> Vec<usize> {
    let phrase = labels[k - 1].phrase();
    (1..=labels.len()).filter(|&j| labels[j - 1].phrase() == phrase).collect()
}

/// Visual grounding of region `k` (1-based) by its description.
pub fn grounding_at(tag: TaskTag, scene_id: u64, labels: &[RegionLabel], k: usize) -> Result<TaskExample> {
    if k == 0 || k > labels.len() {
        return Err(Error::InvalidArgument(format!("region {k} outside 1..={}", labels.len())));
    }
    let region = labels[k - 1].clone();
    let mut ex = PrefixRegistry::default()
        .format(tag, &raw([("phrase", &region.phrase()), ("region", &k.to_string())]))?
        .with_scenes(&[scene_id]);
    ex.aux.gold_region = Some(k);
    ex.aux.gold_box = Some(region.bbox);
    ex.aux.ambiguity = Some(ambiguity(labels, k));
    Ok(ex)
}

/// Grounding of a uniformly sampled region.
pub fn grounding_pair(scene_id: u64, labels: &[RegionLabel], rng: &mut impl Rng) -> Result<TaskExample> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("scene has no regions".into()));
    }
    grounding_at(TaskTag::Ground, scene_id, labels, rng.gen_range(1..=labels.len()))
}

/// Grounded captioning of region `k` (1-based).
pub fn grounded_caption_at(scene_id: u64, labels: &[RegionLabel], k: usize) -> Result<TaskExample> {
    if k == 0 || k > labels.len() {
        return Err(Error::InvalidArgument(format!("region {k} outside 1..={}", labels.len())));
    }
    let mut ex = PrefixRegistry::default()
        .format(TaskTag::Gcap, &raw([("region", &k.to_string()), ("phrase", &labels[k - 1].phrase())]))?
        .with_scenes(&[scene_id]);
    ex.aux.gold_region = Some(k);
    Ok(ex)
}

/// Grounded captioning of a uniformly sampled region.
pub fn grounded_caption_pair(scene_id: u64, labels: &[RegionLabel], rng: &mut impl Rng) -> Result<TaskExample> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("scene has no regions".into()));
    }
    grounded_caption_at(scene_id, labels, rng.gen_range(1..=labels.len()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VcrMode {
    /// Choices are answers.
    Qa,
    /// Choices are rationales for the given answer.
    Qar { answer: String },
}

/// One true/false example per choice.
pub fn vcr_expand(question: &str, choices: &[String], gold: usize, mode: &VcrMode) -> Result<Vec<TaskExample>> {
    if gold >= choices.len() {
        return Err(Error::InvalidArgument(format!(
            "gold choice {gold} outside 0..{}",
            choices.len()
        )));
    }
    let reg = PrefixRegistry::default();
    choices
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let label = if i == gold { "true" } else { "false" };
            let mut ex = match mode {
                VcrMode::Qa => reg.format(
                    TaskTag::VcrQa,
                    &raw([("question", question), ("answer", c), ("label", label)]),
                )?,
                VcrMode::Qar { answer } => reg.format(
                    TaskTag::VcrQar,
                    &raw([("question", question), ("answer", answer), ("rationale", c), ("label", label)]),
                )?,
            };
            ex.aux.choice = Some(i);
            ex.aux.gold_choice = Some(gold);
            Ok(ex)
        })
        .collect()
}
