//! Deterministic synthetic scenes and their task corpora.
//!
//! A scene is a set of regions, each with a latent object and attribute.
//! Region features are the sum of a per-object and a per-attribute prototype
//! plus Gaussian noise. Every downstream task is templated from the latents
//! (or from simulated detector tags).

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MaskingVariant, RegionInput};
use crate::tasks::{
    grounded_caption_at, grounding_at, itm_sample, mlm_example, raw, vcr_expand, PrefixRegistry, RegionLabel,
    TaskExample, TaskTag, VcrMode,
};
use crate::tokenizer::Vocab;

pub const DEFAULT_OBJECTS: [&str; 24] = [
    "cube", "ball", "cup", "shirt", "dog", "cat", "car", "tree", "fire hydrant", "table", "chair", "lamp",
    "book", "bottle", "bird", "horse", "boat", "clock", "phone", "kite", "umbrella", "traffic light",
    "bench", "bag",
];

/// Ordered from most to least frequent.
pub const DEFAULT_ATTRIBUTES: [&str; 12] = [
    "red", "blue", "green", "white", "black", "yellow", "brown", "gray", "orange", "pink", "purple", "silver",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Probability of replacing each tag with a different one.
    pub flip_prob: f64,
    /// Maximum absolute box-coordinate perturbation.
    pub box_jitter: f64,
}

impl Default for Splits {
    fn default() -> Self {
        Splits {
            train: 1000,
            val: 100,
            test: 200,
        }
    }
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            flip_prob: 0.0,
            box_jitter: 0.0,
        }
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub objects: Vec<String>,
    pub attributes: Vec<String>,
    /// Attribute sampling weight of rank `r` is `1 / (r + 1)^zipf`.
    pub zipf: f64,
    pub regions: usize,
    pub d_roi: usize,
    pub roi_noise: f64,
    /// Regions in one scene carry distinct objects.
    pub distinct_objects: bool,
    /// Scenes per split.
    pub splits: Splits,
    /// Examples (or questions) per scene for each task.
    pub per_scene: usize,
    pub tasks: Vec<TaskTag>,
    /// Size of the classifier's answer candidate set.
    pub answer_topk: usize,
    pub detector: DetectorConfig,
    pub masking: MaskingVariant,
    /// Evaluation accepts any region sharing the gold description.
    pub accept_ambiguous: bool,
    pub vocab_size: usize,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            seed: 1234,
            objects: DEFAULT_OBJECTS.iter().map(|s| s.to_string()).collect(),
            attributes: DEFAULT_ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
            zipf: 1.0,
            regions: 8,
            d_roi: 16,
            roi_noise: 0.1,
            distinct_objects: true,
            splits: Splits::default(),
            per_scene: 5,
            tasks: TaskTag::ALL.to_vec(),
            answer_topk: 9,
            detector: DetectorConfig::default(),
            masking: MaskingVariant::SpanSentinel,
            accept_ambiguous: true,
            vocab_size: 512,
        }
    }
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("manifest field `{field}`: {msg}")));
        if self.objects.is_empty() {
            return bad("objects", "must not be empty".into());
        }
        if self.attributes.is_empty() {
            return bad("attributes", "must not be empty".into());
        }
        for (field, list) in [("objects", &self.objects), ("attributes", &self.attributes)] {
            let set: BTreeSet<&String> = list.iter().collect();
            if set.len() != list.len() {
                return bad(field, "contains duplicates".into());
            }
        }
        if self.regions == 0 {
            return bad("regions", "must be positive".into());
        }
        if self.distinct_objects && self.regions > self.objects.len() {
            return bad(
                "regions",
                format!(
                    "{} regions with distinct objects need at least that many objects, have {}",
                    self.regions,
                    self.objects.len()
                ),
            );
        }
        if self.d_roi == 0 {
            return bad("d_roi", "must be positive".into());
        }
        if !(self.roi_noise >= 0.0 && self.roi_noise.is_finite()) {
            return bad("roi_noise", "must be a finite nonnegative number".into());
        }
        if self.answer_topk == 0 {
            return bad("answer_topk", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.detector.flip_prob) {
            return bad("detector.flip_prob", "must lie in [0, 1]".into());
        }
        if !(self.detector.box_jitter >= 0.0 && self.detector.box_jitter.is_finite()) {
            return bad("detector.box_jitter", "must be a finite nonnegative number".into());
        }
        if self.per_scene == 0 {
            return bad("per_scene", "must be positive".into());
        }
        if self.splits.train < 2 || self.splits.val < 2 || self.splits.test < 2 {
            return bad("splits", "every split needs at least two scenes".into());
        }
        Ok(())
    }

    /// Parse a manifest, reporting line and column of syntax errors.
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("manifest line {} column {}: {e}", e.line(), e.column()))
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent RNG stream for `(seed, stream, index)`.
pub fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(stream)) ^ index))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub region_id: usize,
    pub object: String,
    pub attribute: String,
    pub bbox: [f32; 4],
    pub roi: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub regions: Vec<Region>,
    pub captions: Vec<String>,
}

impl SceneRecord {
    /// Clean latent labels.
    pub fn labels(&self) -> Vec<RegionLabel> {
        self.regions
            .iter()
            .map(|r| RegionLabel {
                object: r.object.clone(),
                attribute: r.attribute.clone(),
                bbox: r.bbox,
            })
            .collect()
    }

    /// Model inputs for the regions, tagged with `image_id`.
    pub fn region_inputs(&self, image_id: usize) -> Vec<RegionInput> {
        self.regions
            .iter()
            .map(|r| RegionInput {
                roi: r.roi.clone(),
                bbox: r.bbox,
                image_id,
                region_id: r.region_id,
            })
            .collect()
    }

    pub fn has(&self, attribute: &str, object: &str) -> bool {
        self.regions.iter().any(|r| r.attribute == attribute && r.object == object)
    }
}

/// Intersection over union; a zero-area union gives 0.
pub fn iou(a: [f32; 4], b: [f32; 4]) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.map(f64::from);
    let [bx1, by1, bx2, by2] = b.map(f64::from);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// The sampled world: vocabularies, attribute weights and RoI prototypes.
#[derive(Clone, Debug)]
pub struct World {
    pub manifest: Manifest,
    object_protos: Vec<Vec<f64>>,
    attribute_protos: Vec<Vec<f64>>,
    attribute_weights: WeightedIndex<f64>,
}

const STREAM_WORLD: u64 = 1;
const STREAM_SCENES: u64 = 2;
const STREAM_TASKS: u64 = 3;
const STREAM_DETECTOR: u64 = 4;

impl World {
    pub fn new(manifest: &Manifest) -> Result<Self> {
        manifest.validate()?;
        let mut rng = derived_rng(manifest.seed, STREAM_WORLD, 0);
        let std = 1.0 / (manifest.d_roi as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut proto = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..manifest.d_roi).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        };
        let object_protos = proto(manifest.objects.len());
        let attribute_protos = proto(manifest.attributes.len());
        let weights: Vec<f64> = (0..manifest.attributes.len())
            .map(|r| 1.0 / ((r + 1) as f64).powf(manifest.zipf))
            .collect();
        Ok(World {
            manifest: manifest.clone(),
            object_protos,
            attribute_protos,
            attribute_weights: WeightedIndex::new(weights).map_err(|e| Error::Config(e.to_string()))?,
        })
    }

    fn split_offset(&self, split: &str) -> Result<(u64, usize)> {
        let s = &self.manifest.splits;
        match split {
            "train" => Ok((0, s.train)),
            "val" => Ok((s.train as u64, s.val)),
            "test" => Ok(((s.train + s.val) as u64, s.test)),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }

    /// Scene with the given id; a pure function of the manifest and id.
    pub fn gen_scene(&self, scene_id: u64) -> Result<SceneRecord> {
        let m = &self.manifest;
        let mut rng = derived_rng(m.seed, STREAM_SCENES, scene_id);
        let objects: Vec<usize> = if m.distinct_objects {
            rand::seq::index::sample(&mut rng, m.objects.len(), m.regions).into_vec()
        } else {
            (0..m.regions).map(|_| rng.gen_range(0..m.objects.len())).collect()
        };
        let noise = Normal::new(0.0, m.roi_noise).map_err(|e| Error::Config(e.to_string()))?;
        let mut regions: Vec<Region> = objects
            .into_iter()
            .map(|o| {
                let a = self.attribute_weights.sample(&mut rng);
                let w: f32 = rng.gen_range(0.1..0.6);
                let h: f32 = rng.gen_range(0.1..0.6);
                let x1: f32 = rng.gen_range(0.0..1.0 - w);
                let y1: f32 = rng.gen_range(0.0..1.0 - h);
                let roi = (0..m.d_roi)
                    .map(|j| {
                        let n = if m.roi_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        (self.object_protos[o][j] + self.attribute_protos[a][j] + n) as f32
                    })
                    .collect();
                Region {
                    region_id: 0,
                    object: m.objects[o].clone(),
                    attribute: m.attributes[a].clone(),
                    bbox: [x1, y1, x1 + w, y1 + h],
                    roi,
                }
            })
            .collect();
        // Largest regions first, so captions describe regions 1 and 2.
        let area = |r: &Region| (r.bbox[2] - r.bbox[0]) * (r.bbox[3] - r.bbox[1]);
        regions.sort_by(|a, b| area(b).total_cmp(&area(a)));
        for (i, r) in regions.iter_mut().enumerate() {
            r.region_id = i + 1;
        }
        let captions = vec![caption_of(&regions)];
        Ok(SceneRecord {
            scene_id,
            regions,
            captions,
        })
    }

    pub fn gen_split(&self, split: &str) -> Result<Vec<SceneRecord>> {
        let (start, count) = self.split_offset(split)?;
        (start..start + count as u64).map(|id| self.gen_scene(id)).collect()
    }

    /// Simulated detector tags for a scene.
    pub fn detect(&self, scene: &SceneRecord) -> Vec<RegionLabel> {
        let mut rng = derived_rng(self.manifest.seed, STREAM_DETECTOR, scene.scene_id);
        detector_sim(scene, &self.manifest, &mut rng)
    }
}

fn caption_of(regions: &[Region]) -> String {
    match regions {
        [] => "nothing".to_string(),
        [a] => format!("a {} {}", a.attribute, a.object),
        [a, b, ..] => format!("a {} {} and a {} {}", a.attribute, a.object, b.attribute, b.object),
    }
}

/// Detector predictions: labels flipped with `flip_prob` to a different
/// vocabulary entry (when one exists) and boxes jittered then clamped.
pub fn detector_sim(scene: &SceneRecord, manifest: &Manifest, rng: &mut impl Rng) -> Vec<RegionLabel> {
    let cfg = &manifest.detector;
    let flip = |current: &str, vocab: &[String], rng: &mut dyn rand::RngCore| -> String {
        if cfg.flip_prob > 0.0 && vocab.len() > 1 && rng.gen_bool(cfg.flip_prob) {
            let others: Vec<&String> = vocab.iter().filter(|v| *v != current).collect();
            others[rng.gen_range(0..others.len())].clone()
        } else {
            current.to_string()
        }
    };
    scene
        .regions
        .iter()
        .map(|r| {
            let object = flip(&r.object, &manifest.objects, rng);
            let attribute = flip(&r.attribute, &manifest.attributes, rng);
            let mut b = r.bbox;
            if cfg.box_jitter > 0.0 {
                let j = cfg.box_jitter as f32;
                for v in &mut b {
                    *v = (*v + rng.gen_range(-j..=j)).clamp(0.0, 1.0);
                }
                if b[0] > b[2] {
                    b.swap(0, 2);
                }
                if b[1] > b[3] {
                    b.swap(1, 3);
                }
            }
            RegionLabel { object, attribute, bbox: b }
        })
        .collect()
}

/// Top-`k` answers by frequency (ties broken lexicographically) and the rest.
pub fn split_answers(freq: &BTreeMap<String, usize>, k: usize) -> Result<(Vec<String>, Vec<String>)> {
    if k == 0 {
        return Err(Error::InvalidArgument("candidate set size must be positive".into()));
    }
    let mut ranked: Vec<(&String, &usize)> = freq.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    let top = ranked.iter().take(k).map(|(a, _)| (*a).clone()).collect();
    let rest = ranked.iter().skip(k).map(|(a, _)| (*a).clone()).collect();
    Ok((top, rest))
}

/// Seeded letter-substitution cipher standing in for a target language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cipher {
    map: [char; 26],
}

impl Cipher {
    pub fn new(seed: u64) -> Self {
        let mut letters: Vec<char> = ('a'..='z').collect();
        letters.shuffle(&mut derived_rng(seed, 5, 0));
        Cipher {
            map: letters.try_into().expect("26 letters"),
        }
    }

    pub fn from_map(map: [char; 26]) -> Self {
        Cipher { map }
    }

    pub fn apply(&self, text: &str) -> String {
        text.chars()
            .map(|c| {
                if c.is_ascii_lowercase() {
                    self.map[(c as u8 - b'a') as usize]
                } else {
                    c
                }
            })
            .collect()
    }
}

/// Answer candidates and the out-of-domain pool of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerSplit {
    pub candidates: Vec<String>,
    pub out_of_domain: Vec<String>,
}

/// A generated dataset: scenes per split and corpora per task and split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub world: World,
    pub scenes: BTreeMap<String, Vec<SceneRecord>>,
    pub corpora: BTreeMap<(TaskTag, String), Vec<TaskExample>>,
    pub answers: AnswerSplit,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

impl Dataset {
    pub fn generate(manifest: &Manifest) -> Result<Self> {
        let world = World::new(manifest)?;
        let mut scenes = BTreeMap::new();
        for split in SPLITS {
            scenes.insert(split.to_string(), world.gen_split(split)?);
        }
        let mut corpora = BTreeMap::new();
        for &tag in &manifest.tasks {
            for (si, split) in SPLITS.iter().enumerate() {
                let mut rng = derived_rng(manifest.seed, STREAM_TASKS, (tag as u64) * 16 + si as u64);
                let exs = gen_tasks(&world, &scenes[*split], tag, &mut rng)?;
                corpora.insert((tag, split.to_string()), exs);
            }
        }
        let mut freq = BTreeMap::new();
        for split in SPLITS {
            for s in &scenes[split] {
                for r in &s.regions {
                    freq.entry(r.attribute.clone()).or_insert(0);
                }
            }
        }
        if let Some(train) = corpora.get(&(TaskTag::Vqa, "train".to_string())) {
            for ex in train {
                *freq.entry(ex.target.clone()).or_insert(0) += 1;
            }
        }
        let k = manifest.answer_topk.min(freq.len().max(1));
        let (candidates, out_of_domain) = split_answers(&freq, k)?;
        let cand: BTreeSet<&String> = candidates.iter().collect();
        for ((tag, _), exs) in corpora.iter_mut() {
            if matches!(tag, TaskTag::Vqa) {
                for ex in exs {
                    let inside = cand.contains(&ex.target);
                    ex.aux.domain = Some(if inside { "in" } else { "out" }.to_string());
                }
            }
        }
        let answers = AnswerSplit {
            candidates,
            out_of_domain,
        };
        assert!(answers.out_of_domain.iter().all(|a| !answers.candidates.contains(a)));
        Ok(Dataset {
            world,
            scenes,
            corpora,
            answers,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.world.manifest
    }

    pub fn corpus(&self, tag: TaskTag, split: &str) -> Result<&[TaskExample]> {
        self.corpora
            .get(&(tag, split.to_string()))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("no `{tag}` corpus for split `{split}`")))
    }

    /// Scenes of every split by id.
    pub fn scene_index(&self) -> BTreeMap<u64, &SceneRecord> {
        self.scenes.values().flatten().map(|s| (s.scene_id, s)).collect()
    }

    /// Vocabulary over every training input and target plus the world's
    /// labels.
    pub fn build_vocab(&self) -> Result<Vocab> {
        let m = self.manifest();
        let mut lines: Vec<String> = Vec::new();
        lines.extend(m.objects.iter().cloned());
        lines.extend(m.attributes.iter().cloned());
        for ((_, split), exs) in &self.corpora {
            if split == "train" {
                for ex in exs {
                    lines.push(ex.input.clone());
                    lines.push(ex.target.clone());
                }
            }
        }
        Vocab::build(lines, m.vocab_size, m.regions)
    }

    /// Write `manifest.json`, `answers.json`, `vocab.txt`,
    /// `scenes_<split>.jsonl` and `<task>_<split>.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: &str| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("manifest.json", &(self.manifest().to_json() + "\n"))?;
        write(
            "answers.json",
            &(serde_json::to_string_pretty(&self.answers)? + "\n"),
        )?;
        self.build_vocab()?.save(&dir.join("vocab.txt"))?;
        for (split, scenes) in &self.scenes {
            write_scenes(&dir.join(format!("scenes_{split}.jsonl")), scenes)?;
        }
        for ((tag, split), exs) in &self.corpora {
            crate::tasks::write_corpus(&dir.join(format!("{tag}_{split}.jsonl")), exs)?;
        }
        Ok(())
    }
}

pub fn write_scenes(path: &Path, scenes: &[SceneRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scenes(path: &Path) -> Result<Vec<SceneRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn vqa_question(object: &str) -> String {
    format!("what color is the {object}?")
}

/// Templated examples of one task over a set of scenes.
pub fn gen_tasks(world: &World, scenes: &[SceneRecord], tag: TaskTag, rng: &mut impl Rng) -> Result<Vec<TaskExample>> {
    let m = &world.manifest;
    let reg = PrefixRegistry {
        masking: m.masking,
        merged_vqa: false,
    };
    let per = m.per_scene.min(m.regions);
    let pool: Vec<(u64, String)> = scenes.iter().map(|s| (s.scene_id, s.captions[0].clone())).collect();
    let cipher = Cipher::new(m.seed);
    let mut out = Vec::new();
    let mut question_id = 0;
    for scene in scenes {
        let id = scene.scene_id;
        let picks = rand::seq::index::sample(rng, scene.regions.len(), per).into_vec();
        match tag {
            TaskTag::Mlm => {
                for _ in 0..m.per_scene {
                    out.push(mlm_example(&reg, &scene.captions[0], rng)?.with_scenes(&[id]));
                }
            }
            TaskTag::Itm => {
                for _ in 0..m.per_scene {
                    out.push(itm_sample(id, &scene.captions[0], &pool, rng)?);
                }
            }
            TaskTag::Vqa => {
                for &i in &picks {
                    let r = &scene.regions[i];
                    let mut ex = reg
                        .format(tag, &raw([("question", &vqa_question(&r.object)), ("answer", &r.attribute)]))?
                        .with_scenes(&[id]);
                    ex.aux.answers = Some(vec![r.attribute.clone()]);
                    out.push(ex);
                }
            }
            TaskTag::Gqa => {
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for r in &scene.regions {
                    *counts.entry(&r.attribute).or_default() += 1;
                }
                let mut unique: Vec<&Region> = scene.regions.iter().filter(|r| counts[r.attribute.as_str()] == 1).collect();
                unique.shuffle(rng);
                for r in unique.into_iter().take(per) {
                    let q = format!("what is the {} thing?", r.attribute);
                    let mut ex = reg
                        .format(tag, &raw([("question", &q), ("answer", &r.object)]))?
                        .with_scenes(&[id]);
                    ex.aux.answers = Some(vec![r.object.clone()]);
                    out.push(ex);
                }
            }
            TaskTag::Ground | TaskTag::Gcap => {
                let labels = world.detect(scene);
                for &i in &picks {
                    let ex = if tag == TaskTag::Ground {
                        grounding_at(TaskTag::Ground, id, &labels, i + 1)?
                    } else {
                        grounded_caption_at(id, &labels, i + 1)?
                    };
                    out.push(ex);
                }
            }
            TaskTag::Refexp => {
                let labels = scene.labels();
                for &i in &picks {
                    let mut ex = grounding_at(TaskTag::Refexp, id, &labels, i + 1)?;
                    if !m.accept_ambiguous {
                        ex.aux.ambiguity = Some(vec![i + 1]);
                    }
                    out.push(ex);
                }
            }
            TaskTag::Nlvr => {
                for _ in 0..m.per_scene {
                    let other = loop {
                        let j = rng.gen_range(0..scenes.len());
                        if scenes[j].scene_id != id {
                            break &scenes[j];
                        }
                    };
                    let left_side = rng.gen_bool(0.5);
                    let (target_scene, side) = if left_side { (scene, "left") } else { (other, "right") };
                    let (attr, obj) = if rng.gen_bool(0.5) {
                        let r = target_scene.regions.choose(rng).expect("regions");
                        (r.attribute.clone(), r.object.clone())
                    } else {
                        loop {
                            let a = m.attributes.choose(rng).expect("attributes").clone();
                            let o = m.objects.choose(rng).expect("objects").clone();
                            if !target_scene.has(&a, &o) {
                                break (a, o);
                            }
                        }
                    };
                    let truth = target_scene.has(&attr, &obj);
                    let text = format!("the {side} image contains a {attr} {obj}");
                    out.push(
                        reg.format(tag, &raw([("text", &text), ("label", if truth { "true" } else { "false" })]))?
                            .with_scenes(&[id, other.scene_id]),
                    );
                }
            }
            TaskTag::VcrQa | TaskTag::VcrQar => {
                for &i in &picks {
                    let r = &scene.regions[i];
                    let q = vqa_question(&r.object);
                    let gold = rng.gen_range(0..4);
                    let (choices, mode) = if tag == TaskTag::VcrQa {
                        let mut wrong: Vec<&String> = m.attributes.iter().filter(|a| **a != r.attribute).collect();
                        wrong.shuffle(rng);
                        let mut c: Vec<String> = wrong.into_iter().take(3).cloned().collect();
                        c.insert(gold.min(c.len()), r.attribute.clone());
                        (c, VcrMode::Qa)
                    } else {
                        let mut c = Vec::new();
                        while c.len() < 3 {
                            let a = m.attributes.choose(rng).expect("attributes");
                            let o = m.objects.choose(rng).expect("objects");
                            let s = format!("i see a {a} {o}");
                            if !scene.has(a, o) && !c.contains(&s) {
                                c.push(s);
                            }
                        }
                        c.insert(gold.min(c.len()), format!("i see a {} {}", r.attribute, r.object));
                        (c, VcrMode::Qar { answer: r.attribute.clone() })
                    };
                    let gold = choices
                        .iter()
                        .position(|c| c == &r.attribute || c.ends_with(&format!(" {} {}", r.attribute, r.object)))
                        .expect("gold inserted");
                    for mut ex in vcr_expand(&q, &choices, gold, &mode)? {
                        ex.scene_ids = vec![id];
                        ex.aux.question_id = Some(question_id);
                        out.push(ex);
                    }
                    question_id += 1;
                }
            }
            TaskTag::Caption | TaskTag::CaptionTags => {
                let refs = alternate_captions(scene);
                let mut ex = if tag == TaskTag::Caption {
                    reg.format(tag, &raw([("caption", &scene.captions[0])]))?
                } else {
                    let tags: Vec<String> = world.detect(scene).into_iter().map(|l| l.object).collect();
                    reg.format(tag, &raw([("tags", &tags.join(" ")), ("caption", &scene.captions[0])]))?
                };
                ex.scene_ids = vec![id];
                ex.aux.references = Some(refs);
                out.push(ex);
            }
            TaskTag::Translate => {
                let src = &scene.captions[0];
                let mut ex = reg
                    .format(tag, &raw([("source", src), ("target", &cipher.apply(src))]))?
                    .with_scenes(&[id]);
                ex.aux.references = Some(vec![cipher.apply(src)]);
                out.push(ex);
            }
        }
    }
    Ok(out)
}

fn alternate_captions(scene: &SceneRecord) -> Vec<String> {
    let mut refs = vec![scene.captions[0].clone()];
    if let [a, b, ..] = scene.regions.as_slice() {
        refs.push(format!("a {} {} and a {} {}", b.attribute, b.object, a.attribute, a.object));
    }
    refs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Manifest {
        Manifest {
            splits: Splits {
                train: 30,
                val: 5,
                test: 5,
            },
            ..Default::default()
        }
    }

    #[test]
    fn iou_reference_values() {
        let a = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, [2.0, 2.0, 3.0, 3.0]), 0.0);
        assert!((iou(a, [0.5, 0.0, 1.5, 1.0]) - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(iou([0.5, 0.5, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5]), 0.0);
    }

    #[test]
    fn scenes_are_well_formed_and_deterministic() {
        let world = World::new(&small()).unwrap();
        let s = world.gen_scene(3).unwrap();
        assert_eq!(s.regions.len(), 8);
        assert_eq!(s.regions.iter().map(|r| r.region_id).collect::<Vec<_>>(), (1..=8).collect::<Vec<_>>());
        for r in &s.regions {
            let [x1, y1, x2, y2] = r.bbox;
            assert!(0.0 <= x1 && x1 < x2 && x2 <= 1.0 && 0.0 <= y1 && y1 < y2 && y2 <= 1.0);
        }
        let again = World::new(&small()).unwrap().gen_scene(3).unwrap();
        assert_eq!(serde_json::to_string(&s).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn zero_noise_gives_identical_features_for_identical_labels() {
        let m = Manifest {
            roi_noise: 0.0,
            objects: vec!["cube".into()],
            attributes: vec!["red".into()],
            distinct_objects: false,
            ..small()
        };
        let s = World::new(&m).unwrap().gen_scene(0).unwrap();
        assert_eq!(s.regions[0].roi, s.regions[1].roi);
    }

    #[test]
    fn impossible_distinctness_is_rejected() {
        let m = Manifest {
            objects: vec!["cube".into(), "ball".into()],
            ..small()
        };
        assert!(matches!(World::new(&m), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_errors_name_the_location() {
        let err = Manifest::parse("{\n  \"seed\": \"x\"\n}").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let mut m = Manifest::default();
        m.answer_topk = 0;
        let err = Manifest::parse(&m.to_json()).unwrap_err();
        assert!(err.to_string().contains("answer_topk"), "{err}");
    }

    #[test]
    fn detector_flips_and_jitter() {
        let m = small();
        let world = World::new(&m).unwrap();
        let scene = world.gen_scene(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(detector_sim(&scene, &m, &mut rng), scene.labels());
        let single = Manifest {
            objects: vec!["cube".into()],
            attributes: vec!["red".into()],
            distinct_objects: false,
            detector: DetectorConfig {
                flip_prob: 1.0,
                box_jitter: 0.0,
            },
            ..small()
        };
        let s = World::new(&single).unwrap().gen_scene(0).unwrap();
        assert_eq!(detector_sim(&s, &single, &mut rng), s.labels());
        let jitter = Manifest {
            detector: DetectorConfig {
                flip_prob: 0.0,
                box_jitter: 0.05,
            },
            ..small()
        };
        let w = World::new(&jitter).unwrap();
        for id in 0..125 {
            let s = w.gen_scene(id).unwrap();
            for l in detector_sim(&s, &jitter, &mut rng) {
                let [x1, y1, x2, y2] = l.bbox;
                assert!(0.0 <= x1 && x1 <= x2 && x2 <= 1.0 && 0.0 <= y1 && y1 <= y2 && y2 <= 1.0);
            }
        }
    }

    #[test]
    fn answer_split() {
        let freq: BTreeMap<String, usize> = [("blue", 10), ("red", 5), ("mauve", 1)]
            .iter()
            .map(|(a, c)| (a.to_string(), *c))
            .collect();
        let (top, rest) = split_answers(&freq, 2).unwrap();
        assert_eq!(top, vec!["blue", "red"]);
        assert_eq!(rest, vec!["mauve"]);
        assert!(split_answers(&freq, 5).unwrap().1.is_empty());
        assert!(split_answers(&freq, 0).is_err());
        let tied: BTreeMap<String, usize> = [("b", 1), ("a", 1)].iter().map(|(a, c)| (a.to_string(), *c)).collect();
        assert_eq!(split_answers(&tied, 1).unwrap().0, vec!["a"]);
    }

    #[test]
    fn cipher_by_hand() {
        let mut map: [char; 26] = std::array::from_fn(|i| (b'a' + i as u8) as char);
        map[(b'r' - b'a') as usize] = 'q';
        map[(b'q' - b'a') as usize] = 'r';
        let c = Cipher::from_map(map);
        assert_eq!(c.apply("a red cube"), "a qed cube");
        assert_eq!(Cipher::new(5).apply("a red cube"), Cipher::new(5).apply("a red cube"));
    }

    #[test]
    fn templates_follow_latents() {
        let data = Dataset::generate(&small()).unwrap();
        let scenes = data.scene_index();
        for ex in data.corpus(TaskTag::Vqa, "train").unwrap() {
            let s = scenes[&ex.scene_ids[0]];
            let obj = ex.input.trim_start_matches("vqa: what color is the ").trim_end_matches('?');
            assert!(s.has(&ex.target, obj), "{ex:?}");
        }
        for ex in data.corpus(TaskTag::Refexp, "train").unwrap() {
            let s = scenes[&ex.scene_ids[0]];
            let k = ex.aux.gold_region.unwrap();
            assert_eq!(ex.target, format!("<vis_{k}>"));
            assert_eq!(ex.input, format!("visual grounding: {}", s.labels()[k - 1].phrase()));
        }
        for ex in data.corpus(TaskTag::Nlvr, "train").unwrap() {
            assert_eq!(ex.scene_ids.len(), 2);
            let side = if ex.input.contains("left") { 0 } else { 1 };
            let s = scenes[&ex.scene_ids[side]];
            let phrase = ex.input.split(" contains a ").nth(1).unwrap();
            let truth = s.labels().iter().any(|l| l.phrase() == phrase);
            assert_eq!(ex.target, truth.to_string());
        }
        let qa = data.corpus(TaskTag::VcrQa, "train").unwrap();
        for chunk in qa.chunks(4) {
            assert_eq!(chunk.iter().filter(|e| e.target == "true").count(), 1);
        }
        for ex in data.corpus(TaskTag::Vqa, "test").unwrap() {
            let inside = data.answers.candidates.contains(&ex.target);
            assert_eq!(ex.aux.domain.as_deref(), Some(if inside { "in" } else { "out" }));
        }
        assert!(data.answers.out_of_domain.iter().all(|a| !data.answers.candidates.contains(a)));
    }

    #[test]
    fn splits_are_disjoint_and_regeneration_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let data = Dataset::generate(&small()).unwrap();
        let ids: Vec<BTreeSet<u64>> = SPLITS
            .iter()
            .map(|s| data.scenes[*s].iter().map(|x| x.scene_id).collect())
            .collect();
        assert!(ids[0].is_disjoint(&ids[1]) && ids[1].is_disjoint(&ids[2]) && ids[0].is_disjoint(&ids[2]));
        data.write(&dir.path().join("a")).unwrap();
        Dataset::generate(&small()).unwrap().write(&dir.path().join("b")).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(dir.path().join("a"))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert!(names.len() > 40);
        for n in names {
            let a = std::fs::read(dir.path().join("a").join(&n)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(&n)).unwrap();
            assert_eq!(a, b, "{n:?}");
        }
        let back = read_scenes(&dir.path().join("a/scenes_val.jsonl")).unwrap();
        assert_eq!(back, data.scenes["val"]);
    }

    #[test]
    fn vocab_covers_training_text() {
        let data = Dataset::generate(&small()).unwrap();
        let vocab = data.build_vocab().unwrap();
        for ex in data.corpus(TaskTag::Translate, "train").unwrap() {
            assert!(!vocab.encode(&ex.target).contains(&vocab.unk()));
            assert!(!vocab.encode(&ex.input).contains(&vocab.unk()));
        }
        assert!(vocab.len() <= 512);
    }
}
