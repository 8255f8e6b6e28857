//! Corpora, vocabulary and scenes bundled for training and evaluation, and
//! the conversion from task examples to model inputs.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EncoderInput, ModelConfig};
use crate::synth::{read_scenes, AnswerSplit, Dataset, Manifest, SceneRecord, SPLITS};
use crate::tasks::{read_corpus, TaskExample, TaskTag};
use crate::tokenizer::Vocab;

#[derive(Clone, Debug)]
pub struct Corpora {
    pub manifest: Manifest,
    pub vocab: Vocab,
    pub scenes: BTreeMap<u64, SceneRecord>,
    pub sets: BTreeMap<(TaskTag, String), Vec<TaskExample>>,
    pub answers: AnswerSplit,
}

impl Corpora {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        Ok(Corpora {
            manifest: ds.manifest().clone(),
            vocab: ds.build_vocab()?,
            scenes: ds.scenes.values().flatten().map(|s| (s.scene_id, s.clone())).collect(),
            sets: ds.corpora.clone(),
            answers: ds.answers.clone(),
        })
    }

    /// Load a dataset directory written by [`Dataset::write`]. Only the
    /// corpora of `tags` are read.
    pub fn load(dir: &Path, tags: &[TaskTag]) -> Result<Self> {
        let manifest = Manifest::load(&dir.join("manifest.json"))?;
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let answers_path = dir.join("answers.json");
        let text = std::fs::read_to_string(&answers_path).map_err(|e| Error::io(&answers_path, e))?;
        let answers: AnswerSplit = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", answers_path.display())))?;
        let mut scenes = BTreeMap::new();
        for split in SPLITS {
            for s in read_scenes(&dir.join(format!("scenes_{split}.jsonl")))? {
                scenes.insert(s.scene_id, s);
            }
        }
        let mut sets = BTreeMap::new();
        for &tag in tags {
            for split in SPLITS {
                let path = dir.join(format!("{tag}_{split}.jsonl"));
                if path.exists() {
                    sets.insert((tag, split.to_string()), read_corpus(&path)?);
                } else if split == "train" {
                    return Err(Error::Data(format!("corpus {} is missing", path.display())));
                }
            }
        }
        Ok(Corpora {
            manifest,
            vocab,
            scenes,
            sets,
            answers,
        })
    }

    pub fn examples(&self, tag: TaskTag, split: &str) -> Result<&[TaskExample]> {
        self.sets
            .get(&(tag, split.to_string()))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("no `{tag}` corpus for split `{split}`")))
    }

    /// Model configuration sized to this data.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            regions: self.manifest.regions,
            d_roi: self.manifest.d_roi,
            ..base.clone()
        }
        .with_masking(self.manifest.masking)
    }

    /// Check that a model can consume this data.
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        if config.vocab_size != self.vocab.len() {
            return Err(Error::Config(format!(
                "model vocabulary has {} entries, data vocabulary has {}",
                config.vocab_size,
                self.vocab.len()
            )));
        }
        if config.regions != self.manifest.regions || config.d_roi != self.manifest.d_roi {
            return Err(Error::Config(format!(
                "model expects {} regions of width {}, data has {} of width {}",
                config.regions, config.d_roi, self.manifest.regions, self.manifest.d_roi
            )));
        }
        Ok(())
    }

    /// Token ids of the input text (truncated) and the regions of every
    /// scene, tagged image 1, 2, ...
    pub fn encoder_input(&self, ex: &TaskExample, config: &ModelConfig) -> Result<EncoderInput> {
        let mut text = self.vocab.encode(&ex.input);
        text.truncate(config.max_text_len);
        let mut regions = Vec::new();
        for (i, id) in ex.scene_ids.iter().enumerate() {
            let scene = self
                .scenes
                .get(id)
                .ok_or_else(|| Error::Data(format!("example refers to unknown scene {id}")))?;
            regions.extend(scene.region_inputs(i + 1));
        }
        Ok(EncoderInput { text, regions })
    }

    /// Target ids followed by EOS, within the decoder length limit.
    pub fn target_ids(&self, ex: &TaskExample, config: &ModelConfig) -> Vec<u32> {
        let mut t = self.vocab.encode(&ex.target);
        t.truncate(config.max_target_len.saturating_sub(1));
        t.push(self.vocab.eos());
        t
    }
}
