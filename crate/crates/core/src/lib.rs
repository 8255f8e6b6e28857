//! Unified vision-and-language generation.
//!
//! Every task (question answering, grounding, image-text matching, visual
//! reasoning, captioning, translation) is cast as text generation from a
//! prefixed input text plus region features, with one encoder-decoder and
//! one language-modeling objective. Discriminative baselines (a candidate
//! classifier for VQA and a region-scoring head for grounding) sit on the
//! same backbone for comparison.
//!
//! Module map:
//!
//! - [`nn`]: tensors, tape autodiff, layers, AdamW, gradient checking
//! - [`tokenizer`]: word-level vocabulary with text and visual sentinels
//! - [`model`]: the multimodal encoder-decoder and baseline heads
//! - [`tasks`]: task prefixes, serialization, and pretraining corruptions
//! - [`synth`]: the synthetic scene world and its task corpora
//! - [`data`]: corpora bundled with vocabulary and scenes for a run
//! - [`training`]: pretraining, finetuning, multi-task schedules, checkpoints
//! - [`eval`]: decoding, metrics, and evaluation reports
//! - [`cli`]: the `uvlg` command-line front end

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tasks;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
