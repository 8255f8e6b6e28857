//! Greedy, beam and vocabulary-constrained decoding with an untrained model.

use uvlg::data::Corpora;
use uvlg::eval::{generate, DecodeConfig, Strategy};
use uvlg::model::{Model, ModelConfig};
use uvlg::synth::{Dataset, Manifest, Splits};
use uvlg::tasks::TaskTag;

pub fn run_example() -> uvlg::Result<()> {
    let manifest = Manifest {
        splits: Splits {
            train: 20,
            val: 5,
            test: 5,
        },
        tasks: vec![TaskTag::Ground, TaskTag::Vqa],
        ..Default::default()
    };
    let data = Corpora::from_dataset(&Dataset::generate(&manifest)?)?;
    let cfg = data.model_config(&ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        d: 32,
        heads: 4,
        d_ff: 64,
        ..Default::default()
    });
    let model = Model::<f32>::new(&cfg, 0)?;
    let ex = &data.examples(TaskTag::Ground, "test")?[0];
    let input = vec![data.encoder_input(ex, &cfg)?];
    println!("input: {}", ex.input);
    let configs = [
        ("greedy", DecodeConfig::greedy(5)),
        (
            "beam 4",
            DecodeConfig {
                strategy: Strategy::Beam(4),
                ..DecodeConfig::greedy(5)
            },
        ),
        ("grounding", DecodeConfig::grounding(&model, manifest.regions)),
    ];
    for (name, dc) in configs {
        let out = generate(&model, &input, None, &dc)?;
        println!("{name:>9}: {:?}", data.vocab.decode(&out[0]));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> uvlg::Result<()> {
    run_example()
}
