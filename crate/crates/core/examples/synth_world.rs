//! A small synthetic dataset: scenes with latent labels, detector tags and
//! one example per task.

use uvlg::synth::{Dataset, Manifest, Splits};
use uvlg::tasks::TaskTag;

pub fn run_example() -> uvlg::Result<()> {
    let manifest = Manifest {
        splits: Splits {
            train: 30,
            val: 5,
            test: 5,
        },
        ..Default::default()
    };
    let ds = Dataset::generate(&manifest)?;
    let scene = &ds.scenes["train"][0];
    println!("scene {} ({} regions)", scene.scene_id, scene.regions.len());
    for r in &scene.regions {
        println!(
            "  <vis_{}> {:>7} {:<14} box {:.2?}",
            r.region_id, r.attribute, r.object, r.bbox
        );
    }
    println!("captions: {:?}", scene.captions);
    println!(
        "answer candidates {:?}, withheld {:?}",
        ds.answers.candidates, ds.answers.out_of_domain
    );
    for tag in TaskTag::ALL {
        if let Some(ex) = ds.corpus(tag, "train")?.first() {
            println!("{:<13} {} -> {}", tag.as_str(), ex.input, ex.target);
        }
    }
    let vocab = ds.build_vocab()?;
    println!("vocabulary: {} tokens", vocab.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> uvlg::Result<()> {
    run_example()
}
