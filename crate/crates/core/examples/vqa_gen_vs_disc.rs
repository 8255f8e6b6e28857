//! Generative answers versus a classifier over the top-K answer candidates,
//! split by whether the gold answer is among the candidates.
//!
//! `cargo run --release --example vqa_gen_vs_disc -- 1000`

use uvlg::data::Corpora;
use uvlg::eval::{evaluate, EvalOptions};
use uvlg::synth::{Dataset, Manifest, Splits};
use uvlg::tasks::TaskTag;
use uvlg::training::{finetune, LogRecord, Objective, TrainConfig};

fn quiet(_: &LogRecord) -> uvlg::Result<()> {
    Ok(())
}

pub fn run(manifest: &Manifest, steps: u64) -> uvlg::Result<()> {
    let data = Corpora::from_dataset(&Dataset::generate(manifest)?)?;
    println!(
        "{} candidate answers; withheld: {:?}",
        data.answers.candidates.len(),
        data.answers.out_of_domain
    );
    for objective in [Objective::Generative, Objective::Discriminative] {
        let cfg = TrainConfig {
            steps,
            objective,
            ..TrainConfig::toy_finetune(TaskTag::Vqa)
        };
        let model = finetune(TaskTag::Vqa, cfg, &data, None, &mut quiet)?.model;
        for r in evaluate(&model, &data, TaskTag::Vqa, "test", objective, &EvalOptions::default())? {
            println!("{objective:?} {:<14} {:.3} over {}", r.subset.as_str(), r.value, r.count);
        }
    }
    Ok(())
}

pub fn run_example() -> uvlg::Result<()> {
    let small = Manifest {
        splits: Splits {
            train: 20,
            val: 5,
            test: 10,
        },
        tasks: vec![TaskTag::Vqa],
        ..Default::default()
    };
    run(&small, 3)
}

#[allow(dead_code)]
fn main() -> uvlg::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    run(&Manifest::default(), steps)
}
