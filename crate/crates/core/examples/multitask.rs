//! Round-robin finetuning of one model over the seven downstream tasks.
//!
//! `cargo run --release --example multitask -- 500`

use uvlg::data::Corpora;
use uvlg::eval::{evaluate, EvalOptions, Subset};
use uvlg::synth::{Dataset, Manifest, Splits};
use uvlg::tasks::TaskTag;
use uvlg::training::{multitask_finetune, LogRecord, Objective, TrainConfig};

fn quiet(_: &LogRecord) -> uvlg::Result<()> {
    Ok(())
}

pub fn run(manifest: &Manifest, steps_per_task: u64) -> uvlg::Result<()> {
    let data = Corpora::from_dataset(&Dataset::generate(manifest)?)?;
    let tasks = TaskTag::DOWNSTREAM;
    let cfg = TrainConfig {
        steps: steps_per_task * tasks.len() as u64,
        ..TrainConfig::toy_multitask()
    };
    let t = multitask_finetune(cfg, &data, None, &mut quiet)?;
    println!("steps per task: {:?}", t.state.task_steps);
    for task in tasks {
        let rows = evaluate(&t.model, &data, task, "test", Objective::Generative, &EvalOptions::default())?;
        for r in rows.iter().filter(|r| r.subset == Subset::All) {
            println!("{:<10} {:<24} {:.3}", r.task, r.metric, r.value);
        }
    }
    Ok(())
}

pub fn run_example() -> uvlg::Result<()> {
    let small = Manifest {
        splits: Splits {
            train: 20,
            val: 5,
            test: 5,
        },
        ..Default::default()
    };
    run(&small, 1)
}

#[allow(dead_code)]
fn main() -> uvlg::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    run(&Manifest::default(), steps)
}
