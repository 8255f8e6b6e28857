//! Pretrain on the five-task mixture, then finetune visual grounding from the
//! pretrained weights and from scratch with the same budget.
//!
//! `cargo run --release --example grounding_transfer -- 4000 1000`

use uvlg::data::Corpora;
use uvlg::eval::{evaluate, EvalOptions};
use uvlg::synth::{Dataset, Manifest, Splits};
use uvlg::tasks::TaskTag;
use uvlg::training::{finetune, pretrain, LogRecord, Objective, TrainConfig};

fn log(r: &LogRecord) -> uvlg::Result<()> {
    if let Some(loss) = r.loss.filter(|_| r.split.is_none()) {
        println!("  step {:>5} {:<7} loss {loss:.4}", r.step, r.task);
    }
    Ok(())
}

pub fn run(manifest: &Manifest, pretrain_steps: u64, finetune_steps: u64) -> uvlg::Result<()> {
    let data = Corpora::from_dataset(&Dataset::generate(manifest)?)?;
    println!("pretraining for {pretrain_steps} steps");
    let cfg = TrainConfig {
        steps: pretrain_steps,
        log_every: (pretrain_steps / 10).max(1),
        ..TrainConfig::toy_pretrain()
    };
    let pretrained = pretrain(cfg, &data, None, &mut log)?.model;
    for (name, init) in [("pretrained", Some(pretrained)), ("scratch", None)] {
        let cfg = TrainConfig {
            steps: finetune_steps,
            log_every: finetune_steps.max(1),
            ..TrainConfig::toy_finetune(TaskTag::Ground)
        };
        let model = finetune(TaskTag::Ground, cfg, &data, init, &mut log)?.model;
        let rows = evaluate(&model, &data, TaskTag::Ground, "test", Objective::Generative, &EvalOptions::default())?;
        println!("from {name}: grounding accuracy {:.1}%", 100.0 * rows[0].value);
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
        tasks: TaskTag::PRETRAIN.to_vec(),
        ..Default::default()
    };
    run(&small, 4, 2)
}

#[allow(dead_code)]
fn main() -> uvlg::Result<()> {
    let arg = |i: usize, default: u64| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    run(&Manifest::default(), arg(1, 4000), arg(2, 1000))
}
