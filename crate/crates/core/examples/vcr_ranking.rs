//! Multiple choice as text generation: each choice is scored by
//! P(true) / (P(true) + P(false)) at the first decoding step.
//!
//! `cargo run --release --example vcr_ranking -- 1000`

use uvlg::data::Corpora;
use uvlg::eval::{evaluate, rank_true_false, EvalOptions};
use uvlg::synth::{Dataset, Manifest, Splits};
use uvlg::tasks::{TaskExample, TaskTag};
use uvlg::training::{finetune, LogRecord, Objective, TrainConfig};

fn quiet(_: &LogRecord) -> uvlg::Result<()> {
    Ok(())
}

pub fn run(manifest: &Manifest, steps: u64) -> uvlg::Result<()> {
    let data = Corpora::from_dataset(&Dataset::generate(manifest)?)?;
    let cfg = TrainConfig {
        steps,
        ..TrainConfig::toy_finetune(TaskTag::VcrQa)
    };
    let model = finetune(TaskTag::VcrQa, cfg, &data, None, &mut quiet)?.model;
    let test = data.examples(TaskTag::VcrQa, "test")?;
    let first_q = test[0].aux.question_id;
    let choices: Vec<&TaskExample> = test.iter().filter(|e| e.aux.question_id == first_q).collect();
    let (best, scores) = rank_true_false(&model, &data, &choices)?;
    for (i, (ex, s)) in choices.iter().zip(&scores).enumerate() {
        let mark = if i == best { "*" } else { " " };
        println!("{mark} {s:.3} {} ({})", ex.input, ex.target);
    }
    let rows = evaluate(&model, &data, TaskTag::VcrQa, "test", Objective::Generative, &EvalOptions::default())?;
    println!("accuracy {:.3} over {} questions (chance 0.25)", rows[0].value, rows[0].count);
    Ok(())
}

pub fn run_example() -> uvlg::Result<()> {
    let small = Manifest {
        splits: Splits {
            train: 20,
            val: 5,
            test: 10,
        },
        tasks: vec![TaskTag::VcrQa],
        ..Default::default()
    };
    run(&small, 3)
}

#[allow(dead_code)]
fn main() -> uvlg::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    run(&Manifest::default(), steps)
}
