//! Shared output head versus one private head per task: parameter cost and
//! identical behaviour at initialization.

use uvlg::data::Corpora;
use uvlg::eval::{evaluate, EvalOptions};
use uvlg::model::HeadMode;
use uvlg::synth::{Dataset, Manifest, Splits};
use uvlg::tasks::TaskTag;
use uvlg::training::{Objective, TrainConfig, Trainer};

pub fn run_example() -> uvlg::Result<()> {
    let manifest = Manifest {
        splits: Splits {
            train: 20,
            val: 5,
            test: 10,
        },
        ..Default::default()
    };
    let data = Corpora::from_dataset(&Dataset::generate(&manifest)?)?;
    let mut counts = Vec::new();
    for head_mode in [HeadMode::Shared, HeadMode::PerTask] {
        let cfg = TrainConfig {
            head_mode,
            d: 32,
            heads: 4,
            d_ff: 64,
            ..TrainConfig::toy_multitask()
        };
        let t = Trainer::new(cfg, &data, None)?;
        let opts = EvalOptions {
            limit: Some(20),
            ..Default::default()
        };
        let rows = evaluate(&t.model, &data, TaskTag::Refexp, "test", Objective::Generative, &opts)?;
        println!(
            "{head_mode:?}: {} parameters, refexp accuracy at step 0 = {:.3}",
            t.model.num_parameters(),
            rows[0].value
        );
        counts.push((t.model.num_parameters(), t.model.config().vocab_size, t.model.config().d));
    }
    let (shared, v, d) = counts[0];
    println!(
        "per-task heads add {} = 7 x {v} x {d}",
        counts[1].0 - shared
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> uvlg::Result<()> {
    run_example()
}
