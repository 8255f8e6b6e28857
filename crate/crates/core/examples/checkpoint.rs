//! Train a few steps, save a checkpoint, resume it and inspect its tensors.

use uvlg::data::Corpora;
use uvlg::synth::{Dataset, Manifest, Splits};
use uvlg::tasks::TaskTag;
use uvlg::training::{TrainConfig, Trainer};

pub fn run_example() -> uvlg::Result<()> {
    let manifest = Manifest {
        splits: Splits {
            train: 30,
            val: 5,
            test: 5,
        },
        tasks: TaskTag::PRETRAIN.to_vec(),
        ..Default::default()
    };
    let data = Corpora::from_dataset(&Dataset::generate(&manifest)?)?;
    let cfg = TrainConfig {
        steps: 6,
        batch_size: 8,
        d: 32,
        heads: 4,
        d_ff: 64,
        ..TrainConfig::toy_pretrain()
    };
    let dir = std::env::temp_dir().join(format!("uvlg-checkpoint-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| uvlg::Error::io(&dir, e))?;
    let path = dir.join("run.ckpt");

    let mut t = Trainer::new(cfg.clone(), &data, None)?;
    for r in t.run_steps(3)? {
        println!("step {} {:<6} loss {:.4}", r.step, r.task, r.loss);
    }
    t.save(&path)?;
    let mut resumed = Trainer::resume(cfg, &data, &path)?;
    println!("resumed at step {}", resumed.state.step);
    for r in resumed.run_steps(3)? {
        println!("step {} {:<6} loss {:.4}", r.step, r.task, r.loss);
    }

    let report = uvlg::cli::inspect(&path)?;
    println!("{} tensors, {} parameters", report.tensors.len(), report.parameters);
    for group in &report.tying_groups {
        println!("tied: {}", group.join(" = "));
    }
    std::fs::remove_dir_all(&dir).map_err(|e| uvlg::Error::io(&dir, e))?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> uvlg::Result<()> {
    run_example()
}
