//! Reverse-mode gradients on a tiny model, checked against central
//! differences in f64.

use uvlg::model::{EncoderInput, Model, ModelConfig, RegionInput};
use uvlg::nn::{finite_diff_check, GradCheckConfig, Graph, Tensor};

pub fn run_example() -> uvlg::Result<()> {
    // A hand-sized graph: loss = sum(gelu(x W)).
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 0.0, 1.0, 3.0])?);
    let w = g.leaf(Tensor::new(&[3, 2], vec![0.1, -0.3, 0.2, 0.4, -0.5, 0.6])?);
    let h = g.matmul(x, w)?;
    let r = g.gelu(h);
    let loss = g.sum(r);
    let grads = g.backward(loss)?;
    println!("loss = {:.4}", g.value(loss).data()[0]);
    println!("dL/dW = {:?}", grads.wrt(w).unwrap_or(&[]));

    let cfg = ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        d: 8,
        heads: 2,
        d_ff: 16,
        vocab_size: 120,
        regions: 2,
        d_roi: 4,
        ..Default::default()
    };
    let mut model = Model::<f32>::new(&cfg, 1)?.cast::<f64>();
    let inputs = vec![EncoderInput {
        text: vec![110, 111, 112],
        regions: (1..=2)
            .map(|k| RegionInput {
                roi: vec![0.3 * k as f32, -0.2, 0.1, 0.5],
                bbox: [0.1, 0.1, 0.5, 0.6],
                image_id: 1,
                region_id: k,
            })
            .collect(),
    }];
    let targets = vec![vec![cfg.visual_token(2), 2]];
    let net = model.net.clone();
    let report = finite_diff_check(&mut model.params, &GradCheckConfig::default(), |store, g| {
        net.generation_loss(g, store, &inputs, &targets, None)
    })?;
    println!(
        "gradient check: {} coordinates, max relative error {:.2e} ({})",
        report.checked,
        report.max_rel_error,
        if report.passed() { "ok" } else { "FAILED" }
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> uvlg::Result<()> {
    run_example()
}
