//! Evaluation metrics: VQA soft score, BLEU, box IoU and true/false ranking.

use uvlg::eval::{bleu_text, rank_from_logits, true_false_score, vqa_score};
use uvlg::synth::iou;

pub fn run_example() -> uvlg::Result<()> {
    let humans: Vec<String> = ["blue", "blue", "navy", "blue", "navy", "blue", "blue", "blue", "blue", "blue"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for answer in ["blue", "navy", "red"] {
        println!("vqa_score({answer}) = {:.1}", vqa_score(answer, &humans));
    }
    let refs = vec!["a red cube and a blue ball".to_string(), "a blue ball and a red cube".to_string()];
    for cand in ["a red cube and a blue ball", "a red cube and a green ball", "a cube"] {
        println!("bleu({cand:?}) = {:.3}", bleu_text(cand, &refs));
    }
    println!("iou = {:.4}", iou([0.0, 0.0, 1.0, 1.0], [0.5, 0.0, 1.5, 1.0]));
    println!("P(true)/(P(true)+P(false)) = {:.3}", true_false_score(0.6f64.ln(), 0.2f64.ln()));
    let logits = vec![vec![0.2, 1.0], vec![2.0, -1.0], vec![0.0, 0.0]];
    let (best, scores) = rank_from_logits(&logits, 0, 1);
    println!("ranked choice {best} with scores {scores:.3?}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> uvlg::Result<()> {
    run_example()
}
