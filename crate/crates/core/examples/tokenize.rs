//! Vocabulary construction with reserved text and visual sentinels.

use uvlg::tokenizer::{pretokenize, Vocab};

pub fn run_example() -> uvlg::Result<()> {
    let corpus = [
        "visual grounding: yellow fire hydrant",
        "caption region: <vis_3>",
        "vqa: what color is the shirt?",
        "a man is jumping over a fire hydrant",
    ];
    let vocab = Vocab::build(corpus, 160, 8)?;
    println!("{} tokens, {} visual sentinels", vocab.len(), vocab.num_visual_sentinels());
    // "span prediction" is outside the corpus, so it maps to <unk>.
    for text in ["visual grounding: yellow fire hydrant <vis_3>", "span prediction: a <text_1> is jumping"] {
        let ids = vocab.encode(text);
        println!("{:?}", pretokenize(text));
        println!("  -> {ids:?}");
        println!("  <- {}", vocab.decode(&ids));
    }
    println!("<vis_3> = {:?}, <text_1> = {:?}", vocab.visual(3), vocab.text_sentinel(1));
    Ok(())
}

#[allow(dead_code)]
fn main() -> uvlg::Result<()> {
    run_example()
}
