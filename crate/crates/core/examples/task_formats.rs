//! Every task serialized as (input text, target text), plus the stochastic
//! pretraining constructors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uvlg::model::MaskingVariant;
use uvlg::tasks::{self, raw, PrefixRegistry, TaskTag};

pub fn run_example() -> uvlg::Result<()> {
    let reg = PrefixRegistry::default();
    let rows = [
        (TaskTag::Vqa, raw([("question", "what color is the shirt?"), ("answer", "blue")])),
        (TaskTag::Gqa, raw([("question", "what is the red thing?"), ("answer", "cube")])),
        (TaskTag::Itm, raw([("caption", "a red cube and a blue ball"), ("label", "true")])),
        (TaskTag::Ground, raw([("phrase", "yellow fire hydrant"), ("region", "3")])),
        (TaskTag::Gcap, raw([("region", "3"), ("phrase", "yellow fire hydrant")])),
        (TaskTag::Nlvr, raw([("text", "the left image contains a red cube"), ("label", "false")])),
        (TaskTag::VcrQa, raw([("question", "what color is the cube?"), ("answer", "red"), ("label", "true")])),
        (TaskTag::Caption, raw([("caption", "a red cube and a blue ball")])),
        (TaskTag::CaptionTags, raw([("tags", "cube ball"), ("caption", "a red cube and a blue ball")])),
        (TaskTag::Translate, raw([("source", "a red cube"), ("target", "q xzs lwaz")])),
    ];
    for (tag, fields) in rows {
        let ex = reg.format(tag, &fields)?;
        println!("{:<13} {:<55} -> {}", tag.as_str(), ex.input, ex.target);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let caption = "a man is jumping over a fire hydrant";
    for masking in [MaskingVariant::SpanSentinel, MaskingVariant::TokenMask] {
        let reg = PrefixRegistry { masking, ..Default::default() };
        let ex = tasks::mlm_example(&reg, caption, &mut rng)?;
        println!("{:<13} {:<55} -> {}", "mlm", ex.input, ex.target);
    }
    let pool = vec![(1, caption.to_string()), (2, "a red cube and a blue ball".to_string())];
    for _ in 0..3 {
        let ex = tasks::itm_sample(1, caption, &pool, &mut rng)?;
        println!("{:<13} {:<55} -> {}", "itm", ex.input, ex.target);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> uvlg::Result<()> {
    run_example()
}
