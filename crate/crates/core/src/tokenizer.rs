//! Word-level tokenizer with the reserved token blocks the model relies on.
//!
//! Ids are laid out as:
//!
//! | ids                      | tokens                              |
//! |--------------------------|-------------------------------------|
//! | `0..5`                   | `<pad> <s> </s> <unk> <mask>`       |
//! | `5..5+T`                 | `<text_1> .. <text_T>` (T = 100)    |
//! | `5+T..5+T+n`             | `<vis_1> .. <vis_n>`                |
//! | `5+T+n..`                | corpus words, most frequent first   |
//!
//! Text is lowercased and split on whitespace and punctuation; every
//! punctuation character is its own token. Reserved tokens written literally
//! (`<vis_3>`) are recognized as single tokens.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const MASK: &str = "<mask>";

/// Number of text sentinels `<text_k>`.
pub const TEXT_SENTINELS: usize = 100;

const CONTROL: [&str; 5] = [PAD, BOS, EOS, UNK, MASK];

pub fn text_sentinel(k: usize) -> String {
    format!("<text_{k}>")
}

pub fn visual_sentinel(k: usize) -> String {
    format!("<vis_{k}>")
}

/// Parse `<vis_k>` into `k`.
pub fn parse_visual_sentinel(token: &str) -> Option<usize> {
    token
        .strip_prefix("<vis_")?
        .strip_suffix('>')?
        .parse()
        .ok()
        .filter(|&k| k >= 1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    text_sentinels: usize,
    visual_sentinels: usize,
}

fn is_reserved_shape(tok: &str) -> bool {
    CONTROL.contains(&tok)
        || tok
            .strip_prefix("<text_")
            .and_then(|r| r.strip_suffix('>'))
            .is_some_and(|k| k.parse::<usize>().is_ok())
        || parse_visual_sentinel(tok).is_some()
}

/// Split text into lowercase word and punctuation tokens.
pub fn pretokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c == '<' {
                if let Some(end) = chars[i..].iter().position(|&x| x == '>') {
                    let cand: String = chars[i..=i + end].iter().collect::<String>().to_lowercase();
                    if is_reserved_shape(&cand) {
                        if !word.is_empty() {
                            out.push(std::mem::take(&mut word));
                        }
                        out.push(cand);
                        i += end + 1;
                        continue;
                    }
                }
            }
            if c.is_alphanumeric() {
                word.extend(c.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            }
            i += 1;
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

fn attaches_left(tok: &str) -> bool {
    matches!(tok, "." | "," | "?" | "!" | ":" | ";" | ")" | "'")
}

fn attaches_right(tok: &str) -> bool {
    matches!(tok, "(" | "'")
}

/// Join tokens with single spaces, gluing punctuation to its neighbour.
pub fn render(tokens: &[impl AsRef<str>]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for t in tokens {
        let t = t.as_ref();
        if !glue_next && !attaches_left(t) {
            out.push(' ');
        }
        out.push_str(t);
        glue_next = attaches_right(t);
    }
    out
}

/// Canonical form of a string: lowercased, tokenized and re-rendered.
pub fn normalize_text(text: &str) -> String {
    render(&pretokenize(text))
}

impl Vocab {
    fn with_reserved(visual_sentinels: usize) -> Self {
        let mut tokens: Vec<String> = CONTROL.iter().map(|s| s.to_string()).collect();
        tokens.extend((1..=TEXT_SENTINELS).map(text_sentinel));
        tokens.extend((1..=visual_sentinels).map(visual_sentinel));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens,
            index,
            text_sentinels: TEXT_SENTINELS,
            visual_sentinels,
        }
    }

    pub fn reserved_count(visual_sentinels: usize) -> usize {
        CONTROL.len() + TEXT_SENTINELS + visual_sentinels
    }

    /// Build from a corpus: reserved blocks, then words by descending
    /// frequency (ties by first appearance) until `target_size` is reached.
    pub fn build<I, S>(corpus: I, target_size: usize, visual_sentinels: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let reserved = Self::reserved_count(visual_sentinels);
        if target_size <= reserved {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size {target_size} must exceed the {reserved} reserved tokens"
            )));
        }
        let mut vocab = Self::with_reserved(visual_sentinels);
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        let mut lines = 0;
        for line in corpus {
            lines += 1;
            for tok in pretokenize(line.as_ref()) {
                if vocab.index.contains_key(&tok) || is_reserved_shape(&tok) {
                    continue;
                }
                let order = counts.len();
                counts.entry(tok).or_insert((0, order)).0 += 1;
            }
        }
        if lines == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        for (tok, _) in ranked.into_iter().take(target_size - reserved) {
            vocab.index.insert(tok.clone(), vocab.tokens.len() as u32);
            vocab.tokens.push(tok);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> u32 {
        0
    }

    pub fn bos(&self) -> u32 {
        1
    }

    pub fn eos(&self) -> u32 {
        2
    }

    pub fn unk(&self) -> u32 {
        3
    }

    pub fn mask(&self) -> u32 {
        4
    }

    pub fn num_visual_sentinels(&self) -> usize {
        self.visual_sentinels
    }

    /// Id of `<text_k>`, `k` starting at 1.
    pub fn text_sentinel(&self, k: usize) -> Option<u32> {
        (1..=self.text_sentinels)
            .contains(&k)
            .then(|| (CONTROL.len() + k - 1) as u32)
    }

    /// Id of `<vis_k>`, `k` starting at 1.
    pub fn visual(&self, k: usize) -> Option<u32> {
        (1..=self.visual_sentinels)
            .contains(&k)
            .then(|| (CONTROL.len() + self.text_sentinels + k - 1) as u32)
    }

    /// Ids of `<vis_1>..<vis_n>`.
    pub fn visual_ids(&self) -> std::ops::Range<u32> {
        let start = (CONTROL.len() + self.text_sentinels) as u32;
        start..start + self.visual_sentinels as u32
    }

    /// Region index `k` if `id` is `<vis_k>`.
    pub fn visual_index(&self, id: u32) -> Option<usize> {
        let r = self.visual_ids();
        r.contains(&id).then(|| (id - r.start) as usize + 1)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pretokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(self.unk()))
            .collect()
    }

    /// Render ids back to text, dropping `<pad>`, `<s>` and `</s>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != self.pad() && id != self.bos() && id != self.eos())
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect();
        render(&toks)
    }

    /// The vocabulary file: header comments recording the reserved ranges,
    /// then one token per line with line index = id.
    pub fn to_file_string(&self) -> String {
        let t0 = CONTROL.len();
        let v0 = t0 + self.text_sentinels;
        let w0 = v0 + self.visual_sentinels;
        let mut s = String::new();
        let _ = writeln!(s, "# uvlg vocab v1");
        let _ = writeln!(s, "# size {}", self.tokens.len());
        let _ = writeln!(s, "# control 0..{t0}");
        let _ = writeln!(s, "# text_sentinels {t0}..{v0}");
        let _ = writeln!(s, "# visual_sentinels {v0}..{w0}");
        let _ = writeln!(s, "# words {w0}..{}", self.tokens.len());
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().peekable();
        let mut visual = None;
        while let Some(line) = lines.peek() {
            let Some(rest) = line.strip_prefix('#') else { break };
            let mut parts = rest.split_whitespace();
            if parts.next() == Some("visual_sentinels") {
                let range = parts.next().unwrap_or_default();
                let (a, b) = range
                    .split_once("..")
                    .ok_or_else(|| Error::Data(format!("bad vocab header `{line}`")))?;
                let a: usize = a.parse().map_err(|_| Error::Data(format!("bad vocab header `{line}`")))?;
                let b: usize = b.parse().map_err(|_| Error::Data(format!("bad vocab header `{line}`")))?;
                visual = Some(b.saturating_sub(a));
            }
            lines.next();
        }
        let visual = visual.ok_or_else(|| Error::Data("vocab header lacks visual_sentinels".into()))?;
        let expected = Self::with_reserved(visual);
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        if tokens.len() < expected.tokens.len() || tokens[..expected.tokens.len()] != expected.tokens[..] {
            return Err(Error::Data("vocab reserved block does not match its header".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocab token `{t}` at line id {i}")));
            }
        }
        Ok(Vocab {
            tokens,
            index,
            text_sentinels: TEXT_SENTINELS,
            visual_sentinels: visual,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn small_corpus() {
        let v = Vocab::build(["a man", "a dog"], 200, 8).unwrap();
        for w in ["a", "man", "dog"] {
            assert!(v.id(w).is_some(), "{w}");
        }
        assert_eq!(v.len(), Vocab::reserved_count(8) + 3);
        assert_eq!(v.token(Vocab::reserved_count(8) as u32), Some("a"));
    }

    #[test]
    fn size_must_exceed_reserved() {
        let reserved = Vocab::reserved_count(8);
        assert!(Vocab::build(["a man"], reserved, 8).is_err());
        assert!(Vocab::build(["a man"], 16, 8).is_err());
        assert!(matches!(
            Vocab::build(Vec::<String>::new(), 500, 8),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn build_is_deterministic_to_the_byte() {
        let corpus = ["the red cube is left of a blue ball", "a man is jumping", "the dog"];
        let a = Vocab::build(corpus, 150, 4).unwrap().to_file_string();
        let b = Vocab::build(corpus, 150, 4).unwrap().to_file_string();
        assert_eq!(a, b);
    }

    #[test]
    fn truncates_to_target_size() {
        let v = Vocab::build(["b b b a a c"], Vocab::reserved_count(2) + 2, 2).unwrap();
        assert_eq!(v.id("b"), Some(Vocab::reserved_count(2) as u32));
        assert!(v.id("a").is_some());
        assert_eq!(v.id("c"), None);
        assert_eq!(v.encode("c"), vec![v.unk()]);
    }

    #[test]
    fn prefixed_input_round_trips() {
        let v = Vocab::build(["visual grounding: yellow fire hydrant"], 300, 8).unwrap();
        let ids = v.encode("visual grounding: yellow fire hydrant");
        assert_eq!(ids.len(), 6);
        assert_eq!(v.token(ids[2]), Some(":"));
        assert_eq!(v.decode(&ids), "visual grounding: yellow fire hydrant");
    }

    #[test]
    fn sentinels_are_atomic() {
        let v = Vocab::build(["caption region:"], 300, 8).unwrap();
        let ids = v.encode("<vis_3>");
        assert_eq!(ids, vec![v.visual(3).unwrap()]);
        assert!(v.visual_ids().contains(&ids[0]));
        assert_eq!(v.visual_index(ids[0]), Some(3));
        let ids = v.encode("caption region: <vis_3>");
        assert_eq!(v.decode(&ids), "caption region: <vis_3>");
        assert_eq!(v.encode("A <text_1> is"), vec![v.unk(), v.text_sentinel(1).unwrap(), v.unk()]);
        assert_eq!(v.encode("<mask>"), vec![v.mask()]);
        assert!(v.encode("").is_empty());
    }

    #[test]
    fn visual_sentinels_are_consecutive() {
        let v = Vocab::build(["x"], 300, 36).unwrap();
        let first = v.visual(1).unwrap();
        for k in 1..=36 {
            assert_eq!(v.visual(k).unwrap() - first, k as u32 - 1);
            assert_eq!(v.id(&visual_sentinel(k)), v.visual(k));
        }
        assert_eq!(v.visual(37), None);
        assert_eq!(v.visual(0), None);
    }

    #[test]
    fn file_round_trip() {
        let v = Vocab::build(["what color is the shirt ?", "# hash"], 300, 8).unwrap();
        let text = v.to_file_string();
        assert!(text.starts_with("# uvlg vocab v1\n"));
        let back = Vocab::parse(&text).unwrap();
        assert_eq!(back, v);
        assert!(back.id("#").is_some());
    }

    #[test]
    fn punctuation_rendering() {
        assert_eq!(
            normalize_text("What is the color of the man's shirt?"),
            "what is the color of the man's shirt?"
        );
        assert_eq!(normalize_text("  a   ,b  "), "a, b");
    }

    const WORDS: [&str; 12] = [
        "a", "red", "fire", "hydrant", "is", "?", ":", ",", "<vis_2>", "<text_7>", "'", "<mask>",
    ];

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn decode_encode_is_normalization(words in proptest::collection::vec(0usize..WORDS.len(), 0..12), upper in any::<bool>()) {
            let vocab = Vocab::build(["a red fire hydrant is ? : , '"], 200, 8).unwrap();
            let mut s = words.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ");
            if upper {
                s = s.to_uppercase().replace("<VIS_2>", "<vis_2>").replace("<TEXT_7>", "<text_7>").replace("<MASK>", "<mask>");
            }
            prop_assert_eq!(vocab.decode(&vocab.encode(&s)), normalize_text(&s));
        }
    }
}
