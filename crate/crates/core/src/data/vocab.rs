use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Shared source/target vocabulary. Ids `0..4` are PAD, BOS, EOS and UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Vocabulary for integer-token synthetic tasks: id `i` is spelled `i`.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < NUM_RESERVED {
            return Err(Error::invalid(format!("vocab size {size} below reserved count")));
        }
        Vocab::from_tokens((NUM_RESERVED..size).map(|i| i.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// Whitespace tokenization.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line in id order, reserved tokens included.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_RESERVED || lines[..NUM_RESERVED] != RESERVED {
            return Err(Error::format("vocabulary", "missing reserved tokens"));
        }
        Vocab::from_tokens(lines[NUM_RESERVED..].iter().map(|s| s.to_string()))
    }
}

/// Frequency-ranked whitespace tokens (ties in lexicographic order), capped
/// so that the vocabulary, reserved ids included, has at most `max_size`
/// entries. Everything else maps to UNK.
pub fn build_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Vocab> {
    if max_size < NUM_RESERVED {
        return Err(Error::invalid(format!("max_size {max_size} below reserved count")));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut any = false;
    for line in corpus {
        any = true;
        for tok in line.split_whitespace() {
            if !RESERVED.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    if !any {
        return Err(Error::invalid("empty corpus"));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocab::from_tokens(
        ranked
            .into_iter()
            .take(max_size - NUM_RESERVED)
            .map(|(t, _)| t.to_string()),
    )
}
