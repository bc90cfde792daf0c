use std::fs;
use std::io::Write;
use std::path::Path;

use super::Vocab;
use crate::{Error, Result};

/// A tokenized (source, target) pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Reads a UTF-8 corpus: one `source<TAB>target` pair per line. Blank lines
/// and lines starting with `#` are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    parse_corpus(&text)
}

pub(crate) fn parse_corpus(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(n, line)| {
            let (src, tgt) = line.split_once('\t').ok_or_else(|| {
                Error::format("corpus", format!("line {} has no tab separator", n + 1))
            })?;
            Ok((src.to_string(), tgt.to_string()))
        })
        .collect()
}

/// Writes pairs, preceded by `# `-prefixed header lines.
pub fn write_corpus(path: &Path, header: &[String], pairs: &[(String, String)]) -> Result<()> {
    let mut out = Vec::new();
    for h in header {
        writeln!(out, "# {h}")?;
    }
    for (src, tgt) in pairs {
        if src.contains(['\t', '\n']) || tgt.contains(['\t', '\n']) {
            return Err(Error::invalid("corpus fields may not contain tabs or newlines"));
        }
        writeln!(out, "{src}\t{tgt}")?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn encode_pairs(vocab: &Vocab, raw: &[(String, String)]) -> Vec<Pair> {
    raw.iter()
        .map(|(s, t)| Pair {
            src: vocab.encode(s),
            tgt: vocab.encode(t),
        })
        .collect()
}

/// Reads and tokenizes a corpus file, dropping pairs with an empty side.
pub fn read_pairs(path: &Path, vocab: &Vocab) -> Result<Vec<Pair>> {
    Ok(encode_pairs(vocab, &read_corpus(path)?)
        .into_iter()
        .filter(|p| !p.src.is_empty() && !p.tgt.is_empty())
        .collect())
}
