//! Token ↔ id maps with reserved special tokens.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Whitespace tokenization; the only tokenization this crate performs.
pub fn tokenize(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(|t| t.as_ref())
        .collect::<Vec<_>>()
        .join(" ")
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Most frequent tokens first, ties broken lexicographically; `max_size`
    /// counts the four reserved entries.
    pub fn from_lines<'a, I>(lines: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for line in lines {
            for tok in tokenize(line) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(keep).map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    /// Ids for a whitespace-tokenized line, terminated with EOS.
    pub fn encode(&self, line: &str) -> Vec<usize> {
        tokenize(line)
            .into_iter()
            .map(|t| self.id(t))
            .chain(std::iter::once(EOS))
            .collect()
    }

    /// Tokens for ids, dropping BOS/EOS/PAD.
    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .filter(|&&i| i != EOS && i != BOS && i != PAD)
            .map(|&i| self.token(i))
            .collect()
    }

    pub fn decode_line(&self, ids: &[usize]) -> String {
        detokenize(&self.decode(ids))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::Data(format!(
                "{}: vocabulary must start with {:?}",
                path.display(),
                RESERVED
            )));
        }
        Self::from_tokens(tokens)
    }
}

/// Builds a vocabulary from a one-sentence-per-line UTF-8 file.
pub fn build_vocab(corpus_file: &Path, max_size: usize) -> Result<Vocabulary> {
    let text = fs::read_to_string(corpus_file).map_err(|e| Error::io(corpus_file, e))?;
    Vocabulary::from_lines(text.lines(), max_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(v: &Vocabulary) -> Vec<&str> {
        v.tokens().iter().map(String::as_str).collect()
    }

    #[test]
    fn frequency_order() {
        let v = Vocabulary::from_lines(["a b a"], 10).unwrap();
        assert_eq!(toks(&v), ["<pad>", "<bos>", "<eos>", "<unk>", "a", "b"]);
    }

    #[test]
    fn ties_are_lexicographic_and_size_is_capped() {
        let v = Vocabulary::from_lines(["b a"], 5).unwrap();
        assert_eq!(toks(&v), ["<pad>", "<bos>", "<eos>", "<unk>", "a"]);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocabulary::from_lines(["", "   "], 10).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.txt");
        fs::write(&corpus, "x y z\nz y\nz\n").unwrap();
        let v = build_vocab(&corpus, 100).unwrap();
        assert_eq!(toks(&v)[4..], ["z", "y", "x"]);
        let vf = dir.path().join("v.txt");
        v.save(&vf).unwrap();
        let text = fs::read_to_string(&vf).unwrap();
        assert!(text.starts_with("<pad>\n<bos>\n<eos>\n<unk>\nz\n"));
        assert_eq!(Vocabulary::load(&vf).unwrap(), v);
        assert!(build_vocab(&dir.path().join("missing"), 10).is_err());
    }

    proptest! {
        #[test]
        fn tokenize_round_trip(line in "[a-z ]{0,40}") {
            let normalized = line.split_whitespace().collect::<Vec<_>>().join(" ");
            prop_assert_eq!(detokenize(&tokenize(&line)), normalized);
        }

        #[test]
        fn index_is_a_bijection(words in proptest::collection::vec("[a-e]{1,2}", 1..30), cap in 4usize..20) {
            let line = words.join(" ");
            let v = Vocabulary::from_lines([line.as_str()], cap).unwrap();
            for (i, t) in v.tokens().iter().enumerate() {
                prop_assert_eq!(v.id(t), i);
            }
            prop_assert!(v.size() <= cap.max(4));
        }
    }
}
