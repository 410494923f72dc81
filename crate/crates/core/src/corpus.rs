//! Parallel corpora and padded mini-batches.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::vocab::{Vocabulary, EOS, PAD};

/// A source/target pair of id sequences, each terminated with EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
}

fn check_sequence(seq: &[usize], vocab_size: usize) -> Result<()> {
    if seq.len() < 2 {
        return Err(Error::Empty("sequence"));
    }
    if seq.last() != Some(&EOS) {
        return Err(Error::Data("sequence does not end with EOS".into()));
    }
    if let Some(&id) = seq.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            size: vocab_size,
        });
    }
    Ok(())
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Encodes parallel lines. Pairs whose source or target exceeds
    /// `max_len` tokens (EOS excluded) are dropped; empty lines are errors.
    pub fn from_lines<S: AsRef<str>>(
        src: &[S],
        tgt: &[S],
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::Data(format!(
                "parallel files differ in length: {} source vs {} target lines",
                src.len(),
                tgt.len()
            )));
        }
        let mut pairs = Vec::with_capacity(src.len());
        for (n, (s, t)) in src.iter().zip(tgt).enumerate() {
            let (s, t) = (s.as_ref(), t.as_ref());
            if s.trim().is_empty() || t.trim().is_empty() {
                return Err(Error::Data(format!("empty sentence on line {}", n + 1)));
            }
            let source = src_vocab.encode(s);
            let target = tgt_vocab.encode(t);
            if source.len() - 1 > max_len || target.len() - 1 > max_len {
                continue;
            }
            pairs.push(SentencePair { source, target });
        }
        Ok(ParallelCorpus { pairs })
    }

    pub fn load(
        src_path: &Path,
        tgt_path: &Path,
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Self> {
        let src = read_lines(src_path)?;
        let tgt = read_lines(tgt_path)?;
        Self::from_lines(&src, &tgt, src_vocab, tgt_vocab, max_len)
    }

    pub fn validate(&self, src_vocab: usize, tgt_vocab: usize) -> Result<()> {
        for p in &self.pairs {
            check_sequence(&p.source, src_vocab)?;
            check_sequence(&p.target, tgt_vocab)?;
        }
        Ok(())
    }

    pub fn source_tokens(&self) -> usize {
        self.pairs.iter().map(|p| p.source.len()).sum()
    }

    pub fn target_tokens(&self) -> usize {
        self.pairs.iter().map(|p| p.target.len()).sum()
    }

    pub fn split_at(&self, n: usize) -> (ParallelCorpus, ParallelCorpus) {
        let n = n.min(self.pairs.len());
        (
            ParallelCorpus {
                pairs: self.pairs[..n].to_vec(),
            },
            ParallelCorpus {
                pairs: self.pairs[n..].to_vec(),
            },
        )
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Padded mini-batch. Row `b` of each matrix holds one sentence; positions
/// at or beyond the row's length are PAD and masked out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub source: Vec<Vec<usize>>,
    pub source_lengths: Vec<usize>,
    pub source_mask: Vec<Vec<bool>>,
    pub target: Vec<Vec<usize>>,
    pub target_lengths: Vec<usize>,
    pub target_mask: Vec<Vec<bool>>,
}

fn pad(rows: &[&[usize]]) -> (Vec<Vec<usize>>, Vec<usize>, Vec<Vec<bool>>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut m = Vec::with_capacity(rows.len());
    let mut lens = Vec::with_capacity(rows.len());
    let mut mask = Vec::with_capacity(rows.len());
    for r in rows {
        let mut row = r.to_vec();
        row.resize(width, PAD);
        m.push(row);
        lens.push(r.len());
        mask.push((0..width).map(|i| i < r.len()).collect());
    }
    (m, lens, mask)
}

impl Batch {
    pub fn from_pairs(pairs: &[&SentencePair]) -> Self {
        let src: Vec<&[usize]> = pairs.iter().map(|p| p.source.as_slice()).collect();
        let tgt: Vec<&[usize]> = pairs.iter().map(|p| p.target.as_slice()).collect();
        let (source, source_lengths, source_mask) = pad(&src);
        let (target, target_lengths, target_mask) = pad(&tgt);
        Batch {
            source,
            source_lengths,
            source_mask,
            target,
            target_lengths,
            target_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Unpadded target tokens (EOS included).
    pub fn target_tokens(&self) -> usize {
        self.target_lengths.iter().sum()
    }

    pub fn source_tokens(&self) -> usize {
        self.source_lengths.iter().sum()
    }

    pub fn target_row(&self, b: usize) -> &[usize] {
        &self.target[b][..self.target_lengths[b]]
    }

    pub fn source_row(&self, b: usize) -> &[usize] {
        &self.source[b][..self.source_lengths[b]]
    }
}

/// Shuffles pair order with `shuffle_seed`, cuts consecutive chunks of
/// `batch_size`, and sorts each chunk by descending source length.
pub fn make_batches(
    corpus: &ParallelCorpus,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut substream(shuffle_seed, Stream::Shuffle, 0));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let mut pairs: Vec<&SentencePair> = chunk.iter().map(|&i| &corpus.pairs[i]).collect();
            pairs.sort_by_key(|p| std::cmp::Reverse(p.source.len()));
            Batch::from_pairs(&pairs)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: usize) -> ParallelCorpus {
        ParallelCorpus {
            pairs: (0..n)
                .map(|i| SentencePair {
                    source: (0..=(i % 4)).map(|k| 4 + k).chain([EOS]).collect(),
                    target: (0..=(i % 3)).map(|k| 5 + k).chain([EOS]).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn batch_sizes() {
        let b = make_batches(&corpus(5), 2, 1).unwrap();
        assert_eq!(b.iter().map(Batch::len).collect::<Vec<_>>(), [2, 2, 1]);
        assert!(make_batches(&corpus(5), 0, 1).is_err());
        assert!(make_batches(&ParallelCorpus::default(), 2, 1).is_err());
    }

    #[test]
    fn deterministic_and_complete() {
        let c = corpus(37);
        let a = make_batches(&c, 4, 9).unwrap();
        assert_eq!(a, make_batches(&c, 4, 9).unwrap());
        assert_ne!(a, make_batches(&c, 4, 10).unwrap());
        let src: usize = a.iter().map(Batch::source_tokens).sum();
        let tgt: usize = a.iter().map(Batch::target_tokens).sum();
        assert_eq!(src, c.source_tokens());
        assert_eq!(tgt, c.target_tokens());
        let mut seen: Vec<Vec<usize>> = a
            .iter()
            .flat_map(|b| (0..b.len()).map(move |r| b.source_row(r).to_vec()))
            .collect();
        let mut all: Vec<Vec<usize>> = c.pairs.iter().map(|p| p.source.clone()).collect();
        seen.sort();
        all.sort();
        assert_eq!(seen, all);
        for b in &a {
            assert!(b.source_lengths.windows(2).all(|w| w[0] >= w[1]));
            for r in 0..b.len() {
                for (i, &m) in b.source_mask[r].iter().enumerate() {
                    assert_eq!(m, i < b.source_lengths[r]);
                    if !m {
                        assert_eq!(b.source[r][i], PAD);
                    }
                }
            }
        }
    }

    #[test]
    fn from_lines_filters_and_reports() {
        let v = Vocabulary::from_lines(["a b c"], 10).unwrap();
        let c = ParallelCorpus::from_lines(&["a b", "a b c a"], &["c", "b"], &v, &v, 3).unwrap();
        assert_eq!(c.len(), 1);
        c.validate(v.size(), v.size()).unwrap();
        let err = ParallelCorpus::from_lines(&["a", " "], &["b", "c"], &v, &v, 3).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(ParallelCorpus::from_lines(&["a"], &["b", "c"], &v, &v, 3).is_err());
    }
}
