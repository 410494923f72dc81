//! Synthetic parallel tasks for desk-scale experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// target = source
    Copy,
    /// target = reversed source
    Reverse,
    /// target = source mapped through a fixed bijection onto a disjoint symbol set
    LexSub,
    /// `LexSub`, plus a 1–4 symbol target-only suffix on 30% of pairs
    LengthVar,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "lexsub" => Ok(Task::LexSub),
            "lengthvar" => Ok(Task::LengthVar),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

pub const SUFFIX_RATE: f64 = 0.3;
pub const FUNCTION_SYMBOLS: [&str; 4] = ["f1", "f2", "f3", "f4"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticData {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

/// The fixed source→target symbol bijection used by `LexSub`/`LengthVar`.
pub fn lexsub_bijection(vocab_size: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..vocab_size).collect();
    perm.shuffle(&mut substream(seed, Stream::Data, 1));
    perm.into_iter().map(|p| vocab_size + p).collect()
}

pub fn gen_synthetic(
    task: Task,
    n_pairs: usize,
    vocab_size: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<SyntheticData> {
    let (lo, hi) = len_range;
    if vocab_size < 5 {
        return Err(Error::InvalidArgument("vocab_size must be at least 5".into()));
    }
    if lo < 1 || hi < lo {
        return Err(Error::InvalidArgument(format!(
            "invalid length range ({lo}, {hi})"
        )));
    }
    let bijection = lexsub_bijection(vocab_size, seed);
    let mut rng = substream(seed, Stream::Data, 0);
    let mut source = Vec::with_capacity(n_pairs);
    let mut target = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = rng.gen_range(lo as u32..=hi as u32) as usize;
        let src: Vec<usize> = (0..len)
            .map(|_| rng.gen_range(0..vocab_size as u32) as usize)
            .collect();
        let mut tgt: Vec<String> = match task {
            Task::Copy => src.iter().map(usize::to_string).collect(),
            Task::Reverse => src.iter().rev().map(usize::to_string).collect(),
            Task::LexSub | Task::LengthVar => {
                src.iter().map(|&s| bijection[s].to_string()).collect()
            }
        };
        if task == Task::LengthVar && rng.gen_bool(SUFFIX_RATE) {
            let extra = rng.gen_range(1..=4u32);
            for _ in 0..extra {
                let f = rng.gen_range(0..FUNCTION_SYMBOLS.len() as u32) as usize;
                tgt.push(FUNCTION_SYMBOLS[f].to_string());
            }
        }
        source.push(
            src.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(" "),
        );
        target.push(tgt.join(" "));
    }
    Ok(SyntheticData { source, target })
}

impl SyntheticData {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Writes `<stem>.src` and `<stem>.tgt` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let src = dir.join(format!("{stem}.src"));
        let tgt = dir.join(format!("{stem}.tgt"));
        for (path, lines) in [(&src, &self.source), (&tgt, &self.target)] {
            let mut text = lines.join("\n");
            text.push('\n');
            fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok((src, tgt))
    }

    pub fn vocabularies(&self, max_size: usize) -> Result<(Vocabulary, Vocabulary)> {
        Ok((
            Vocabulary::from_lines(self.source.iter().map(String::as_str), max_size)?,
            Vocabulary::from_lines(self.target.iter().map(String::as_str), max_size)?,
        ))
    }

    pub fn corpus(
        &self,
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<ParallelCorpus> {
        ParallelCorpus::from_lines(&self.source, &self.target, src_vocab, tgt_vocab, max_len)
    }

    pub fn split_at(&self, n: usize) -> (SyntheticData, SyntheticData) {
        let n = n.min(self.len());
        (
            SyntheticData {
                source: self.source[..n].to_vec(),
                target: self.target[..n].to_vec(),
            },
            SyntheticData {
                source: self.source[n..].to_vec(),
                target: self.target[n..].to_vec(),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_and_reverse() {
        let d = gen_synthetic(Task::Copy, 50, 10, (1, 6), 1).unwrap();
        assert_eq!(d.source, d.target);
        let r = gen_synthetic(Task::Reverse, 50, 10, (1, 6), 1).unwrap();
        assert_eq!(r.source, d.source);
        for (s, t) in r.source.iter().zip(&r.target) {
            let rev: Vec<&str> = s.split(' ').rev().collect();
            assert_eq!(rev.join(" "), *t);
        }
    }

    #[test]
    fn lexsub_is_a_fixed_bijection() {
        let a = gen_synthetic(Task::LexSub, 200, 20, (1, 8), 42).unwrap();
        let b = gen_synthetic(Task::LexSub, 200, 20, (1, 8), 42).unwrap();
        assert_eq!(a, b);
        let map = lexsub_bijection(20, 42);
        assert_eq!(map, lexsub_bijection(20, 42));
        let mut sorted = map.clone();
        sorted.sort();
        assert_eq!(sorted, (20..40).collect::<Vec<_>>());
        for (s, t) in a.source.iter().zip(&a.target) {
            let mapped: Vec<String> = s
                .split(' ')
                .map(|x| map[x.parse::<usize>().unwrap()].to_string())
                .collect();
            assert_eq!(mapped.join(" "), *t);
        }
    }

    #[test]
    fn lengthvar_appends_suffixes_to_some_pairs() {
        let d = gen_synthetic(Task::LengthVar, 2000, 20, (1, 8), 3).unwrap();
        let with = d
            .target
            .iter()
            .filter(|t| t.split(' ').any(|x| x.starts_with('f')))
            .count();
        let rate = with as f64 / 2000.0;
        assert!((rate - 0.3).abs() < 0.04, "{rate}");
        for (s, t) in d.source.iter().zip(&d.target) {
            let extra = t.split(' ').count() - s.split(' ').count();
            assert!(extra <= 4);
        }
    }

    #[test]
    fn invalid_arguments() {
        assert!(gen_synthetic(Task::Copy, 5, 4, (1, 3), 0).is_err());
        assert!(gen_synthetic(Task::Copy, 5, 10, (0, 3), 0).is_err());
        assert!(gen_synthetic(Task::Copy, 5, 10, (4, 3), 0).is_err());
    }
}
