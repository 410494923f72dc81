//! Case-insensitive 4-gram BLEU with clipped n-gram counts.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::vocab::{BOS, EOS, PAD};

pub const MAX_N: usize = 4;

/// Clipped n-gram matches and totals for one or more sentences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NgramStats {
    pub matches: [usize; MAX_N],
    pub totals: [usize; MAX_N],
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl NgramStats {
    pub fn add(&mut self, o: &NgramStats) {
        for n in 0..MAX_N {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.candidate_len += o.candidate_len;
        self.reference_len += o.reference_len;
    }

    pub fn sub(&mut self, o: &NgramStats) {
        for n in 0..MAX_N {
            self.matches[n] -= o.matches[n];
            self.totals[n] -= o.totals[n];
        }
        self.candidate_len -= o.candidate_len;
        self.reference_len -= o.reference_len;
    }

    pub fn brevity_penalty(&self) -> f64 {
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        if c >= r {
            1.0
        } else if c == 0.0 {
            0.0
        } else {
            (1.0 - r / c).exp()
        }
    }

    /// Unsmoothed corpus BLEU over the first `max_n` orders.
    pub fn bleu(&self, max_n: usize) -> f64 {
        let mut log_sum = 0.0;
        for n in 0..max_n {
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        self.brevity_penalty() * (log_sum / max_n as f64).exp()
    }

    /// Sentence BLEU with add-one smoothing on precisions for n ≥ 2.
    pub fn smoothed_bleu(&self, max_n: usize) -> f64 {
        if self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = (self.matches[0] as f64 / self.totals[0] as f64).ln();
        for n in 1..max_n {
            log_sum += ((self.matches[n] + 1) as f64 / (self.totals[n] + 1) as f64).ln();
        }
        self.brevity_penalty() * (log_sum / max_n as f64).exp()
    }

    pub fn report(&self, max_n: usize) -> BleuReport {
        BleuReport {
            bleu: self.bleu(max_n),
            precisions: (0..max_n)
                .map(|n| {
                    if self.totals[n] == 0 {
                        0.0
                    } else {
                        self.matches[n] as f64 / self.totals[n] as f64
                    }
                })
                .collect(),
            brevity_penalty: self.brevity_penalty(),
            candidate_len: self.candidate_len,
            reference_len: self.reference_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// In [0, 1].
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuReport {
    /// Candidate-to-reference length ratio.
    pub fn length_ratio(&self) -> f64 {
        if self.reference_len == 0 {
            0.0
        } else {
            self.candidate_len as f64 / self.reference_len as f64
        }
    }
}

fn fold<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens.iter().map(|t| t.as_ref().to_lowercase()).collect()
}

fn counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped statistics of one candidate against one reference (case-folded).
pub fn sentence_stats<S: AsRef<str>, T: AsRef<str>>(candidate: &[S], reference: &[T]) -> NgramStats {
    let cand = fold(candidate);
    let refr = fold(reference);
    let mut s = NgramStats {
        candidate_len: cand.len(),
        reference_len: refr.len(),
        ..Default::default()
    };
    for n in 1..=MAX_N {
        let rc = counts(&refr, n);
        let cc = counts(&cand, n);
        s.totals[n - 1] = cand.len().saturating_sub(n - 1);
        s.matches[n - 1] = cc
            .iter()
            .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
    }
    s
}

/// Corpus BLEU of `candidates` against single `references`.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if !(1..=MAX_N).contains(&max_n) {
        return Err(Error::InvalidArgument(format!("max_n must be in 1..={MAX_N}")));
    }
    let mut total = NgramStats::default();
    for (c, r) in candidates.iter().zip(references) {
        total.add(&sentence_stats(c, r));
    }
    Ok(total.report(max_n))
}

/// Id sequence as BLEU tokens, dropping PAD, BOS and EOS.
pub fn id_tokens(ids: &[usize]) -> Vec<String> {
    ids.iter()
        .filter(|&&t| t != PAD && t != BOS && t != EOS)
        .map(|t| t.to_string())
        .collect()
}

/// Corpus BLEU over id sequences (special symbols removed).
pub fn bleu_ids(candidates: &[Vec<usize>], references: &[Vec<usize>]) -> Result<BleuReport> {
    let c: Vec<Vec<String>> = candidates.iter().map(|s| id_tokens(s)).collect();
    let r: Vec<Vec<String>> = references.iter().map(|s| id_tokens(s)).collect();
    bleu(&c, &r, MAX_N)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_corpus_scores_one() {
        let c = vec![words("a b c d e"), words("x y z w")];
        let r = bleu(&c, &c, 4).unwrap();
        assert_eq!(r.bleu, 1.0);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        let c = vec![words("the the the the the the the")];
        let r = vec![words("the cat is on the mat")];
        let rep = bleu(&c, &r, 4).unwrap();
        assert!((rep.precisions[0] - 2.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn no_four_gram_match_is_zero() {
        let c = vec![words("a b c x d e f")];
        let r = vec![words("a b c y d e f")];
        let rep = bleu(&c, &r, 4).unwrap();
        assert_eq!(rep.precisions[3], 0.0);
        assert_eq!(rep.bleu, 0.0);
    }

    #[test]
    fn case_is_folded() {
        let c = vec![words("The Cat sat on a mat")];
        let r = vec![words("the cat SAT on a mat")];
        assert_eq!(bleu(&c, &r, 4).unwrap().bleu, 1.0);
    }

    #[test]
    fn brevity_penalty_for_short_output() {
        // 4 of 6 tokens, all n-grams matching: BLEU = exp(1 − 6/4)
        let c = vec![words("a b c d")];
        let r = vec![words("a b c d e f")];
        let rep = bleu(&c, &r, 4).unwrap();
        assert!((rep.bleu - (1.0f64 - 1.5).exp()).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let empty: Vec<Vec<&str>> = vec![];
        assert!(bleu(&empty, &empty, 4).is_err());
        assert!(bleu(&[words("a")], &[words("a"), words("b")], 4).is_err());
    }

    #[test]
    fn smoothed_sentence_bleu() {
        let s = sentence_stats(&words("a b"), &words("a b"));
        assert_eq!(s.smoothed_bleu(4), 1.0);
        let s = sentence_stats(&words("a c"), &words("a b"));
        // p1 = 1/2, p2 = (0+1)/(1+1), p3 = p4 = 1/1
        assert!((s.smoothed_bleu(4) - (0.25f64).powf(0.25)).abs() < 1e-15);
        assert_eq!(sentence_stats(&words("z"), &words("a b")).smoothed_bleu(4), 0.0);
    }

    #[test]
    fn ids_drop_special_symbols() {
        assert_eq!(id_tokens(&[1, 5, 6, 2, 0]), vec!["5", "6"]);
    }

    proptest! {
        #[test]
        fn bounded_and_order_invariant(
            sents in prop::collection::vec(
                (prop::collection::vec(0u8..6, 1..8), prop::collection::vec(0u8..6, 1..8)), 1..6)
        ) {
            let c: Vec<Vec<String>> = sents.iter().map(|(a, _)| a.iter().map(|x| x.to_string()).collect()).collect();
            let r: Vec<Vec<String>> = sents.iter().map(|(_, b)| b.iter().map(|x| x.to_string()).collect()).collect();
            let rep = bleu(&c, &r, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&rep.bleu));
            prop_assert!(rep.brevity_penalty <= 1.0);
            let (mut c2, mut r2) = (c.clone(), r.clone());
            c2.reverse();
            r2.reverse();
            prop_assert_eq!(bleu(&c2, &r2, 4).unwrap().bleu, rep.bleu);
        }
    }
}
