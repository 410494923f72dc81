//! Corpus-level quality measurements: reconstruction BLEU, oracle BLEU over
//! k-best lists, length buckets, attention coverage and correlation.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::beam;
use crate::bleu::{self, id_tokens, sentence_stats, BleuReport, NgramStats, MAX_N};
use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::reconstructor::{sample_reconstruction, SampleMode};
use crate::rerank::{self, DecodeOptions};

pub const TAU_UNDER: f64 = 0.2;
pub const TAU_OVER: f64 = 1.8;

/// Greedy translations of every source sentence (EOS kept when produced).
pub fn greedy_translations(model: &Model, sources: &[Vec<usize>], max_len_factor: f64) -> Result<Vec<beam::Hypothesis>> {
    sources
        .par_iter()
        .map(|s| beam::greedy_decode(model, s, max_len_factor))
        .collect()
}

/// BLEU of greedy translations against the corpus targets.
pub fn translation_bleu(model: &Model, corpus: &ParallelCorpus, max_len_factor: f64) -> Result<BleuReport> {
    let sources: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| p.source.clone()).collect();
    let hyps = greedy_translations(model, &sources, max_len_factor)?;
    let cands: Vec<Vec<usize>> = hyps.into_iter().map(|h| h.tokens).collect();
    let refs: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| p.target.clone()).collect();
    bleu::bleu_ids(&cands, &refs)
}

/// Translates each source greedily, regenerates the source from the
/// resulting decoder states, and scores the regenerations against the
/// original sources.
pub fn reconstruction_bleu(
    model: &Model,
    corpus: &ParallelCorpus,
    mode: SampleMode,
    seed: u64,
    max_len_factor: f64,
) -> Result<BleuReport> {
    let g = model.require_gamma()?;
    let recs: Vec<Vec<usize>> = corpus
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let h = beam::greedy_decode(model, &p.source, max_len_factor)?;
            let max_len = beam::max_output_len(p.source.len(), max_len_factor);
            sample_reconstruction(&model.store, g, &h.states, mode, seed ^ i as u64, max_len)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| p.source.clone()).collect();
    bleu::bleu_ids(&recs, &refs)
}

fn corpus_bleu_of(stats: &[Vec<NgramStats>], choice: &[usize]) -> (NgramStats, f64) {
    let mut total = NgramStats::default();
    for (s, &c) in stats.iter().zip(choice) {
        total.add(&s[c]);
    }
    let b = total.bleu(MAX_N);
    (total, b)
}

const ASCENT_PASSES: usize = 8;

/// Oracle BLEU for each depth in `depths`, using the first `d` entries of
/// every list.
///
/// Per depth, the selection starts from the better of (a) the candidate
/// with the highest smoothed sentence BLEU in each list and (b) the
/// previous depth's selection, then improves corpus BLEU by coordinate
/// ascent. Depths are visited in increasing order, so results are
/// monotone in depth.
pub fn oracle_bleu_at<S: AsRef<str> + Sync, T: AsRef<str> + Sync>(
    kbest: &[Vec<Vec<S>>],
    references: &[Vec<T>],
    depths: &[usize],
) -> Result<Vec<BleuReport>> {
    if kbest.is_empty() || kbest.iter().any(|l| l.is_empty()) {
        return Err(Error::Empty("k-best list"));
    }
    if kbest.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} k-best lists but {} references",
            kbest.len(),
            references.len()
        )));
    }
    if depths.contains(&0) {
        return Err(Error::InvalidArgument("oracle depth must be at least 1".into()));
    }
    let stats: Vec<Vec<NgramStats>> = kbest
        .par_iter()
        .zip(references)
        .map(|(list, r)| list.iter().map(|c| sentence_stats(c, r)).collect())
        .collect();
    let sentence: Vec<Vec<f64>> = stats
        .iter()
        .map(|l| l.iter().map(|s| s.smoothed_bleu(MAX_N)).collect())
        .collect();
    let deepest = depths.iter().copied().max().unwrap_or(1);
    let mut want: Vec<usize> = depths.to_vec();
    want.sort_unstable();
    want.dedup();

    let mut choice = vec![0usize; kbest.len()];
    let mut by_depth = Vec::new();
    for d in 1..=deepest {
        let greedy: Vec<usize> = sentence
            .iter()
            .map(|l| {
                let lim = d.min(l.len());
                let mut best = 0;
                for i in 1..lim {
                    if l[i] > l[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        let (_, prev_b) = corpus_bleu_of(&stats, &choice);
        let (_, greedy_b) = corpus_bleu_of(&stats, &greedy);
        if greedy_b > prev_b {
            choice = greedy;
        }
        let (mut total, mut current) = corpus_bleu_of(&stats, &choice);
        for _ in 0..ASCENT_PASSES {
            let mut changed = false;
            for (s, list) in stats.iter().enumerate() {
                let lim = d.min(list.len());
                for i in 0..lim {
                    if i == choice[s] {
                        continue;
                    }
                    let mut t = total;
                    t.sub(&list[choice[s]]);
                    t.add(&list[i]);
                    let b = t.bleu(MAX_N);
                    if b > current {
                        current = b;
                        total = t;
                        choice[s] = i;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if want.binary_search(&d).is_ok() {
            by_depth.push((d, total.report(MAX_N)));
        }
    }
    Ok(depths
        .iter()
        .map(|d| by_depth.iter().find(|(k, _)| k == d).expect("visited").1.clone())
        .collect())
}

/// Oracle BLEU over full k-best lists.
pub fn oracle_bleu<S: AsRef<str> + Sync, T: AsRef<str> + Sync>(
    kbest: &[Vec<Vec<S>>],
    references: &[Vec<T>],
) -> Result<BleuReport> {
    let k = kbest.iter().map(Vec::len).max().unwrap_or(1);
    Ok(oracle_bleu_at(kbest, references, &[k])?.remove(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthBucket {
    /// Inclusive source-length range (tokens, EOS excluded).
    pub low: usize,
    pub high: usize,
    pub sentences: usize,
    pub bleu: BleuReport,
    pub mean_len: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthReport {
    pub buckets: Vec<LengthBucket>,
    /// Total candidate length over total reference length.
    pub length_ratio: f64,
    pub mean_candidate_len: f64,
}

impl LengthReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bucket_low,bucket_high,bleu,mean_len\n");
        for b in &self.buckets {
            let _ = writeln!(s, "{},{},{},{}", b.low, b.high, b.bleu.bleu, b.mean_len);
        }
        s
    }
}

/// Groups sentences by source length into buckets `[w·q, w·q + w − 1]`.
pub fn length_bucket_report<S: AsRef<str>, T: AsRef<str>>(
    candidates: &[Vec<S>],
    source_lengths: &[usize],
    references: &[Vec<T>],
    bucket_width: usize,
) -> Result<LengthReport> {
    if bucket_width < 1 {
        return Err(Error::InvalidArgument("bucket width must be at least 1".into()));
    }
    if candidates.len() != source_lengths.len() || candidates.len() != references.len() {
        return Err(Error::InvalidArgument("candidate, source and reference counts differ".into()));
    }
    let global = bleu::bleu(candidates, references, MAX_N)?;
    let mut keys: Vec<usize> = source_lengths.iter().map(|l| l / bucket_width).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut buckets = Vec::new();
    for q in keys {
        let idx: Vec<usize> = (0..candidates.len())
            .filter(|&i| source_lengths[i] / bucket_width == q)
            .collect();
        let c: Vec<Vec<&str>> = idx
            .iter()
            .map(|&i| candidates[i].iter().map(AsRef::as_ref).collect())
            .collect();
        let r: Vec<Vec<&str>> = idx
            .iter()
            .map(|&i| references[i].iter().map(AsRef::as_ref).collect())
            .collect();
        let mean_len = c.iter().map(Vec::len).sum::<usize>() as f64 / c.len() as f64;
        buckets.push(LengthBucket {
            low: q * bucket_width,
            high: q * bucket_width + bucket_width - 1,
            sentences: idx.len(),
            bleu: bleu::bleu(&c, &r, MAX_N)?,
            mean_len,
        });
    }
    Ok(LengthReport {
        buckets,
        length_ratio: global.length_ratio(),
        mean_candidate_len: global.candidate_len as f64 / candidates.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceAdequacy {
    /// Σ_i α_ij per source position j.
    pub coverage: Vec<f64>,
    pub under: f64,
    pub over: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdequacyReport {
    pub sentences: Vec<SentenceAdequacy>,
    /// Flagged positions over all source positions in the corpus.
    pub under: f64,
    pub over: f64,
}

/// Flags source positions whose total attention mass falls below
/// `tau_under` or above `tau_over`. Each entry of `alphas` is one
/// sentence's attention matrix, a row per output step.
pub fn adequacy_diagnostics(alphas: &[Vec<Vec<f64>>], tau_under: f64, tau_over: f64) -> Result<AdequacyReport> {
    let mut sentences = Vec::with_capacity(alphas.len());
    let (mut n_under, mut n_over, mut n_pos) = (0usize, 0usize, 0usize);
    for (s, rows) in alphas.iter().enumerate() {
        let width = rows.first().map_or(0, Vec::len);
        if width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidArgument(format!(
                "sentence {}: attention matrix is empty or ragged",
                s + 1
            )));
        }
        let mut coverage = vec![0.0; width];
        for r in rows {
            for (c, a) in coverage.iter_mut().zip(r) {
                *c += a;
            }
        }
        let u = coverage.iter().filter(|&&c| c < tau_under).count();
        let o = coverage.iter().filter(|&&c| c > tau_over).count();
        n_under += u;
        n_over += o;
        n_pos += width;
        sentences.push(SentenceAdequacy {
            under: u as f64 / width as f64,
            over: o as f64 / width as f64,
            coverage,
        });
    }
    let frac = |n: usize| if n_pos == 0 { 0.0 } else { n as f64 / n_pos as f64 };
    Ok(AdequacyReport {
        sentences,
        under: frac(n_under),
        over: frac(n_over),
    })
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument(
            "pearson needs two equal-length series of at least 2 values".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("pearson: zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    /// BLEU of the final (reranked) 1-best at the configured beam.
    pub bleu: BleuReport,
    /// `(k, oracle BLEU over the first k phase-1 candidates)`.
    pub oracle: Vec<(usize, BleuReport)>,
    pub lengths: LengthReport,
    pub adequacy: AdequacyReport,
    /// Final 1-best token ids per sentence.
    pub outputs: Vec<Vec<usize>>,
}

impl EvaluationReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tk\tvalue\n");
        let _ = writeln!(s, "bleu\t1\t{}", self.bleu.bleu);
        for (k, r) in &self.oracle {
            let _ = writeln!(s, "oracle_bleu\t{k}\t{}", r.bleu);
        }
        let _ = writeln!(s, "length_ratio\t1\t{}", self.lengths.length_ratio);
        let _ = writeln!(s, "mean_len\t1\t{}", self.lengths.mean_candidate_len);
        let _ = writeln!(s, "under_translation\t1\t{}", self.adequacy.under);
        let _ = writeln!(s, "over_translation\t1\t{}", self.adequacy.over);
        s
    }
}

pub const ORACLE_DEPTHS: [usize; 3] = [1, 10, 100];

/// Decodes and reranks every source with `opts`, then reports 1-best BLEU,
/// oracle BLEU at each of `depths` (from one phase-1 list of the deepest
/// width), length buckets and attention coverage.
pub fn evaluate(
    model: &Model,
    corpus: &ParallelCorpus,
    opts: &DecodeOptions,
    depths: &[usize],
    bucket_width: usize,
) -> Result<EvaluationReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let sources: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| p.source.clone()).collect();
    let finals = rerank::translate_all(model, &sources, opts)?;
    let outputs: Vec<Vec<usize>> = finals.iter().map(|c| c[0].hypothesis.tokens.clone()).collect();
    let alphas: Vec<Vec<Vec<f64>>> = finals.iter().map(|c| c[0].hypothesis.alpha_rows.clone()).collect();
    let refs: Vec<Vec<String>> = corpus.pairs.iter().map(|p| id_tokens(&p.target)).collect();
    let cands: Vec<Vec<String>> = outputs.iter().map(|o| id_tokens(o)).collect();

    let deepest = depths.iter().copied().max().unwrap_or(1);
    let lists: Vec<Vec<Vec<String>>> = sources
        .par_iter()
        .map(|s| {
            let k = beam::beam_search(model, s, deepest, opts.max_len_factor)?;
            Ok(k.iter().map(|h| id_tokens(&h.tokens)).collect())
        })
        .collect::<Result<_>>()?;
    let oracle = oracle_bleu_at(&lists, &refs, depths)?;
    let src_lens: Vec<usize> = sources.iter().map(|s| id_tokens(s).len()).collect();
    Ok(EvaluationReport {
        bleu: bleu::bleu(&cands, &refs, MAX_N)?,
        oracle: depths.iter().copied().zip(oracle).collect(),
        lengths: length_bucket_report(&cands, &src_lens, &refs, bucket_width)?,
        adequacy: adequacy_diagnostics(&alphas, TAU_UNDER, TAU_OVER)?,
        outputs,
    })
}
