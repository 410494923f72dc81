//! Second decoding phase: rescoring k-best candidates with the reconstructor.

use std::io::Write;

use rayon::prelude::*;

use crate::beam::{self, Hypothesis};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::reconstructor::{self as rec, ReconstructorParams};
use crate::tensor::ParamStore;
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq)]
pub struct RerankedCandidate {
    pub hypothesis: Hypothesis,
    /// `log R(x | s)`; NaN when no reconstructor was consulted.
    pub log_rec: f64,
    pub score: f64,
    /// 1-based.
    pub rank_phase1: usize,
    pub rank_final: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RerankOptions {
    pub lambda: f64,
    pub normalize_lik: bool,
    pub normalize_rec: bool,
}

impl Default for RerankOptions {
    fn default() -> Self {
        RerankOptions {
            lambda: 1.0,
            normalize_lik: false,
            normalize_rec: false,
        }
    }
}

/// `log_lik / length`.
pub fn normalize_likelihood(log_lik: f64, length: usize) -> Result<f64> {
    if length == 0 {
        return Err(Error::InvalidArgument("cannot normalize by zero length".into()));
    }
    Ok(log_lik / length as f64)
}

/// Interpolated score of one candidate.
pub fn interpolate(log_lik: f64, out_len: usize, log_rec: f64, src_len: usize, o: &RerankOptions) -> Result<f64> {
    let lik = if o.normalize_lik {
        normalize_likelihood(log_lik, out_len)?
    } else {
        log_lik
    };
    if o.lambda == 0.0 {
        return Ok(lik);
    }
    let r = if o.normalize_rec {
        normalize_likelihood(log_rec, src_len)?
    } else {
        log_rec
    };
    Ok(lik + o.lambda * r)
}

/// Rescores candidates in phase-1 order. With λ = 0 the reconstructor is
/// not consulted and `gamma` may be `None`.
pub fn rerank(
    candidates: Vec<Hypothesis>,
    source: &[usize],
    store: &ParamStore,
    gamma: Option<&ReconstructorParams>,
    o: &RerankOptions,
) -> Result<Vec<RerankedCandidate>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    if o.lambda < 0.0 {
        return Err(Error::InvalidArgument("lambda must be nonnegative".into()));
    }
    let gamma = match (o.lambda > 0.0, gamma) {
        (true, None) => return Err(Error::MissingReconstructor),
        (true, g) => g,
        (false, _) => None,
    };
    let mut out = Vec::with_capacity(candidates.len());
    for (i, h) in candidates.into_iter().enumerate() {
        if h.states.is_empty() || h.states.len() != h.tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "candidate {} has {} states for {} tokens",
                i + 1,
                h.states.len(),
                h.tokens.len()
            )));
        }
        let log_rec = match gamma {
            Some(g) => rec::score(store, g, source, &h.states)?,
            None => f64::NAN,
        };
        let score = interpolate(h.log_lik, h.tokens.len(), log_rec, source.len(), o)?;
        out.push(RerankedCandidate {
            hypothesis: h,
            log_rec,
            score,
            rank_phase1: i + 1,
            rank_final: 0,
        });
    }
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.rank_phase1.cmp(&b.rank_phase1))
    });
    for (i, c) in out.iter_mut().enumerate() {
        c.rank_final = i + 1;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    pub max_len_factor: f64,
    pub rerank: RerankOptions,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam: 10,
            max_len_factor: 2.0,
            rerank: RerankOptions::default(),
        }
    }
}

/// Beam search followed by reranking for one source sentence.
pub fn translate(model: &Model, source: &[usize], o: &DecodeOptions) -> Result<Vec<RerankedCandidate>> {
    let kbest = beam::beam_search(model, source, o.beam, o.max_len_factor)?;
    rerank(kbest, source, &model.store, model.gamma.as_ref(), &o.rerank)
}

/// [`translate`] over many sentences in parallel; output order follows input order.
pub fn translate_all(model: &Model, sources: &[Vec<usize>], o: &DecodeOptions) -> Result<Vec<Vec<RerankedCandidate>>> {
    if o.rerank.lambda > 0.0 {
        model.require_gamma()?;
    }
    sources.par_iter().map(|s| translate(model, s, o)).collect()
}

pub const KBEST_HEADER: &str = "sent_id\trank_final\trank_phase1\tlog_lik\tlog_rec\tscore\ttokens";

/// One k-best TSV row per candidate, in final rank order.
pub fn write_kbest<W: Write>(
    w: &mut W,
    sent_id: usize,
    candidates: &[RerankedCandidate],
    vocab: &Vocabulary,
) -> std::io::Result<()> {
    for c in candidates {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            sent_id,
            c.rank_final,
            c.rank_phase1,
            c.hypothesis.log_lik,
            c.log_rec,
            c.score,
            vocab.decode_line(&c.hypothesis.tokens)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder_decoder::ModelDims;
    use crate::tensor::Precision;

    fn hyp(tokens: Vec<usize>, log_lik: f64) -> Hypothesis {
        let n = tokens.len();
        Hypothesis {
            tokens,
            log_lik,
            states: vec![vec![0.1; 3]; n],
            alpha_rows: vec![vec![1.0]; n],
            complete: true,
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_likelihood(-10.0, 5).unwrap(), -2.0);
        assert_eq!(normalize_likelihood(0.0, 3).unwrap(), 0.0);
        assert!(normalize_likelihood(1.0, 0).is_err());
        // (−10, 10) vs (−6, 4): raw prefers the second, normalized the first
        assert!(normalize_likelihood(-10.0, 10).unwrap() > normalize_likelihood(-6.0, 4).unwrap());
    }

    #[test]
    fn lambda_zero_is_identity_without_reconstructor() {
        let store = ParamStore::new(Precision::F64);
        let c = vec![hyp(vec![4, 2], -1.0), hyp(vec![5, 2], -1.0), hyp(vec![2], -3.0)];
        let o = RerankOptions {
            lambda: 0.0,
            ..Default::default()
        };
        let r = rerank(c, &[4, 2], &store, None, &o).unwrap();
        let order: Vec<usize> = r.iter().map(|c| c.rank_phase1).collect();
        assert_eq!(order, vec![1, 2, 3]);
        assert!(r.iter().all(|c| c.log_rec.is_nan() && c.score == c.hypothesis.log_lik));
    }

    #[test]
    fn single_candidate_ranks_first() {
        let store = ParamStore::new(Precision::F64);
        let o = RerankOptions {
            lambda: 0.0,
            normalize_lik: true,
            ..Default::default()
        };
        let r = rerank(vec![hyp(vec![2], -7.0)], &[4, 2], &store, None, &o).unwrap();
        assert_eq!(r[0].rank_final, 1);
    }

    #[test]
    fn missing_states_or_reconstructor_are_errors() {
        let store = ParamStore::new(Precision::F64);
        let mut h = hyp(vec![4, 2], -1.0);
        h.states.clear();
        let o0 = RerankOptions {
            lambda: 0.0,
            ..Default::default()
        };
        assert!(rerank(vec![h], &[4, 2], &store, None, &o0).is_err());
        let o1 = RerankOptions::default();
        assert!(matches!(
            rerank(vec![hyp(vec![2], -1.0)], &[4, 2], &store, None, &o1),
            Err(Error::MissingReconstructor)
        ));
    }

    #[test]
    fn reconstruction_flips_a_short_candidate() {
        let dims = ModelDims {
            src_vocab: 10,
            tgt_vocab: 10,
            embed: 4,
            hidden: 6,
        };
        let mut m = Model::new(dims, Precision::F64, 4).unwrap();
        let g = m.attach_reconstructor(4).unwrap();
        let source = vec![4, 5, 6, 7, 2];
        let mut short = hyp(vec![2], 0.0);
        short.states = vec![vec![0.0; 6]];
        let mut long = hyp(vec![4, 5, 6, 7, 2], 0.0);
        long.states = (0..5).map(|i| vec![0.3 * i as f64; 6]).collect();
        let lr_short = rec::score(&m.store, &g, &source, &short.states).unwrap();
        let lr_long = rec::score(&m.store, &g, &source, &long.states).unwrap();
        assert_ne!(lr_short, lr_long);
        // Phase 1 prefers the candidate the reconstructor likes less, by half the
        // reconstruction gap.
        let gap = (lr_long - lr_short).abs();
        let (mut first, mut second) = if lr_long > lr_short { (short, long) } else { (long, short) };
        first.log_lik = -1.0;
        second.log_lik = -1.0 - gap / 2.0;
        let o0 = RerankOptions {
            lambda: 0.0,
            ..Default::default()
        };
        let r0 = rerank(vec![first.clone(), second.clone()], &source, &m.store, Some(&g), &o0).unwrap();
        assert_eq!(r0[0].rank_phase1, 1);
        let r1 = rerank(vec![first, second], &source, &m.store, Some(&g), &RerankOptions::default()).unwrap();
        assert_eq!(r1[0].rank_phase1, 2);
        for c in &r1 {
            assert!((c.score - (c.hypothesis.log_lik + c.log_rec)).abs() < 1e-12);
        }
    }
}
