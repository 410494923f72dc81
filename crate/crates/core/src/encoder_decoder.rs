//! Attention-based encoder-decoder: bidirectional GRU encoder, additive
//! attention, conditional-GRU decoder fed with the last emitted word, and a
//! single-layer tanh readout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Compute;
use crate::nn::{gru_step, AttentionParams, GruParams};
use crate::tensor::{ParamId, ParamStore};
use crate::vocab::BOS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub fn annotation(&self) -> usize {
        2 * self.hidden
    }

    /// Width of the readout input `[emb(y_prev) ‖ s_i ‖ c_i]`.
    pub fn readout_input(&self) -> usize {
        self.embed + self.hidden + self.annotation()
    }
}

/// Encoder-decoder parameters θ. `src_emb` is also read by the reconstructor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelParams {
    pub src_emb: ParamId,
    pub tgt_emb: ParamId,
    pub enc_fwd: GruParams,
    pub enc_bwd: GruParams,
    pub att: AttentionParams,
    pub dec_pre: GruParams,
    pub dec: GruParams,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub readout_w: ParamId,
    pub readout_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

pub const SRC_EMBEDDING: &str = "src_emb";

impl ModelParams {
    pub fn init<R: Rng>(store: &mut ParamStore, d: &ModelDims, rng: &mut R) -> Result<Self> {
        let (m, n) = (d.embed, d.hidden);
        let src_emb = store.insert_uniform(SRC_EMBEDDING, vec![d.src_vocab, m], rng)?;
        let tgt_emb = store.insert_uniform("tgt_emb", vec![d.tgt_vocab, m], rng)?;
        let enc_fwd = GruParams::init(store, "enc.fwd", m, n, rng)?;
        let enc_bwd = GruParams::init(store, "enc.bwd", m, n, rng)?;
        let att = AttentionParams::init(store, "dec.att", n, 2 * n, n, rng)?;
        let dec_pre = GruParams::init(store, "dec.pre", m, n, rng)?;
        let dec = GruParams::init(store, "dec.gru", m + 2 * n, n, rng)?;
        let init_w = store.insert_uniform("dec.init.w", vec![n, n], rng)?;
        let init_b = store.insert_zeros("dec.init.b", vec![n])?;
        let readout_w = store.insert_uniform("dec.readout.w", vec![n, d.readout_input()], rng)?;
        let readout_b = store.insert_zeros("dec.readout.b", vec![n])?;
        let out_w = store.insert_uniform("dec.out.w", vec![d.tgt_vocab, n], rng)?;
        let out_b = store.insert_zeros("dec.out.b", vec![d.tgt_vocab])?;
        Ok(ModelParams {
            src_emb,
            tgt_emb,
            enc_fwd,
            enc_bwd,
            att,
            dec_pre,
            dec,
            init_w,
            init_b,
            readout_w,
            readout_b,
            out_w,
            out_b,
        })
    }

    pub fn lookup(store: &ParamStore) -> Result<Self> {
        Ok(ModelParams {
            src_emb: store.require(SRC_EMBEDDING)?,
            tgt_emb: store.require("tgt_emb")?,
            enc_fwd: GruParams::lookup(store, "enc.fwd")?,
            enc_bwd: GruParams::lookup(store, "enc.bwd")?,
            att: AttentionParams::lookup(store, "dec.att")?,
            dec_pre: GruParams::lookup(store, "dec.pre")?,
            dec: GruParams::lookup(store, "dec.gru")?,
            init_w: store.require("dec.init.w")?,
            init_b: store.require("dec.init.b")?,
            readout_w: store.require("dec.readout.w")?,
            readout_b: store.require("dec.readout.b")?,
            out_w: store.require("dec.out.w")?,
            out_b: store.require("dec.out.b")?,
        })
    }

    pub fn dims(&self, store: &ParamStore) -> ModelDims {
        ModelDims {
            src_vocab: store.get(self.src_emb).rows(),
            tgt_vocab: store.get(self.tgt_emb).rows(),
            embed: store.get(self.src_emb).cols(),
            hidden: store.get(self.init_w).rows(),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.src_emb, self.tgt_emb];
        v.extend(self.enc_fwd.ids());
        v.extend(self.enc_bwd.ids());
        v.extend(self.att.ids());
        v.extend(self.dec_pre.ids());
        v.extend(self.dec.ids());
        v.extend([
            self.init_w,
            self.init_b,
            self.readout_w,
            self.readout_b,
            self.out_w,
            self.out_b,
        ]);
        v
    }

    /// Readout parameters: the tensors that set the output distribution's shape.
    pub fn readout_ids(&self) -> [ParamId; 4] {
        [self.readout_w, self.readout_b, self.out_w, self.out_b]
    }
}

/// Encoder output for one (possibly padded) source row.
#[derive(Clone, Debug)]
pub struct EncodedSource<V> {
    /// `h_j = [→h_j ‖ ←h_j]`; zero vectors at masked positions.
    pub annotations: Vec<V>,
    /// Attention key projections `U_a·h_j`, computed once per sentence.
    pub keys: Vec<V>,
    pub mask: Vec<bool>,
    /// Final state of the backward encoder (its state at position 1).
    pub backward_final: V,
}

impl<V> EncodedSource<V> {
    /// Unpadded length J.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_ids(ids: &[usize], size: usize) -> Result<()> {
    match ids.iter().find(|&&id| id >= size) {
        Some(&id) => Err(Error::TokenOutOfRange { id, size }),
        None => Ok(()),
    }
}

/// Encodes `tokens[..len]`; positions at or beyond `len` are treated as padding.
pub fn encode_padded<C: Compute>(
    c: &mut C,
    p: &ModelParams,
    tokens: &[usize],
    len: usize,
) -> Result<EncodedSource<C::V>> {
    if len == 0 || len > tokens.len() {
        return Err(Error::Empty("source sequence"));
    }
    let vocab = c.store().get(p.src_emb).rows();
    check_ids(&tokens[..len], vocab)?;
    let n = p.enc_fwd.hidden_dim(c.store());

    let embs: Vec<C::V> = tokens[..len].iter().map(|&t| c.embed(p.src_emb, t)).collect();
    let mut fwd = Vec::with_capacity(len);
    let mut h = c.input(vec![0.0; n]);
    for e in &embs {
        h = gru_step(c, &p.enc_fwd, e, &h);
        fwd.push(h.clone());
    }
    let mut bwd = vec![None; len];
    let mut h = c.input(vec![0.0; n]);
    for j in (0..len).rev() {
        h = gru_step(c, &p.enc_bwd, &embs[j], &h);
        bwd[j] = Some(h.clone());
    }
    let bwd: Vec<C::V> = bwd.into_iter().map(|b| b.expect("filled")).collect();

    let mut annotations: Vec<C::V> = fwd
        .iter()
        .zip(&bwd)
        .map(|(f, b)| c.concat(&[f, b]))
        .collect();
    if tokens.len() > len {
        let zero = c.input(vec![0.0; 2 * n]);
        annotations.resize(tokens.len(), zero);
    }
    let keys = p.att.project_keys(c, &annotations);
    let mask = (0..tokens.len()).map(|j| j < len).collect();
    Ok(EncodedSource {
        annotations,
        keys,
        mask,
        backward_final: bwd[0].clone(),
    })
}

pub fn encode<C: Compute>(
    c: &mut C,
    p: &ModelParams,
    source: &[usize],
) -> Result<EncodedSource<C::V>> {
    encode_padded(c, p, source, source.len())
}

/// `s_0 = tanh(W_init · ←h_1 + b_init)`.
pub fn initial_state<C: Compute>(c: &mut C, p: &ModelParams, enc: &EncodedSource<C::V>) -> C::V {
    let pre = c.linear(&[(p.init_w, &enc.backward_final)], Some(p.init_b));
    c.tanh(&pre)
}

/// Attention weights over the source and the context vector for one query.
pub fn attend<C: Compute>(
    c: &mut C,
    p: &ModelParams,
    query: &C::V,
    enc: &EncodedSource<C::V>,
) -> (C::V, C::V) {
    p.att
        .attend(c, query, &enc.keys, &enc.annotations, Some(&enc.mask))
}

/// One decoder step.
#[derive(Clone, Debug)]
pub struct DecoderStep<V> {
    pub state: V,
    pub alpha: V,
    pub context: V,
    pub logits: V,
}

/// Inverted-dropout mask over `len` units.
pub fn dropout_mask<R: Rng>(rate: f64, len: usize, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect()
}

pub fn decode_step<C: Compute>(
    c: &mut C,
    p: &ModelParams,
    enc: &EncodedSource<C::V>,
    y_prev: usize,
    s_prev: &C::V,
    dropout: Option<Vec<f64>>,
) -> DecoderStep<C::V> {
    let e = c.embed(p.tgt_emb, y_prev);
    // The last emitted word drives a pre-state that queries the attention.
    let pre = gru_step(c, &p.dec_pre, &e, s_prev);
    let (alpha, context) = attend(c, p, &pre, enc);
    let input = c.concat(&[&e, &context]);
    let state = gru_step(c, &p.dec, &input, &pre);
    let mut ro = c.concat(&[&e, &state, &context]);
    if let Some(mask) = dropout {
        ro = c.mask_mul(&ro, mask);
    }
    let hidden = c.linear(&[(p.readout_w, &ro)], Some(p.readout_b));
    let hidden = c.tanh(&hidden);
    let logits = c.linear(&[(p.out_w, &hidden)], Some(p.out_b));
    DecoderStep {
        state,
        alpha,
        context,
        logits,
    }
}

/// Teacher-forced decoder trace.
#[derive(Clone, Debug)]
pub struct DecoderTrace<V> {
    pub states: Vec<V>,
    pub contexts: Vec<V>,
    /// Attention rows α_i· (I × padded J).
    pub alphas: Vec<V>,
    /// Per-step `log P(y_i | y_<i, x)` as scalars.
    pub log_probs: Vec<V>,
}

/// Dropout configuration for a teacher-forced pass.
pub struct Dropout<'r, R> {
    pub rate: f64,
    pub rng: &'r mut R,
}

/// `log P(y | x) = Σ_i log P(y_i | y_<i, x)`, teacher-forced from BOS.
pub fn log_likelihood<C: Compute, R: Rng>(
    c: &mut C,
    p: &ModelParams,
    enc: &EncodedSource<C::V>,
    target: &[usize],
    mut dropout: Option<Dropout<'_, R>>,
) -> Result<(C::V, DecoderTrace<C::V>)> {
    if target.is_empty() {
        return Err(Error::Empty("target sequence"));
    }
    let vocab = c.store().get(p.tgt_emb).rows();
    check_ids(target, vocab)?;
    let ro_width = c.store().get(p.readout_w).cols();
    let mut s = initial_state(c, p, enc);
    let mut prev = BOS;
    let mut trace = DecoderTrace {
        states: Vec::with_capacity(target.len()),
        contexts: Vec::with_capacity(target.len()),
        alphas: Vec::with_capacity(target.len()),
        log_probs: Vec::with_capacity(target.len()),
    };
    for &y in target {
        let mask = dropout
            .as_mut()
            .filter(|d| d.rate > 0.0)
            .map(|d| dropout_mask(d.rate, ro_width, d.rng));
        let step = decode_step(c, p, enc, prev, &s, mask);
        let lp = c.log_softmax_at(&step.logits, y);
        s = step.state.clone();
        trace.states.push(step.state);
        trace.contexts.push(step.context);
        trace.alphas.push(step.alpha);
        trace.log_probs.push(lp);
        prev = y;
    }
    let refs: Vec<&C::V> = trace.log_probs.iter().collect();
    let all = c.concat(&refs);
    let total = c.sum(&all);
    Ok((total, trace))
}
