//! Reconstructor: rebuilds the source sentence from the decoder state
//! sequence through its own inverse attention, giving `log R(x | s)`.
//!
//! Source words are embedded with the encoder's table (`src_emb`), which is
//! the same [`ParamId`] in θ and γ. Inverse attention, recurrence and
//! readout weights are separate `rec.*` tensors.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::encoder_decoder::ModelDims;
use crate::error::{Error, Result};
use crate::graph::{kernel, Compute, Eval, Val};
use crate::nn::{gru_step, AttentionParams, GruParams};
use crate::rng::{substream, Stream};
use crate::tensor::{ParamId, ParamStore};
use crate::vocab::{BOS, EOS};

/// Reconstructor parameters γ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReconstructorParams {
    /// Shared with [`crate::encoder_decoder::ModelParams::src_emb`].
    pub src_emb: ParamId,
    pub att: AttentionParams,
    pub gru: GruParams,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub readout_w: ParamId,
    pub readout_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

const MARKER: &str = "rec.init.w";

impl ReconstructorParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        d: &ModelDims,
        src_emb: ParamId,
        rng: &mut R,
    ) -> Result<Self> {
        let (m, n) = (d.embed, d.hidden);
        let att = AttentionParams::init(store, "rec.att", n, n, n, rng)?;
        let gru = GruParams::init(store, "rec.gru", m + n, n, rng)?;
        let init_w = store.insert_uniform(MARKER, vec![n, n], rng)?;
        let init_b = store.insert_zeros("rec.init.b", vec![n])?;
        let readout_w = store.insert_uniform("rec.readout.w", vec![n, m + 2 * n], rng)?;
        let readout_b = store.insert_zeros("rec.readout.b", vec![n])?;
        let out_w = store.insert_uniform("rec.out.w", vec![d.src_vocab, n], rng)?;
        let out_b = store.insert_zeros("rec.out.b", vec![d.src_vocab])?;
        Ok(ReconstructorParams {
            src_emb,
            att,
            gru,
            init_w,
            init_b,
            readout_w,
            readout_b,
            out_w,
            out_b,
        })
    }

    /// `None` when the store holds no reconstructor (a likelihood-only model).
    pub fn lookup(store: &ParamStore, src_emb: ParamId) -> Result<Option<Self>> {
        if store.id(MARKER).is_none() {
            return Ok(None);
        }
        Ok(Some(ReconstructorParams {
            src_emb,
            att: AttentionParams::lookup(store, "rec.att")?,
            gru: GruParams::lookup(store, "rec.gru")?,
            init_w: store.require(MARKER)?,
            init_b: store.require("rec.init.b")?,
            readout_w: store.require("rec.readout.w")?,
            readout_b: store.require("rec.readout.b")?,
            out_w: store.require("rec.out.w")?,
            out_b: store.require("rec.out.b")?,
        }))
    }

    /// γ's own tensors, excluding the shared source embedding.
    pub fn own_ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        v.extend(self.att.ids());
        v.extend(self.gru.ids());
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

    pub fn readout_ids(&self) -> [ParamId; 4] {
        [self.readout_w, self.readout_b, self.out_w, self.out_b]
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructionTrace<V> {
    pub states: Vec<V>,
    pub contexts: Vec<V>,
    /// Inverse attention rows α̂_j· over the I decoder states.
    pub alphas: Vec<V>,
    pub log_probs: Vec<V>,
}

pub struct RecStep<V> {
    pub state: V,
    pub alpha: V,
    pub context: V,
    pub logits: V,
}

/// Inverse attention of one reconstructor query over the decoder states:
/// `ĉ_j = Σ_i α̂_{j,i} s_i`.
pub fn inverse_attend<C: Compute>(
    c: &mut C,
    g: &ReconstructorParams,
    prev_state: &C::V,
    keys: &[C::V],
    decoder_states: &[C::V],
) -> Result<(C::V, C::V)> {
    if decoder_states.is_empty() {
        return Err(Error::Empty("decoder state sequence"));
    }
    Ok(g.att.attend(c, prev_state, keys, decoder_states, None))
}

/// `ĥ_0 = tanh(Ŵ_init · mean(s) + b̂_init)` and the inverse-attention keys.
pub fn prepare<C: Compute>(
    c: &mut C,
    g: &ReconstructorParams,
    decoder_states: &[C::V],
) -> Result<(C::V, Vec<C::V>)> {
    if decoder_states.is_empty() {
        return Err(Error::Empty("decoder state sequence"));
    }
    let mean = c.mean(decoder_states);
    let h0 = c.linear(&[(g.init_w, &mean)], Some(g.init_b));
    let h0 = c.tanh(&h0);
    let keys = g.att.project_keys(c, decoder_states);
    Ok((h0, keys))
}

/// `ĥ_j = f_r(x_{j−1}, ĥ_{j−1}, ĉ_j)` and the logits of `g_r`.
pub fn rec_step<C: Compute>(
    c: &mut C,
    g: &ReconstructorParams,
    keys: &[C::V],
    decoder_states: &[C::V],
    x_prev: usize,
    h_prev: &C::V,
) -> Result<RecStep<C::V>> {
    let (alpha, context) = inverse_attend(c, g, h_prev, keys, decoder_states)?;
    let e = c.embed(g.src_emb, x_prev);
    let input = c.concat(&[&e, &context]);
    let state = gru_step(c, &g.gru, &input, h_prev);
    let ro = c.concat(&[&e, &state, &context]);
    let hidden = c.linear(&[(g.readout_w, &ro)], Some(g.readout_b));
    let hidden = c.tanh(&hidden);
    let logits = c.linear(&[(g.out_w, &hidden)], Some(g.out_b));
    Ok(RecStep {
        state,
        alpha,
        context,
        logits,
    })
}

/// `log R(x | s) = Σ_j log g_r(x_{j−1}, ĥ_j, ĉ_j)`, teacher-forced over the
/// gold source from `x_0 = BOS`. Depends only on `(x, s, γ)`.
pub fn reconstruction_score<C: Compute>(
    c: &mut C,
    g: &ReconstructorParams,
    source: &[usize],
    decoder_states: &[C::V],
) -> Result<(C::V, ReconstructionTrace<C::V>)> {
    if source.is_empty() {
        return Err(Error::Empty("source sequence"));
    }
    let vocab = c.store().get(g.out_w).rows();
    if let Some(&id) = source.iter().find(|&&id| id >= vocab) {
        return Err(Error::TokenOutOfRange { id, size: vocab });
    }
    let (mut h, keys) = prepare(c, g, decoder_states)?;
    let mut trace = ReconstructionTrace {
        states: Vec::with_capacity(source.len()),
        contexts: Vec::with_capacity(source.len()),
        alphas: Vec::with_capacity(source.len()),
        log_probs: Vec::with_capacity(source.len()),
    };
    let mut prev = BOS;
    for &x in source {
        let step = rec_step(c, g, &keys, decoder_states, prev, &h)?;
        let lp = c.log_softmax_at(&step.logits, x);
        h = step.state.clone();
        trace.states.push(step.state);
        trace.contexts.push(step.context);
        trace.alphas.push(step.alpha);
        trace.log_probs.push(lp);
        prev = x;
    }
    let refs: Vec<&C::V> = trace.log_probs.iter().collect();
    let all = c.concat(&refs);
    let total = c.sum(&all);
    Ok((total, trace))
}

/// Value-only `log R(x | s)`.
pub fn score(
    store: &ParamStore,
    g: &ReconstructorParams,
    source: &[usize],
    decoder_states: &[Vec<f64>],
) -> Result<f64> {
    let mut e = Eval::new(store);
    let states: Vec<Val> = decoder_states.iter().map(|s| e.input(s.clone())).collect();
    let (lr, _) = reconstruction_score(&mut e, g, source, &states)?;
    Ok(lr[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Greedy,
    Stochastic,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(SampleMode::Greedy),
            "stochastic" => Ok(SampleMode::Stochastic),
            other => Err(Error::Config(format!("unknown sampling mode `{other}`"))),
        }
    }
}

/// Generates a source sentence from decoder states, stopping after EOS or
/// `max_len` tokens. The returned sequence keeps the EOS when one was produced.
pub fn sample_reconstruction(
    store: &ParamStore,
    g: &ReconstructorParams,
    decoder_states: &[Vec<f64>],
    mode: SampleMode,
    seed: u64,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut e = Eval::new(store);
    let states: Vec<Val> = decoder_states.iter().map(|s| e.input(s.clone())).collect();
    let (mut h, keys) = prepare(&mut e, g, &states)?;
    let mut rng = substream(seed, Stream::Sampling, 0);
    let mut out = Vec::new();
    let mut prev = BOS;
    while out.len() < max_len {
        let step = rec_step(&mut e, g, &keys, &states, prev, &h)?;
        let next = match mode {
            SampleMode::Greedy => argmax(&step.logits),
            SampleMode::Stochastic => {
                let probs = kernel::masked_softmax(&step.logits, None);
                WeightedIndex::new(&probs)
                    .map_err(|_| Error::NonFiniteLogits)?
                    .sample(&mut rng)
            }
        };
        out.push(next);
        if next == EOS {
            break;
        }
        h = step.state;
        prev = next;
    }
    Ok(out)
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder_decoder::ModelParams;
    use crate::tensor::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (ParamStore, ModelParams, ReconstructorParams) {
        let mut store = ParamStore::new(Precision::F64);
        let d = ModelDims {
            src_vocab: 10,
            tgt_vocab: 8,
            embed: 3,
            hidden: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = ModelParams::init(&mut store, &d, &mut rng).unwrap();
        let g = ReconstructorParams::init(&mut store, &d, p.src_emb, &mut rng).unwrap();
        (store, p, g)
    }

    fn states(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..4).map(|k| ((i * 4 + k) as f64 * 0.37).sin()).collect())
            .collect()
    }

    #[test]
    fn single_state_gets_all_weight() {
        let (store, _, g) = toy();
        let mut e = Eval::new(&store);
        let s: Vec<Val> = states(1).into_iter().map(|v| e.input(v)).collect();
        let (h0, keys) = prepare(&mut e, &g, &s).unwrap();
        let (alpha, ctx) = inverse_attend(&mut e, &g, &h0, &keys, &s).unwrap();
        assert_eq!(&alpha[..], &[1.0]);
        assert_eq!(&ctx[..], &s[0][..]);
    }

    #[test]
    fn identical_states_get_uniform_weights() {
        let (store, _, g) = toy();
        let mut e = Eval::new(&store);
        let one = e.input(states(1).remove(0));
        let s = vec![one; 3];
        let (h0, keys) = prepare(&mut e, &g, &s).unwrap();
        let (alpha, _) = inverse_attend(&mut e, &g, &h0, &keys, &s).unwrap();
        for a in alpha.iter() {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_inputs_are_errors() {
        let (store, _, g) = toy();
        assert!(score(&store, &g, &[4, EOS], &[]).is_err());
        assert!(score(&store, &g, &[], &states(2)).is_err());
        assert!(score(&store, &g, &[42], &states(2)).is_err());
    }

    #[test]
    fn uniform_readout_gives_uniform_score() {
        let (mut store, _, g) = toy();
        for id in [g.out_w, g.out_b] {
            store.get_mut(id).values_mut().fill(0.0);
        }
        let lr = score(&store, &g, &[4, 5, 6, EOS], &states(3)).unwrap();
        assert!((lr - 4.0 * (0.1f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let (store, _, g) = toy();
        let s = states(3);
        let a = sample_reconstruction(&store, &g, &s, SampleMode::Greedy, 0, 6).unwrap();
        let b = sample_reconstruction(&store, &g, &s, SampleMode::Greedy, 9, 6).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
        let one = sample_reconstruction(&store, &g, &s, SampleMode::Stochastic, 4, 1).unwrap();
        assert_eq!(one.len(), 1);
        let x = sample_reconstruction(&store, &g, &s, SampleMode::Stochastic, 4, 8).unwrap();
        let y = sample_reconstruction(&store, &g, &s, SampleMode::Stochastic, 4, 8).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn lookup_finds_or_reports_absence() {
        let (store, p, g) = toy();
        assert_eq!(ReconstructorParams::lookup(&store, p.src_emb).unwrap(), Some(g));
        let mut bare = ParamStore::new(Precision::F64);
        let d = p.dims(&store);
        let p2 = ModelParams::init(&mut bare, &d, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ReconstructorParams::lookup(&bare, p2.src_emb).unwrap(), None);
    }
}
