//! Neural building blocks on top of [`Compute`]: GRU cells, additive attention,
//! and the plain-vector softmax.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{kernel, Compute, Eval};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Numerically stable softmax of a plain vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    if logits.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFiniteLogits);
    }
    Ok(kernel::masked_softmax(logits, None))
}

/// Numerically stable log-softmax of a plain vector.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    if logits.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFiniteLogits);
    }
    Ok(kernel::log_softmax(logits))
}

/// Gate weights of a gated recurrent unit.
///
/// `z = σ(W_z·in + U_z·prev + b_z)`, `r = σ(W_r·in + U_r·prev + b_r)`,
/// `h̃ = tanh(W_h·in + U_h·(r⊙prev) + b_h)`, `new = (1−z)⊙prev + z⊙h̃`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = |g: &str, store: &mut ParamStore, rng: &mut R| {
            store.insert_uniform(format!("{prefix}.w_{g}"), vec![hidden, input], rng)
        };
        let w_z = w("z", store, rng)?;
        let w_r = w("r", store, rng)?;
        let w_h = w("h", store, rng)?;
        let u_z = store.insert_uniform(format!("{prefix}.u_z"), vec![hidden, hidden], rng)?;
        let u_r = store.insert_uniform(format!("{prefix}.u_r"), vec![hidden, hidden], rng)?;
        let u_h = store.insert_uniform(format!("{prefix}.u_h"), vec![hidden, hidden], rng)?;
        let b_z = store.insert_zeros(format!("{prefix}.b_z"), vec![hidden])?;
        let b_r = store.insert_zeros(format!("{prefix}.b_r"), vec![hidden])?;
        let b_h = store.insert_zeros(format!("{prefix}.b_h"), vec![hidden])?;
        Ok(GruParams {
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let id = |n: &str| store.require(&format!("{prefix}.{n}"));
        Ok(GruParams {
            w_z: id("w_z")?,
            u_z: id("u_z")?,
            b_z: id("b_z")?,
            w_r: id("w_r")?,
            u_r: id("u_r")?,
            b_r: id("b_r")?,
            w_h: id("w_h")?,
            u_h: id("u_h")?,
            b_h: id("b_h")?,
        })
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h,
            self.b_h,
        ]
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w_z).cols()
    }

    pub fn hidden_dim(&self, store: &ParamStore) -> usize {
        store.get(self.u_z).rows()
    }
}

pub fn gru_step<C: Compute>(c: &mut C, p: &GruParams, input: &C::V, prev: &C::V) -> C::V {
    let z = c.linear(&[(p.w_z, input), (p.u_z, prev)], Some(p.b_z));
    let z = c.sigmoid(&z);
    let r = c.linear(&[(p.w_r, input), (p.u_r, prev)], Some(p.b_r));
    let r = c.sigmoid(&r);
    let gated = c.mul(&r, prev);
    let cand = c.linear(&[(p.w_h, input), (p.u_h, &gated)], Some(p.b_h));
    let cand = c.tanh(&cand);
    // (1 − z)⊙prev + z⊙cand = prev + z⊙(cand − prev)
    let delta = c.sub(&cand, prev);
    let step = c.mul(&z, &delta);
    c.add(prev, &step)
}

/// One GRU step on plain tensors, with shape checking.
pub fn gru_cell(store: &ParamStore, p: &GruParams, input: &Tensor, prev: &Tensor) -> Result<Tensor> {
    let (in_dim, hid) = (p.input_dim(store), p.hidden_dim(store));
    if input.len() != in_dim || prev.len() != hid {
        return Err(Error::ShapeMismatch {
            context: "gru_cell input/state".into(),
            expected: vec![in_dim, hid],
            found: vec![input.len(), prev.len()],
        });
    }
    let mut e = Eval::new(store);
    let x = e.input(input.values().to_vec());
    let h = e.input(prev.values().to_vec());
    let out = gru_step(&mut e, p, &x, &h);
    Ok(Tensor::vector(out.to_vec()))
}

/// Additive attention scorer: `e_j = vᵀ tanh(W·query + U·key_j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub v: ParamId,
}

impl AttentionParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        query: usize,
        key: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AttentionParams {
            w_query: store.insert_uniform(format!("{prefix}.w_query"), vec![hidden, query], rng)?,
            w_key: store.insert_uniform(format!("{prefix}.w_key"), vec![hidden, key], rng)?,
            v: store.insert_uniform(format!("{prefix}.v"), vec![1, hidden], rng)?,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(AttentionParams {
            w_query: store.require(&format!("{prefix}.w_query"))?,
            w_key: store.require(&format!("{prefix}.w_key"))?,
            v: store.require(&format!("{prefix}.v"))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.w_query, self.w_key, self.v]
    }

    /// Projects every memory item once; reused across query steps.
    pub fn project_keys<C: Compute>(&self, c: &mut C, memory: &[C::V]) -> Vec<C::V> {
        memory
            .iter()
            .map(|m| c.linear(&[(self.w_key, m)], None))
            .collect()
    }

    /// Attention weights over `memory` and the weighted context vector.
    pub fn attend<C: Compute>(
        &self,
        c: &mut C,
        query: &C::V,
        keys: &[C::V],
        memory: &[C::V],
        mask: Option<&[bool]>,
    ) -> (C::V, C::V) {
        let q = c.linear(&[(self.w_query, query)], None);
        let scores: Vec<C::V> = keys
            .iter()
            .map(|k| {
                let pre = c.add(&q, k);
                let act = c.tanh(&pre);
                c.linear(&[(self.v, &act)], None)
            })
            .collect();
        let refs: Vec<&C::V> = scores.iter().collect();
        let logits = c.concat(&refs);
        let weights = c.masked_softmax(&logits, mask);
        let context = c.weighted_sum(&weights, memory);
        (weights, context)
    }
}
