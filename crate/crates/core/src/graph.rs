//! Reverse-mode automatic differentiation.
//!
//! Model code is written once against the [`Compute`] trait and runs on two
//! backends: [`Tape`] records every primitive so [`Tape::backward`] can replay
//! it in reverse, and [`Eval`] only computes values (decoding, scoring).
//! Both backends share the kernels in [`kernel`], so a teacher-forced pass on
//! a tape and a beam-search pass through `Eval` produce identical numbers.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Precision};

/// Numeric kernels shared by both backends.
pub mod kernel {
    use crate::tensor::{ParamId, ParamStore};

    #[inline]
    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// `out = bias + Σ W_k x_k`.
    pub fn linear(
        store: &ParamStore,
        terms: &[(ParamId, &[f64])],
        bias: Option<ParamId>,
        rows: usize,
    ) -> Vec<f64> {
        let mut out = match bias {
            Some(b) => store.get(b).values().to_vec(),
            None => vec![0.0; rows],
        };
        for &(w, x) in terms {
            let w = store.get(w);
            let cols = w.cols();
            debug_assert_eq!(cols, x.len(), "linear: {} vs {}", cols, x.len());
            let wv = w.values();
            for (r, o) in out.iter_mut().enumerate() {
                *o += dot(&wv[r * cols..(r + 1) * cols], x);
            }
        }
        out
    }

    /// Softmax restricted to unmasked positions; masked positions get exactly 0.
    pub fn masked_softmax(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
        let on = |i: usize| mask.is_none_or(|m| m[i]);
        let max = logits
            .iter()
            .enumerate()
            .filter(|(i, _)| on(*i))
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, &x)| if on(i) { (x - max).exp() } else { 0.0 })
            .collect();
        let total: f64 = out.iter().sum();
        for o in &mut out {
            *o /= total;
        }
        out
    }

    pub fn log_sum_exp(logits: &[f64]) -> f64 {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
    }

    pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
        let lse = log_sum_exp(logits);
        logits.iter().map(|&x| x - lse).collect()
    }
}

/// Primitive operations a model is built from.
pub trait Compute {
    type V: Clone;

    fn store(&self) -> &ParamStore;

    fn precision(&self) -> Precision {
        self.store().precision()
    }

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a [f64];

    fn input(&mut self, values: Vec<f64>) -> Self::V;
    /// A parameter tensor as a flat vector.
    fn param(&mut self, id: ParamId) -> Self::V;
    /// `bias + Σ W_k x_k` over parameter matrices.
    fn linear(&mut self, terms: &[(ParamId, &Self::V)], bias: Option<ParamId>) -> Self::V;
    /// One row of an embedding table.
    fn embed(&mut self, table: ParamId, row: usize) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, factor: f64) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn concat(&mut self, parts: &[&Self::V]) -> Self::V;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    fn dot(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn masked_softmax(&mut self, logits: &Self::V, mask: Option<&[bool]>) -> Self::V;
    /// `Σ_j weights[j] · items[j]`.
    fn weighted_sum(&mut self, weights: &Self::V, items: &[Self::V]) -> Self::V;
    fn mean(&mut self, items: &[Self::V]) -> Self::V;
    /// `log softmax(logits)[index]`, computed stably.
    fn log_softmax_at(&mut self, logits: &Self::V, index: usize) -> Self::V;
    /// Elementwise product with a constant mask (dropout).
    fn mask_mul(&mut self, a: &Self::V, mask: Vec<f64>) -> Self::V;
}

// ---------------------------------------------------------------------------
// Eval

/// Value-only backend.
pub struct Eval<'s> {
    store: &'s ParamStore,
}

pub type Val = Arc<[f64]>;

impl<'s> Eval<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Eval { store }
    }

    fn out(&self, mut v: Vec<f64>) -> Val {
        self.store.precision().round_all(&mut v);
        v.into()
    }

    fn map(&self, a: &Val, f: impl Fn(f64) -> f64) -> Val {
        self.out(a.iter().map(|&x| f(x)).collect())
    }

    fn zip(&self, a: &Val, b: &Val, f: impl Fn(f64, f64) -> f64) -> Val {
        debug_assert_eq!(a.len(), b.len());
        self.out(a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect())
    }
}

impl Compute for Eval<'_> {
    type V = Val;

    fn store(&self) -> &ParamStore {
        self.store
    }

    fn value<'a>(&'a self, v: &'a Val) -> &'a [f64] {
        v
    }

    fn input(&mut self, values: Vec<f64>) -> Val {
        self.out(values)
    }

    fn param(&mut self, id: ParamId) -> Val {
        self.store.get(id).values().into()
    }

    fn linear(&mut self, terms: &[(ParamId, &Val)], bias: Option<ParamId>) -> Val {
        let rows = self.store.get(terms[0].0).rows();
        let xs: Vec<(ParamId, &[f64])> = terms.iter().map(|(w, x)| (*w, &x[..])).collect();
        self.out(kernel::linear(self.store, &xs, bias, rows))
    }

    fn embed(&mut self, table: ParamId, row: usize) -> Val {
        self.store.get(table).row(row).into()
    }

    fn add(&mut self, a: &Val, b: &Val) -> Val {
        self.zip(a, b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Val, b: &Val) -> Val {
        self.zip(a, b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Val, b: &Val) -> Val {
        self.zip(a, b, |x, y| x * y)
    }

    fn scale(&mut self, a: &Val, factor: f64) -> Val {
        self.map(a, |x| x * factor)
    }

    fn sigmoid(&mut self, a: &Val) -> Val {
        self.map(a, kernel::sigmoid)
    }

    fn tanh(&mut self, a: &Val) -> Val {
        self.map(a, f64::tanh)
    }

    fn concat(&mut self, parts: &[&Val]) -> Val {
        let mut v = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            v.extend_from_slice(p);
        }
        v.into()
    }

    fn sum(&mut self, a: &Val) -> Val {
        self.out(vec![a.iter().sum()])
    }

    fn dot(&mut self, a: &Val, b: &Val) -> Val {
        self.out(vec![kernel::dot(a, b)])
    }

    fn masked_softmax(&mut self, logits: &Val, mask: Option<&[bool]>) -> Val {
        self.out(kernel::masked_softmax(logits, mask))
    }

    fn weighted_sum(&mut self, weights: &Val, items: &[Val]) -> Val {
        let mut out = vec![0.0; items[0].len()];
        for (w, item) in weights.iter().zip(items) {
            if *w != 0.0 {
                for (o, x) in out.iter_mut().zip(item.iter()) {
                    *o += w * x;
                }
            }
        }
        self.out(out)
    }

    fn mean(&mut self, items: &[Val]) -> Val {
        let mut out = vec![0.0; items[0].len()];
        for item in items {
            for (o, x) in out.iter_mut().zip(item.iter()) {
                *o += x;
            }
        }
        let n = items.len() as f64;
        self.out(out.into_iter().map(|x| x / n).collect())
    }

    fn log_softmax_at(&mut self, logits: &Val, index: usize) -> Val {
        self.out(vec![logits[index] - kernel::log_sum_exp(logits)])
    }

    fn mask_mul(&mut self, a: &Val, mask: Vec<f64>) -> Val {
        self.out(a.iter().zip(&mask).map(|(x, m)| x * m).collect())
    }
}

// ---------------------------------------------------------------------------
// Tape

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    fn i(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        terms: Vec<(ParamId, usize)>,
        bias: Option<ParamId>,
    },
    Embed {
        table: ParamId,
        row: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Concat(Vec<usize>),
    Sum(usize),
    Dot(usize, usize),
    Softmax(usize),
    WeightedSum {
        weights: usize,
        items: Vec<usize>,
    },
    Mean(Vec<usize>),
    LogSoftmaxAt {
        logits: usize,
        index: usize,
        probs: Vec<f64>,
    },
    MaskMul(usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Ordered record of primitive applications over a borrowed [`ParamStore`].
pub struct Tape<'s> {
    id: u32,
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_cache: Vec<Option<u32>>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            store,
            nodes: Vec::new(),
            param_cache: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, mut value: Vec<f64>) -> Var {
        self.store.precision().round_all(&mut value);
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { op, value });
        Var { tape: self.id, idx }
    }

    fn v(&self, var: Var) -> &[f64] {
        debug_assert_eq!(var.tape, self.id, "variable from another tape");
        &self.nodes[var.i()].value
    }

    /// Replays the tape in reverse from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.i() >= self.nodes.len() {
            return Err(Error::NotDifferentiable(
                "loss was not recorded on this tape".into(),
            ));
        }
        if self.nodes[loss.i()].value.len() != 1 {
            return Err(Error::NotDifferentiable(format!(
                "loss must be a scalar, has {} elements",
                self.nodes[loss.i()].value.len()
            )));
        }
        let store = self.store;
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut params: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        grads[loss.i()] = Some(vec![1.0]);

        fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
            slot.get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.i()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let pg = acc(&mut params[id.0], g.len());
                    for (p, x) in pg.iter_mut().zip(&g) {
                        *p += x;
                    }
                }
                Op::Linear { terms, bias } => {
                    if let Some(b) = bias {
                        let pg = acc(&mut params[b.0], g.len());
                        for (p, x) in pg.iter_mut().zip(&g) {
                            *p += x;
                        }
                    }
                    for &(w, x) in terms {
                        let wt = store.get(w);
                        let cols = wt.cols();
                        let wv = wt.values();
                        let xv = &nodes[x].value;
                        {
                            let pg = acc(&mut params[w.0], wv.len());
                            for (r, &gr) in g.iter().enumerate() {
                                if gr != 0.0 {
                                    let row = &mut pg[r * cols..(r + 1) * cols];
                                    for (p, &xc) in row.iter_mut().zip(xv) {
                                        *p += gr * xc;
                                    }
                                }
                            }
                        }
                        let xg = acc(&mut grads[x], cols);
                        for (r, &gr) in g.iter().enumerate() {
                            if gr != 0.0 {
                                let row = &wv[r * cols..(r + 1) * cols];
                                for (q, &wrc) in xg.iter_mut().zip(row) {
                                    *q += gr * wrc;
                                }
                            }
                        }
                    }
                }
                Op::Embed { table, row } => {
                    let t = store.get(*table);
                    let cols = t.cols();
                    let pg = acc(&mut params[table.0], t.len());
                    for (p, x) in pg[row * cols..(row + 1) * cols].iter_mut().zip(&g) {
                        *p += x;
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads[*a], g.len()), &g, 1.0);
                    add_into(acc(&mut grads[*b], g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads[*a], g.len()), &g, 1.0);
                    add_into(acc(&mut grads[*b], g.len()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    {
                        let ga = acc(&mut grads[*a], g.len());
                        for ((q, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                            *q += gi * bi;
                        }
                    }
                    let gb = acc(&mut grads[*b], g.len());
                    for ((q, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                        *q += gi * ai;
                    }
                }
                Op::Scale(a, f) => add_into(acc(&mut grads[*a], g.len()), &g, *f),
                Op::Sigmoid(a) => {
                    let ga = acc(&mut grads[*a], g.len());
                    for ((q, gi), y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *q += gi * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut grads[*a], g.len());
                    for ((q, gi), y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *q += gi * (1.0 - y * y);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p].value.len();
                        add_into(acc(&mut grads[p], n), &g[off..off + n], 1.0);
                        off += n;
                    }
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.len();
                    for q in acc(&mut grads[*a], n).iter_mut() {
                        *q += g[0];
                    }
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if a == b {
                        add_into(acc(&mut grads[*a], av.len()), av, 2.0 * g[0]);
                    } else {
                        add_into(acc(&mut grads[*a], bv.len()), bv, g[0]);
                        add_into(acc(&mut grads[*b], av.len()), av, g[0]);
                    }
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let inner = kernel::dot(p, &g);
                    let ga = acc(&mut grads[*a], p.len());
                    for ((q, pi), gi) in ga.iter_mut().zip(p).zip(&g) {
                        *q += pi * (gi - inner);
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let wv = &nodes[*weights].value;
                    let mut gw = vec![0.0; wv.len()];
                    for (j, &item) in items.iter().enumerate() {
                        gw[j] = kernel::dot(&nodes[item].value, &g);
                        if wv[j] != 0.0 {
                            add_into(acc(&mut grads[item], g.len()), &g, wv[j]);
                        }
                    }
                    add_into(acc(&mut grads[*weights], wv.len()), &gw, 1.0);
                }
                Op::Mean(items) => {
                    let f = 1.0 / items.len() as f64;
                    for &item in items {
                        add_into(acc(&mut grads[item], g.len()), &g, f);
                    }
                }
                Op::LogSoftmaxAt {
                    logits,
                    index,
                    probs,
                } => {
                    let ga = acc(&mut grads[*logits], probs.len());
                    for (k, (q, p)) in ga.iter_mut().zip(probs).enumerate() {
                        let onehot = if k == *index { 1.0 } else { 0.0 };
                        *q += g[0] * (onehot - p);
                    }
                }
                Op::MaskMul(a, mask) => {
                    let ga = acc(&mut grads[*a], g.len());
                    for ((q, gi), m) in ga.iter_mut().zip(&g).zip(mask) {
                        *q += gi * m;
                    }
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            tape: self.id,
            params: ParamGrads(params),
            nodes: grads,
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

impl Compute for Tape<'_> {
    type V = Var;

    fn store(&self) -> &ParamStore {
        self.store
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a [f64] {
        self.v(*v)
    }

    fn input(&mut self, values: Vec<f64>) -> Var {
        self.push(Op::Input, values)
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(idx) = self.param_cache[id.0] {
            return Var { tape: self.id, idx };
        }
        let v = self.push(Op::Param(id), self.store.get(id).values().to_vec());
        self.param_cache[id.0] = Some(v.idx);
        v
    }

    fn linear(&mut self, terms: &[(ParamId, &Var)], bias: Option<ParamId>) -> Var {
        let rows = self.store.get(terms[0].0).rows();
        let value = {
            let xs: Vec<(ParamId, &[f64])> =
                terms.iter().map(|(w, x)| (*w, self.v(**x))).collect();
            kernel::linear(self.store, &xs, bias, rows)
        };
        let terms = terms.iter().map(|(w, x)| (*w, x.i())).collect();
        self.push(Op::Linear { terms, bias }, value)
    }

    fn embed(&mut self, table: ParamId, row: usize) -> Var {
        let value = self.store.get(table).row(row).to_vec();
        self.push(Op::Embed { table, row }, value)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = zip(self.v(*a), self.v(*b), |x, y| x + y);
        self.push(Op::Add(a.i(), b.i()), v)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let v = zip(self.v(*a), self.v(*b), |x, y| x - y);
        self.push(Op::Sub(a.i(), b.i()), v)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let v = zip(self.v(*a), self.v(*b), |x, y| x * y);
        self.push(Op::Mul(a.i(), b.i()), v)
    }

    fn scale(&mut self, a: &Var, factor: f64) -> Var {
        let v = self.v(*a).iter().map(|x| x * factor).collect();
        self.push(Op::Scale(a.i(), factor), v)
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        let v = self.v(*a).iter().map(|&x| kernel::sigmoid(x)).collect();
        self.push(Op::Sigmoid(a.i()), v)
    }

    fn tanh(&mut self, a: &Var) -> Var {
        let v = self.v(*a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a.i()), v)
    }

    fn concat(&mut self, parts: &[&Var]) -> Var {
        let mut v = Vec::new();
        for p in parts {
            v.extend_from_slice(self.v(**p));
        }
        self.push(Op::Concat(parts.iter().map(|p| p.i()).collect()), v)
    }

    fn sum(&mut self, a: &Var) -> Var {
        let v = vec![self.v(*a).iter().sum()];
        self.push(Op::Sum(a.i()), v)
    }

    fn dot(&mut self, a: &Var, b: &Var) -> Var {
        let v = vec![kernel::dot(self.v(*a), self.v(*b))];
        self.push(Op::Dot(a.i(), b.i()), v)
    }

    fn masked_softmax(&mut self, logits: &Var, mask: Option<&[bool]>) -> Var {
        let v = kernel::masked_softmax(self.v(*logits), mask);
        self.push(Op::Softmax(logits.i()), v)
    }

    fn weighted_sum(&mut self, weights: &Var, items: &[Var]) -> Var {
        let mut out = vec![0.0; self.v(items[0]).len()];
        for (w, item) in self.v(*weights).iter().zip(items) {
            if *w != 0.0 {
                for (o, x) in out.iter_mut().zip(self.v(*item)) {
                    *o += w * x;
                }
            }
        }
        let op = Op::WeightedSum {
            weights: weights.i(),
            items: items.iter().map(|v| v.i()).collect(),
        };
        self.push(op, out)
    }

    fn mean(&mut self, items: &[Var]) -> Var {
        let mut out = vec![0.0; self.v(items[0]).len()];
        for item in items {
            for (o, x) in out.iter_mut().zip(self.v(*item)) {
                *o += x;
            }
        }
        let n = items.len() as f64;
        let out = out.into_iter().map(|x| x / n).collect();
        self.push(Op::Mean(items.iter().map(|v| v.i()).collect()), out)
    }

    fn log_softmax_at(&mut self, logits: &Var, index: usize) -> Var {
        let l = self.v(*logits);
        let lse = kernel::log_sum_exp(l);
        let value = vec![l[index] - lse];
        let probs = l.iter().map(|&x| (x - lse).exp()).collect();
        self.push(
            Op::LogSoftmaxAt {
                logits: logits.i(),
                index,
                probs,
            },
            value,
        )
    }

    fn mask_mul(&mut self, a: &Var, mask: Vec<f64>) -> Var {
        let v = zip(self.v(*a), &mask, |x, m| x * m);
        self.push(Op::MaskMul(a.i(), mask), v)
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

// ---------------------------------------------------------------------------
// Gradients

/// Per-parameter gradient buffers; `None` for parameters the loss never read.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads(pub Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads(vec![None; store.len()])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }

    /// `self += other`, element by element in a fixed order.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), None);
        }
        for (dst, src) in self.0.iter_mut().zip(&other.0) {
            if let Some(src) = src {
                match dst {
                    Some(d) => add_into(d, src, 1.0),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.0.iter_mut().flatten() {
            for x in g {
                *x *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().flatten().all(|x| x.is_finite())
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    params: ParamGrads,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id)
    }

    /// Gradient of the loss with respect to a recorded value.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.nodes.get(v.i()).and_then(|g| g.as_deref())
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }
}
