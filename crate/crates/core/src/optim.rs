//! Adadelta with global-norm gradient clipping.

use crate::graph::ParamGrads;
use crate::tensor::{ParamId, ParamStore};

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPS: f64 = 1e-6;

/// Running averages E[g²] and E[Δ²] for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Accumulator {
    pub sq_grad: Vec<f64>,
    pub sq_update: Vec<f64>,
}

impl Accumulator {
    pub fn zeros(len: usize) -> Self {
        Accumulator {
            sq_grad: vec![0.0; len],
            sq_update: vec![0.0; len],
        }
    }
}

/// One Adadelta step on a flat parameter:
/// `E[g²] ← ρE[g²] + (1−ρ)g²`, `Δ = −√(E[Δ²]+ε)/√(E[g²]+ε)·g`,
/// `E[Δ²] ← ρE[Δ²] + (1−ρ)Δ²`, `p ← p + Δ`.
pub fn adadelta_update(params: &mut [f64], grads: &[f64], acc: &mut Accumulator, rho: f64, eps: f64) {
    debug_assert_eq!(params.len(), grads.len());
    for (((p, &g), eg), ex) in params
        .iter_mut()
        .zip(grads)
        .zip(acc.sq_grad.iter_mut())
        .zip(acc.sq_update.iter_mut())
    {
        *eg = rho * *eg + (1.0 - rho) * g * g;
        let delta = -((*ex + eps).sqrt() / (*eg + eps).sqrt()) * g;
        *ex = rho * *ex + (1.0 - rho) * delta * delta;
        *p += delta;
    }
}

/// Scales `grads` so its global ℓ2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    /// Indexed by [`ParamId`]; `None` until a parameter is first updated.
    pub state: Vec<Option<Accumulator>>,
}

impl Adadelta {
    pub fn new(rho: f64, eps: f64) -> Self {
        Adadelta {
            rho,
            eps,
            state: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }

    pub fn accumulator(&self, id: ParamId) -> Option<&Accumulator> {
        self.state.get(id.index()).and_then(Option::as_ref)
    }

    /// Updates every parameter in `ids`. Parameters without a gradient are
    /// treated as having a zero gradient (their accumulators still decay).
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], grads: &ParamGrads) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let precision = store.precision();
        for &id in ids {
            let t = store.get_mut(id);
            let acc = self.state[id.index()].get_or_insert_with(|| Accumulator::zeros(t.len()));
            match grads.get(id) {
                Some(g) => adadelta_update(t.values_mut(), g, acc, self.rho, self.eps),
                None => {
                    let zeros = vec![0.0; t.len()];
                    adadelta_update(t.values_mut(), &zeros, acc, self.rho, self.eps);
                }
            }
            precision.round_all(t.values_mut());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays_accumulators() {
        let mut p = vec![0.5, -2.0];
        let mut acc = Accumulator {
            sq_grad: vec![1.0, 4.0],
            sq_update: vec![0.5, 0.25],
        };
        adadelta_update(&mut p, &[0.0, 0.0], &mut acc, 0.95, 1e-6);
        assert_eq!(p, vec![0.5, -2.0]);
        assert_eq!(acc.sq_grad, vec![0.95, 3.8]);
        assert_eq!(acc.sq_update, vec![0.475, 0.2375]);
    }

    #[test]
    fn first_step_matches_scalar_formula() {
        for g in [0.3, -2.5, 1e-3] {
            let mut p = vec![1.0];
            let mut acc = Accumulator::zeros(1);
            adadelta_update(&mut p, &[g], &mut acc, 0.95, 1e-6);
            let delta = -(1e-6 / (0.05 * g * g + 1e-6)).sqrt() * g;
            assert!((p[0] - (1.0 + delta)).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_identical_gradients_shrink_the_step() {
        let mut p = vec![0.0];
        let mut acc = Accumulator::zeros(1);
        adadelta_update(&mut p, &[1.0], &mut acc, 0.95, 1e-6);
        let first = p[0].abs();
        let before = p[0];
        adadelta_update(&mut p, &[1.0], &mut acc, 0.95, 1e-6);
        let second = (p[0] - before).abs();
        let eg1 = 0.05f64;
        let ex1 = 0.05 * first * first;
        let eg2 = 0.95 * eg1 + 0.05;
        let expected = ((ex1 + 1e-6).sqrt() / (eg2 + 1e-6).sqrt()) * 1.0;
        assert!((second - expected).abs() < 1e-15);
        assert!((acc.sq_grad[0] - eg2).abs() < 1e-15);
        // With a = (1−ρ)g², step2/step1 = √((2a+ε)/(1.95a+ε)): the RMS of the
        // gradient grows but the accumulated update grows slightly faster.
        let a: f64 = 0.05;
        let ratio = ((2.0 * a + 1e-6) / (1.95 * a + 1e-6)).sqrt();
        assert!((second / first - ratio).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = ParamGrads(vec![Some(vec![3.0, 4.0]), None, Some(vec![12.0])]);
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 13.0);
        assert!(g.global_norm() <= 1.0 + 1e-6);
        let mut small = ParamGrads(vec![Some(vec![0.1])]);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.0[0].as_ref().unwrap()[0], 0.1);
    }
}
