//! Central finite-difference checks of tape gradients.

use std::fmt;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::graph::{Compute, Tape, Var};
use crate::rng::{substream, Stream};
use crate::tensor::{ParamId, ParamStore, Precision};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per tensor; tensors at most this large are checked exhaustively.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| !t.passed)
            .map(|t| t.name.as_str())
            .collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{}\t{}\tcoords={}\tmax_rel_err={:.3e}",
                if t.passed { "PASS" } else { "FAIL" },
                t.name,
                t.coords,
                t.max_rel_error
            )?;
        }
        write!(
            f,
            "{}: {} tensors, max relative error {:.3e} (tolerance {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tensors.len(),
            self.max_rel_error(),
            self.tolerance
        )
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn loss_value<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: for<'s> Fn(&mut Tape<'s>) -> Result<Var>,
{
    let mut t = Tape::new(store);
    let l = loss_fn(&mut t)?;
    Ok(t.value(&l)[0])
}

/// Compares tape gradients of `loss_fn` against `(f(p+h) − f(p−h)) / 2h` for
/// each tensor in `params`. Requires 64-bit precision.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&mut Tape<'s>) -> Result<Var>,
{
    if store.precision() != Precision::F64 {
        return Err(Error::InvalidArgument(
            "gradient checks require 64-bit precision".into(),
        ));
    }
    if !(1e-7..=1e-4).contains(&cfg.step) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {} outside [1e-7, 1e-4]",
            cfg.step
        )));
    }
    let analytic = {
        let mut t = Tape::new(store);
        let l = loss_fn(&mut t)?;
        t.backward(l)?.into_params()
    };
    let h = cfg.step;
    let mut tensors = Vec::with_capacity(params.len());
    for (k, &id) in params.iter().enumerate() {
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut rng = substream(cfg.seed, Stream::Sampling, k as u64);
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.get(id);
        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = store.get(id).values()[i];
            store.get_mut(id).values_mut()[i] = orig + h;
            let up = loss_value(store, &loss_fn)?;
            store.get_mut(id).values_mut()[i] = orig - h;
            let down = loss_value(store, &loss_fn)?;
            store.get_mut(id).values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.map_or(0.0, |g| g[i]);
            worst = worst.max(relative_error(a, numeric));
        }
        tensors.push(TensorCheck {
            name: store.name(id).to_string(),
            coords: coords.len(),
            max_rel_error: worst,
            passed: worst < cfg.tolerance,
        });
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new(Precision::F64);
        let w = store
            .insert("w", Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.75]).unwrap())
            .unwrap();
        let x = store.insert("x", Tensor::vector(vec![1.5, -0.5, 0.2])).unwrap();
        let report = grad_check(
            &mut store,
            &[w, x],
            |t| {
                let xv = t.param(x);
                let y = t.linear(&[(w, &xv)], None);
                let q = t.dot(&y, &y);
                let r = t.dot(&xv, &xv);
                Ok(t.add(&q, &r))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.max_rel_error() < 1e-9, "{report}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut store = ParamStore::new(Precision::F64);
        let a = store
            .insert("a", Tensor::vector(vec![0.3, -0.8, 1.1, 0.05]))
            .unwrap();
        let b = store
            .insert("b", Tensor::vector(vec![-0.6, 0.4, 0.9, -1.3]))
            .unwrap();
        let emb = store
            .insert("emb", Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap())
            .unwrap();
        let report = grad_check(
            &mut store,
            &[a, b, emb],
            |t| {
                let av = t.param(a);
                let bv = t.param(b);
                let e = t.embed(emb, 1);
                let s = t.sigmoid(&av);
                let th = t.tanh(&bv);
                let m = t.mul(&s, &th);
                let d = t.sub(&m, &e);
                let ad = t.add(&d, &av);
                let sc = t.scale(&ad, 1.7);
                let logits = t.concat(&[&sc, &e]);
                let p = t.masked_softmax(&logits, Some(&[true, true, false, true, true, true, true, false]));
                let lp = t.log_softmax_at(&logits, 5);
                let ws = t.weighted_sum(&s, &[e, th, bv, av]);
                let mn = t.mean(&[ws, av]);
                let dm = t.mask_mul(&mn, vec![2.0, 0.0, 1.0, 0.5]);
                let s1 = t.sum(&dm);
                let s2 = t.dot(&p, &logits);
                let tot = t.add(&s1, &s2);
                Ok(t.add(&tot, &lp))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn rejects_f32_and_bad_steps() {
        let mut store = ParamStore::new(Precision::F32);
        let a = store.insert("a", Tensor::vector(vec![1.0])).unwrap();
        let f = |t: &mut Tape<'_>| {
            let v = t.param(a);
            Ok(t.sum(&v))
        };
        assert!(grad_check(&mut store, &[a], f, &GradCheckConfig::default()).is_err());
        store.set_precision(Precision::F64);
        let cfg = GradCheckConfig {
            step: 1e-2,
            ..Default::default()
        };
        assert!(grad_check(&mut store, &[a], f, &cfg).is_err());
    }
}
