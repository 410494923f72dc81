//! A complete encoder-decoder-reconstructor model: one parameter store with
//! the θ and (optional) γ views over it.

use crate::encoder_decoder::{self as ed, ModelDims, ModelParams};
use crate::error::{Error, Result};
use crate::graph::{Eval, Val};
use crate::reconstructor::{self as rec, ReconstructorParams};
use crate::rng::{substream, Stream};
use crate::tensor::{ParamStore, Precision};

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub dims: ModelDims,
    pub theta: ModelParams,
    pub gamma: Option<ReconstructorParams>,
}

/// Teacher-forced scores and states for one sentence pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScore {
    pub log_lik: f64,
    pub step_log_probs: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub alphas: Vec<Vec<f64>>,
}

impl Model {
    /// Fresh θ from the `Init` substream of `seed`; no reconstructor.
    pub fn new(dims: ModelDims, precision: Precision, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(precision);
        let theta = ModelParams::init(&mut store, &dims, &mut substream(seed, Stream::Init, 0))?;
        Ok(Model {
            store,
            dims,
            theta,
            gamma: None,
        })
    }

    /// Adds freshly initialized γ drawn from its own substream, so θ's
    /// initialization does not depend on whether a reconstructor exists.
    pub fn attach_reconstructor(&mut self, seed: u64) -> Result<ReconstructorParams> {
        if let Some(g) = self.gamma {
            return Ok(g);
        }
        let mut rng = substream(seed, Stream::InitReconstructor, 0);
        let g = ReconstructorParams::init(&mut self.store, &self.dims, self.theta.src_emb, &mut rng)?;
        self.gamma = Some(g);
        Ok(g)
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let theta = ModelParams::lookup(&store)?;
        let dims = theta.dims(&store);
        let gamma = ReconstructorParams::lookup(&store, theta.src_emb)?;
        Ok(Model {
            store,
            dims,
            theta,
            gamma,
        })
    }

    pub fn require_gamma(&self) -> Result<&ReconstructorParams> {
        self.gamma.as_ref().ok_or(Error::MissingReconstructor)
    }

    /// Teacher-forced `log P(y | x)` with the decoder trace.
    pub fn score_pair(&self, source: &[usize], target: &[usize]) -> Result<PairScore> {
        let mut e = Eval::new(&self.store);
        let enc = ed::encode(&mut e, &self.theta, source)?;
        let (lp, trace) =
            ed::log_likelihood::<_, rand_chacha::ChaCha8Rng>(&mut e, &self.theta, &enc, target, None)?;
        Ok(PairScore {
            log_lik: lp[0],
            step_log_probs: trace.log_probs.iter().map(|v| v[0]).collect(),
            states: trace.states.iter().map(|v| v.to_vec()).collect(),
            alphas: trace.alphas.iter().map(|v| v.to_vec()).collect(),
        })
    }

    /// `log R(x | s)` for given decoder states.
    pub fn reconstruction_score(&self, source: &[usize], states: &[Vec<f64>]) -> Result<f64> {
        rec::score(&self.store, self.require_gamma()?, source, states)
    }

    /// Encoded source in value-only form.
    pub fn encode<'s>(&'s self, e: &mut Eval<'s>, source: &[usize]) -> Result<ed::EncodedSource<Val>> {
        ed::encode(e, &self.theta, source)
    }
}
