//! Encoder-decoder-reconstructor neural machine translation at desk scale.
//!
//! An attention-based GRU translation model is paired with a reconstructor
//! that tries to regenerate the source sentence from the decoder's hidden
//! states. The reconstruction log-probability is added to the likelihood as
//! a training objective (weighted by λ) and reused at test time to rerank
//! beam-search k-best lists.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`graph`]).

pub mod beam;
pub mod bleu;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder_decoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod reconstructor;
pub mod rerank;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use model::Model;
pub use tensor::{ParamId, ParamStore, Precision, Tensor};
