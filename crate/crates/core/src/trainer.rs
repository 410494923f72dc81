//! Likelihood and joint likelihood-reconstruction training with Adadelta,
//! the two-stage schedule, validation metrics and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::{self, Checkpoint};
use crate::corpus::{make_batches, Batch, ParallelCorpus, SentencePair};
use crate::encoder_decoder::{self as ed, Dropout, ModelDims, ModelParams};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::graph::{Compute, Eval, ParamGrads, Tape};
use crate::model::Model;
use crate::optim::{clip_global_norm, Adadelta, DEFAULT_EPS, DEFAULT_RHO};
use crate::reconstructor::{self as rec, ReconstructorParams, SampleMode};
use crate::rng::{substream, Stream};
use crate::tensor::{ParamId, Precision};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub rho: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub embed: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Longest sentence (tokens, EOS excluded) kept for training.
    pub max_len: usize,
    /// Updates between validation points; 0 validates only at stage ends.
    pub checkpoint_every: u64,
    /// Sum log-probabilities instead of dividing each term by its batch token count.
    pub raw_sum_loss: bool,
    /// Dev pairs decoded at each validation point.
    pub val_size: usize,
    pub val_max_len_factor: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            epochs_stage1: 10,
            epochs_stage2: 10,
            batch_size: 16,
            rho: DEFAULT_RHO,
            eps: DEFAULT_EPS,
            clip_norm: 1.0,
            seed: 1,
            embed: 32,
            hidden: 64,
            dropout: 0.2,
            max_len: 80,
            checkpoint_every: 500,
            raw_sum_loss: false,
            val_size: 200,
            val_max_len_factor: 2.0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be a nonnegative number, got {}", self.lambda)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.embed < 1 || self.hidden < 1 {
            return Err(Error::Config("embed and hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rho) || self.eps <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("need 0 ≤ rho < 1, eps > 0, clip_norm > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Both,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            "both" => Ok(Stage::Both),
            other => Err(Error::Config(format!("unknown stage `{other}` (expected 1, 2 or both)"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::One => "1",
            Stage::Two => "2",
            Stage::Both => "both",
        })
    }
}

/// Loss components of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub neg_log_lik: f64,
    /// `None` when the reconstruction term was not computed.
    pub neg_log_rec: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Scales {
    lik: f64,
    rec: f64,
}

fn scales(batch: &Batch, raw_sum: bool) -> Scales {
    if raw_sum {
        Scales { lik: 1.0, rec: 1.0 }
    } else {
        Scales {
            lik: 1.0 / batch.target_tokens() as f64,
            rec: 1.0 / batch.source_tokens() as f64,
        }
    }
}

/// Loss of batch row `b`: `−s_lik·log P(y|x) − λ·s_rec·log R(x|s)`.
#[allow(clippy::too_many_arguments)]
fn row_loss<C: Compute>(
    c: &mut C,
    theta: &ModelParams,
    gamma: Option<&ReconstructorParams>,
    batch: &Batch,
    b: usize,
    lambda: f64,
    s: Scales,
    dropout: Option<Dropout<'_, rand_chacha::ChaCha8Rng>>,
) -> Result<(C::V, f64, Option<f64>)> {
    let enc = ed::encode_padded(c, theta, &batch.source[b], batch.source_lengths[b])?;
    let (lp, trace) = ed::log_likelihood(c, theta, &enc, batch.target_row(b), dropout)?;
    let nll = c.scale(&lp, -s.lik);
    let nll_value = c.value(&nll)[0];
    match gamma.filter(|_| lambda > 0.0) {
        None => Ok((nll, nll_value, None)),
        Some(g) => {
            let (lr, _) = rec::reconstruction_score(c, g, batch.source_row(b), &trace.states)?;
            let nrec_value = -c.value(&lr)[0] * s.rec;
            let r = c.scale(&lr, -lambda * s.rec);
            Ok((c.add(&nll, &r), nll_value, Some(nrec_value)))
        }
    }
}

fn sum_parts(lambda: f64, rows: impl Iterator<Item = (f64, Option<f64>)>) -> LossParts {
    let mut nll = 0.0;
    let mut nrec: Option<f64> = None;
    for (l, r) in rows {
        nll += l;
        if let Some(r) = r {
            *nrec.get_or_insert(0.0) += r;
        }
    }
    let total = match nrec {
        Some(r) => nll + lambda * r,
        None => nll,
    };
    LossParts {
        total,
        neg_log_lik: nll,
        neg_log_rec: nrec,
    }
}

/// Batch loss (no dropout). With λ = 0 or no reconstructor the
/// reconstruction term is skipped and `total == neg_log_lik`.
pub fn combined_loss(model: &Model, batch: &Batch, lambda: f64, raw_sum_loss: bool) -> Result<LossParts> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument("lambda must be nonnegative".into()));
    }
    let s = scales(batch, raw_sum_loss);
    let rows = (0..batch.len())
        .map(|b| {
            let mut e = Eval::new(&model.store);
            let (_, l, r) = row_loss(&mut e, &model.theta, model.gamma.as_ref(), batch, b, lambda, s, None)?;
            Ok((l, r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_parts(lambda, rows.into_iter()))
}

/// Whole-batch loss recorded on one graph (no dropout). Used for gradient checks.
pub fn batch_loss<C: Compute>(
    c: &mut C,
    theta: &ModelParams,
    gamma: Option<&ReconstructorParams>,
    batch: &Batch,
    lambda: f64,
    raw_sum_loss: bool,
) -> Result<C::V> {
    let s = scales(batch, raw_sum_loss);
    let mut total: Option<C::V> = None;
    for b in 0..batch.len() {
        let (l, _, _) = row_loss(c, theta, gamma, batch, b, lambda, s, None)?;
        total = Some(match total {
            Some(t) => c.add(&t, &l),
            None => l,
        });
    }
    total.ok_or(Error::Empty("batch"))
}

/// Parameter scale of [`gradcheck_model`] relative to the training init.
pub const GRADCHECK_SCALE: f64 = 10.0;

/// A 64-bit model with γ for gradient checking. Parameters are scaled up
/// from the training init: at ±0.08 many encoder gradients are around 1e-9,
/// below the roundoff of a central difference with h = 1e-5.
pub fn gradcheck_model(dims: ModelDims, seed: u64) -> Result<Model> {
    let mut m = Model::new(dims, Precision::F64, seed)?;
    m.attach_reconstructor(seed)?;
    let ids: Vec<ParamId> = m.store.ids().collect();
    for id in ids {
        for v in m.store.get_mut(id).values_mut() {
            *v *= GRADCHECK_SCALE;
        }
    }
    Ok(m)
}

/// `pairs` random sentence pairs of 1–4 tokens plus EOS.
pub fn gradcheck_batch(dims: &ModelDims, pairs: usize, seed: u64) -> Result<Batch> {
    if dims.src_vocab <= crate::vocab::RESERVED.len() || dims.tgt_vocab <= crate::vocab::RESERVED.len() {
        return Err(Error::InvalidArgument("vocabularies need at least one ordinary symbol".into()));
    }
    if pairs == 0 {
        return Err(Error::InvalidArgument("gradient check needs at least one pair".into()));
    }
    let mut rng = substream(seed, Stream::Data, 0);
    let mut seq = |vocab: usize| -> Vec<usize> {
        let n = rng.gen_range(1..=4);
        (0..n)
            .map(|_| rng.gen_range(crate::vocab::RESERVED.len()..vocab))
            .chain([crate::vocab::EOS])
            .collect()
    };
    let data: Vec<SentencePair> = (0..pairs)
        .map(|_| SentencePair {
            source: seq(dims.src_vocab),
            target: seq(dims.tgt_vocab),
        })
        .collect();
    let refs: Vec<&SentencePair> = data.iter().collect();
    Ok(Batch::from_pairs(&refs))
}

/// Finite-difference check of [`batch_loss`] over every θ and γ tensor.
pub fn check_gradients(
    model: &mut Model,
    batch: &Batch,
    lambda: f64,
    cfg: &crate::gradcheck::GradCheckConfig,
) -> Result<crate::gradcheck::GradCheckReport> {
    let theta = model.theta;
    let gamma = model.gamma;
    let mut ids = theta.ids();
    if let Some(g) = &gamma {
        ids.extend(g.own_ids());
    }
    crate::gradcheck::grad_check(
        &mut model.store,
        &ids,
        |t| batch_loss(t, &theta, gamma.as_ref(), batch, lambda, false),
        cfg,
    )
}

/// Loss parts and summed parameter gradients of one batch. Rows are
/// differentiated in parallel and summed in row order.
pub fn batch_gradients(
    model: &Model,
    batch: &Batch,
    lambda: f64,
    raw_sum_loss: bool,
    dropout: f64,
    dropout_seed: u64,
) -> Result<(LossParts, ParamGrads)> {
    let s = scales(batch, raw_sum_loss);
    let rows: Vec<(f64, Option<f64>, ParamGrads)> = (0..batch.len())
        .into_par_iter()
        .map(|b| {
            let mut t = Tape::new(&model.store);
            let mut rng = substream(dropout_seed, Stream::Dropout, b as u64);
            let d = (dropout > 0.0).then_some(Dropout {
                rate: dropout,
                rng: &mut rng,
            });
            let (loss, l, r) = row_loss(&mut t, &model.theta, model.gamma.as_ref(), batch, b, lambda, s, d)?;
            Ok((l, r, t.backward(loss)?.into_params()))
        })
        .collect::<Result<_>>()?;
    let mut grads = ParamGrads::zeros_like(&model.store);
    for (_, _, g) in &rows {
        grads.accumulate(g);
    }
    Ok((sum_parts(lambda, rows.iter().map(|(l, r, _)| (*l, *r))), grads))
}

/// One validation point.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub update: u64,
    /// Mean training loss components since the previous row.
    pub neg_log_lik: f64,
    pub neg_log_rec: Option<f64>,
    pub dev_bleu: f64,
    pub dev_rec_bleu: Option<f64>,
}

pub const METRICS_HEADER: &str = "update\tneg_log_lik\tneg_log_rec\tdev_bleu\tdev_rec_bleu";

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

impl MetricsRow {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.update,
            self.neg_log_lik,
            opt(self.neg_log_rec),
            self.dev_bleu,
            opt(self.dev_rec_bleu)
        )
    }
}

pub fn metrics_tsv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.to_tsv());
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adadelta,
    pub updates: u64,
    /// Epochs completed in each stage.
    pub epochs_done: [usize; 2],
    pub metrics: Vec<MetricsRow>,
    /// Loss of every update, in order.
    pub loss_trace: Vec<LossParts>,
    pub lambda: f64,
    pub seed: u64,
}

impl TrainState {
    /// Fresh θ without a reconstructor.
    pub fn new(cfg: &TrainConfig, src_vocab: usize, tgt_vocab: usize) -> Result<Self> {
        cfg.validate()?;
        let dims = ModelDims {
            src_vocab,
            tgt_vocab,
            embed: cfg.embed,
            hidden: cfg.hidden,
        };
        Ok(TrainState {
            model: Model::new(dims, cfg.precision, cfg.seed)?,
            optimizer: Adadelta::new(cfg.rho, cfg.eps),
            updates: 0,
            epochs_done: [0, 0],
            metrics: Vec::new(),
            loss_trace: Vec::new(),
            lambda: cfg.lambda,
            seed: cfg.seed,
        })
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        let get = |k: &str| c.meta.get(k).map(String::as_str);
        let num = |k: &str| -> Result<Option<f64>> {
            get(k)
                .map(|v| v.parse::<f64>().map_err(|_| Error::Checkpoint(format!("bad trailer value {k} = {v}"))))
                .transpose()
        };
        let int = |k: &str| -> Result<Option<u64>> {
            get(k)
                .map(|v| v.parse::<u64>().map_err(|_| Error::Checkpoint(format!("bad trailer value {k} = {v}"))))
                .transpose()
        };
        Ok(TrainState {
            model: c.model,
            optimizer: c.optimizer,
            updates: int("updates")?.unwrap_or(0),
            epochs_done: [
                int("epochs_stage1")?.unwrap_or(0) as usize,
                int("epochs_stage2")?.unwrap_or(0) as usize,
            ],
            metrics: Vec::new(),
            loss_trace: Vec::new(),
            lambda: num("lambda")?.unwrap_or(0.0),
            seed: int("seed")?.unwrap_or(0),
        })
    }

    pub fn meta(&self) -> BTreeMap<String, String> {
        let d = self.model.dims;
        [
            ("lambda", self.lambda.to_string()),
            ("embed", d.embed.to_string()),
            ("hidden", d.hidden.to_string()),
            ("src_vocab", d.src_vocab.to_string()),
            ("tgt_vocab", d.tgt_vocab.to_string()),
            ("updates", self.updates.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", self.model.store.precision().to_string()),
            ("epochs_stage1", self.epochs_done[0].to_string()),
            ("epochs_stage2", self.epochs_done[1].to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(path, &self.model, &self.optimizer, &self.meta())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(checkpoint::load_checkpoint(path)?)
    }

    fn trainable(&self, with_gamma: bool) -> Vec<ParamId> {
        let mut ids = self.model.theta.ids();
        if with_gamma {
            if let Some(g) = &self.model.gamma {
                ids.extend(g.own_ids());
            }
        }
        ids
    }

    /// One Adadelta update on `batch`. The reconstruction term is included
    /// only when `lambda > 0` and a reconstructor is attached. `batch_index`
    /// is reported if the loss or gradient is not finite.
    pub fn step(&mut self, batch: &Batch, lambda: f64, cfg: &TrainConfig, batch_index: usize) -> Result<LossParts> {
        let dropout_seed = cfg.seed ^ self.updates.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let (parts, mut grads) =
            batch_gradients(&self.model, batch, lambda, cfg.raw_sum_loss, cfg.dropout, dropout_seed)?;
        if !parts.total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch: batch_index,
                update: self.updates,
            });
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        let ids = self.trainable(lambda > 0.0);
        self.optimizer.step(&mut self.model.store, &ids, &grads);
        self.updates += 1;
        self.loss_trace.push(parts);
        Ok(parts)
    }
}

/// Validation translation BLEU and, when a reconstructor exists,
/// reconstruction BLEU, both from greedy decoding.
pub fn validate(model: &Model, dev: &ParallelCorpus, cfg: &TrainConfig) -> Result<(f64, Option<f64>)> {
    if dev.is_empty() || cfg.val_size == 0 {
        return Ok((f64::NAN, None));
    }
    let (subset, _) = dev.split_at(cfg.val_size.min(dev.len()));
    let b = evaluation::translation_bleu(model, &subset, cfg.val_max_len_factor)?.bleu;
    let r = match model.gamma {
        Some(_) => Some(
            evaluation::reconstruction_bleu(model, &subset, SampleMode::Greedy, cfg.seed, cfg.val_max_len_factor)?
                .bleu,
        ),
        None => None,
    };
    Ok((b, r))
}

fn epoch_seed(seed: u64, stage: usize, epoch: usize) -> u64 {
    seed ^ ((stage as u64) << 32 | epoch as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93)
}

/// Runs `cfg`'s schedule for `stage` on `state`. `on_validation` is called
/// after each validation point with the new metrics row; it may save a
/// checkpoint.
pub fn train<F>(
    mut state: TrainState,
    corpus: &ParallelCorpus,
    dev: &ParallelCorpus,
    cfg: &TrainConfig,
    stage: Stage,
    mut on_validation: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState, &MetricsRow) -> Result<()>,
{
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    corpus.validate(state.model.dims.src_vocab, state.model.dims.tgt_vocab)?;
    let stages: &[usize] = match stage {
        Stage::One => &[1],
        Stage::Two => &[2],
        Stage::Both => &[1, 2],
    };
    for &st in stages {
        let (epochs, lambda) = if st == 1 {
            (cfg.epochs_stage1, 0.0)
        } else {
            (cfg.epochs_stage2, cfg.lambda)
        };
        if epochs == 0 {
            continue;
        }
        if st == 2 {
            state.optimizer.reset();
            state.lambda = cfg.lambda;
            if cfg.lambda > 0.0 {
                state.model.attach_reconstructor(cfg.seed)?;
            }
        }
        let mut window: Vec<LossParts> = Vec::new();
        let mut validate_now = |state: &mut TrainState, window: &mut Vec<LossParts>| -> Result<()> {
            if window.is_empty() {
                return Ok(());
            }
            let n = window.len() as f64;
            let nll = window.iter().map(|p| p.neg_log_lik).sum::<f64>() / n;
            let nrec = window
                .iter()
                .map(|p| p.neg_log_rec)
                .sum::<Option<f64>>()
                .map(|s| s / n);
            window.clear();
            let (dev_bleu, dev_rec_bleu) = validate(&state.model, dev, cfg)?;
            let row = MetricsRow {
                update: state.updates,
                neg_log_lik: nll,
                neg_log_rec: nrec,
                dev_bleu,
                dev_rec_bleu,
            };
            state.metrics.push(row.clone());
            on_validation(state, &row)
        };
        for _ in 0..epochs {
            let epoch = state.epochs_done[st - 1];
            let batches = make_batches(corpus, cfg.batch_size, epoch_seed(cfg.seed, st, epoch))?;
            for (bi, batch) in batches.iter().enumerate() {
                let parts = state.step(batch, lambda, cfg, bi)?;
                window.push(parts);
                if cfg.checkpoint_every > 0 && state.updates.is_multiple_of(cfg.checkpoint_every) {
                    validate_now(&mut state, &mut window)?;
                }
            }
            state.epochs_done[st - 1] += 1;
        }
        validate_now(&mut state, &mut window)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SentencePair;
    use crate::vocab::EOS;

    fn toy_corpus() -> ParallelCorpus {
        let pairs = (0..6)
            .map(|i| SentencePair {
                source: (0..1 + i % 3).map(|j| 4 + (i + j) % 5).chain([EOS]).collect(),
                target: (0..1 + (i + 1) % 3).map(|j| 4 + (i * j) % 4).chain([EOS]).collect(),
            })
            .collect();
        ParallelCorpus { pairs }
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            embed: 4,
            hidden: 5,
            batch_size: 3,
            epochs_stage1: 1,
            epochs_stage2: 1,
            checkpoint_every: 0,
            val_size: 3,
            precision: Precision::F64,
            ..Default::default()
        }
    }

    #[test]
    fn lambda_zero_total_is_likelihood() {
        let c = toy_corpus();
        let mut s = TrainState::new(&cfg(), 10, 10).unwrap();
        s.model.attach_reconstructor(1).unwrap();
        let b = &make_batches(&c, 3, 0).unwrap()[0];
        let p = combined_loss(&s.model, b, 0.0, false).unwrap();
        assert_eq!(p.total, p.neg_log_lik);
        assert_eq!(p.neg_log_rec, None);
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let c = ParallelCorpus {
            pairs: vec![SentencePair {
                source: vec![5, EOS],
                target: vec![6, 7, EOS],
            }],
        };
        let mut s = TrainState::new(&cfg(), 10, 10).unwrap();
        let g = s.model.attach_reconstructor(1).unwrap();
        let mut ro: Vec<ParamId> = s.model.theta.readout_ids().to_vec();
        ro.extend(g.readout_ids());
        for id in ro {
            s.model.store.get_mut(id).values_mut().fill(0.0);
        }
        let b = &make_batches(&c, 1, 0).unwrap()[0];
        let p = combined_loss(&s.model, b, 1.0, false).unwrap();
        let l10 = 10f64.ln();
        assert!((p.neg_log_lik - l10).abs() < 1e-12);
        assert!((p.neg_log_rec.unwrap() - l10).abs() < 1e-12);
        assert!((p.total - 2.0 * l10).abs() < 1e-12);
        assert!((p.total - 4.6052).abs() < 1e-4);
    }

    #[test]
    fn batch_loss_matches_per_sentence_sums() {
        let c = toy_corpus();
        let mut s = TrainState::new(&cfg(), 10, 10).unwrap();
        s.model.attach_reconstructor(1).unwrap();
        let g = s.model.gamma.unwrap();
        let lambda = 0.7;
        for b in make_batches(&c, 4, 3).unwrap() {
            let p = combined_loss(&s.model, &b, lambda, true).unwrap();
            let (mut lik, mut recon) = (0.0, 0.0);
            for i in 0..b.len() {
                let (x, y) = (b.source_row(i), b.target_row(i));
                let ps = s.model.score_pair(x, y).unwrap();
                lik += ps.log_lik;
                recon += rec::score(&s.model.store, &g, x, &ps.states).unwrap();
            }
            assert!((p.total - (-lik - lambda * recon)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_epochs_leave_state_untouched() {
        let c = toy_corpus();
        let config = TrainConfig {
            epochs_stage1: 0,
            epochs_stage2: 0,
            ..cfg()
        };
        let s = TrainState::new(&config, 10, 10).unwrap();
        let before = s.model.store.clone();
        let s = train(s, &c, &c, &config, Stage::Both, |_, _| Ok(())).unwrap();
        assert!(s.metrics.is_empty());
        assert_eq!(s.updates, 0);
        assert!(s.model.gamma.is_none());
        for ((_, a), (_, b)) in before.iter().zip(s.model.store.iter()) {
            assert_eq!(a.tensor.values(), b.tensor.values());
        }
    }

    #[test]
    fn zero_val_size_skips_decoding() {
        let c = toy_corpus();
        let config = TrainConfig { val_size: 0, ..cfg() };
        let s = TrainState::new(&config, 10, 10).unwrap();
        let s = train(s, &c, &c, &config, Stage::Both, |_, _| Ok(())).unwrap();
        assert_eq!(s.metrics.len(), 2);
        assert!(s.metrics.iter().all(|r| r.dev_bleu.is_nan() && r.dev_rec_bleu.is_none()));
    }

    #[test]
    fn training_is_deterministic_and_logs_metrics() {
        let c = toy_corpus();
        let run = || {
            let s = TrainState::new(&cfg(), 10, 10).unwrap();
            train(s, &c, &c, &cfg(), Stage::Both, |_, _| Ok(())).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.updates, 4);
        assert_eq!(a.metrics.len(), 2);
        assert!(a.metrics[0].neg_log_rec.is_none());
        assert!(a.metrics[1].neg_log_rec.is_some());
        assert!(a.model.gamma.is_some());
        assert!(metrics_tsv(&a.metrics).starts_with(METRICS_HEADER));
    }

    #[test]
    fn stage_two_preserves_theta_and_adds_gamma() {
        let c = toy_corpus();
        let config = TrainConfig {
            epochs_stage2: 0,
            ..cfg()
        };
        let s1 = train(TrainState::new(&config, 10, 10).unwrap(), &c, &c, &config, Stage::One, |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.edrc");
        s1.save(&path).unwrap();
        let mut loaded = TrainState::load(&path).unwrap();
        assert!(loaded.model.gamma.is_none());
        loaded.model.attach_reconstructor(config.seed).unwrap();
        for id in s1.model.theta.ids() {
            let name = s1.model.store.name(id);
            let other = loaded.model.store.require(name).unwrap();
            assert_eq!(s1.model.store.get(id).values(), loaded.model.store.get(other).values());
        }
        assert!(loaded.model.gamma.is_some());
    }

    #[test]
    fn clipped_gradient_norm_is_bounded() {
        let c = toy_corpus();
        let mut s = TrainState::new(&cfg(), 10, 10).unwrap();
        s.model.attach_reconstructor(1).unwrap();
        let b = &make_batches(&c, 6, 0).unwrap()[0];
        let (_, mut g) = batch_gradients(&s.model, b, 1.0, true, 0.0, 0).unwrap();
        clip_global_norm(&mut g, 0.01);
        assert!(g.global_norm() <= 0.01 + 1e-6);
    }

    #[test]
    fn bad_config_is_rejected() {
        let c = TrainConfig {
            lambda: -1.0,
            ..cfg()
        };
        assert!(matches!(TrainState::new(&c, 10, 10), Err(Error::Config(_))));
        assert!("3".parse::<Stage>().is_err());
    }
}
