//! Joint maximum-likelihood training of both decoders, then REINFORCE
//! fine-tuning against the answer-correctness reward.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{evaluate_encoded, Encoded, Report, Vocabulary};
use crate::decoding::{beam_search, BeamConfig};
use crate::equations::reward_spellings;
use crate::model::{
    bind, decoder_forward, encode, joint_loss, joint_loss_with_grads, Batch, Direction, Dropout, EncodedSource,
    LossValues, ModelConfig, ModelError, ModelParams,
};
use crate::numerics::{Graph, NumericsError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("no samples to estimate a baseline from")]
    NoSamples,
    #[error(transparent)]
    Model(ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(NumericsError::NonFinite { op }) => {
                TrainError::Diverged(format!("non-finite value produced by {op}"))
            }
            e => TrainError::Model(e),
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Moments 0.9 / 0.98, epsilon 1e-9.
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self::with_betas(params.tensors(), lr, 0.9, 0.98, 1e-9)
    }

    pub fn with_betas(shapes: &[Tensor], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

/// One update on the joint loss; returns the loss before the update.
pub fn mle_step(
    params: &mut ModelParams,
    opt: &mut Adam,
    batch: &Batch,
    dropout: Option<&mut Dropout>,
) -> Result<LossValues, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let (loss, grads) = joint_loss_with_grads(params, batch, dropout)?;
    if !loss.total.is_finite() {
        return Err(TrainError::Diverged(format!("loss is {}", loss.total)));
    }
    opt.update(params.tensors_mut(), &grads);
    Ok(loss)
}

pub fn baseline(rewards: &[f64]) -> Result<f64, TrainError> {
    if rewards.is_empty() {
        return Err(TrainError::NoSamples);
    }
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// A decoded sequence with its reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// In the generating decoder's reading order.
    pub tokens: Vec<usize>,
    pub direction: Direction,
    pub reward: f64,
}

/// `(1/N) Σ_n (r_n − r_b) · NLL_n` over the samples' own factorizations,
/// with its gradient. Rewards enter only as constant weights.
pub fn reinforce_loss(
    params: &ModelParams,
    src: &[usize],
    samples: &[Sample],
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let rewards: Vec<f64> = samples.iter().map(|s| s.reward).collect();
    let rb = baseline(&rewards)?;
    let n = samples.len() as f64;
    let mut g = Graph::new();
    let b = bind(&mut g, params);
    let memory = encode(&mut g, params, &b, src, src.len(), &mut None)?;
    let mut total = None;
    for s in samples {
        let (input, target) = s.direction.teacher_forcing(&s.direction.reading_order(&s.tokens));
        let logits = decoder_forward(&mut g, params, &b, s.direction, &input, memory, src.len(), &mut None)?;
        let w = vec![(s.reward - rb) / n; target.len()];
        let l = g.weighted_nll(logits, &target, &w).map_err(ModelError::from)?;
        total = Some(match total {
            Some(t) => g.add(t, l).map_err(ModelError::from)?,
            None => l,
        });
    }
    let total = total.expect("at least one sample");
    let value = g.value(total).item();
    let mut grads = g.backward(total).map_err(ModelError::from)?;
    let grads = b
        .vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlOutcome {
    pub samples: Vec<Sample>,
    pub mean_reward: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// False when every advantage was zero or nothing finished.
    pub updated: bool,
}

/// Pools the finished beam hypotheses of both decoders.
pub fn collect_samples(
    params: &ModelParams,
    ex: &Encoded,
    tgt_vocab: &Vocabulary,
    beam: &BeamConfig,
) -> Result<Vec<Sample>, TrainError> {
    let source = EncodedSource::new(params, &ex.src)?;
    let mut out = Vec::new();
    for dir in Direction::BOTH {
        for h in beam_search(params, &source, dir, beam)? {
            if !h.finished {
                continue;
            }
            let reward = reward_spellings(&tgt_vocab.decode(&h.canonical()), &ex.mapping, &ex.answers);
            out.push(Sample { tokens: h.tokens, direction: dir, reward });
        }
    }
    Ok(out)
}

/// One REINFORCE update for one problem. The step is skipped when no
/// hypothesis finished or all rewards agree, leaving parameters untouched.
pub fn reinforce_step(
    params: &mut ModelParams,
    opt: &mut Adam,
    ex: &Encoded,
    tgt_vocab: &Vocabulary,
    beam: &BeamConfig,
    max_grad_norm: f64,
) -> Result<RlOutcome, TrainError> {
    let samples = collect_samples(params, ex, tgt_vocab, beam)?;
    if samples.is_empty() {
        return Ok(RlOutcome { samples, mean_reward: 0.0, grad_norm: 0.0, updated: false });
    }
    let mean_reward = baseline(&samples.iter().map(|s| s.reward).collect::<Vec<_>>())?;
    if samples.iter().all(|s| s.reward == mean_reward) {
        return Ok(RlOutcome { samples, mean_reward, grad_norm: 0.0, updated: false });
    }
    let (loss, mut grads) = reinforce_loss(params, &ex.src, &samples)?;
    if !loss.is_finite() {
        return Err(TrainError::Diverged(format!("policy loss is {loss}")));
    }
    let grad_norm = clip_global_norm(&mut grads, max_grad_norm);
    opt.update(params.tensors_mut(), &grads);
    Ok(RlOutcome { samples, mean_reward, grad_norm, updated: true })
}

/// Everything `train` needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Architecture; vocabulary sizes are filled in from the data.
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rl_epochs: usize,
    pub rl_lr: f64,
    pub rl_beam: usize,
    pub max_grad_norm: f64,
    pub eval_beam: usize,
    /// Evaluate answer accuracy every this many epochs (and after the last).
    pub eval_every: usize,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 0,
            epochs: 300,
            lr: 1e-3,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            rl_epochs: 0,
            rl_lr: 1e-5,
            rl_beam: 6,
            max_grad_norm: 1.0,
            eval_beam: 10,
            eval_every: 10,
            max_len: 64,
        }
    }
}

impl TrainConfig {
    /// Full-size stacks with 120 MLE epochs at 5e-5 and REINFORCE at 5e-7.
    pub fn full() -> Self {
        Self {
            model: ModelConfig::full(0, 0),
            epochs: 120,
            lr: 5e-5,
            rl_lr: 5e-7,
            ..Self::default()
        }
    }

    fn beam(&self, size: usize) -> BeamConfig {
        BeamConfig { max_len: self.max_len, ..BeamConfig::for_model(size) }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub phase: String,
    pub split: String,
    pub loss_l2r: Option<f64>,
    pub loss_r2l: Option<f64>,
    pub answer_accuracy_l2r: Option<f64>,
    pub answer_accuracy_r2l: Option<f64>,
    pub answer_accuracy_vote: Option<f64>,
    pub mean_reward: Option<f64>,
}

impl MetricsRecord {
    fn new(epoch: usize, phase: &str, split: &str) -> Self {
        Self {
            epoch,
            phase: phase.into(),
            split: split.into(),
            loss_l2r: None,
            loss_r2l: None,
            answer_accuracy_l2r: None,
            answer_accuracy_r2l: None,
            answer_accuracy_vote: None,
            mean_reward: None,
        }
    }

    fn with_report(mut self, r: &Report) -> Self {
        self.answer_accuracy_l2r = Some(r.accuracy_l2r());
        self.answer_accuracy_r2l = Some(r.accuracy_r2l());
        self.answer_accuracy_vote = Some(r.accuracy_vote());
        self
    }

    fn with_loss(mut self, l: &LossValues) -> Self {
        self.loss_l2r = Some(l.l2r);
        self.loss_r2l = Some(l.r2l);
        self
    }
}

/// Sink for metrics records; `None` discards them.
pub struct MetricsLog<'w> {
    writer: Option<&'w mut dyn Write>,
    pub records: Vec<MetricsRecord>,
}

impl<'w> MetricsLog<'w> {
    pub fn new(writer: Option<&'w mut dyn Write>) -> Self {
        Self { writer, records: Vec::new() }
    }

    fn push(&mut self, r: MetricsRecord) -> Result<(), TrainError> {
        if let Some(w) = self.writer.as_mut() {
            serde_json::to_writer(&mut **w, &r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.records.push(r);
        Ok(())
    }
}

fn trainable(data: &[Encoded]) -> Vec<(&[usize], &[usize])> {
    data.iter()
        .filter_map(|e| e.tgt.as_deref().map(|t| (e.src.as_slice(), t)))
        .collect()
}

fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn split_loss(params: &ModelParams, pairs: &[(&[usize], &[usize])]) -> Result<LossValues, TrainError> {
    let batch = Batch::new(pairs);
    Ok(joint_loss(params, &batch)?)
}

fn evaluate_splits(
    params: &ModelParams,
    tgt_vocab: &Vocabulary,
    cfg: &TrainConfig,
    epoch: usize,
    phase: &str,
    train: &[Encoded],
    dev: Option<&[Encoded]>,
    log: &mut MetricsLog<'_>,
) -> Result<(), TrainError> {
    let beam = cfg.beam(cfg.eval_beam);
    if let Some(dev) = dev.filter(|d| !d.is_empty()) {
        let report = evaluate_encoded(params, tgt_vocab, dev, &beam)?;
        let pairs = trainable(dev);
        let mut rec = MetricsRecord::new(epoch, phase, "dev").with_report(&report);
        if !pairs.is_empty() {
            rec = rec.with_loss(&split_loss(params, &pairs)?);
        }
        log.push(rec)?;
    } else {
        let report = evaluate_encoded(params, tgt_vocab, train, &beam)?;
        log.push(MetricsRecord::new(epoch, phase, "train_eval").with_report(&report))?;
    }
    Ok(())
}

/// Maximum-likelihood phase. Returns freshly initialized parameters
/// trained on the alignable part of `train`.
pub fn train_mle(
    cfg: &TrainConfig,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    train: &[Encoded],
    dev: Option<&[Encoded]>,
    log: &mut MetricsLog<'_>,
) -> Result<ModelParams, TrainError> {
    let model_cfg = ModelConfig { src_vocab: src_vocab.len(), tgt_vocab: tgt_vocab.len(), ..cfg.model.clone() };
    let mut params = ModelParams::init(model_cfg, cfg.seed)?;
    let mut opt = Adam::with_betas(params.tensors(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut dropout = Dropout { rate: params.config.dropout, rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)) };
    let pairs = trainable(train);
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    for epoch in 1..=cfg.epochs {
        let (mut l2r, mut r2l, mut seen) = (0.0, 0.0, 0usize);
        for chunk in epoch_batches(pairs.len(), cfg.batch_size, &mut rng) {
            let batch = Batch::new(&chunk.iter().map(|&i| pairs[i]).collect::<Vec<_>>());
            let loss = mle_step(&mut params, &mut opt, &batch, Some(&mut dropout))?;
            l2r += loss.l2r * chunk.len() as f64;
            r2l += loss.r2l * chunk.len() as f64;
            seen += chunk.len();
        }
        let mean = LossValues { total: (l2r + r2l) / seen as f64, l2r: l2r / seen as f64, r2l: r2l / seen as f64 };
        log.push(MetricsRecord::new(epoch, "mle", "train").with_loss(&mean))?;
        if epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
            evaluate_splits(&params, tgt_vocab, cfg, epoch, "mle", train, dev, log)?;
        }
    }
    Ok(params)
}

/// REINFORCE phase over every problem with key answers, alignable or not.
pub fn train_rl(
    params: &mut ModelParams,
    cfg: &TrainConfig,
    tgt_vocab: &Vocabulary,
    train: &[Encoded],
    dev: Option<&[Encoded]>,
    log: &mut MetricsLog<'_>,
) -> Result<(), TrainError> {
    let mut opt = Adam::with_betas(params.tensors(), cfg.rl_lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let beam = cfg.beam(cfg.rl_beam);
    let usable: Vec<&Encoded> = train.iter().filter(|e| !e.answers.is_empty()).collect();
    for epoch in 1..=cfg.rl_epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut rng);
        let (mut reward, mut counted) = (0.0, 0usize);
        for i in order {
            let out = reinforce_step(params, &mut opt, usable[i], tgt_vocab, &beam, cfg.max_grad_norm)?;
            if !out.samples.is_empty() {
                reward += out.mean_reward;
                counted += 1;
            }
        }
        let mut rec = MetricsRecord::new(epoch, "rl", "train");
        rec.mean_reward = Some(if counted == 0 { 0.0 } else { reward / counted as f64 });
        log.push(rec)?;
        if epoch == cfg.rl_epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
            evaluate_splits(params, tgt_vocab, cfg, epoch, "rl", train, dev, log)?;
        }
    }
    Ok(())
}

/// Maximum likelihood first, then the optional REINFORCE phase.
pub fn train(
    cfg: &TrainConfig,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    train: &[Encoded],
    dev: Option<&[Encoded]>,
    log: &mut MetricsLog<'_>,
) -> Result<ModelParams, TrainError> {
    let mut params = train_mle(cfg, src_vocab, tgt_vocab, train, dev, log)?;
    if cfg.rl_epochs > 0 {
        train_rl(&mut params, cfg, tgt_vocab, train, dev, log)?;
    }
    Ok(params)
}
