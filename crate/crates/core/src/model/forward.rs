use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AttentionIds, Direction, FeedForwardIds, ModelError, ModelParams, NormIds, ParamId};
use crate::corpus::vocab::PAD;
use crate::numerics::{kernels, Graph, Tensor, Var};

/// Additive attention mask value; `exp` of it underflows to exactly zero.
pub(crate) const MASKED: f64 = -1e9;

/// Graph handles for every parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    fn get(&self, id: ParamId) -> Var {
        self.vars[id]
    }
}

pub fn bind<'a>(g: &mut Graph<'a>, params: &'a ModelParams) -> Bound {
    Bound {
        vars: params.tensors().iter().map(|t| g.param(t)).collect(),
    }
}

/// Inverted dropout with its own random stream.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Result<Var, ModelError> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = g.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        Ok(g.mul(x, m)?)
    }
}

fn drop(g: &mut Graph<'_>, x: Var, dropout: &mut Option<&mut Dropout>) -> Result<Var, ModelError> {
    match dropout {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

fn linear(g: &mut Graph<'_>, b: &Bound, x: Var, w: ParamId, bias: ParamId) -> Result<Var, ModelError> {
    let y = g.matmul(x, b.get(w))?;
    Ok(g.add_row(y, b.get(bias))?)
}

fn norm(g: &mut Graph<'_>, b: &Bound, x: Var, ids: &NormIds) -> Result<Var, ModelError> {
    Ok(g.layer_norm(x, b.get(ids.gain), b.get(ids.bias))?)
}

fn feed_forward(g: &mut Graph<'_>, b: &Bound, x: Var, ids: &FeedForwardIds) -> Result<Var, ModelError> {
    let h = linear(g, b, x, ids.w1, ids.b1)?;
    let h = g.relu(h)?;
    linear(g, b, h, ids.w2, ids.b2)
}

fn attention(
    g: &mut Graph<'_>,
    b: &Bound,
    ids: &AttentionIds,
    query: Var,
    memory: Var,
    mask: Option<Var>,
    heads: usize,
) -> Result<Var, ModelError> {
    let q = linear(g, b, query, ids.wq, ids.bq)?;
    let k = linear(g, b, memory, ids.wk, ids.bk)?;
    let v = linear(g, b, memory, ids.wv, ids.bv)?;
    let dk = g.value(q).cols() / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let s = g.matmul_t(qh, kh)?;
        let mut s = g.scale(s, scale)?;
        if let Some(m) = mask {
            s = g.add(s, m)?;
        }
        let p = g.softmax(s)?;
        outs.push(g.matmul(p, vh)?);
    }
    let cat = g.concat_cols(&outs)?;
    linear(g, b, cat, ids.wo, ids.bo)
}

/// `rows × cols` additive mask hiding key columns at or beyond `valid`.
fn key_mask(rows: usize, cols: usize, valid: usize) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        data[r * cols + valid..(r + 1) * cols].fill(MASKED);
    }
    Tensor::matrix(rows, cols, data)
}

fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for r in 0..len {
        data[r * len + r + 1..(r + 1) * len].fill(MASKED);
    }
    Tensor::matrix(len, len, data)
}

fn check_ids(ids: &[usize], vocab: usize) -> Result<(), ModelError> {
    match ids.iter().find(|&&id| id >= vocab) {
        Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

fn embed_positions(g: &mut Graph<'_>, x: Var, dim: usize) -> Result<Var, ModelError> {
    let pe = kernels::sinusoidal_table(g.value(x).rows(), dim)?;
    let pe = g.constant(pe);
    Ok(g.add(x, pe)?)
}

/// Encoder memory (`len(src) × model_dim`). Positions at or beyond `valid`
/// are padding: no query attends to them.
pub fn encode(
    g: &mut Graph<'_>,
    params: &ModelParams,
    b: &Bound,
    src: &[usize],
    valid: usize,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var, ModelError> {
    let cfg = &params.config;
    if valid == 0 || src.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if src.len() > cfg.max_positions {
        return Err(ModelError::SequenceTooLong { len: src.len(), max: cfg.max_positions });
    }
    check_ids(src, cfg.src_vocab)?;
    let valid = valid.min(src.len());
    let lay = &params.layout;
    let e = g.gather(b.get(lay.src_embed), src)?;
    let x = linear(g, b, e, lay.src_proj_w, lay.src_proj_b)?;
    let x = embed_positions(g, x, cfg.model_dim)?;
    let mut x = drop(g, x, dropout)?;
    let mask = (valid < src.len()).then(|| g.constant(key_mask(src.len(), src.len(), valid)));
    for layer in &lay.encoder {
        let a = attention(g, b, &layer.attn, x, x, mask, cfg.heads)?;
        let a = drop(g, a, dropout)?;
        let r = g.add(x, a)?;
        x = norm(g, b, r, &layer.norm1)?;
        let f = feed_forward(g, b, x, &layer.ff)?;
        let f = drop(g, f, dropout)?;
        let r = g.add(x, f)?;
        x = norm(g, b, r, &layer.norm2)?;
    }
    Ok(x)
}

/// Next-token logits (`len(input) × tgt_vocab`) of one decoder under teacher
/// forcing. Row `t` depends only on `input[..=t]` and the first
/// `memory_valid` memory rows.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward(
    g: &mut Graph<'_>,
    params: &ModelParams,
    b: &Bound,
    dir: Direction,
    input: &[usize],
    memory: Var,
    memory_valid: usize,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var, ModelError> {
    let cfg = &params.config;
    if input.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if input.len() > cfg.max_positions {
        return Err(ModelError::SequenceTooLong { len: input.len(), max: cfg.max_positions });
    }
    let mem_rows = g.value(memory).rows();
    if mem_rows == 0 || memory_valid == 0 {
        return Err(ModelError::EmptyMemory);
    }
    check_ids(input, cfg.tgt_vocab)?;
    let ids = &params.layout.decoders[dir.index()];
    let e = g.gather(b.get(ids.embed), input)?;
    let x = embed_positions(g, e, cfg.model_dim)?;
    let mut x = drop(g, x, dropout)?;
    let t = input.len();
    let self_mask = (t > 1).then(|| g.constant(causal_mask(t)));
    let valid = memory_valid.min(mem_rows);
    let cross_mask = (valid < mem_rows).then(|| g.constant(key_mask(t, mem_rows, valid)));
    for layer in &ids.layers {
        let a = attention(g, b, &layer.self_attn, x, x, self_mask, cfg.heads)?;
        let a = drop(g, a, dropout)?;
        let r = g.add(x, a)?;
        x = norm(g, b, r, &layer.norm1)?;
        let c = attention(g, b, &layer.cross_attn, x, memory, cross_mask, cfg.heads)?;
        let c = drop(g, c, dropout)?;
        let r = g.add(x, c)?;
        x = norm(g, b, r, &layer.norm2)?;
        let f = feed_forward(g, b, x, &layer.ff)?;
        let f = drop(g, f, dropout)?;
        let r = g.add(x, f)?;
        x = norm(g, b, r, &layer.norm3)?;
    }
    linear(g, b, x, ids.out_w, ids.out_b)
}

/// Summed token NLL of both decoders on one example, as `(l2r, r2l)` graph
/// nodes. `tgt` is the canonical target without sentinels.
pub fn example_loss(
    g: &mut Graph<'_>,
    params: &ModelParams,
    b: &Bound,
    src: &[usize],
    tgt: &[usize],
    dropout: &mut Option<&mut Dropout>,
) -> Result<(Var, Var), ModelError> {
    let memory = encode(g, params, b, src, src.len(), dropout)?;
    let mut losses = [memory; 2];
    for dir in Direction::BOTH {
        let (input, target) = dir.teacher_forcing(tgt);
        let logits = decoder_forward(g, params, b, dir, &input, memory, src.len(), dropout)?;
        losses[dir.index()] = g.cross_entropy(logits, &target, None)?;
    }
    Ok((losses[0], losses[1]))
}

/// Source and canonical target sequences, padded with [`PAD`] to common
/// lengths; the true lengths are kept alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub src_len: Vec<usize>,
    pub tgt: Vec<Vec<usize>>,
    pub tgt_len: Vec<usize>,
}

impl Batch {
    pub fn new<S: AsRef<[usize]>, T: AsRef<[usize]>>(examples: &[(S, T)]) -> Self {
        let src_max = examples.iter().map(|(s, _)| s.as_ref().len()).max().unwrap_or(0);
        let tgt_max = examples.iter().map(|(_, t)| t.as_ref().len()).max().unwrap_or(0);
        let pad = |seq: &[usize], n: usize| {
            let mut v = seq.to_vec();
            v.resize(n, PAD);
            v
        };
        Self {
            src: examples.iter().map(|(s, _)| pad(s.as_ref(), src_max)).collect(),
            src_len: examples.iter().map(|(s, _)| s.as_ref().len()).collect(),
            tgt: examples.iter().map(|(_, t)| pad(t.as_ref(), tgt_max)).collect(),
            tgt_len: examples.iter().map(|(_, t)| t.as_ref().len()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn example(&self, i: usize) -> (&[usize], &[usize]) {
        (&self.src[i][..self.src_len[i]], &self.tgt[i][..self.tgt_len[i]])
    }
}

/// Per-example means over a batch of the summed token NLLs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub l2r: f64,
    pub r2l: f64,
}

fn batch_graph<'a>(
    g: &mut Graph<'a>,
    params: &'a ModelParams,
    batch: &Batch,
    dropout: &mut Option<&mut Dropout>,
) -> Result<(Bound, Var, LossValues), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let b = bind(g, params);
    let inv = 1.0 / batch.len() as f64;
    let (mut l2r, mut r2l) = (0.0, 0.0);
    let mut total: Option<Var> = None;
    for i in 0..batch.len() {
        let (src, tgt) = batch.example(i);
        let (a, c) = example_loss(g, params, &b, src, tgt, dropout)?;
        l2r += g.value(a).item();
        r2l += g.value(c).item();
        let s = g.add(a, c)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = g.scale(total.expect("non-empty batch"), inv)?;
    let values = LossValues {
        total: g.value(total).item(),
        l2r: l2r * inv,
        r2l: r2l * inv,
    };
    Ok((b, total, values))
}

/// Joint loss `L_l2r + L_r2l` without gradients and without dropout.
pub fn joint_loss(params: &ModelParams, batch: &Batch) -> Result<LossValues, ModelError> {
    let mut g = Graph::new();
    Ok(batch_graph(&mut g, params, batch, &mut None)?.2)
}

/// Joint loss and its gradient with respect to every parameter.
pub fn joint_loss_with_grads(
    params: &ModelParams,
    batch: &Batch,
    dropout: Option<&mut Dropout>,
) -> Result<(LossValues, Vec<Tensor>), ModelError> {
    let mut g = Graph::new();
    let mut dropout = dropout;
    let (b, total, values) = batch_graph(&mut g, params, batch, &mut dropout)?;
    let grads = collect_grads(&g, &b, total, params)?;
    Ok((values, grads))
}

pub(crate) fn collect_grads(
    g: &Graph<'_>,
    b: &Bound,
    loss: Var,
    params: &ModelParams,
) -> Result<Vec<Tensor>, ModelError> {
    let mut grads = g.backward(loss)?;
    Ok(b.vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Log-probability of `canonical` followed by end-of-sequence under one
/// decoder, read in that decoder's order.
pub fn sequence_log_prob(
    params: &ModelParams,
    src: &[usize],
    dir: Direction,
    canonical: &[usize],
) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let b = bind(&mut g, params);
    let memory = encode(&mut g, params, &b, src, src.len(), &mut None)?;
    let (input, target) = dir.teacher_forcing(canonical);
    let logits = decoder_forward(&mut g, params, &b, dir, &input, memory, src.len(), &mut None)?;
    let nll = g.cross_entropy(logits, &target, None)?;
    Ok(-g.value(nll).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::{BOS, BOS_R};
    use crate::model::ModelConfig;

    fn tiny(layers: usize, seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            embed_dim: 6,
            model_dim: 8,
            layers,
            heads: 2,
            ff_dim: 12,
            ..ModelConfig::desk(12, 10)
        };
        ModelParams::init(cfg, seed).unwrap()
    }

    fn one(src: &[usize], tgt: &[usize]) -> Batch {
        Batch::new(&[(src.to_vec(), tgt.to_vec())])
    }

    /// Copies the L2R decoder into the R2L one and makes both begin tokens
    /// embed identically.
    fn mirrored(seed: u64) -> ModelParams {
        let mut p = tiny(2, seed);
        p.copy_decoder(Direction::L2R, Direction::R2L);
        let e = p.layout.decoders[0].embed;
        let row = p.tensors()[e].row(BOS).to_vec();
        p.tensors_mut()[e].row_mut(BOS_R).copy_from_slice(&row);
        p
    }

    #[test]
    fn loss_is_deterministic_and_additive() {
        let p = tiny(2, 1);
        let b = Batch::new(&[(vec![5, 6, 7], vec![5, 6]), (vec![8, 9], vec![7, 8, 9])]);
        let a = joint_loss(&p, &b).unwrap();
        assert_eq!(a, joint_loss(&p, &b).unwrap());
        assert!((a.total - (a.l2r + a.r2l)).abs() < 1e-12);
        assert!(a.l2r > 0.0 && a.r2l > 0.0);
    }

    #[test]
    fn padding_does_not_change_memory() {
        let p = tiny(2, 2);
        let mut g = Graph::new();
        let b = bind(&mut g, &p);
        let short = encode(&mut g, &p, &b, &[5, 6, 7], 3, &mut None).unwrap();
        let long = encode(&mut g, &p, &b, &[5, 6, 7, PAD, PAD], 3, &mut None).unwrap();
        for r in 0..3 {
            let d = g.value(short).row(r).iter().zip(g.value(long).row(r)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-12, "row {r} differs by {d}");
        }
        // A padded batch scores the same as its examples alone.
        let batched = Batch::new(&[(vec![5, 6, 7], vec![5]), (vec![8], vec![6, 7, 8, 9])]);
        let both = joint_loss(&p, &batched).unwrap().total * 2.0;
        let first = joint_loss(&p, &one(&[5, 6, 7], &[5])).unwrap().total;
        let second = joint_loss(&p, &one(&[8], &[6, 7, 8, 9])).unwrap().total;
        assert!((both - first - second).abs() < 1e-10);
    }

    #[test]
    fn decoder_is_causal() {
        let p = tiny(2, 3);
        let mut g = Graph::new();
        let b = bind(&mut g, &p);
        let m = encode(&mut g, &p, &b, &[5, 6], 2, &mut None).unwrap();
        for dir in Direction::BOTH {
            let x = decoder_forward(&mut g, &p, &b, dir, &[BOS, 5, 6, 7], m, 2, &mut None).unwrap();
            let y = decoder_forward(&mut g, &p, &b, dir, &[BOS, 5, 9, 4], m, 2, &mut None).unwrap();
            assert_eq!(g.value(x).row(0), g.value(y).row(0));
            assert_eq!(g.value(x).row(1), g.value(y).row(1));
            assert_ne!(g.value(x).row(2), g.value(y).row(2));
        }
    }

    #[test]
    fn mirrored_decoders_agree_on_reversal() {
        let p = mirrored(4);
        let src = [5, 6, 7, 8];
        let y = [5, 6, 7];
        let rev: Vec<usize> = y.iter().rev().copied().collect();
        let l2r = sequence_log_prob(&p, &src, Direction::L2R, &rev).unwrap();
        let r2l = sequence_log_prob(&p, &src, Direction::R2L, &y).unwrap();
        assert!((l2r - r2l).abs() < 1e-12);
        let pal = joint_loss(&p, &one(&src, &[5, 6, 5])).unwrap();
        assert!((pal.l2r - pal.r2l).abs() < 1e-12);
        let asym = joint_loss(&p, &one(&src, &[5, 6, 7])).unwrap();
        assert!((asym.l2r - asym.r2l).abs() > 1e-9);
    }

    #[test]
    fn zero_output_layer_gives_uniform_loss() {
        let mut p = tiny(2, 5);
        for d in 0..2 {
            let (w, b) = (p.layout.decoders[d].out_w, p.layout.decoders[d].out_b);
            p.tensors_mut()[w].scale_assign(0.0);
            p.tensors_mut()[b].scale_assign(0.0);
        }
        let y = [5, 6, 7, 8];
        let loss = joint_loss(&p, &one(&[5, 6], &y)).unwrap();
        let t = (y.len() + 1) as f64;
        assert!((loss.total - 2.0 * t * 10f64.ln()).abs() < 1e-12);
        assert!((loss.l2r - t * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sequence_log_prob_matches_loss() {
        let p = tiny(2, 6);
        let loss = joint_loss(&p, &one(&[5, 9], &[6, 7])).unwrap();
        let lp = sequence_log_prob(&p, &[5, 9], Direction::R2L, &[6, 7]).unwrap();
        assert!((loss.r2l + lp).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut p = tiny(1, 7);
        p.config.dropout = 0.0;
        let batch = Batch::new(&[(vec![5, 6, 7], vec![5, 6]), (vec![8, 9], vec![7])]);
        let (_, grads) = joint_loss_with_grads(&p, &batch, None).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for id in 0..p.len() {
            let n = p.tensors()[id].len();
            for k in [0, n / 2, n - 1] {
                let orig = p.tensors()[id].data()[k];
                p.tensors_mut()[id].data_mut()[k] = orig + h;
                let up = joint_loss(&p, &batch).unwrap().total;
                p.tensors_mut()[id].data_mut()[k] = orig - h;
                let down = joint_loss(&p, &batch).unwrap().total;
                p.tensors_mut()[id].data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[id].data()[k];
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                if numeric.abs().max(analytic.abs()) > 1e-7 {
                    worst = worst.max(err);
                }
                assert!(err < 1e-4 || (numeric - analytic).abs() < 1e-8, "{} [{k}]: {numeric} vs {analytic}", p.names()[id]);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn encoder_gradient_sums_both_decoders() {
        let p = tiny(2, 8);
        let grads_of = |which: usize| {
            let mut g = Graph::new();
            let b = bind(&mut g, &p);
            let (a, c) = example_loss(&mut g, &p, &b, &[5, 6, 7], &[6, 7, 8], &mut None).unwrap();
            collect_grads(&g, &b, [a, c][which], &p).unwrap()
        };
        let (l2r, r2l) = (grads_of(0), grads_of(1));
        let (_, total) = joint_loss_with_grads(&p, &one(&[5, 6, 7], &[6, 7, 8]), None).unwrap();
        for id in p.encoder_ids() {
            assert!(l2r[id].sq_norm() > 0.0 && r2l[id].sq_norm() > 0.0, "{}", p.names()[id]);
            let mut sum = l2r[id].clone();
            sum.add_assign(&r2l[id]);
            assert!(sum.max_abs_diff(&total[id]) < 1e-12);
        }
        // Each decoder's own weights only see its own loss.
        let out_r2l = p.layout.decoders[1].out_w;
        assert_eq!(l2r[out_r2l].sq_norm(), 0.0);
    }

    #[test]
    fn dropout_changes_training_loss_only() {
        let p = tiny(2, 9);
        let b = one(&[5, 6, 7], &[6, 7]);
        let clean = joint_loss(&p, &b).unwrap();
        let mut d = Dropout { rate: 0.5, rng: rand::SeedableRng::seed_from_u64(0) };
        let (noisy, _) = joint_loss_with_grads(&p, &b, Some(&mut d)).unwrap();
        assert_ne!(clean.total, noisy.total);
        let mut off = Dropout { rate: 0.0, rng: rand::SeedableRng::seed_from_u64(0) };
        let (same, _) = joint_loss_with_grads(&p, &b, Some(&mut off)).unwrap();
        assert_eq!(clean, same);
    }

    #[test]
    fn invalid_inputs_are_errors() {
        let p = tiny(1, 10);
        let mut g = Graph::new();
        let b = bind(&mut g, &p);
        assert!(matches!(encode(&mut g, &p, &b, &[], 0, &mut None), Err(ModelError::EmptyInput)));
        assert!(matches!(
            encode(&mut g, &p, &b, &[50], 1, &mut None),
            Err(ModelError::TokenOutOfRange { id: 50, vocab: 12 })
        ));
        let long = vec![5; p.config.max_positions + 1];
        assert!(matches!(encode(&mut g, &p, &b, &long, long.len(), &mut None), Err(ModelError::SequenceTooLong { .. })));
        let m = encode(&mut g, &p, &b, &[5], 1, &mut None).unwrap();
        assert!(matches!(
            decoder_forward(&mut g, &p, &b, Direction::L2R, &[BOS], m, 0, &mut None),
            Err(ModelError::EmptyMemory)
        ));
        assert!(matches!(
            decoder_forward(&mut g, &p, &b, Direction::L2R, &long, m, 1, &mut None),
            Err(ModelError::SequenceTooLong { .. })
        ));
        assert!(joint_loss(&p, &Batch::new::<Vec<usize>, Vec<usize>>(&[])).is_err());
    }
}
