//! Dual-decoder Transformer: a shared encoder feeding a left-to-right and a
//! right-to-left decoder.

mod checkpoint;
mod forward;
mod infer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use forward::{
    bind, decoder_forward, encode, example_loss, joint_loss, joint_loss_with_grads,
    sequence_log_prob, Batch, Bound, Dropout, LossValues,
};
pub use infer::{DecoderState, EncodedSource};

use crate::corpus::vocab::{BOS, BOS_R, EOS};
use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of length {len} exceeds {max} positions")]
    SequenceTooLong { len: usize, max: usize },
    #[error("encoder memory is empty")]
    EmptyMemory,
    #[error("empty input sequence")]
    EmptyInput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    L2R,
    R2L,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::L2R, Direction::R2L];

    pub fn index(self) -> usize {
        match self {
            Direction::L2R => 0,
            Direction::R2L => 1,
        }
    }

    pub fn begin_token(self) -> usize {
        match self {
            Direction::L2R => BOS,
            Direction::R2L => BOS_R,
        }
    }

    /// The canonical target in this decoder's reading order.
    pub fn reading_order(self, canonical: &[usize]) -> Vec<usize> {
        match self {
            Direction::L2R => canonical.to_vec(),
            Direction::R2L => canonical.iter().rev().copied().collect(),
        }
    }

    /// Decoder input (`begin, y…`) and targets (`y…, EOS`) for teacher forcing.
    pub fn teacher_forcing(self, canonical: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let ordered = self.reading_order(canonical);
        let mut input = Vec::with_capacity(ordered.len() + 1);
        input.push(self.begin_token());
        input.extend_from_slice(&ordered);
        let mut target = ordered;
        target.push(EOS);
        (input, target)
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::L2R => "l2r",
            Direction::R2L => "r2l",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub dropout: f64,
    /// Give each decoder its own target embedding table.
    pub separate_target_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            src_vocab: 0,
            tgt_vocab: 0,
            embed_dim: 32,
            model_dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            max_positions: 256,
            dropout: 0.1,
            separate_target_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            src_vocab,
            tgt_vocab,
            ..Self::default()
        }
    }

    /// Full-size stacks: 3 layers, 300-wide embeddings projected to 512.
    pub fn full(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            src_vocab,
            tgt_vocab,
            embed_dim: 300,
            model_dim: 512,
            layers: 3,
            heads: 8,
            ff_dim: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.src_vocab == 0 || self.tgt_vocab == 0 {
            return fail("vocabulary sizes must be positive");
        }
        if self.layers == 0 {
            return fail("at least one layer is required");
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return fail("model_dim must be divisible by heads");
        }
        if self.model_dim % 2 == 1 {
            return fail("model_dim must be even for sinusoidal positions");
        }
        if self.embed_dim == 0 || self.ff_dim == 0 || self.max_positions == 0 {
            return fail("dimensions must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

pub type ParamId = usize;

#[derive(Clone, Debug)]
pub struct AttentionIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Debug)]
pub struct FeedForwardIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerIds {
    pub attn: AttentionIds,
    pub norm1: NormIds,
    pub ff: FeedForwardIds,
    pub norm2: NormIds,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerIds {
    pub self_attn: AttentionIds,
    pub norm1: NormIds,
    pub cross_attn: AttentionIds,
    pub norm2: NormIds,
    pub ff: FeedForwardIds,
    pub norm3: NormIds,
}

#[derive(Clone, Debug)]
pub struct DecoderIds {
    pub embed: ParamId,
    pub layers: Vec<DecoderLayerIds>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Where each named weight lives in the flat parameter list.
#[derive(Clone, Debug)]
pub struct Layout {
    pub src_embed: ParamId,
    pub src_proj_w: ParamId,
    pub src_proj_b: ParamId,
    pub encoder: Vec<EncoderLayerIds>,
    pub decoders: [DecoderIds; 2],
}

#[derive(Clone, Copy)]
enum Init {
    Embedding,
    Xavier,
    Zeros,
    Ones,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, prefix: &str, rows: usize, cols: usize) -> (ParamId, ParamId) {
        (
            self.add(format!("{prefix}.weight"), vec![rows, cols], Init::Xavier),
            self.add(format!("{prefix}.bias"), vec![cols], Init::Zeros),
        )
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttentionIds {
        let (wq, bq) = self.linear(&format!("{prefix}.query"), d, d);
        let (wk, bk) = self.linear(&format!("{prefix}.key"), d, d);
        let (wv, bv) = self.linear(&format!("{prefix}.value"), d, d);
        let (wo, bo) = self.linear(&format!("{prefix}.output"), d, d);
        AttentionIds { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn feed_forward(&mut self, prefix: &str, d: usize, ff: usize) -> FeedForwardIds {
        let (w1, b1) = self.linear(&format!("{prefix}.inner"), d, ff);
        let (w2, b2) = self.linear(&format!("{prefix}.outer"), ff, d);
        FeedForwardIds { w1, b1, w2, b2 }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Builder) {
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let d = cfg.model_dim;
    let src_embed = b.add("source.embedding".into(), vec![cfg.src_vocab, cfg.embed_dim], Init::Embedding);
    let (src_proj_w, src_proj_b) = b.linear("source.projection", cfg.embed_dim, d);
    let encoder = (0..cfg.layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            EncoderLayerIds {
                attn: b.attention(&format!("{p}.attention"), d),
                norm1: b.norm(&format!("{p}.norm1"), d),
                ff: b.feed_forward(&format!("{p}.ff"), d, cfg.ff_dim),
                norm2: b.norm(&format!("{p}.norm2"), d),
            }
        })
        .collect();
    let shared_embed = (!cfg.separate_target_embeddings)
        .then(|| b.add("target.embedding".into(), vec![cfg.tgt_vocab, d], Init::Embedding));
    let mut decoder = |dir: Direction| {
        let p = format!("decoder.{dir}");
        let embed = shared_embed.unwrap_or_else(|| {
            b.add(format!("{p}.embedding"), vec![cfg.tgt_vocab, d], Init::Embedding)
        });
        let layers = (0..cfg.layers)
            .map(|l| {
                let q = format!("{p}.{l}");
                DecoderLayerIds {
                    self_attn: b.attention(&format!("{q}.self_attention"), d),
                    norm1: b.norm(&format!("{q}.norm1"), d),
                    cross_attn: b.attention(&format!("{q}.cross_attention"), d),
                    norm2: b.norm(&format!("{q}.norm2"), d),
                    ff: b.feed_forward(&format!("{q}.ff"), d, cfg.ff_dim),
                    norm3: b.norm(&format!("{q}.norm3"), d),
                }
            })
            .collect();
        let (out_w, out_b) = b.linear(&format!("{p}.output"), d, cfg.tgt_vocab);
        DecoderIds {
            embed,
            layers,
            out_w,
            out_b,
        }
    };
    let decoders = [decoder(Direction::L2R), decoder(Direction::R2L)];
    (
        Layout {
            src_embed,
            src_proj_w,
            src_proj_b,
            encoder,
            decoders,
        },
        b,
    )
}

/// All trainable weights, addressed through [`Layout`].
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, b) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Embedding => (0..n).map(|_| rng.random_range(-0.05..0.05)).collect(),
                    Init::Xavier => {
                        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Tensor::new(shape.clone(), data)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config,
            layout,
            names: b.names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, validating every shape.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, b) = build_layout(&config);
        if named.len() != b.names.len() {
            return Err(ModelError::Config(format!(
                "expected {} tensors, found {}",
                b.names.len(),
                named.len()
            )));
        }
        let mut by_name: std::collections::HashMap<String, Tensor> = named.into_iter().collect();
        let mut tensors = Vec::with_capacity(b.names.len());
        for (name, shape) in b.names.iter().zip(&b.shapes) {
            let t = by_name
                .remove(name)
                .ok_or_else(|| ModelError::Config(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(ModelError::Config(format!("tensor {name} holds non-finite values")));
            }
            tensors.push(t);
        }
        Ok(Self {
            config,
            layout,
            names: b.names,
            tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Ids of every weight owned by the encoder (source side included).
    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("encoder.") || n.starts_with("source."))
            .map(|(i, _)| i)
            .collect()
    }

    /// Overwrites one decoder stack (and its output layer) with the other's.
    pub fn copy_decoder(&mut self, from: Direction, to: Direction) {
        let prefix_from = format!("decoder.{from}.");
        let prefix_to = format!("decoder.{to}.");
        for i in 0..self.names.len() {
            if let Some(rest) = self.names[i].strip_prefix(&prefix_from) {
                let target = format!("{prefix_to}{rest}");
                if let Some(j) = self.id_of(&target) {
                    self.tensors[j] = self.tensors[i].clone();
                }
            }
        }
    }

    /// Loads external word vectors into rows of the source embedding table.
    /// Returns how many rows were replaced.
    pub fn load_source_vectors<'v>(
        &mut self,
        rows: impl IntoIterator<Item = (usize, &'v [f64])>,
    ) -> Result<usize, ModelError> {
        let table = &mut self.tensors[self.layout.src_embed];
        let width = table.cols();
        let mut count = 0;
        for (id, vec) in rows {
            if id >= table.rows() {
                return Err(ModelError::TokenOutOfRange { id, vocab: table.rows() });
            }
            if vec.len() != width {
                return Err(ModelError::Config(format!(
                    "vector of width {} for embeddings of width {width}",
                    vec.len()
                )));
            }
            table.row_mut(id).copy_from_slice(vec);
            count += 1;
        }
        Ok(count)
    }
}
