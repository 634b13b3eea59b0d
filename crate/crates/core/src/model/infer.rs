//! Incremental decoding with cached keys and values. Computes the same
//! function as the graph forward pass, one position at a time.

use super::forward::{bind, encode};
use super::{AttentionIds, Direction, FeedForwardIds, ModelError, ModelParams, NormIds};
use crate::numerics::kernels::{self, gemm, LAYER_NORM_EPS};
use crate::numerics::{Graph, Tensor};

/// `x · w + b` for a single row `x`.
fn linear_row(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = b.data().to_vec();
    gemm(x, 1, x.len(), false, w.data(), w.rows(), w.cols(), false, &mut out, 1.0);
    out
}

/// `x · w + b` applied to every row of `x`.
fn linear_rows(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * w.cols());
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    gemm(x.data(), rows, x.cols(), false, w.data(), w.rows(), w.cols(), false, &mut out, 1.0);
    Tensor::matrix(rows, w.cols(), out)
}

fn norm_row(x: &[f64], params: &ModelParams, ids: &NormIds) -> Vec<f64> {
    let t = Tensor::matrix(1, x.len(), x.to_vec());
    let (out, _, _) = kernels::layer_norm_with_stats(
        &t,
        params.tensor(ids.gain).data(),
        params.tensor(ids.bias).data(),
        LAYER_NORM_EPS,
    );
    out.into_data()
}

fn feed_forward_row(x: &[f64], params: &ModelParams, ids: &FeedForwardIds) -> Vec<f64> {
    let mut h = linear_row(x, params.tensor(ids.w1), params.tensor(ids.b1));
    h.iter_mut().for_each(|v| *v = v.max(0.0));
    linear_row(&h, params.tensor(ids.w2), params.tensor(ids.b2))
}

/// Multi-head attention of one query row over `n` cached rows of keys and
/// values (each `n × dim`, row-major), then the output projection.
fn attend(q: &[f64], keys: &[f64], values: &[f64], heads: usize, params: &ModelParams, ids: &AttentionIds) -> Vec<f64> {
    let dim = q.len();
    let dk = dim / heads;
    let n = keys.len() / dim;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut cat = vec![0.0; dim];
    let mut scores = vec![0.0; n];
    for h in 0..heads {
        let qh = &q[h * dk..(h + 1) * dk];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * dim + h * dk..j * dim + (h + 1) * dk];
            *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        kernels::softmax_in_place(&mut scores);
        let out = &mut cat[h * dk..(h + 1) * dk];
        for (j, p) in scores.iter().enumerate() {
            let vh = &values[j * dim + h * dk..j * dim + (h + 1) * dk];
            for (o, v) in out.iter_mut().zip(vh) {
                *o += p * v;
            }
        }
    }
    linear_row(&cat, params.tensor(ids.wo), params.tensor(ids.bo))
}

/// Encoder output for one source plus each decoder layer's projected
/// cross-attention keys and values.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    pub memory: Tensor,
    cross: [Vec<(Tensor, Tensor)>; 2],
}

impl EncodedSource {
    pub fn new(params: &ModelParams, src: &[usize]) -> Result<Self, ModelError> {
        let mut g = Graph::new();
        let b = bind(&mut g, params);
        let m = encode(&mut g, params, &b, src, src.len(), &mut None)?;
        let memory = g.value(m).clone();
        let project = |dir: Direction| {
            params.layout.decoders[dir.index()]
                .layers
                .iter()
                .map(|l| {
                    let a = &l.cross_attn;
                    (
                        linear_rows(&memory, params.tensor(a.wk), params.tensor(a.bk)),
                        linear_rows(&memory, params.tensor(a.wv), params.tensor(a.bv)),
                    )
                })
                .collect()
        };
        let cross = [project(Direction::L2R), project(Direction::R2L)];
        Ok(Self { memory, cross })
    }
}

/// Self-attention cache of one partial hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub dir: Direction,
    pub pos: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl DecoderState {
    pub fn new(params: &ModelParams, dir: Direction) -> Self {
        let layers = params.config.layers;
        Self {
            dir,
            pos: 0,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
        }
    }

    /// Feeds `token` at the next position; returns next-token log-probabilities.
    pub fn step(&mut self, params: &ModelParams, enc: &EncodedSource, token: usize) -> Result<Vec<f64>, ModelError> {
        let cfg = &params.config;
        if token >= cfg.tgt_vocab {
            return Err(ModelError::TokenOutOfRange { id: token, vocab: cfg.tgt_vocab });
        }
        if self.pos >= cfg.max_positions {
            return Err(ModelError::SequenceTooLong { len: self.pos + 1, max: cfg.max_positions });
        }
        let ids = &params.layout.decoders[self.dir.index()];
        let pe = kernels::sinusoidal_encoding(self.pos, cfg.model_dim)?;
        let mut x: Vec<f64> = params.tensor(ids.embed).row(token).iter().zip(&pe).map(|(a, b)| a + b).collect();
        for (l, layer) in ids.layers.iter().enumerate() {
            let sa = &layer.self_attn;
            let q = linear_row(&x, params.tensor(sa.wq), params.tensor(sa.bq));
            self.keys[l].extend(linear_row(&x, params.tensor(sa.wk), params.tensor(sa.bk)));
            self.values[l].extend(linear_row(&x, params.tensor(sa.wv), params.tensor(sa.bv)));
            let a = attend(&q, &self.keys[l], &self.values[l], cfg.heads, params, sa);
            let r: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
            x = norm_row(&r, params, &layer.norm1);

            let ca = &layer.cross_attn;
            let q = linear_row(&x, params.tensor(ca.wq), params.tensor(ca.bq));
            let (k, v) = &enc.cross[self.dir.index()][l];
            let c = attend(&q, k.data(), v.data(), cfg.heads, params, ca);
            let r: Vec<f64> = x.iter().zip(&c).map(|(u, v)| u + v).collect();
            x = norm_row(&r, params, &layer.norm2);

            let f = feed_forward_row(&x, params, &layer.ff);
            let r: Vec<f64> = x.iter().zip(&f).map(|(u, v)| u + v).collect();
            x = norm_row(&r, params, &layer.norm3);
        }
        self.pos += 1;
        let logits = linear_row(&x, params.tensor(ids.out_w), params.tensor(ids.out_b));
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(crate::numerics::NumericsError::NonFinite { op: "decoder step" }.into());
        }
        Ok(kernels::log_softmax(&logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::decoder_forward;
    use crate::model::ModelConfig;

    #[test]
    fn cached_steps_match_graph_forward() {
        let cfg = ModelConfig {
            embed_dim: 6,
            model_dim: 8,
            heads: 2,
            ff_dim: 12,
            ..ModelConfig::desk(12, 10)
        };
        let p = ModelParams::init(cfg, 11).unwrap();
        let src = [5, 6, 7, 8, 9];
        let enc = EncodedSource::new(&p, &src).unwrap();
        for dir in Direction::BOTH {
            let input = [dir.begin_token(), 5, 6, 9, 4];
            let mut g = Graph::new();
            let b = bind(&mut g, &p);
            let m = encode(&mut g, &p, &b, &src, src.len(), &mut None).unwrap();
            let logits = decoder_forward(&mut g, &p, &b, dir, &input, m, src.len(), &mut None).unwrap();
            let mut state = DecoderState::new(&p, dir);
            for (t, &tok) in input.iter().enumerate() {
                let cached = state.step(&p, &enc, tok).unwrap();
                let full = kernels::log_softmax(g.value(logits).row(t));
                let d = cached.iter().zip(&full).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(d < 1e-9, "{dir} step {t}: {d}");
            }
            assert_eq!(state.pos, input.len());
        }
    }

    #[test]
    fn step_rejects_bad_tokens() {
        let p = ModelParams::init(ModelConfig::desk(8, 8), 0).unwrap();
        let enc = EncodedSource::new(&p, &[5]).unwrap();
        let mut s = DecoderState::new(&p, Direction::L2R);
        assert!(s.step(&p, &enc, 8).is_err());
        assert!(EncodedSource::new(&p, &[]).is_err());
    }
}
