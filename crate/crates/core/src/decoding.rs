//! Beam search over either decoder and the vote between their top results.

use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{BOS, BOS_R, EOS, PAD};
use crate::model::{DecoderState, Direction, EncodedSource, ModelError, ModelParams};

pub const DEFAULT_MAX_LEN: usize = 64;

/// Anything that yields next-token log-probabilities one step at a time.
pub trait StepModel {
    type State: Clone;

    fn vocab(&self) -> usize;

    fn eos(&self) -> usize {
        EOS
    }

    /// State after the begin token, and the first distribution.
    fn start(&self) -> Result<(Self::State, Vec<f64>), ModelError>;

    /// Feeds `token`; returns the next distribution.
    fn advance(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>, ModelError>;
}

/// One decoder of a trained model over a fixed encoded source.
pub struct DirectionScorer<'a> {
    pub params: &'a ModelParams,
    pub source: &'a EncodedSource,
    pub dir: Direction,
}

impl StepModel for DirectionScorer<'_> {
    type State = DecoderState;

    fn vocab(&self) -> usize {
        self.params.config.tgt_vocab
    }

    fn start(&self) -> Result<(DecoderState, Vec<f64>), ModelError> {
        let mut state = DecoderState::new(self.params, self.dir);
        let lp = state.step(self.params, self.source, self.dir.begin_token())?;
        Ok((state, lp))
    }

    fn advance(&self, state: &mut DecoderState, token: usize) -> Result<Vec<f64>, ModelError> {
        state.step(self.params, self.source, token)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Emitted tokens per hypothesis, end-of-sequence included.
    pub max_len: usize,
    /// Tokens never expanded.
    pub banned: Vec<usize>,
    /// Rank results by `score / len^alpha` instead of the raw score.
    pub length_penalty: Option<f64>,
}

impl BeamConfig {
    pub fn new(beam_size: usize) -> Self {
        Self {
            beam_size,
            max_len: DEFAULT_MAX_LEN,
            banned: Vec::new(),
            length_penalty: None,
        }
    }

    /// Bans the padding and begin sentinels, which no target ever contains.
    pub fn for_model(beam_size: usize) -> Self {
        Self {
            banned: vec![PAD, BOS, BOS_R],
            ..Self::new(beam_size)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// In the decoder's reading order, without the end token.
    pub tokens: Vec<usize>,
    /// Sum of log-probabilities of every emitted token, end token included.
    pub score: f64,
    pub direction: Direction,
    /// False when cut off at the length limit.
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens in left-to-right order.
    pub fn canonical(&self) -> Vec<usize> {
        self.direction.reading_order(&self.tokens)
    }

    fn ranking_key(&self, length_penalty: Option<f64>) -> f64 {
        match length_penalty {
            None => self.score,
            Some(alpha) => {
                let len = self.tokens.len() + usize::from(self.finished);
                self.score / (len.max(1) as f64).powf(alpha)
            }
        }
    }
}

struct Live<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
    next: Vec<f64>,
}

/// Sequences and scores found by beam search, best first. Directions are
/// stamped by the caller; generic results report [`Direction::L2R`].
pub fn beam_search_with<M: StepModel>(model: &M, cfg: &BeamConfig) -> Result<Vec<Hypothesis>, ModelError> {
    beam_search_dir(model, cfg, Direction::L2R)
}

fn beam_search_dir<M: StepModel>(model: &M, cfg: &BeamConfig, dir: Direction) -> Result<Vec<Hypothesis>, ModelError> {
    if cfg.beam_size == 0 || cfg.max_len == 0 {
        return Err(ModelError::Config("beam_size and max_len must be at least 1".into()));
    }
    let eos = model.eos();
    let vocab = model.vocab();
    let mut banned = vec![false; vocab];
    for &t in &cfg.banned {
        if t < vocab && t != eos {
            banned[t] = true;
        }
    }
    let (state, next) = model.start()?;
    let mut live = vec![Live { tokens: Vec::new(), score: 0.0, state, next }];
    let mut pool: Vec<Hypothesis> = Vec::new();

    for len in 1..=cfg.max_len {
        let mut cands: Vec<(usize, usize, f64)> = Vec::with_capacity(live.len() * vocab);
        for (i, h) in live.iter().enumerate() {
            for (tok, lp) in h.next.iter().enumerate() {
                if !banned[tok] {
                    cands.push((i, tok, h.score + lp));
                }
            }
        }
        // Stable: equal scores keep parent order, then token order.
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        cands.truncate(cfg.beam_size);

        let mut kept = Vec::new();
        for &(i, tok, score) in &cands {
            let parent = &live[i];
            let mut tokens = parent.tokens.clone();
            if tok == eos {
                pool.push(Hypothesis { tokens, score, direction: dir, finished: true });
            } else {
                tokens.push(tok);
                kept.push((i, tok, tokens, score));
            }
        }
        if pool.len() >= cfg.beam_size || kept.is_empty() {
            break;
        }
        if len == cfg.max_len {
            pool.extend(kept.into_iter().map(|(_, _, tokens, score)| Hypothesis {
                tokens,
                score,
                direction: dir,
                finished: false,
            }));
            break;
        }
        let mut next_live = Vec::with_capacity(kept.len());
        for (i, tok, tokens, score) in kept {
            let mut state = live[i].state.clone();
            let next = model.advance(&mut state, tok)?;
            next_live.push(Live { tokens, score, state, next });
        }
        live = next_live;
    }

    pool.sort_by(|a, b| {
        b.ranking_key(cfg.length_penalty)
            .total_cmp(&a.ranking_key(cfg.length_penalty))
    });
    pool.truncate(cfg.beam_size);
    Ok(pool)
}

/// Repeated argmax until the end token or the length limit.
pub fn greedy_with<M: StepModel>(model: &M, cfg: &BeamConfig) -> Result<Hypothesis, ModelError> {
    let eos = model.eos();
    let (mut state, mut next) = model.start()?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for len in 1..=cfg.max_len.max(1) {
        let (tok, lp) = next
            .iter()
            .enumerate()
            .filter(|(t, _)| *t == eos || !cfg.banned.contains(t))
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (t, &lp)| if lp > best.1 { (t, lp) } else { best });
        score += lp;
        if tok == eos {
            return Ok(Hypothesis { tokens, score, direction: Direction::L2R, finished: true });
        }
        tokens.push(tok);
        if len == cfg.max_len {
            break;
        }
        next = model.advance(&mut state, tok)?;
    }
    Ok(Hypothesis { tokens, score, direction: Direction::L2R, finished: false })
}

pub fn beam_search(
    params: &ModelParams,
    source: &EncodedSource,
    dir: Direction,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>, ModelError> {
    beam_search_dir(&DirectionScorer { params, source, dir }, cfg, dir)
}

/// The winning hypothesis in left-to-right order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub direction: Direction,
}

/// Higher score wins; an exact tie goes to the left-to-right decoder.
pub fn vote(l2r: &Hypothesis, r2l: &Hypothesis) -> Vote {
    let winner = if r2l.score > l2r.score { r2l } else { l2r };
    Vote {
        tokens: winner.canonical(),
        score: winner.score,
        direction: winner.direction,
    }
}

/// Both beams for one source plus their vote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub l2r: Vec<Hypothesis>,
    pub r2l: Vec<Hypothesis>,
    pub vote: Vote,
}

impl Decoded {
    pub fn best(&self, dir: Direction) -> &Hypothesis {
        match dir {
            Direction::L2R => &self.l2r[0],
            Direction::R2L => &self.r2l[0],
        }
    }
}

pub fn decode(params: &ModelParams, src: &[usize], cfg: &BeamConfig) -> Result<Decoded, ModelError> {
    let source = EncodedSource::new(params, src)?;
    let l2r = beam_search(params, &source, Direction::L2R, cfg)?;
    let r2l = beam_search(params, &source, Direction::R2L, cfg)?;
    let vote = vote(&l2r[0], &r2l[0]);
    Ok(Decoded { l2r, r2l, vote })
}
