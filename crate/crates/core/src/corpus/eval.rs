use serde::{Deserialize, Serialize};

use super::problem::{encode, prepare, Encoded, Problem};
use super::vocab::Vocabulary;
use crate::decoding::{decode, BeamConfig, Decoded};
use crate::equations::reward_spellings;
use crate::model::{Checkpoint, Direction, ModelError, ModelParams};

/// Correct-answer counts per decoding path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub total: usize,
    pub l2r: usize,
    pub r2l: usize,
    pub vote: usize,
    /// Problems counted wrong without decoding.
    pub unalignable: usize,
}

fn ratio(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

impl Report {
    pub fn accuracy_l2r(&self) -> f64 {
        ratio(self.l2r, self.total)
    }

    pub fn accuracy_r2l(&self) -> f64 {
        ratio(self.r2l, self.total)
    }

    pub fn accuracy_vote(&self) -> f64 {
        ratio(self.vote, self.total)
    }

    pub fn merge(&mut self, other: &Report) {
        self.total += other.total;
        self.l2r += other.l2r;
        self.r2l += other.r2l;
        self.vote += other.vote;
        self.unalignable += other.unalignable;
    }
}

/// Correctness of the top L2R, top R2L, and voted outputs.
pub fn score_decoded(d: &Decoded, ex: &Encoded, tgt_vocab: &Vocabulary) -> [bool; 3] {
    let ok = |ids: &[usize]| reward_spellings(&tgt_vocab.decode(ids), &ex.mapping, &ex.answers) == 1.0;
    [
        ok(&d.best(Direction::L2R).canonical()),
        ok(&d.best(Direction::R2L).canonical()),
        ok(&d.vote.tokens),
    ]
}

/// Decodes already-encoded problems. Unalignable ones count as wrong.
pub fn evaluate_encoded(
    params: &ModelParams,
    tgt_vocab: &Vocabulary,
    examples: &[Encoded],
    beam: &BeamConfig,
) -> Result<Report, ModelError> {
    let mut r = Report::default();
    for ex in examples {
        r.total += 1;
        if ex.tgt.is_none() {
            r.unalignable += 1;
            continue;
        }
        let d = decode(params, &ex.src, beam)?;
        let [a, b, c] = score_decoded(&d, ex, tgt_vocab);
        r.l2r += usize::from(a);
        r.r2l += usize::from(b);
        r.vote += usize::from(c);
    }
    Ok(r)
}

/// Preprocesses, decodes, and checks every problem against its key answers.
pub fn evaluate(ckpt: &Checkpoint, problems: &[Problem], beam_size: usize) -> Result<Report, ModelError> {
    let encoded: Vec<Encoded> = problems
        .iter()
        .map(|p| encode(&prepare(p), &ckpt.source_vocab, &ckpt.target_vocab))
        .collect();
    evaluate_encoded(&ckpt.params, &ckpt.target_vocab, &encoded, &BeamConfig::for_model(beam_size))
}
