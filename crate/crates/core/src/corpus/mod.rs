//! Problems, vocabularies, the synthetic generator, and corpus I/O.

mod eval;
mod problem;
mod synth;
pub mod vocab;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use eval::{evaluate, evaluate_encoded, score_decoded, Report};
pub use problem::{
    encode, load, prepare, preprocess, read_problems, save, source_vocabulary, target_vocabulary,
    write_problems, Encoded, Prepared, Problem,
};
pub use synth::{synth_gen, GenConfig, TemplateKind};
pub use vocab::Vocabulary;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{0}")]
    Config(String),
}

/// `k` disjoint index sets covering `0..n`, sizes within one of each other.
pub fn folds(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, CorpusError> {
    if k < 2 {
        return Err(CorpusError::Config(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(CorpusError::Config(format!("{k} folds requested for {n} items")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::with_capacity(n / k + 1); k];
    for (i, v) in idx.into_iter().enumerate() {
        out[i % k].push(v);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Seeded shuffle split; the first part holds `round(n * fraction)` items.
pub fn split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64) * fraction).round() as usize;
    let rest = idx.split_off(cut.min(n));
    (idx, rest)
}
