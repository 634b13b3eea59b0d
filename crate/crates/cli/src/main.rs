use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dualdec_core::corpus::{
    self, encode, evaluate, folds, prepare, preprocess, source_vocabulary, synth_gen, target_vocabulary, GenConfig,
    TemplateKind,
};
use dualdec_core::equations::{parse, solve};
use dualdec_core::numbering::substitute;
use dualdec_core::training::{train, train_rl, MetricsLog};
use dualdec_core::{Checkpoint, Encoded, EquationTemplate, NumberMapping, Problem, Report, TrainConfig};

#[derive(Parser)]
#[command(name = "dualdec", version, about = "Equation generation for math word problems with two decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic word problems as JSON lines.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated template names, or `all`.
        #[arg(long, default_value = "all")]
        templates: String,
        #[arg(long, default_value_t = 0.3)]
        distractor_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align equations to the numbers in each problem and store the templates.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both decoders by maximum likelihood.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON training configuration; omitted fields take desk defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Held-out problems evaluated during training.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a checkpoint with REINFORCE on answer correctness.
    Rl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        lr: f64,
        #[arg(long, default_value_t = 6)]
        beam: usize,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report answer accuracy of a checkpoint, per fold and overall.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parse, substitute, and solve one equation list.
    Solve {
        #[arg(long, allow_hyphen_values = true)]
        eq: String,
        /// Comma-separated numbers; the i-th fills slot index i (N_i, F_i or M_i by sign and size).
        #[arg(long)]
        nums: Option<String>,
    },
}

fn metrics_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".metrics.jsonl");
    PathBuf::from(s)
}

fn load_problems(path: &Path) -> Result<Vec<Problem>> {
    corpus::load(path).with_context(|| format!("reading {}", path.display()))
}

fn encode_all(problems: &[Problem], ckpt: &Checkpoint) -> Vec<Encoded> {
    problems
        .iter()
        .map(|p| encode(&prepare(p), &ckpt.source_vocab, &ckpt.target_vocab))
        .collect()
}

fn print_report(label: &str, r: &Report) {
    println!(
        "{label:<8} n={:<5} l2r={:.4} r2l={:.4} vote={:.4} unalignable={}",
        r.total,
        r.accuracy_l2r(),
        r.accuracy_r2l(),
        r.accuracy_vote(),
        r.unalignable
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { n, seed, templates, distractor_rate, out } => {
            let cfg = GenConfig { templates: TemplateKind::parse_list(&templates)?, distractor_rate };
            let problems = synth_gen(seed, n, &cfg)?;
            corpus::save(&out, &problems)?;
            println!("wrote {} problems to {}", problems.len(), out.display());
        }
        Command::Preprocess { input, out } => {
            let mut problems = load_problems(&input)?;
            let unalignable = preprocess(&mut problems);
            corpus::save(&out, &problems)?;
            println!("{} problems, {unalignable} unalignable", problems.len());
        }
        Command::Train { data, config, epochs, lr, seed, dev, out } => {
            let mut cfg: TrainConfig = match config {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(&path)?)
                    .with_context(|| format!("parsing {}", path.display()))?,
                None => TrainConfig::default(),
            };
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.lr = lr.unwrap_or(cfg.lr);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let prepared: Vec<_> = load_problems(&data)?.iter().map(prepare).collect();
            let source_vocab = source_vocabulary(&prepared);
            let target_vocab = target_vocabulary();
            let train_set: Vec<Encoded> = prepared.iter().map(|p| encode(p, &source_vocab, &target_vocab)).collect();
            let dev_set: Option<Vec<Encoded>> = match dev {
                Some(path) => Some(
                    load_problems(&path)?
                        .iter()
                        .map(|p| encode(&prepare(p), &source_vocab, &target_vocab))
                        .collect(),
                ),
                None => None,
            };
            let mut writer = BufWriter::new(File::create(metrics_path(&out))?);
            let mut log = MetricsLog::new(Some(&mut writer));
            let params = train(&cfg, &source_vocab, &target_vocab, &train_set, dev_set.as_deref(), &mut log)?;
            let ckpt = Checkpoint { params, source_vocab, target_vocab };
            ckpt.save(&out)?;
            if let Some(last) = log.records.iter().rev().find(|r| r.answer_accuracy_vote.is_some()) {
                println!(
                    "epoch {} {}: vote accuracy {:.4}",
                    last.epoch,
                    last.split,
                    last.answer_accuracy_vote.unwrap_or_default()
                );
            }
            println!("saved {}", out.display());
        }
        Command::Rl { data, ckpt, lr, beam, epochs, seed, out } => {
            let mut checkpoint = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let problems = load_problems(&data)?;
            let train_set = encode_all(&problems, &checkpoint);
            let cfg = TrainConfig { rl_lr: lr, rl_beam: beam, rl_epochs: epochs, seed, eval_every: 0, ..TrainConfig::default() };
            let mut writer = BufWriter::new(File::create(metrics_path(&out))?);
            let mut log = MetricsLog::new(Some(&mut writer));
            train_rl(&mut checkpoint.params, &cfg, &checkpoint.target_vocab, &train_set, None, &mut log)?;
            checkpoint.save(&out)?;
            if let Some(r) = log.records.iter().find_map(|r| r.mean_reward) {
                println!("mean reward {r:.4}");
            }
            println!("saved {}", out.display());
        }
        Command::Eval { data, ckpt, beam, folds: k, seed } => {
            let checkpoint = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let problems = load_problems(&data)?;
            let mut total = Report::default();
            if k >= 2 && problems.len() >= k {
                for (i, fold) in folds(problems.len(), k, seed)?.iter().enumerate() {
                    let subset: Vec<Problem> = fold.iter().map(|&j| problems[j].clone()).collect();
                    let r = evaluate(&checkpoint, &subset, beam)?;
                    print_report(&format!("fold {}", i + 1), &r);
                    total.merge(&r);
                }
            } else {
                total = evaluate(&checkpoint, &problems, beam)?;
            }
            print_report("all", &total);
        }
        Command::Solve { eq, nums } => {
            let text = match &nums {
                Some(csv) => {
                    let mapping = NumberMapping::from_text(&csv.split(',').map(str::trim).collect::<Vec<_>>().join(" ; "));
                    let template = EquationTemplate::from_text(&eq)?;
                    let text = substitute(&template.tokens, &mapping)?;
                    println!("equations: {text}");
                    text
                }
                None => eq,
            };
            let ast = match parse(&text) {
                Ok(a) => a,
                Err(e) => bail!("cannot parse {text:?}: {e}"),
            };
            println!("{}", solve(&ast));
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
