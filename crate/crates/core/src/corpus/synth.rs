//! Templated word problems with solver-computed answers.

use std::str::FromStr;

use num_rational::BigRational;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::problem::{prepare, Problem};
use super::CorpusError;
use crate::equations::{parse, reward, solve, SolutionSet, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    SumDiff,
    Linear,
    Ratio,
    Consecutive,
    QuadraticArea,
    ThreeVar,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 6] = [
        TemplateKind::SumDiff,
        TemplateKind::Linear,
        TemplateKind::Ratio,
        TemplateKind::Consecutive,
        TemplateKind::QuadraticArea,
        TemplateKind::ThreeVar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::SumDiff => "sum_diff",
            TemplateKind::Linear => "linear",
            TemplateKind::Ratio => "ratio",
            TemplateKind::Consecutive => "consecutive",
            TemplateKind::QuadraticArea => "quadratic_area",
            TemplateKind::ThreeVar => "three_var",
        }
    }

    /// Parses a comma-separated list; `all` selects every template.
    pub fn parse_list(csv: &str) -> Result<Vec<TemplateKind>, CorpusError> {
        let mut out = Vec::new();
        for name in csv.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if name == "all" {
                out.extend(Self::ALL);
            } else {
                out.push(name.parse()?);
            }
        }
        if out.is_empty() {
            return Err(CorpusError::Config("no templates selected".into()));
        }
        Ok(out)
    }
}

impl FromStr for TemplateKind {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| CorpusError::Config(format!("unknown template {s:?}")))
    }
}

impl std::fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub templates: Vec<TemplateKind>,
    /// Probability of adding a sentence with an irrelevant number.
    pub distractor_rate: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            templates: TemplateKind::ALL.to_vec(),
            distractor_rate: 0.3,
        }
    }
}

const NAMES: [&str; 10] = ["Ann", "Bob", "Carla", "Dev", "Emma", "Farid", "Grace", "Hugo", "Iris", "Jon"];
const ITEMS: [&str; 8] = ["apples", "stamps", "marbles", "books", "coins", "stickers", "cards", "pencils"];
const FRACTIONS: [&str; 8] = ["0.1", "0.2", "0.25", "0.3", "0.4", "0.5", "0.6", "0.75"];

struct Draft {
    text: String,
    equations: String,
    /// Numbers stated in the text; distractors must avoid them.
    used: Vec<i64>,
}

fn three_names(rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    NAMES.choose_multiple(rng, 3).copied().collect()
}

fn distinct(values: &[i64]) -> bool {
    values.iter().enumerate().all(|(i, a)| values[..i].iter().all(|b| a != b))
}

fn draft(kind: TemplateKind, rng: &mut ChaCha8Rng) -> Draft {
    let names = three_names(rng);
    let (a_name, b_name, c_name) = (names[0], names[1], names[2]);
    let item = *ITEMS.choose(rng).expect("items");
    let phrasing = rng.random_range(0..3);
    match kind {
        TemplateKind::SumDiff => loop {
            let y = rng.random_range(1..=40i64);
            let x = y + rng.random_range(1..=30i64);
            let (s, d) = (x + y, x - y);
            if s == d {
                continue;
            }
            let text = match phrasing {
                0 => format!("The sum of two numbers is {s} and their difference is {d}. Find the two numbers."),
                1 => format!("Two numbers add up to {s}. One of them is {d} more than the other. What are the numbers?"),
                _ => format!(
                    "{a_name} and {b_name} have {s} {item} together. {a_name} has {d} more {item} than {b_name}. How many {item} does each of them have?"
                ),
            };
            return Draft { text, equations: format!("x+y={s};x-y={d}"), used: vec![s, d] };
        },
        TemplateKind::Linear => loop {
            let a = rng.random_range(2..=9i64);
            let x = rng.random_range(1..=20i64);
            let b = if rng.random_bool(0.2) { -rng.random_range(1..=20i64) } else { rng.random_range(1..=30i64) };
            let c = a * x + b;
            if !distinct(&[a, b, c]) || c <= 0 {
                continue;
            }
            let text = match phrasing {
                0 => format!("{a} times a number plus {b} equals {c}. What is the number?"),
                1 => format!("If you multiply a number by {a} and then add {b}, you get {c}. Find the number."),
                _ => format!("{a_name} has {a} bags with the same number of {item} in each, and {b} loose {item}. That makes {c} {item} in all. How many {item} are in one bag?"),
            };
            return Draft { text, equations: format!("{a}*x+{b}={c}"), used: vec![a, b, c] };
        },
        TemplateKind::Ratio => {
            let f = *FRACTIONS.choose(rng).expect("fractions");
            let n = 20 * rng.random_range(1..=20i64);
            let text = match phrasing {
                0 => format!("What is {f} of {n}?"),
                1 => format!("A school has {n} students and {f} of them walk to school. How many students walk to school?"),
                _ => format!("{a_name} had {n} dollars and spent {f} of the money on {item}. How much did {a_name} spend?"),
            };
            Draft { text, equations: format!("x={f}*{n}"), used: vec![n] }
        }
        TemplateKind::Consecutive => {
            let start = rng.random_range(1..=60i64);
            let (count, word) = if rng.random_bool(0.5) { (2, "two") } else { (3, "three") };
            let step = if rng.random_bool(0.3) { 2 } else { 1 };
            let kind = if step == 2 { if start % 2 == 0 { "even " } else { "odd " } } else { "" };
            let sum: i64 = (0..count).map(|i| start + step * i).sum();
            let text = match phrasing {
                0 => format!("The sum of {word} consecutive {kind}integers is {sum}. What is the smallest of them?"),
                1 => format!("{word} consecutive {kind}integers add up to {sum}. Find the first one.")
                    .replacen(word, &capitalize(word), 1),
                _ => format!("{a_name} wrote down {word} consecutive {kind}integers whose total is {sum}. Which number did {a_name} write first?"),
            };
            let terms: Vec<String> = (0..count)
                .map(|i| if i == 0 { "x".to_string() } else { format!("(x+{})", step * i) })
                .collect();
            Draft { text, equations: format!("{}={sum}", terms.join("+")), used: vec![sum] }
        }
        TemplateKind::QuadraticArea => {
            if rng.random_bool(0.6) {
                let side = rng.random_range(2..=30i64);
                let area = side * side;
                let text = match phrasing {
                    0 => format!("A square garden has an area of {area} square meters. How long is each side?"),
                    1 => format!("The square of a number is {area}. What is the number?"),
                    _ => format!("{a_name} tiled a square floor with an area of {area} square feet. Find the length of one side."),
                };
                Draft { text, equations: format!("x^2={area}"), used: vec![area] }
            } else {
                let w = rng.random_range(2..=20i64);
                let d = rng.random_range(1..=12i64);
                let area = w * (w + d);
                let text = match phrasing {
                    0 => format!("A rectangle is {d} meters longer than it is wide. Its area is {area} square meters. Find its width."),
                    1 => format!("The length of a field is {d} more than its width and the field covers {area} square yards. How wide is it?"),
                    _ => format!("{a_name} cut a rectangle whose length exceeds its width by {d} inches. The rectangle has an area of {area} square inches. What is the width?"),
                };
                Draft { text, equations: format!("x*(x+{d})={area}"), used: vec![d, area] }
            }
        }
        TemplateKind::ThreeVar => loop {
            let z = rng.random_range(1..=30i64);
            let b = rng.random_range(1..=15i64);
            let a = rng.random_range(1..=15i64);
            let y = z + b;
            let x = y + a;
            let t = x + y + z;
            if !distinct(&[t, a, b]) {
                continue;
            }
            let text = match phrasing {
                0 => format!("{a_name}, {b_name} and {c_name} have {t} {item} in total. {a_name} has {a} more than {b_name}, and {b_name} has {b} more than {c_name}. How many {item} does each person have?"),
                1 => format!("Three numbers add up to {t}. The first is {a} more than the second, and the second is {b} more than the third. Find the numbers."),
                _ => format!("A box holds {t} {item} of three colors. There are {a} more red ones than blue ones and {b} more blue ones than green ones. How many of each color are there?"),
            };
            return Draft { text, equations: format!("x+y+z={t};x=y+{a};y=z+{b}"), used: vec![t, a, b] };
        },
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn add_distractor(d: &mut Draft, rng: &mut ChaCha8Rng) {
    let k = loop {
        let k = rng.random_range(2..=95i64);
        if !d.used.contains(&k) {
            break k;
        }
    };
    let name = *NAMES.choose(rng).expect("names");
    let sentence = match rng.random_range(0..4) {
        0 => format!("{name} is {k} years old."),
        1 => format!("It was {k} degrees outside that day."),
        2 => format!("The shop is {k} meters from the station."),
        _ => format!("{name} also keeps {k} old photos in a drawer."),
    };
    d.text = if rng.random_bool(0.5) {
        format!("{sentence} {}", d.text)
    } else {
        format!("{} {sentence}", d.text)
    };
}

fn exact_answers(equations: &str) -> Option<Vec<BigRational>> {
    match solve(&parse(equations).ok()?) {
        SolutionSet::Solutions(sols) => sols
            .into_iter()
            .flatten()
            .map(|(_, v)| match v {
                Value::Exact(r) => Some(r),
                Value::Real(_) => None,
            })
            .collect(),
        _ => None,
    }
}

/// Self-check: the text's numbers align to the equations and the aligned
/// template reproduces the answers.
fn round_trips(p: &Problem) -> bool {
    let prepared = prepare(p);
    match &prepared.template {
        Some(t) => reward(&t.tokens, &prepared.mapping, &p.answers) == 1.0,
        None => false,
    }
}

/// `n` problems, deterministic in `seed`. Templates are drawn uniformly.
pub fn synth_gen(seed: u64, n: usize, cfg: &GenConfig) -> Result<Vec<Problem>, CorpusError> {
    if cfg.templates.is_empty() {
        return Err(CorpusError::Config("no templates selected".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let kind = *cfg.templates.choose(&mut rng).expect("templates");
        let mut attempts = 0;
        let problem = loop {
            attempts += 1;
            if attempts > 100 {
                return Err(CorpusError::Config(format!("template {kind} keeps failing its self-check")));
            }
            let mut d = draft(kind, &mut rng);
            if rng.random_bool(cfg.distractor_rate) {
                add_distractor(&mut d, &mut rng);
            }
            let Some(answers) = exact_answers(&d.equations) else { continue };
            let p = Problem {
                id: format!("{kind}-{seed}-{i}"),
                text: d.text,
                equations: d.equations,
                answers,
                template: None,
            };
            if round_trips(&p) {
                break p;
            }
        };
        out.push(problem);
    }
    Ok(out)
}
