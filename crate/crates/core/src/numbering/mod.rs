//! Number extraction, kind classification, text-to-equation alignment, and
//! substitution of values back into generated templates.

mod extract;

use std::fmt;

use num_rational::BigRational;
use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};

pub use extract::{extract_numbers, source_tokens};

use crate::equations::{self, format_rational, parse_decimal, Slot, Token};
use crate::rational;

/// Largest number-token index the target vocabulary covers.
pub const MAX_NUMBER_INDEX: usize = 12;

/// Constants a template may keep as literals.
pub const CONSTANT_WHITELIST: [i64; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 100];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NumberKind {
    Negative,
    /// Strictly between 0 and 1.
    UnitFraction,
    Other,
}

impl NumberKind {
    pub const ALL: [NumberKind; 3] = [NumberKind::Negative, NumberKind::UnitFraction, NumberKind::Other];

    pub fn of(value: &BigRational) -> NumberKind {
        if value.is_negative() {
            NumberKind::Negative
        } else if value.is_positive() && *value < BigRational::one() {
            NumberKind::UnitFraction
        } else {
            NumberKind::Other
        }
    }

    pub fn prefix(self) -> char {
        match self {
            NumberKind::Negative => 'M',
            NumberKind::UnitFraction => 'F',
            NumberKind::Other => 'N',
        }
    }

    pub fn from_prefix(c: char) -> Option<NumberKind> {
        match c {
            'M' => Some(NumberKind::Negative),
            'F' => Some(NumberKind::UnitFraction),
            'N' => Some(NumberKind::Other),
            _ => None,
        }
    }
}

/// How a number was written, which decides its alternative readings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum NumberForm {
    Plain,
    Fraction,
    Mixed {
        #[serde(with = "rational::serde_str")]
        whole: BigRational,
        #[serde(with = "rational::serde_str")]
        fraction: BigRational,
    },
    Percent {
        #[serde(with = "rational::serde_str")]
        raw: BigRational,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractedNumber {
    /// Character offsets `[start, end)` in the source text.
    pub span: (usize, usize),
    #[serde(skip)]
    pub(crate) byte_span: (usize, usize),
    pub surface: String,
    #[serde(with = "rational::serde_str")]
    pub value: BigRational,
    pub kind: NumberKind,
    #[serde(flatten)]
    pub form: NumberForm,
    /// 1-based position among all numbers of the text.
    pub index: usize,
}

impl ExtractedNumber {
    pub fn symbol(&self) -> Slot {
        Slot {
            kind: self.kind,
            index: self.index,
        }
    }
}

/// Alternative exact values the same surface form may take in a gold
/// equation. The canonical value comes first.
pub fn variants(n: &ExtractedNumber) -> Vec<BigRational> {
    let mut out = vec![n.value.clone()];
    let push = |v: BigRational, out: &mut Vec<BigRational>| {
        if !out.contains(&v) {
            out.push(v);
        }
    };
    // Only values without a terminating decimal expansion get rounded readings.
    if !has_terminating_decimal(&n.value) {
        for places in 1..=4 {
            push(rational::truncate_places(&n.value, places), &mut out);
            push(rational::round_places(&n.value, places), &mut out);
        }
    }
    match &n.form {
        NumberForm::Mixed { whole, fraction } => {
            push(whole.clone(), &mut out);
            push(fraction.clone(), &mut out);
        }
        NumberForm::Percent { raw } => push(raw.clone(), &mut out),
        NumberForm::Plain | NumberForm::Fraction => {}
    }
    out
}

fn has_terminating_decimal(r: &BigRational) -> bool {
    let mut den = r.denom().clone();
    for p in [BigInt::from(2), BigInt::from(5)] {
        while (&den % &p).is_zero() {
            den /= &p;
        }
    }
    den.is_one()
}

/// Extracted numbers of one problem and the symbols assigned to them.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct NumberMapping {
    pub numbers: Vec<ExtractedNumber>,
}

impl NumberMapping {
    pub fn from_text(text: &str) -> Self {
        Self {
            numbers: extract_numbers(text),
        }
    }

    pub fn value_of(&self, slot: Slot) -> Option<&BigRational> {
        self.numbers
            .get(slot.index.checked_sub(1)?)
            .filter(|n| n.kind == slot.kind)
            .map(|n| &n.value)
    }

    pub fn symbols(&self) -> impl Iterator<Item = Slot> + '_ {
        self.numbers.iter().map(ExtractedNumber::symbol)
    }
}

/// Equation list with numeric literals replaced by symbol tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EquationTemplate {
    pub tokens: Vec<Token>,
}

impl EquationTemplate {
    pub fn from_text(s: &str) -> Result<Self, equations::ParseError> {
        Ok(Self {
            tokens: equations::tokenize(s)?,
        })
    }

    pub fn spellings(&self) -> Vec<String> {
        self.tokens.iter().map(ToString::to_string).collect()
    }
}

impl fmt::Display for EquationTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&equations::render(&self.tokens))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AlignError {
    #[error("gold equations do not parse: {0}")]
    Parse(#[from] equations::ParseError),
    #[error("literal {literal} matches no number in the text")]
    Unalignable { literal: String },
    #[error("{count} numbers exceed the supported maximum of {MAX_NUMBER_INDEX}")]
    TooManyNumbers { count: usize },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("template references {slot}, which the problem text does not define")]
pub struct UnknownSymbol {
    pub slot: String,
}

fn is_whitelisted(v: &BigRational) -> bool {
    v.is_integer() && CONSTANT_WHITELIST.iter().any(|&c| *v == rational::int(c))
}

/// A literal the alignment must place.
struct Literal {
    token: usize,
    value: BigRational,
    /// A preceding unary minus that may be folded into a negative number.
    unary_minus: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Choice {
    Text { number: usize, absorb_minus: bool },
    Keep,
}

fn is_unary_minus(tokens: &[Token], i: usize) -> bool {
    tokens[i] == Token::Minus
        && (i == 0
            || tokens[i - 1].is_operator()
            || matches!(tokens[i - 1], Token::LParen | Token::Equals | Token::Semi))
}

/// Candidate choices for one literal in preference order: unused exact
/// matches, unused variant matches, the literal itself when whitelisted,
/// then reuse of an already assigned number.
fn candidates(lit: &Literal, numbers: &[ExtractedNumber], variant_sets: &[Vec<BigRational>]) -> Vec<(Choice, bool)> {
    let neg = -lit.value.clone();
    let mut exact = Vec::new();
    let mut variant = Vec::new();
    for (i, n) in numbers.iter().enumerate() {
        let signs: &[bool] = if lit.unary_minus { &[true, false] } else { &[false] };
        for &absorb in signs {
            let target = if absorb { &neg } else { &lit.value };
            if n.value == *target {
                exact.push(Choice::Text { number: i, absorb_minus: absorb });
            } else if variant_sets[i].contains(target) {
                variant.push(Choice::Text { number: i, absorb_minus: absorb });
            }
        }
    }
    let mut out: Vec<(Choice, bool)> = exact.iter().chain(&variant).map(|c| (*c, false)).collect();
    if is_whitelisted(&lit.value) {
        out.push((Choice::Keep, false));
    }
    out.extend(exact.iter().chain(&variant).map(|c| (*c, true)));
    out
}

fn search(
    k: usize,
    options: &[Vec<(Choice, bool)>],
    used: &mut [bool],
    picked: &mut Vec<Choice>,
) -> bool {
    if k == options.len() {
        return true;
    }
    for &(choice, reuse) in &options[k] {
        match choice {
            Choice::Text { number, .. } => {
                if used[number] != reuse {
                    continue;
                }
                let was = used[number];
                used[number] = true;
                picked.push(choice);
                if search(k + 1, options, used, picked) {
                    return true;
                }
                picked.pop();
                used[number] = was;
            }
            Choice::Keep => {
                picked.push(choice);
                if search(k + 1, options, used, picked) {
                    return true;
                }
                picked.pop();
            }
        }
    }
    false
}

/// Rewrites concrete gold equations into a template over the text's number
/// symbols. Literals are visited left to right, so equal values take the
/// lowest unused text index in order of appearance.
pub fn align(numbers: &[ExtractedNumber], gold: &str) -> Result<EquationTemplate, AlignError> {
    if numbers.len() > MAX_NUMBER_INDEX {
        return Err(AlignError::TooManyNumbers { count: numbers.len() });
    }
    let tokens = equations::tokenize(gold)?;
    equations::parse_tokens(&tokens)?;

    let mut literals = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        let Token::Num(s) = tok else { continue };
        if i > 0 && tokens[i - 1] == Token::Caret {
            continue;
        }
        literals.push(Literal {
            token: i,
            value: parse_decimal(s).expect("lexer yields valid decimals"),
            unary_minus: i > 0 && is_unary_minus(&tokens, i - 1),
        });
    }

    let variant_sets: Vec<Vec<BigRational>> = numbers.iter().map(variants).collect();
    let options: Vec<Vec<(Choice, bool)>> = literals
        .iter()
        .map(|l| candidates(l, numbers, &variant_sets))
        .collect();
    if let Some(k) = options.iter().position(Vec::is_empty) {
        return Err(AlignError::Unalignable {
            literal: tokens[literals[k].token].to_string(),
        });
    }
    let mut used = vec![false; numbers.len()];
    let mut picked = Vec::with_capacity(literals.len());
    if !search(0, &options, &mut used, &mut picked) {
        return Err(AlignError::Unalignable {
            literal: gold.to_string(),
        });
    }

    let mut replace: Vec<Option<Token>> = tokens.iter().cloned().map(Some).collect();
    for (lit, choice) in literals.iter().zip(&picked) {
        match *choice {
            Choice::Text { number, absorb_minus } => {
                replace[lit.token] = Some(Token::Slot(numbers[number].symbol()));
                if absorb_minus {
                    replace[lit.token - 1] = None;
                }
            }
            Choice::Keep => {
                replace[lit.token] = Some(Token::Num(format_rational(&lit.value)));
            }
        }
    }
    Ok(EquationTemplate {
        tokens: replace.into_iter().flatten().collect(),
    })
}

/// Writes concrete values in place of symbol tokens. Negative values that
/// follow an operator are parenthesized.
pub fn substitute(template: &[Token], mapping: &NumberMapping) -> Result<String, UnknownSymbol> {
    let mut out = String::new();
    for (i, tok) in template.iter().enumerate() {
        match tok {
            Token::Slot(slot) => {
                let value = mapping.value_of(*slot).ok_or_else(|| UnknownSymbol {
                    slot: slot.to_string(),
                })?;
                let text = format_rational(value);
                let after_operator = i > 0 && template[i - 1].is_operator();
                if value.is_negative() && after_operator && !text.starts_with('(') {
                    out.push('(');
                    out.push_str(&text);
                    out.push(')');
                } else {
                    out.push_str(&text);
                }
            }
            other => out.push_str(&other.to_string()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{int, ratio};

    fn nums(text: &str) -> Vec<ExtractedNumber> {
        extract_numbers(text)
    }

    #[test]
    fn variants_of_mixed_number() {
        let n = &nums("3 1/3 cups")[0];
        let v = variants(n);
        assert_eq!(v[0], ratio(10, 3));
        for want in [ratio(333, 100), ratio(3333, 1000), ratio(33, 10), int(3), ratio(1, 3)] {
            assert!(v.contains(&want), "missing {want}");
        }
    }

    #[test]
    fn variants_of_integer_and_percent() {
        assert_eq!(variants(&nums("5 apples")[0]), vec![int(5)]);
        assert_eq!(variants(&nums("5% tax")[0]), vec![ratio(1, 20), int(5)]);
    }

    #[test]
    fn align_linear() {
        let t = align(&nums("2 apples, 3 pears, 7 total"), "2*x+3=7").unwrap();
        assert_eq!(t.to_string(), "N_1*x+N_2=N_3");
    }

    #[test]
    fn align_duplicates_in_order() {
        let t = align(&nums("3 and 3"), "3+3=x").unwrap();
        assert_eq!(t.to_string(), "N_1+N_2=x");
    }

    #[test]
    fn align_rejects_unexplained_literal() {
        assert_eq!(
            align(&nums("2 and 5"), "x+19=2"),
            Err(AlignError::Unalignable { literal: "19".into() })
        );
    }

    #[test]
    fn align_uses_variants_and_whitelist() {
        let t = align(&nums("it takes 3 1/3 cups and 12 spoons"), "x=3.33*12").unwrap();
        assert_eq!(t.to_string(), "x=N_1*N_2");
        let t = align(&nums("a 25% share of 80"), "x=0.25*80").unwrap();
        assert_eq!(t.to_string(), "x=F_1*N_2");
        let t = align(&nums("two consecutive integers sum to 41"), "x+(x+1)=41").unwrap();
        assert_eq!(t.to_string(), "x+(x+1)=N_1");
        // Exponents stay literal even when the text has a matching number.
        let t = align(&nums("2 squares of area 49"), "x^2=49").unwrap();
        assert_eq!(t.to_string(), "x^2=N_2");
    }

    #[test]
    fn align_absorbs_unary_minus_for_negative_numbers() {
        let t = align(&nums("through (-15, 70)"), "y=-15*x+70").unwrap();
        assert_eq!(t.to_string(), "y=M_1*x+N_2");
        let t = align(&nums("drops by 4 degrees to 10"), "x-4=10").unwrap();
        assert_eq!(t.to_string(), "x-N_1=N_2");
    }

    #[test]
    fn align_reuses_numbers_last() {
        let t = align(&nums("twice as many, total 36 and 36"), "x+y=36;x=y+36").unwrap();
        assert_eq!(t.to_string(), "x+y=N_1;x=y+N_2");
        let t = align(&nums("a total of 45"), "x+y=45;x-y=45").unwrap();
        assert_eq!(t.to_string(), "x+y=N_1;x-y=N_1");
    }

    #[test]
    fn align_rejects_too_many_numbers() {
        let text = (1..=13).map(|i| i.to_string()).collect::<Vec<_>>().join(" , ");
        assert!(matches!(align(&nums(&text), "x=1"), Err(AlignError::TooManyNumbers { count: 13 })));
    }

    #[test]
    fn substitute_examples() {
        let mapping = NumberMapping::from_text("2 and 3 make 7");
        let t = EquationTemplate::from_text("N_1*x+N_2=N_3").unwrap();
        assert_eq!(substitute(&t.tokens, &mapping).unwrap(), "2*x+3=7");

        let mapping = NumberMapping::from_text("points -15 and 70");
        let t = EquationTemplate::from_text("x+M_1=N_2").unwrap();
        let s = substitute(&t.tokens, &mapping).unwrap();
        assert_eq!(s, "x+(-15)=70");
        let ast = equations::parse(&s).unwrap();
        assert_eq!(equations::solve(&ast).values()[0].to_f64(), 85.0);

        let mapping = NumberMapping::from_text("2 and 3");
        let t = EquationTemplate::from_text("N_1+N_9=x").unwrap();
        assert_eq!(
            substitute(&t.tokens, &mapping),
            Err(UnknownSymbol { slot: "N_9".into() })
        );
        // Right index, wrong kind.
        let t = EquationTemplate::from_text("F_1=x").unwrap();
        assert!(substitute(&t.tokens, &mapping).is_err());
    }

    #[test]
    fn substitute_non_decimal_values() {
        let mapping = NumberMapping::from_text("3 1/3 cups");
        let t = EquationTemplate::from_text("x=2*N_1").unwrap();
        let s = substitute(&t.tokens, &mapping).unwrap();
        assert_eq!(s, "x=2*(10/3)");
        let sol = equations::solve(&equations::parse(&s).unwrap());
        assert_eq!(sol.values()[0], &equations::Value::Exact(ratio(20, 3)));
    }
}
