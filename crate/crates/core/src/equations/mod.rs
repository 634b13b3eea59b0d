//! Parsing and exact solving of generated equation lists, answer checking,
//! and the 0/1 correctness reward.

mod lexer;
mod parser;
mod solver;

use num_rational::BigRational;

pub use lexer::{render, tokenize, Slot, Token, Variable};
pub use parser::{
    format_rational, parse, parse_decimal, parse_expr, parse_tokens, BinOp, Equation,
    EquationAst, Expr, MAX_ABS_EXPONENT,
};
pub use solver::{solve, Assignment, SolutionSet, Value};

use crate::numbering::{substitute, NumberMapping};
use crate::rational;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("unexpected character {ch:?} at {pos}")]
    UnexpectedChar { ch: char, pos: usize },
    #[error("unexpected token {token:?} at {pos}")]
    UnexpectedToken { token: String, pos: usize },
    #[error("unexpected end of input")]
    UnexpectedEnd,
    #[error("unbalanced parentheses")]
    UnbalancedParens,
    #[error("equation has no '='")]
    MissingEquals,
    #[error("equation has more than one '='")]
    MultipleEquals,
    #[error("empty side of an equation")]
    EmptySide,
    #[error("empty equation")]
    EmptyEquation,
    #[error("exponent must be an integer literal with magnitude at most {MAX_ABS_EXPONENT}")]
    BadExponent,
    #[error("number token {slot} has not been substituted")]
    UnresolvedSlot { slot: String },
}

/// Relative answer tolerance, floored at the same absolute value.
pub const ANSWER_TOLERANCE: f64 = 1e-4;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= ANSWER_TOLERANCE * b.abs().max(1.0)
}

/// Multiset comparison of solved values against the key answers.
pub fn check_answer(sol: &SolutionSet, gold: &[BigRational]) -> bool {
    if gold.is_empty() {
        return false;
    }
    let mut got: Vec<f64> = sol.values().iter().map(|v| v.to_f64()).collect();
    if got.len() != gold.len() {
        return false;
    }
    let mut want: Vec<f64> = gold.iter().map(rational::to_f64).collect();
    got.sort_by(f64::total_cmp);
    want.sort_by(f64::total_cmp);
    got.iter().zip(&want).all(|(a, b)| close(*a, *b))
}

/// 1 when the template, after substitution, parses, solves, and matches
/// the key answers; 0 for any failure along the way.
pub fn reward(template: &[Token], mapping: &NumberMapping, gold: &[BigRational]) -> f64 {
    let Ok(text) = substitute(template, mapping) else {
        return 0.0;
    };
    let Ok(ast) = parse(&text) else { return 0.0 };
    if check_answer(&solve(&ast), gold) {
        1.0
    } else {
        0.0
    }
}

/// [`reward`] over raw vocabulary spellings, for generated sequences that
/// may contain arbitrary tokens.
pub fn reward_spellings<S: AsRef<str>>(tokens: &[S], mapping: &NumberMapping, gold: &[BigRational]) -> f64 {
    let parsed: Option<Vec<Token>> = tokens.iter().map(|s| Token::from_spelling(s.as_ref())).collect();
    match parsed {
        Some(t) => reward(&t, mapping, gold),
        None => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numbering::{align, extract_numbers, EquationTemplate};
    use crate::rational::{int, ratio};

    #[test]
    fn check_answer_multiset() {
        let s = solve(&parse("x+y=10; x-y=2").unwrap());
        assert!(check_answer(&s, &[int(4), int(6)]));
        let s = solve(&parse("x=6").unwrap());
        assert!(!check_answer(&s, &[int(6), int(4)]));
        assert!(!check_answer(&s, &[]));
        assert!(!check_answer(&SolutionSet::NoSolution, &[int(1)]));
        assert!(!check_answer(&SolutionSet::Unsupported, &[int(1)]));
        assert!(!check_answer(&SolutionSet::InfiniteSolutions, &[int(1)]));
    }

    #[test]
    fn check_answer_tolerance() {
        let s = solve(&parse("x=0.333333").unwrap());
        assert!(check_answer(&s, &[ratio(1, 3)]));
        let s = solve(&parse("x=0.3332").unwrap());
        assert!(!check_answer(&s, &[ratio(1, 3)]));
        // Relative above 1: 1e-4 of 5000 is 0.5.
        let s = solve(&parse("x=5000.4").unwrap());
        assert!(check_answer(&s, &[int(5000)]));
    }

    #[test]
    fn reward_pipeline() {
        let text = "Twice a number plus 3 is 7.";
        let numbers = extract_numbers(text);
        let mapping = NumberMapping { numbers: numbers.clone() };
        let t = align(&numbers, "2*x+3=7").unwrap();
        assert_eq!(reward(&t.tokens, &mapping, &[int(2)]), 1.0);

        let bad = EquationTemplate::from_text("2*x+=N_1").unwrap();
        assert_eq!(reward(&bad.tokens, &mapping, &[int(2)]), 0.0);
        let wrong = EquationTemplate::from_text("3*x+N_1=N_2").unwrap();
        assert_eq!(reward(&wrong.tokens, &mapping, &[int(2)]), 0.0);
        let unknown = EquationTemplate::from_text("x=N_5").unwrap();
        assert_eq!(reward(&unknown.tokens, &mapping, &[int(2)]), 0.0);
        assert_eq!(reward_spellings(&["<eos>", "x"], &mapping, &[int(2)]), 0.0);
        assert_eq!(reward_spellings(&["x", "=", "2"], &mapping, &[int(2)]), 1.0);
    }

    #[test]
    fn reward_is_total() {
        use proptest::prelude::*;
        let vocab = ["x", "y", "=", "+", "-", "*", "/", "^", "(", ")", ";", "N_1", "M_2", "2", "0", "<unk>"];
        let mapping = NumberMapping::from_text("3 and -4");
        proptest!(|(seq in proptest::collection::vec(0usize..16, 0..20))| {
            let toks: Vec<&str> = seq.iter().map(|&i| vocab[i]).collect();
            let r = reward_spellings(&toks, &mapping, &[int(1)]);
            prop_assert!(r == 0.0 || r == 1.0);
        });
    }
}
