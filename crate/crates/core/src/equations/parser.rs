use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use super::lexer::{tokenize, Token, Variable};
use super::ParseError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(BigRational),
    Var(Variable),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Equation {
    pub lhs: Expr,
    pub rhs: Expr,
}

/// A `;`-separated list of equations.
#[derive(Clone, Debug, PartialEq)]
pub struct EquationAst {
    pub equations: Vec<Equation>,
}

pub const MAX_ABS_EXPONENT: i64 = 3;

impl Expr {
    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    /// Integer exponent of a `^` right-hand side: a literal, optionally negated.
    pub fn as_exponent(&self) -> Option<i64> {
        match self {
            Expr::Num(r) if r.is_integer() => r.to_integer().to_i64(),
            Expr::Neg(inner) => inner.as_exponent().map(|e| -e),
            _ => None,
        }
    }

    pub fn visit_vars(&self, f: &mut impl FnMut(Variable)) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => f(*v),
            Expr::Neg(e) => e.visit_vars(f),
            Expr::Bin(_, a, b) => {
                a.visit_vars(f);
                b.visit_vars(f);
            }
        }
    }

    /// Exact evaluation; `None` on division by zero or a missing variable.
    pub fn eval_exact(&self, env: &dyn Fn(Variable) -> Option<BigRational>) -> Option<BigRational> {
        Some(match self {
            Expr::Num(r) => r.clone(),
            Expr::Var(v) => env(*v)?,
            Expr::Neg(e) => -e.eval_exact(env)?,
            Expr::Bin(op, a, b) => {
                let l = a.eval_exact(env)?;
                if *op == BinOp::Pow {
                    let e = b.as_exponent()?;
                    if e < 0 && l.is_zero() {
                        return None;
                    }
                    let p = num_traits::pow(l.clone(), e.unsigned_abs() as usize);
                    return Some(if e < 0 { p.recip() } else { p });
                }
                let r = b.eval_exact(env)?;
                match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                    BinOp::Div if r.is_zero() => return None,
                    BinOp::Div => l / r,
                    BinOp::Pow => unreachable!(),
                }
            }
        })
    }

    pub fn eval_f64(&self, env: &dyn Fn(Variable) -> Option<f64>) -> Option<f64> {
        Some(match self {
            Expr::Num(r) => r.to_f64()?,
            Expr::Var(v) => env(*v)?,
            Expr::Neg(e) => -e.eval_f64(env)?,
            Expr::Bin(op, a, b) => {
                let l = a.eval_f64(env)?;
                if *op == BinOp::Pow {
                    return Some(l.powi(b.as_exponent()? as i32));
                }
                let r = b.eval_f64(env)?;
                match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                    BinOp::Div => l / r,
                    BinOp::Pow => unreachable!(),
                }
            }
        })
    }
}

/// Prints a rational as a finite decimal when possible, else as `(p/q)`.
pub fn format_rational(r: &BigRational) -> String {
    if r.is_integer() {
        return r.to_integer().to_string();
    }
    let mut den = r.denom().clone();
    let (two, five) = (BigInt::from(2), BigInt::from(5));
    let (mut twos, mut fives) = (0usize, 0usize);
    while (&den % &two).is_zero() {
        den /= &two;
        twos += 1;
    }
    while (&den % &five).is_zero() {
        den /= &five;
        fives += 1;
    }
    if !den.is_one() {
        return format!("({}/{})", r.numer(), r.denom());
    }
    let places = twos.max(fives);
    let scaled = (r.abs() * BigRational::from_integer(BigInt::from(10).pow(places as u32))).to_integer();
    let digits = scaled.to_string();
    let digits = format!("{digits:0>width$}", width = places + 1);
    let (int_part, frac_part) = digits.split_at(digits.len() - places);
    let sign = if r.is_negative() { "-" } else { "" };
    format!("{sign}{int_part}.{frac_part}")
}

/// Parses an unsigned decimal literal exactly (`"0.25"` → 1/4).
pub fn parse_decimal(s: &str) -> Option<BigRational> {
    let (int_part, frac_part) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let digits: BigInt = format!("0{int_part}{frac_part}").parse().ok()?;
    let scale = BigInt::from(10).pow(frac_part.len() as u32);
    Some(BigRational::new(digits, scale))
}

impl fmt::Display for Expr {
    /// Fully parenthesized form; parses back to the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(r) => f.write_str(&format_rational(r)),
            Expr::Var(v) => v.fmt(f),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, a, b) => write!(f, "({a}{}{b})", op.symbol()),
        }
    }
}

impl fmt::Display for Equation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.lhs, self.rhs)
    }
}

impl fmt::Display for EquationAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, eq) in self.equations.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            eq.fmt(f)?;
        }
        Ok(())
    }
}

impl EquationAst {
    pub fn variables(&self) -> Vec<Variable> {
        let mut seen = [false; 3];
        for eq in &self.equations {
            eq.lhs.visit_vars(&mut |v| seen[v.index()] = true);
            eq.rhs.visit_vars(&mut |v| seen[v.index()] = true);
        }
        Variable::ALL.into_iter().filter(|v| seen[v.index()]).collect()
    }
}

pub fn parse(text: &str) -> Result<EquationAst, ParseError> {
    parse_tokens(&tokenize(text)?)
}

pub fn parse_tokens(tokens: &[Token]) -> Result<EquationAst, ParseError> {
    let mut equations = Vec::new();
    for part in tokens.split(|t| *t == Token::Semi) {
        equations.push(parse_equation(part)?);
    }
    Ok(EquationAst { equations })
}

/// Parses a single expression (no `=`).
pub fn parse_expr(text: &str) -> Result<Expr, ParseError> {
    let tokens = tokenize(text)?;
    let mut p = Parser { tokens: &tokens, pos: 0 };
    let e = p.expr()?;
    p.finish()?;
    Ok(e)
}

fn parse_equation(tokens: &[Token]) -> Result<Equation, ParseError> {
    if tokens.is_empty() {
        return Err(ParseError::EmptyEquation);
    }
    let eqs: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == Token::Equals)
        .map(|(i, _)| i)
        .collect();
    let split = match eqs.as_slice() {
        [] => return Err(ParseError::MissingEquals),
        [i] => *i,
        _ => return Err(ParseError::MultipleEquals),
    };
    let side = |toks: &[Token]| -> Result<Expr, ParseError> {
        if toks.is_empty() {
            return Err(ParseError::EmptySide);
        }
        let mut p = Parser { tokens: toks, pos: 0 };
        let e = p.expr()?;
        p.finish()?;
        Ok(e)
    };
    Ok(Equation {
        lhs: side(&tokens[..split])?,
        rhs: side(&tokens[split + 1..])?,
    })
}

struct Parser<'t> {
    tokens: &'t [Token],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<&Token> {
        let t = self.tokens.get(self.pos);
        self.pos += 1;
        t
    }

    fn finish(&self) -> Result<(), ParseError> {
        match self.peek() {
            None => Ok(()),
            Some(Token::RParen) => Err(ParseError::UnbalancedParens),
            Some(t) => Err(ParseError::UnexpectedToken {
                token: t.to_string(),
                pos: self.pos,
            }),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Token::Plus) => BinOp::Add,
                Some(Token::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Token::Star) => BinOp::Mul,
                Some(Token::Slash) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(&Token::Minus) {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek() != Some(&Token::Caret) {
            return Ok(base);
        }
        self.pos += 1;
        // Right associative; the exponent may carry its own sign.
        let exponent = if self.peek() == Some(&Token::Minus) {
            self.unary()?
        } else {
            self.power()?
        };
        match exponent.as_exponent() {
            Some(e) if e.abs() <= MAX_ABS_EXPONENT => Ok(Expr::bin(BinOp::Pow, base, exponent)),
            _ => Err(ParseError::BadExponent),
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos;
        match self.next().cloned() {
            Some(Token::Num(s)) => parse_decimal(&s)
                .map(Expr::Num)
                .ok_or(ParseError::UnexpectedToken { token: s, pos }),
            Some(Token::Var(v)) => Ok(Expr::Var(v)),
            Some(Token::Slot(s)) => Err(ParseError::UnresolvedSlot {
                slot: s.to_string(),
            }),
            Some(Token::LParen) => {
                let e = self.expr()?;
                match self.next() {
                    Some(Token::RParen) => Ok(e),
                    _ => Err(ParseError::UnbalancedParens),
                }
            }
            Some(Token::RParen) => Err(ParseError::UnbalancedParens),
            Some(t) => Err(ParseError::UnexpectedToken {
                token: t.to_string(),
                pos,
            }),
            None => Err(ParseError::UnexpectedEnd),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn int(n: i64) -> BigRational {
        BigRational::from_integer(n.into())
    }

    #[test]
    fn splits_on_semicolon() {
        let ast = parse("2*x+3=7 ; x+y=10").unwrap();
        assert_eq!(ast.equations.len(), 2);
        assert_eq!(ast.variables(), vec![Variable::X, Variable::Y]);
    }

    #[test]
    fn precedence_and_associativity() {
        let none = |_| None;
        let e = |s: &str| parse_expr(s).unwrap().eval_exact(&none).unwrap();
        assert_eq!(e("2+3*4"), int(14));
        assert_eq!(e("10-4-3"), int(3));
        assert_eq!(e("48/4/2"), int(6));
        assert_eq!(e("-2^2"), int(-4));
        assert_eq!(e("2^-2*8"), int(2));
        assert_eq!(e("(2+3)*4"), int(20));
        assert_eq!(e("0.25*4"), int(1));
    }

    #[test]
    fn ill_formed_inputs() {
        assert_eq!(parse("x+=3"), Err(ParseError::UnexpectedEnd));
        assert_eq!(parse("x+3"), Err(ParseError::MissingEquals));
        assert_eq!(parse("x=3=y"), Err(ParseError::MultipleEquals));
        assert_eq!(parse("=3"), Err(ParseError::EmptySide));
        assert_eq!(parse("(x+3=4"), Err(ParseError::UnbalancedParens));
        assert_eq!(parse("x+3)=4"), Err(ParseError::UnbalancedParens));
        assert!(parse("x**2=4").is_err());
        assert!(parse("x 2=4").is_err());
        assert_eq!(parse("x^4=1"), Err(ParseError::BadExponent));
        assert_eq!(parse("x^y=1"), Err(ParseError::BadExponent));
        assert_eq!(parse("x^2^2=1"), Err(ParseError::BadExponent));
        assert_eq!(parse("x=1;"), Err(ParseError::EmptyEquation));
        assert!(matches!(parse("N_1=x"), Err(ParseError::UnresolvedSlot { .. })));
    }

    #[test]
    fn format_rational_cases() {
        let r = |p: i64, q: i64| BigRational::new(p.into(), q.into());
        assert_eq!(format_rational(&r(7, 1)), "7");
        assert_eq!(format_rational(&r(1, 4)), "0.25");
        assert_eq!(format_rational(&r(-333, 100)), "-3.33");
        assert_eq!(format_rational(&r(1, 20)), "0.05");
        assert_eq!(format_rational(&r(10, 3)), "(10/3)");
        assert_eq!(parse_decimal("0.05"), Some(r(1, 20)));
        assert_eq!(parse_decimal(".5"), Some(r(1, 2)));
        assert_eq!(parse_decimal("12"), Some(r(12, 1)));
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..1000, 0u32..3).prop_map(|(n, places)| {
                Expr::Num(BigRational::new(n.into(), BigInt::from(10).pow(places)))
            }),
            prop_oneof![Just(Variable::X), Just(Variable::Y), Just(Variable::Z)].prop_map(Expr::Var),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (inner.clone(), inner.clone(), 0..4usize).prop_map(|(a, b, k)| {
                    let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div][k];
                    Expr::bin(op, a, b)
                }),
                (inner, -3i64..=3).prop_map(|(a, e)| {
                    let exp = if e < 0 { Expr::Neg(Box::new(Expr::Num(int(-e)))) } else { Expr::Num(int(e)) };
                    Expr::bin(BinOp::Pow, a, exp)
                }),
            ]
        })
    }

    proptest! {
        #[test]
        fn parse_print_is_identity(eqs in proptest::collection::vec((arb_expr(), arb_expr()), 1..4)) {
            let ast = EquationAst {
                equations: eqs.into_iter().map(|(lhs, rhs)| Equation { lhs, rhs }).collect(),
            };
            let printed = ast.to_string();
            prop_assert_eq!(parse(&printed).unwrap(), ast);
        }
    }
}
