use std::fmt;

use super::ParseError;
use crate::numbering::NumberKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variable {
    X,
    Y,
    Z,
}

impl Variable {
    pub const ALL: [Variable; 3] = [Variable::X, Variable::Y, Variable::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    fn from_char(c: char) -> Option<Self> {
        match c {
            'x' => Some(Variable::X),
            'y' => Some(Variable::Y),
            'z' => Some(Variable::Z),
            _ => None,
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variable::X => "x",
            Variable::Y => "y",
            Variable::Z => "z",
        })
    }
}

/// A number-token placeholder such as `N_3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub kind: NumberKind,
    /// 1-based position of the number in the problem text.
    pub index: usize,
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.kind.prefix(), self.index)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    /// Unsigned decimal literal, kept as written.
    Num(String),
    Var(Variable),
    Slot(Slot),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Equals,
    Semi,
}

impl Token {
    pub fn is_operator(&self) -> bool {
        matches!(
            self,
            Token::Plus | Token::Minus | Token::Star | Token::Slash | Token::Caret
        )
    }

    /// Parses one token from its exact spelling.
    pub fn from_spelling(s: &str) -> Option<Token> {
        match tokenize(s) {
            Ok(mut v) if v.len() == 1 => v.pop(),
            _ => None,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Num(s) => f.write_str(s),
            Token::Var(v) => v.fmt(f),
            Token::Slot(s) => s.fmt(f),
            Token::Plus => f.write_str("+"),
            Token::Minus => f.write_str("-"),
            Token::Star => f.write_str("*"),
            Token::Slash => f.write_str("/"),
            Token::Caret => f.write_str("^"),
            Token::LParen => f.write_str("("),
            Token::RParen => f.write_str(")"),
            Token::Equals => f.write_str("="),
            Token::Semi => f.write_str(";"),
        }
    }
}

/// Joins tokens without separators, e.g. `2*x+3=7`.
pub fn render(tokens: &[Token]) -> String {
    tokens.iter().map(ToString::to_string).collect()
}

pub fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(char::is_ascii_digit)) {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                i += 1;
                let frac_start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                if i == frac_start {
                    return Err(ParseError::UnexpectedChar { ch: '.', pos: i - 1 });
                }
            }
            out.push(Token::Num(chars[start..i].iter().collect()));
            continue;
        }
        if let Some(kind) = NumberKind::from_prefix(c) {
            if chars.get(i + 1) == Some(&'_') {
                let start = i + 2;
                let mut j = start;
                while j < chars.len() && chars[j].is_ascii_digit() {
                    j += 1;
                }
                let digits: String = chars[start..j].iter().collect();
                match digits.parse::<usize>() {
                    Ok(index) if index >= 1 => {
                        out.push(Token::Slot(Slot { kind, index }));
                        i = j;
                        continue;
                    }
                    _ => return Err(ParseError::UnexpectedChar { ch: c, pos: i }),
                }
            }
        }
        if let Some(v) = Variable::from_char(c) {
            out.push(Token::Var(v));
            i += 1;
            continue;
        }
        let tok = match c {
            '+' => Token::Plus,
            '-' => Token::Minus,
            '*' => Token::Star,
            '/' => Token::Slash,
            '^' => Token::Caret,
            '(' => Token::LParen,
            ')' => Token::RParen,
            '=' => Token::Equals,
            ';' => Token::Semi,
            _ => return Err(ParseError::UnexpectedChar { ch: c, pos: i }),
        };
        out.push(tok);
        i += 1;
    }
    Ok(out)
}
