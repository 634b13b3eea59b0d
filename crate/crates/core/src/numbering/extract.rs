use std::sync::LazyLock;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use regex::Regex;

use super::{ExtractedNumber, NumberForm, NumberKind};
use crate::equations::parse_decimal;

static NUMBER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?x)
        (?P<sign>-)?
        (?:
            (?P<mw>\d+)[\ \t]+(?P<mn>\d+)/(?P<md>\d+)
          | (?P<fnum>\d+)/(?P<fden>\d+)
          | (?P<dec>\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?|\.\d+)
        )
        (?P<pct>[\ \t]?%|[\ \t]+percent\b)?",
    )
    .expect("number pattern")
});

static WORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[a-z0-9]+(?:'[a-z]+)?|[^\sa-z0-9]").expect("word pattern"));

fn blocks_number(prev: Option<char>) -> bool {
    prev.is_some_and(|c| c.is_alphanumeric() || c == '_' || c == '.' || c == '/' || c == ',')
}

fn allows_sign(prev: Option<char>) -> bool {
    match prev {
        None => true,
        Some(c) => c.is_whitespace() || "([{:=,;$".contains(c),
    }
}

/// Finds numbers left to right, taking the longest match at each position.
pub fn extract_numbers(text: &str) -> Vec<ExtractedNumber> {
    let mut out: Vec<ExtractedNumber> = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let Some(caps) = NUMBER.captures_at(text, pos) else { break };
        let whole = caps.get(0).expect("group 0");
        let start = whole.start();
        let prev = text[..start].chars().next_back();
        let signed = caps.name("sign").is_some();
        if signed && !allows_sign(prev) {
            // Hyphen in a word or range: retry without the sign.
            pos = start + 1;
            continue;
        }
        let digits_start = if signed { start + 1 } else { start };
        let prev_digit = text[..digits_start].chars().next_back();
        if !signed && blocks_number(prev_digit) {
            pos = next_boundary(text, whole.start());
            continue;
        }

        let parsed = parse_match(&caps);
        let Some((mut value, mut form)) = parsed else {
            pos = next_boundary(text, whole.start());
            continue;
        };
        if signed {
            value = -value;
            form = match form {
                NumberForm::Mixed { whole, fraction } => NumberForm::Mixed {
                    whole: -whole,
                    fraction: -fraction,
                },
                NumberForm::Percent { raw } => NumberForm::Percent { raw: -raw },
                f => f,
            };
        }

        let end = whole.end();
        let char_start = text[..start].chars().count();
        let char_end = char_start + text[start..end].chars().count();
        out.push(ExtractedNumber {
            span: (char_start, char_end),
            byte_span: (start, end),
            surface: text[start..end].to_string(),
            kind: NumberKind::of(&value),
            value,
            form,
            index: out.len() + 1,
        });
        pos = end;
    }
    out
}

fn next_boundary(text: &str, from: usize) -> usize {
    text[from..]
        .char_indices()
        .nth(1)
        .map_or(text.len(), |(i, _)| from + i)
}

fn parse_match(caps: &regex::Captures<'_>) -> Option<(BigRational, NumberForm)> {
    let pct = caps.name("pct").is_some();
    let (value, form) = if let (Some(w), Some(n), Some(d)) = (caps.name("mw"), caps.name("mn"), caps.name("md")) {
        let whole = parse_decimal(w.as_str())?;
        let den: BigInt = d.as_str().parse().ok()?;
        if den.is_zero() {
            return None;
        }
        let fraction = BigRational::new(n.as_str().parse().ok()?, den);
        (&whole + &fraction, NumberForm::Mixed { whole, fraction })
    } else if let (Some(n), Some(d)) = (caps.name("fnum"), caps.name("fden")) {
        let den: BigInt = d.as_str().parse().ok()?;
        if den.is_zero() {
            return None;
        }
        (BigRational::new(n.as_str().parse().ok()?, den), NumberForm::Fraction)
    } else {
        let raw = caps.name("dec")?.as_str().replace(',', "");
        (parse_decimal(&raw)?, NumberForm::Plain)
    };
    if pct {
        let hundred = BigRational::from_integer(100.into());
        return Some((&value / hundred, NumberForm::Percent { raw: value }));
    }
    Some((value, form))
}

/// Lowercased word tokens of `text` with every extracted number replaced by
/// its symbol token.
pub fn source_tokens(text: &str, numbers: &[ExtractedNumber]) -> Vec<String> {
    let mut out = Vec::new();
    let mut cursor = 0;
    let words = |chunk: &str, out: &mut Vec<String>| {
        let lower = chunk.to_lowercase();
        out.extend(WORD.find_iter(&lower).map(|m| m.as_str().to_string()));
    };
    for n in numbers {
        let (s, e) = n.byte_span;
        words(&text[cursor..s], &mut out);
        out.push(n.symbol().to_string());
        cursor = e;
    }
    words(&text[cursor..], &mut out);
    out
}
