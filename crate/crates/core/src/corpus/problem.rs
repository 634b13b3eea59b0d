use std::io::{BufRead, Write};
use std::path::Path;

use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use super::CorpusError;
use crate::numbering::{
    align, extract_numbers, source_tokens, EquationTemplate, NumberKind, NumberMapping, CONSTANT_WHITELIST,
    MAX_NUMBER_INDEX,
};
use crate::rational;

/// One word problem with its concrete equations and key answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub text: String,
    /// Concrete equations, `;`-separated.
    pub equations: String,
    #[serde(with = "rational::serde_vec")]
    pub answers: Vec<BigRational>,
    /// Aligned template, filled in by preprocessing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

/// A problem after number extraction and alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub source: Vec<String>,
    pub mapping: NumberMapping,
    /// `None` when the gold equations cannot be expressed over the text's numbers.
    pub template: Option<EquationTemplate>,
    pub answers: Vec<BigRational>,
}

impl Prepared {
    pub fn is_alignable(&self) -> bool {
        self.template.is_some()
    }
}

pub fn prepare(problem: &Problem) -> Prepared {
    let numbers = extract_numbers(&problem.text);
    let source = source_tokens(&problem.text, &numbers);
    let template = if numbers.len() > MAX_NUMBER_INDEX {
        None
    } else {
        match &problem.template {
            Some(t) => EquationTemplate::from_text(t).ok(),
            None => align(&numbers, &problem.equations).ok(),
        }
    };
    Prepared {
        id: problem.id.clone(),
        source,
        mapping: NumberMapping { numbers },
        template,
        answers: problem.answers.clone(),
    }
}

/// Fills in templates; returns the number of problems that stayed unalignable.
pub fn preprocess(problems: &mut [Problem]) -> usize {
    let mut unalignable = 0;
    for p in problems.iter_mut() {
        p.template = None;
        match prepare(p).template {
            Some(t) => p.template = Some(t.to_string()),
            None => unalignable += 1,
        }
    }
    unalignable
}

pub fn read_problems(reader: impl BufRead) -> Result<Vec<Problem>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p = serde_json::from_str(&line).map_err(|e| CorpusError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

pub fn write_problems(mut writer: impl Write, problems: &[Problem]) -> Result<(), CorpusError> {
    for p in problems {
        serde_json::to_writer(&mut writer, p).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Problem>, CorpusError> {
    let file = std::fs::File::open(path)?;
    read_problems(std::io::BufReader::new(file))
}

pub fn save(path: impl AsRef<Path>, problems: &[Problem]) -> Result<(), CorpusError> {
    let file = std::fs::File::create(path)?;
    write_problems(std::io::BufWriter::new(file), problems)
}

/// Every token a template can contain: operators, variables, number
/// symbols up to the maximum index, and whitelisted constants.
pub fn target_vocabulary() -> Vocabulary {
    let mut tokens: Vec<String> = ["+", "-", "*", "/", "^", "(", ")", "=", ";", "x", "y", "z"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for kind in NumberKind::ALL {
        for i in 1..=MAX_NUMBER_INDEX {
            tokens.push(format!("{}_{i}", kind.prefix()));
        }
    }
    tokens.extend(CONSTANT_WHITELIST.iter().map(|c| c.to_string()));
    Vocabulary::from_tokens(tokens)
}

/// Source vocabulary over the given problems, every seen token kept.
pub fn source_vocabulary(prepared: &[Prepared]) -> Vocabulary {
    Vocabulary::build(prepared.iter().map(|p| p.source.as_slice()), 1)
}

/// Token ids ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub id: String,
    pub src: Vec<usize>,
    /// Canonical target ids; `None` for unalignable problems.
    pub tgt: Option<Vec<usize>>,
    pub mapping: NumberMapping,
    pub answers: Vec<BigRational>,
}

pub fn encode(prepared: &Prepared, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Encoded {
    let tgt = prepared.template.as_ref().and_then(|t| {
        let spellings = t.spellings();
        // A literal outside the closed vocabulary makes the target unusable.
        spellings.iter().map(|s| tgt_vocab.id(s)).collect::<Option<Vec<_>>>()
    });
    Encoded {
        id: prepared.id.clone(),
        src: src_vocab.encode(&prepared.source),
        tgt,
        mapping: prepared.mapping.clone(),
        answers: prepared.answers.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{int, ratio};

    fn problem(id: &str, text: &str, eq: &str, answers: Vec<BigRational>) -> Problem {
        Problem {
            id: id.into(),
            text: text.into(),
            equations: eq.into(),
            answers,
            template: None,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let ps: Vec<Problem> = (0..100)
            .map(|i| problem(&format!("p{i}"), &format!("A number plus {i} is 10/3."), "x+1=2", vec![ratio(10, 3), int(-i)]))
            .collect();
        let mut buf = Vec::new();
        write_problems(&mut buf, &ps).unwrap();
        assert_eq!(read_problems(buf.as_slice()).unwrap(), ps);
    }

    #[test]
    fn rationals_stay_exact() {
        let line = r#"{"id":"a","text":"t","equations":"x=1","answers":["10/3","2.5"]}"#;
        let ps = read_problems(line.as_bytes()).unwrap();
        assert_eq!(ps[0].answers, vec![ratio(10, 3), ratio(5, 2)]);
    }

    #[test]
    fn malformed_line_names_its_number() {
        let text = "{\"id\":\"a\",\"text\":\"t\",\"equations\":\"x=1\",\"answers\":[\"1\"]}\n\n{\"id\":\"b\",\"text\":\"t\",\"equations\":\"x=1\"}\n";
        match read_problems(text.as_bytes()) {
            Err(CorpusError::Line { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("answers"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn preprocess_fills_templates() {
        let mut ps = vec![
            problem("a", "The sum of two numbers is 27 and their difference is 3.", "x+y=27; x-y=3", vec![int(15), int(12)]),
            problem("b", "A number is 7.", "x=13", vec![int(13)]),
        ];
        assert_eq!(preprocess(&mut ps), 1);
        assert_eq!(ps[0].template.as_deref(), Some("x+y=N_1;x-y=N_2"));
        assert_eq!(ps[1].template, None);
        let p = prepare(&ps[0]);
        assert!(p.is_alignable());
        assert_eq!(p.source.join(" "), "the sum of two numbers is N_1 and their difference is N_2 .");
    }

    #[test]
    fn target_vocabulary_is_closed() {
        let v = target_vocabulary();
        for t in ["N_12", "M_1", "F_3", "100", "0", "^", ";", "z"] {
            assert!(v.id(t).is_some(), "{t}");
        }
        assert_eq!(v.len(), 5 + 12 + 36 + 12);
    }

    #[test]
    fn encoding_uses_both_vocabularies() {
        let p = prepare(&problem("a", "Twice a number plus 3 is 7.", "2*x+3=7", vec![int(2)]));
        let sv = source_vocabulary(std::slice::from_ref(&p));
        let tv = target_vocabulary();
        let e = encode(&p, &sv, &tv);
        assert_eq!(tv.decode(e.tgt.as_ref().unwrap()).concat(), "2*x+N_1=N_2");
        assert_eq!(sv.decode(&e.src), p.source);
    }
}
