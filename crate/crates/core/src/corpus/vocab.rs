use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const BOS_R: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<bos_r>", "<eos>", "<unk>"];

/// Token ↔ id table. Ids `0..5` are always the reserved sentinels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocabulary {
    /// Reserved sentinels followed by `tokens` in order, duplicates dropped.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()).chain(tokens.into_iter().map(Into::into)) {
            v.insert(t);
        }
        v
    }

    /// Tokens seen at least `min_count` times, most frequent first, ties
    /// broken lexicographically.
    pub fn build<'t, I, S>(sequences: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'t [S]>,
        S: AsRef<str> + 't,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in sequences {
            for t in seq {
                *counts.entry(t.as_ref()).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t.to_string()))
    }

    pub fn insert(&mut self, token: String) -> usize {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Unknown tokens map to [`UNK`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let tokens = Vec::<String>::deserialize(d)?;
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(D::Error::custom("vocabulary must begin with the reserved sentinels"));
        }
        let v = Self::from_tokens(tokens[RESERVED.len()..].iter().cloned());
        if v.len() != tokens.len() {
            return Err(D::Error::custom("vocabulary contains duplicate tokens"));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::default();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<bos_r>"), Some(BOS_R));
    }

    #[test]
    fn build_orders_by_frequency() {
        let seqs: Vec<Vec<&str>> = vec![vec!["b", "a", "a"], vec!["c", "b", "a"]];
        let v = Vocabulary::build(seqs.iter().map(Vec::as_slice), 2);
        assert_eq!(&v.tokens()[5..], ["a", "b"]);
        assert_eq!(v.encode(&["a", "c"]), vec![5, UNK]);
        assert_eq!(v.decode(&[6, 99]), vec!["b", "<unk>"]);
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::from_tokens(["x", "y"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
        assert!(serde_json::from_str::<Vocabulary>("[\"x\"]").is_err());
    }
}
