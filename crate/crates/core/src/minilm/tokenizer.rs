use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const YES: &str = "[YES]";
pub const NO: &str = "[NO]";
pub const USER_ID: &str = "<User_ID>";
pub const ITEM_ID: &str = "<Item_ID>";
pub const WARM_ID: &str = "<Warm_ID>";

/// Reserved tokens in id order; they occupy ids `0..RESERVED.len()`.
pub const RESERVED: [&str; 7] = [PAD, UNK, YES, NO, USER_ID, ITEM_ID, WARM_ID];

/// Ids of the reserved tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservedIds {
    pub pad: usize,
    pub unk: usize,
    pub yes: usize,
    pub no: usize,
    pub user: usize,
    pub item: usize,
    pub warm: usize,
}

pub const RESERVED_IDS: ReservedIds = ReservedIds {
    pad: 0,
    unk: 1,
    yes: 2,
    no: 3,
    user: 4,
    item: 5,
    warm: 6,
};

/// Word-level vocabulary. Text splits on whitespace; every ASCII
/// punctuation character is its own token, except inside a reserved token,
/// which is always matched whole.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

fn split(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    'outer: while let Some(c) = rest.chars().next() {
        if c.is_whitespace() {
            rest = &rest[c.len_utf8()..];
            continue;
        }
        for r in RESERVED {
            if rest.starts_with(r) {
                out.push(&rest[..r.len()]);
                rest = &rest[r.len()..];
                continue 'outer;
            }
        }
        if c.is_ascii_punctuation() {
            out.push(&rest[..1]);
            rest = &rest[1..];
            continue;
        }
        let end = rest
            .char_indices()
            .find(|&(i, ch)| {
                ch.is_whitespace() || ch.is_ascii_punctuation() || (i > 0 && RESERVED.iter().any(|r| rest[i..].starts_with(r)))
            })
            .map_or(rest.len(), |(i, _)| i);
        out.push(&rest[..end]);
        rest = &rest[end..];
    }
    out
}

impl Tokenizer {
    /// Reserved tokens first, then corpus words by first occurrence.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tok = Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect());
        for text in corpus {
            for w in split(text) {
                if !tok.index.contains_key(w) {
                    tok.index.insert(w.to_string(), tok.tokens.len());
                    tok.tokens.push(w.to_string());
                }
            }
        }
        tok
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn reserved(&self) -> ReservedIds {
        RESERVED_IDS
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Out-of-vocabulary words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        split(text)
            .into_iter()
            .map(|w| self.id(w).unwrap_or(RESERVED_IDS.unk))
            .collect()
    }

    /// Tokens joined by single spaces; the inverse of [`Tokenizer::encode`]
    /// on text in that form.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        #[derive(Deserialize)]
        struct Raw {
            tokens: Vec<String>,
        }
        let raw: Raw = serde_json::from_str(&text)?;
        if raw.tokens.len() < RESERVED.len() || raw.tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Checkpoint(format!("{}: reserved tokens missing or reordered", path.display())));
        }
        Ok(Self::from_tokens(raw.tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_by_first_occurrence() {
        let t = Tokenizer::build(["a b", "b c"]);
        assert_eq!(t.len(), RESERVED.len() + 3);
        assert_eq!(t.id("a"), Some(7));
        assert_eq!(t.id("c"), Some(9));
        assert_eq!(t.encode("a b"), vec![7, 8]);
        assert_eq!(t.decode(&t.encode("a b")), "a b");
    }

    #[test]
    fn punctuation_and_reserved_split() {
        let t = Tokenizer::build(["user <User_ID>: liked x,y ; answer [YES]"]);
        let ids = t.encode("user <User_ID>: liked x,y ; answer [YES]");
        assert_eq!(t.decode(&ids), "user <User_ID> : liked x , y ; answer [YES]");
        assert_eq!(ids[1], RESERVED_IDS.user);
        assert_eq!(*ids.last().unwrap(), RESERVED_IDS.yes);
        assert_eq!(t.encode("item<Warm_ID>"), vec![RESERVED_IDS.unk, RESERVED_IDS.warm]);
    }

    #[test]
    fn unknown_words() {
        let t = Tokenizer::build(["a"]);
        assert_eq!(t.encode("a zzz"), vec![7, RESERVED_IDS.unk]);
    }

    #[test]
    fn save_load_keeps_ids() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tokenizer::build(["x y z", "w"]);
        let p = dir.path().join("tok.json");
        t.save(&p).unwrap();
        let u = Tokenizer::load(&p).unwrap();
        assert_eq!(t, u);
        assert_eq!(u.id("w"), Some(10));
    }
}
