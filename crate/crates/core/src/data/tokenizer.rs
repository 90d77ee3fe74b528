//! Word-level tokenizer: runs of alphanumerics, runs of whitespace, and
//! single punctuation characters. Words missing from the vocabulary fall
//! back to per-character tokens, then to `[UNK]`, so any text over the
//! vocabulary's character set decodes back to itself.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
/// Answer tokens for "Option 1" / "Option 2".
pub const VERBALIZER_IDS: [u32; 2] = [4, 5];

const RESERVED: [&str; 6] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]", "1", "2"];

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Word,
    Space,
    Other,
}

fn class(c: char) -> Class {
    if c.is_alphanumeric() {
        Class::Word
    } else if c.is_whitespace() {
        Class::Space
    } else {
        Class::Other
    }
}

/// Splits `text` into tokenizer pieces; concatenating them yields `text`.
pub fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev: Option<Class> = None;
    for (i, c) in text.char_indices() {
        let cl = class(c);
        let split = match prev {
            None => false,
            Some(p) => p != cl || cl == Class::Other,
        };
        if split {
            out.push(&text[start..i]);
            start = i;
        }
        prev = Some(cl);
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Vocabulary of the reserved tokens plus every piece and every
    /// character of `corpus`, in sorted order after the reserved block.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen = BTreeSet::new();
        for text in corpus {
            for p in pieces(text) {
                seen.insert(p.to_string());
                for c in p.chars() {
                    seen.insert(c.to_string());
                }
            }
        }
        let vocab = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(seen.into_iter().filter(|s| !RESERVED.contains(&s.as_str())))
            .collect();
        Tokenizer::from_vocab(vocab).expect("reserved block is well-formed")
    }

    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < RESERVED.len() || vocab[..RESERVED.len()] != RESERVED {
            return Err(Error::Format("vocabulary does not start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{tok}`")));
            }
        }
        Ok(Tokenizer { vocab, index })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.vocab).expect("strings serialise")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let vocab: Vec<String> = serde_json::from_str(s).map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
        Tokenizer::from_vocab(vocab)
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for p in pieces(text) {
            match self.index.get(p) {
                Some(&id) => out.push(id),
                None => {
                    let mut buf = [0u8; 4];
                    for c in p.chars() {
                        out.push(self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK_ID));
                    }
                }
            }
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("[UNK]"))
            .collect()
    }
}
