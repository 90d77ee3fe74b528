//! Preference data: pairs, tokenization, cloze rendering, ingestion and
//! synthetic task generation.

pub mod cloze;
pub mod jsonl;
pub mod synth;
pub mod tokenizer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cloze::{
    build_cloze, build_scaffold, ClozeInstance, ClozeTemplate, Order, ScaffoldInstance, TemplateSet, DEFAULT_PREFIXES,
};
pub use jsonl::{load_jsonl, parse_jsonl, write_jsonl};
pub use synth::{synth_generate, SynthTask};
pub use tokenizer::Tokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Chat,
    Reasoning,
    Safety,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Chat, Domain::Reasoning, Domain::Safety];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Chat => "chat",
            Domain::Reasoning => "reasoning",
            Domain::Safety => "safety",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown domain `{s}`")))
    }
}

/// One `(x, y_w, y_l)` preference triple.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub domain: Domain,
    /// Optional sub-split label within a domain (e.g. a hard chat subset).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
}

impl PreferencePair {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (field, v) in [("prompt", &self.prompt), ("chosen", &self.chosen), ("rejected", &self.rejected)] {
            if v.is_empty() {
                return Err(format!("empty field `{field}`"));
            }
        }
        if self.chosen == self.rejected {
            return Err("degenerate pair".into());
        }
        Ok(())
    }
}
