//! Instruction-style cloze rendering of preference pairs.
//!
//! Canonical layout (the mask slot is a single `[MASK]` token):
//!
//! ```text
//! [CLS]{prefix}
//! Problem: {x}
//! Option 1: {a}
//! Option 2: {b}
//! The better response is Option [MASK].
//! ```
//!
//! When a rendering exceeds `max_seq`, both option bodies are cut from the
//! tail down to one shared budget; every other segment is kept whole.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::tokenizer::{Tokenizer, CLS_ID, MASK_ID, VERBALIZER_IDS};
use crate::data::{Domain, PreferencePair};
use crate::error::{Error, Result};

/// Instruction prefixes available to templates and sweeps.
pub const DEFAULT_PREFIXES: [&str; 4] = [
    "Select the best response.",
    "Which response is more correct?",
    "Which response is safer?",
    "Which response is the most helpful, relevant, and correct?",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    /// Chosen completion rendered as option 1.
    Original,
    /// Rejected completion rendered as option 1.
    Swapped,
}

impl Order {
    pub const BOTH: [Order; 2] = [Order::Original, Order::Swapped];

    /// Index (0 or 1) of the option slot holding the chosen completion.
    pub fn gold_option(self) -> usize {
        match self {
            Order::Original => 0,
            Order::Swapped => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClozeTemplate {
    pub prefix: String,
    pub problem_intro: String,
    pub option_intros: [String; 2],
    pub statement_head: String,
    pub statement_tail: String,
}

impl ClozeTemplate {
    pub fn with_prefix(prefix: impl Into<String>) -> Self {
        ClozeTemplate {
            prefix: prefix.into(),
            ..ClozeTemplate::default()
        }
    }

    /// Every literal string the template can emit, for vocabulary building.
    pub fn scaffold_texts(&self) -> Vec<&str> {
        vec![
            &self.prefix,
            &self.problem_intro,
            &self.option_intros[0],
            &self.option_intros[1],
            &self.statement_head,
            &self.statement_tail,
        ]
    }
}

impl Default for ClozeTemplate {
    fn default() -> Self {
        ClozeTemplate {
            prefix: DEFAULT_PREFIXES[0].to_string(),
            problem_intro: "\nProblem: ".into(),
            option_intros: ["\nOption 1: ".into(), "\nOption 2: ".into()],
            statement_head: "\nThe better response is Option ".into(),
            statement_tail: ".".into(),
        }
    }
}

/// Template routing by domain, falling back to one default template.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TemplateSet {
    pub default: ClozeTemplate,
    pub per_domain: BTreeMap<Domain, ClozeTemplate>,
}

impl TemplateSet {
    pub fn single(template: ClozeTemplate) -> Self {
        TemplateSet {
            default: template,
            per_domain: BTreeMap::new(),
        }
    }

    /// The tuned per-domain prefixes used for all-at-once training.
    pub fn domain_prefixes() -> Self {
        let per_domain = [
            (Domain::Chat, DEFAULT_PREFIXES[0]),
            (Domain::Reasoning, DEFAULT_PREFIXES[1]),
            (Domain::Safety, DEFAULT_PREFIXES[2]),
        ]
        .into_iter()
        .map(|(d, p)| (d, ClozeTemplate::with_prefix(p)))
        .collect();
        TemplateSet {
            default: ClozeTemplate::default(),
            per_domain,
        }
    }

    pub fn for_domain(&self, domain: Domain) -> &ClozeTemplate {
        self.per_domain.get(&domain).unwrap_or(&self.default)
    }

    pub fn templates(&self) -> impl Iterator<Item = &ClozeTemplate> {
        std::iter::once(&self.default).chain(self.per_domain.values())
    }
}

/// Model-facing record with one mask slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClozeInstance {
    pub token_ids: Vec<u32>,
    pub mask_position: usize,
    pub gold_verbalizer: u32,
    pub order: Order,
    pub source_id: String,
    pub option_spans: [Range<usize>; 2],
}

/// The same scaffold without the preference statement, for the pooled and
/// per-token heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaffoldInstance {
    pub token_ids: Vec<u32>,
    pub order: Order,
    pub source_id: String,
    pub option_spans: [Range<usize>; 2],
}

impl ScaffoldInstance {
    pub fn gold_option(&self) -> usize {
        self.order.gold_option()
    }
}

struct Rendered {
    ids: Vec<u32>,
    mask: Option<usize>,
    spans: [Range<usize>; 2],
}

fn render(
    pair: &PreferencePair,
    template: &ClozeTemplate,
    order: Order,
    tok: &Tokenizer,
    max_seq: usize,
    with_statement: bool,
) -> Result<Rendered> {
    let (first, second) = match order {
        Order::Original => (&pair.chosen, &pair.rejected),
        Order::Swapped => (&pair.rejected, &pair.chosen),
    };
    let mut bodies = [tok.encode(first), tok.encode(second)];

    let mut head = vec![CLS_ID];
    head.extend(tok.encode(&template.prefix));
    head.extend(tok.encode(&template.problem_intro));
    head.extend(tok.encode(&pair.prompt));
    let intros = [
        tok.encode(&template.option_intros[0]),
        tok.encode(&template.option_intros[1]),
    ];
    let mut statement = Vec::new();
    let mut mask_offset = None;
    if with_statement {
        statement.extend(tok.encode(&template.statement_head));
        mask_offset = Some(statement.len());
        statement.push(MASK_ID);
        statement.extend(tok.encode(&template.statement_tail));
    }

    let fixed = head.len() + intros[0].len() + intros[1].len() + statement.len();
    if fixed + bodies[0].len() + bodies[1].len() > max_seq {
        let budget = max_seq.saturating_sub(fixed) / 2;
        if budget == 0 {
            return Err(Error::Skip {
                id: pair.id.clone(),
                reason: format!("scaffold of {fixed} tokens leaves no room for options within {max_seq}"),
            });
        }
        for b in &mut bodies {
            b.truncate(budget);
        }
    }

    let mut ids = head;
    let mut spans = [0..0, 0..0];
    for (k, (intro, body)) in intros.iter().zip(&bodies).enumerate() {
        ids.extend(intro);
        let start = ids.len();
        ids.extend(body);
        spans[k] = start..ids.len();
    }
    let mask = mask_offset.map(|m| ids.len() + m);
    ids.extend(statement);
    Ok(Rendered { ids, mask, spans })
}

pub fn build_cloze(
    pair: &PreferencePair,
    template: &ClozeTemplate,
    order: Order,
    tok: &Tokenizer,
    max_seq: usize,
) -> Result<ClozeInstance> {
    let r = render(pair, template, order, tok, max_seq, true)?;
    Ok(ClozeInstance {
        token_ids: r.ids,
        mask_position: r.mask.expect("statement rendered"),
        gold_verbalizer: VERBALIZER_IDS[order.gold_option()],
        order,
        source_id: pair.id.clone(),
        option_spans: r.spans,
    })
}

pub fn build_scaffold(
    pair: &PreferencePair,
    template: &ClozeTemplate,
    order: Order,
    tok: &Tokenizer,
    max_seq: usize,
) -> Result<ScaffoldInstance> {
    let r = render(pair, template, order, tok, max_seq, false)?;
    Ok(ScaffoldInstance {
        token_ids: r.ids,
        order,
        source_id: pair.id.clone(),
        option_spans: r.spans,
    })
}
