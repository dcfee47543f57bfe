//! Per-(turn, slot) sequence assembly, reiteration targets, truncation and
//! input-embedding composition.
//!
//! Sequence layout: `k` domain, slot and type prompts, the prefix, the
//! dialogue history as `[sys]`/`[usr]` blocks, the question, then the target.
//! Each position's input embedding is `base + position + segment`, where base
//! is a prompt row or a frozen token embedding.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::backbone::{BackboneWeights, BoundBackbone};
use crate::corpus::{SlotSpec, SlotType, TurnContext};
use crate::error::{Error, Result};
use crate::prompt_bank::{task_key, BoundBank, PromptBank, SegmentId};
use crate::tokenizer::Tokenizer;

pub const DEFAULT_MAX_NEW: usize = 20;

/// Prefix text: description, task names, and candidates for categorical slots.
pub fn prefix_text(slot: &SlotSpec) -> String {
    let mut s = format!(
        "{} . domain is {} , slot is {} , type is {}",
        slot.description, slot.domain, slot.name, slot.slot_type
    );
    if slot.slot_type == SlotType::Categorical && !slot.candidates.is_empty() {
        s.push_str(" , candidates are ");
        s.push_str(&slot.candidates.join(" or "));
    }
    s
}

pub fn target_text(slot: &SlotSpec, value: &str, reiteration: bool) -> String {
    if reiteration {
        format!("domain is {}, slot is {}, type is {}, answer is {value}", slot.domain, slot.name, slot.slot_type)
    } else {
        format!("answer is {value}")
    }
}

/// Target token ids, terminated by the end-of-text token.
pub fn build_target(slot: &SlotSpec, value: &str, reiteration: bool, tok: &dyn Tokenizer) -> Vec<usize> {
    let mut ids = tok.encode(&target_text(slot, value, reiteration));
    ids.push(tok.eos_id());
    ids
}

/// Switches matching the ablation table rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Remove the domain prompt segment.
    Domain,
    Slot,
    Type,
    /// Keep the prefix text but embed it with frozen token embeddings.
    Prefix,
    Question,
    /// No segment embeddings are added.
    Segment,
    /// Targets carry only the answer clause.
    Reiteration,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Domain,
        Ablation::Slot,
        Ablation::Type,
        Ablation::Question,
        Ablation::Prefix,
        Ablation::Segment,
        Ablation::Reiteration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Domain => "domain",
            Ablation::Slot => "slot",
            Ablation::Type => "type",
            Ablation::Prefix => "prefix",
            Ablation::Question => "question",
            Ablation::Segment => "segment",
            Ablation::Reiteration => "reiteration",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| Error::invalid(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyOptions {
    #[serde(default)]
    pub ablations: BTreeSet<Ablation>,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
}

fn default_max_new() -> usize {
    DEFAULT_MAX_NEW
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self { ablations: BTreeSet::new(), max_new: DEFAULT_MAX_NEW }
    }
}

impl AssemblyOptions {
    pub fn with(ablations: impl IntoIterator<Item = Ablation>) -> Self {
        Self { ablations: ablations.into_iter().collect(), ..Self::default() }
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn reiteration(&self) -> bool {
        !self.has(Ablation::Reiteration)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Element {
    Prompt { segment: SegmentId, row: usize },
    Token(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledInstance {
    /// Input followed by target tokens.
    pub elements: Vec<Element>,
    pub segment_ids: Vec<SegmentId>,
    pub input_len: usize,
    pub target: Vec<usize>,
    /// True exactly on target positions.
    pub loss_mask: Vec<bool>,
    pub segment_embeddings: bool,
}

impl AssembledInstance {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Positions fed to the model: everything but the final target token.
    pub fn fed_len(&self) -> usize {
        if self.target.is_empty() {
            self.len()
        } else {
            self.len() - 1
        }
    }

    /// Next-token label for every fed position, `None` where the next
    /// position is outside the loss mask.
    pub fn labels(&self) -> Vec<Option<usize>> {
        (0..self.fed_len())
            .map(|p| match (self.loss_mask.get(p + 1), self.elements.get(p + 1)) {
                (Some(true), Some(Element::Token(id))) => Some(*id),
                _ => None,
            })
            .collect()
    }

    /// The input part only, ready for decoding.
    pub fn prompt_only(&self) -> Self {
        Self {
            elements: self.elements[..self.input_len].to_vec(),
            segment_ids: self.segment_ids[..self.input_len].to_vec(),
            input_len: self.input_len,
            target: Vec::new(),
            loss_mask: vec![false; self.input_len],
            segment_embeddings: self.segment_embeddings,
        }
    }

    pub fn segment_codes(&self) -> Vec<usize> {
        self.segment_ids.iter().map(|s| s.code()).collect()
    }
}

type Block = Vec<(Element, SegmentId)>;

/// Builds the instance for one turn and slot. With `gold`, the target is
/// appended and budgeted; without it, `max_new` positions are reserved for
/// generation. Over budget, the oldest whole turns go first, then leading
/// tokens of the oldest surviving turn.
pub fn assemble<T: Real>(
    ctx: &TurnContext,
    slot: &SlotSpec,
    gold: Option<&str>,
    bank: &PromptBank<T>,
    tok: &dyn Tokenizer,
    max_positions: usize,
    opts: &AssemblyOptions,
) -> Result<AssembledInstance> {
    if ctx.history.is_empty() {
        return Err(Error::invalid(format!("dialogue {} turn {} has no history", ctx.dialogue_id, ctx.turn)));
    }
    let mut head: Block = Vec::new();
    let tasks = [
        (SegmentId::DomainPrompt, Ablation::Domain, slot.domain.as_str()),
        (SegmentId::SlotPrompt, Ablation::Slot, slot.name.as_str()),
        (SegmentId::TypePrompt, Ablation::Type, slot.slot_type.name()),
    ];
    for (segment, ablation, name) in tasks {
        if opts.has(ablation) {
            continue;
        }
        for i in 0..bank.k {
            let key = task_key(segment, name, i);
            let row = bank
                .segment(segment)
                .row_of(&key)
                .ok_or_else(|| Error::invalid(format!("prompt bank has no row `{key}`")))?;
            head.push((Element::Prompt { segment, row }, segment));
        }
    }
    let words = |segment: SegmentId, text: &str, frozen: bool| -> Result<Block> {
        tok.encode(text)
            .into_iter()
            .map(|id| {
                if frozen {
                    return Ok((Element::Token(id), segment));
                }
                let key = tok.token(id).unwrap_or_default();
                let row = bank
                    .segment(segment)
                    .row_of(key)
                    .ok_or_else(|| Error::invalid(format!("prompt bank has no {segment} row for `{key}`")))?;
                Ok((Element::Prompt { segment, row }, segment))
            })
            .collect()
    };
    head.extend(words(SegmentId::Prefix, &prefix_text(slot), opts.has(Ablation::Prefix))?);
    let question = words(SegmentId::Question, &slot.question, opts.has(Ablation::Question))?;

    let mut turns: Vec<Block> = ctx
        .history
        .iter()
        .map(|(sys, usr)| {
            let mut b = Block::new();
            if !sys.trim().is_empty() {
                b.push((Element::Token(tok.sys_id()), SegmentId::SystemTurn));
                b.extend(tok.encode(sys).into_iter().map(|id| (Element::Token(id), SegmentId::SystemTurn)));
            }
            b.push((Element::Token(tok.usr_id()), SegmentId::UserTurn));
            b.extend(tok.encode(usr).into_iter().map(|id| (Element::Token(id), SegmentId::UserTurn)));
            b
        })
        .collect();

    let target = gold.map(|v| build_target(slot, v, opts.reiteration(), tok)).unwrap_or_default();
    let reserve = if gold.is_some() { target.len() } else { opts.max_new };
    let fixed = head.len() + question.len() + reserve;
    if fixed + 1 > max_positions {
        return Err(Error::invalid(format!(
            "{fixed} non-history positions leave no room for history within max_positions {max_positions}"
        )));
    }
    let budget = max_positions - fixed;
    let mut hist_len: usize = turns.iter().map(Vec::len).sum();
    while hist_len > budget && turns.len() > 1 {
        hist_len -= turns.remove(0).len();
    }
    if hist_len > budget {
        turns[0].drain(..hist_len - budget);
    }

    let mut seq: Block = head;
    seq.extend(turns.into_iter().flatten());
    seq.extend(question);
    let input_len = seq.len();
    seq.extend(target.iter().map(|&id| (Element::Token(id), SegmentId::Answer)));
    let (elements, segment_ids): (Vec<_>, Vec<_>) = seq.into_iter().unzip();
    let loss_mask = (0..elements.len()).map(|p| p >= input_len).collect();
    Ok(AssembledInstance {
        elements,
        segment_ids,
        input_len,
        target,
        loss_mask,
        segment_embeddings: !opts.has(Ablation::Segment),
    })
}

/// Input embeddings (`n × d`) for `elements` placed at positions
/// `start..start + n`, computed without a graph.
pub fn compose_rows<T: Real>(
    elements: &[Element],
    segment_ids: &[SegmentId],
    start: usize,
    segment_embeddings: bool,
    bank: &PromptBank<T>,
    backbone: &BackboneWeights<T>,
) -> Result<Tensor<T>> {
    let d = backbone.config.d_model;
    if start + elements.len() > backbone.config.max_positions {
        return Err(Error::invalid(format!(
            "sequence length {} exceeds max_positions {}",
            start + elements.len(),
            backbone.config.max_positions
        )));
    }
    let mut data = Vec::with_capacity(elements.len() * d);
    for (i, (el, seg)) in elements.iter().zip(segment_ids).enumerate() {
        let base = match *el {
            Element::Prompt { segment, row } => bank.segment(segment).current.row(row),
            Element::Token(id) => {
                if id >= backbone.config.vocab_size {
                    return Err(Error::invalid(format!("token id {id} outside vocabulary")));
                }
                backbone.wte.row(id)
            }
        };
        let pos = backbone.wpe.row(start + i);
        let segrow = bank.segment_embeddings.row(seg.code());
        for j in 0..d {
            let v = base[j] + pos[j];
            data.push(if segment_embeddings { v + segrow[j] } else { v });
        }
    }
    Tensor::new(vec![elements.len(), d], data)
}

/// Graph version of [`compose_rows`] for the fed positions of `inst`;
/// gradients flow into the bound prompt rows and segment table.
pub fn embed_graph<T: Real>(
    g: &mut Graph<T>,
    inst: &AssembledInstance,
    bank: &BoundBank,
    backbone: &BoundBackbone,
) -> Result<Var> {
    let n = inst.fed_len();
    let elements = &inst.elements[..n];
    let mut parts = Vec::new();
    let mut i = 0;
    while i < n {
        let source = |e: &Element| match e {
            Element::Prompt { segment, .. } => segment.prompt_index(),
            Element::Token(_) => None,
        };
        let src = source(&elements[i]);
        let mut j = i;
        let mut ids = Vec::new();
        while j < n && source(&elements[j]) == src {
            ids.push(match elements[j] {
                Element::Prompt { row, .. } => row,
                Element::Token(id) => id,
            });
            j += 1;
        }
        let table = match src {
            Some(p) => bank.prompts[p],
            None => backbone.wte,
        };
        parts.push(g.gather(table, &ids)?);
        i = j;
    }
    let base = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
    let positions: Vec<usize> = (0..n).collect();
    let pos = g.gather(backbone.wpe, &positions)?;
    let x = g.add(base, pos)?;
    if inst.segment_embeddings {
        let seg = g.gather(bank.segment_embeddings, &inst.segment_codes()[..n])?;
        g.add(x, seg)
    } else {
        Ok(x)
    }
}
