//! Slot registry, normalized dialogue corpus, few-shot sampling and per-slot
//! instance generation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
/// Surface form of an empty slot.
pub const NONE: &str = "none";

const DEFAULT_MULTIWOZ: &str = include_str!("../assets/default_multiwoz.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotType {
    Categorical,
    Day,
    Number,
    Open,
    Time,
}

impl SlotType {
    pub const ALL: [SlotType; 5] =
        [SlotType::Categorical, SlotType::Day, SlotType::Number, SlotType::Open, SlotType::Time];

    pub fn name(self) -> &'static str {
        match self {
            SlotType::Categorical => "categorical",
            SlotType::Day => "day",
            SlotType::Number => "number",
            SlotType::Open => "open",
            SlotType::Time => "time",
        }
    }
}

impl fmt::Display for SlotType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub domain: String,
    pub name: String,
    #[serde(rename = "type")]
    pub slot_type: SlotType,
    pub description: String,
    pub question: String,
    #[serde(default)]
    pub candidates: Vec<String>,
}

impl SlotSpec {
    /// `domain-name`, the belief-state key.
    pub fn key(&self) -> String {
        format!("{}-{}", self.domain, self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRegistry {
    schema_version: u32,
    slots: Vec<SlotSpec>,
}

impl SlotRegistry {
    pub fn new(slots: Vec<SlotSpec>) -> Result<Self> {
        let reg = Self { schema_version: SCHEMA_VERSION, slots };
        reg.validate()?;
        Ok(reg)
    }

    fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported registry schema_version {}", self.schema_version)));
        }
        let mut seen = BTreeSet::new();
        for s in &self.slots {
            if s.domain.trim().is_empty() || s.name.trim().is_empty() {
                return Err(Error::invalid("slot with empty domain or name"));
            }
            if !seen.insert((s.domain.as_str(), s.name.as_str())) {
                return Err(Error::invalid(format!("duplicate slot {}-{}", s.domain, s.name)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let reg: Self = serde_json::from_str(text).map_err(|e| Error::invalid(format!("registry: {e}")))?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::read_text(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_file(path, self.to_json())
    }

    /// Registry for the five MultiWOZ evaluation domains.
    pub fn default_multiwoz() -> Self {
        Self::from_json(DEFAULT_MULTIWOZ).expect("bundled registry is valid")
    }

    pub fn slots(&self) -> &[SlotSpec] {
        &self.slots
    }

    pub fn domains(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.slots.iter().map(|s| s.domain.as_str()).collect();
        set.into_iter().collect()
    }

    /// Slots of one domain in registry order.
    pub fn domain_slots(&self, domain: &str) -> Vec<&SlotSpec> {
        self.slots.iter().filter(|s| s.domain == domain).collect()
    }

    /// Restriction to one domain; errors when the domain has no slots.
    pub fn for_domain(&self, domain: &str) -> Result<Self> {
        let slots: Vec<SlotSpec> = self.domain_slots(domain).into_iter().cloned().collect();
        if slots.is_empty() {
            return Err(Error::invalid(format!("registry has no slots for domain `{domain}`")));
        }
        Self::new(slots)
    }

    pub fn get(&self, domain: &str, name: &str) -> Option<&SlotSpec> {
        self.slots.iter().find(|s| s.domain == domain && s.name == name)
    }

    pub fn types_for(&self, domain: &str) -> BTreeSet<SlotType> {
        self.domain_slots(domain).iter().map(|s| s.slot_type).collect()
    }

    /// Non-fatal problems: categorical slots without candidates.
    pub fn warnings(&self) -> Vec<String> {
        self.slots
            .iter()
            .filter(|s| s.slot_type == SlotType::Categorical && s.candidates.is_empty())
            .map(|s| format!("categorical slot {} has no candidates", s.key()))
            .collect()
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("registry serializes")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(default)]
    pub system: String,
    pub user: String,
    /// Cumulative belief state keyed `domain-slot`.
    #[serde(default)]
    pub state: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    #[serde(default)]
    pub domains: Vec<String>,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// True when some turn's state mentions `domain`.
    pub fn mentions(&self, domain: &str) -> bool {
        let prefix = format!("{domain}-");
        self.turns.iter().any(|t| t.state.keys().any(|k| k.starts_with(&prefix)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub schema_version: u32,
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn new(dialogues: Vec<Dialogue>) -> Self {
        Self { schema_version: SCHEMA_VERSION, dialogues }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::invalid(format!("corpus: {e}")))?;
        if c.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported corpus schema_version {}", c.schema_version)));
        }
        for d in &c.dialogues {
            if d.turns.is_empty() {
                return Err(Error::invalid(format!("dialogue {} has no turns", d.id)));
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::read_text(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("corpus serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_file(path, self.to_json())
    }

    pub fn for_domain(&self, domain: &str) -> Vec<Dialogue> {
        self.dialogues.iter().filter(|d| d.mentions(domain)).cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "amount")]
pub enum FewShotAmount {
    Count(usize),
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSpec {
    #[serde(flatten)]
    pub amount: FewShotAmount,
    pub target_domain: String,
    pub seed: u64,
}

impl FewShotSpec {
    /// Number of dialogues drawn from a pool of `available`.
    pub fn sample_size(&self, available: usize) -> Result<usize> {
        let n = match self.amount {
            FewShotAmount::Count(0) => return Err(Error::invalid("few-shot count must be at least 1")),
            FewShotAmount::Count(n) => n,
            FewShotAmount::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return Err(Error::invalid(format!("few-shot fraction {f} outside (0, 1]")))
            }
            FewShotAmount::Fraction(f) => ((f * available as f64).round() as usize).max(1),
        };
        if n > available {
            return Err(Error::invalid(format!(
                "requested {n} dialogues but only {available} mention `{}`",
                self.target_domain
            )));
        }
        Ok(n)
    }
}

/// Uniform sample without replacement from the dialogues that mention the
/// target domain. Output keeps corpus order.
pub fn sample_fewshot(dialogues: &[Dialogue], spec: &FewShotSpec) -> Result<Vec<Dialogue>> {
    let pool: Vec<&Dialogue> = dialogues.iter().filter(|d| d.mentions(&spec.target_domain)).collect();
    let n = spec.sample_size(pool.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

/// Dialogue history up to and including one turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnContext {
    pub dialogue_id: String,
    pub turn: usize,
    /// `(system, user)` utterances, oldest first.
    pub history: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotInstance {
    pub context: Arc<TurnContext>,
    pub slot: SlotSpec,
    pub gold: String,
}

pub fn gold_value(turn: &Turn, slot: &SlotSpec) -> String {
    match turn.state.get(&slot.key()) {
        Some(v) if !v.trim().is_empty() => v.clone(),
        _ => NONE.to_owned(),
    }
}

/// One instance per (turn, slot of `domain`); empty slots get `"none"`.
pub fn make_instances(dialogue: &Dialogue, registry: &SlotRegistry, domain: &str) -> Vec<SlotInstance> {
    let slots = registry.domain_slots(domain);
    let mut out = Vec::with_capacity(dialogue.turns.len() * slots.len());
    let mut history = Vec::new();
    for (t, turn) in dialogue.turns.iter().enumerate() {
        history.push((turn.system.clone(), turn.user.clone()));
        let context = Arc::new(TurnContext { dialogue_id: dialogue.id.clone(), turn: t, history: history.clone() });
        for slot in &slots {
            out.push(SlotInstance {
                context: Arc::clone(&context),
                slot: (*slot).clone(),
                gold: gold_value(turn, slot),
            });
        }
    }
    out
}

pub fn make_all_instances(dialogues: &[Dialogue], registry: &SlotRegistry, domain: &str) -> Vec<SlotInstance> {
    dialogues.iter().flat_map(|d| make_instances(d, registry, domain)).collect()
}

/// Candidate count for slots with an ontology, otherwise the number of
/// distinct non-empty gold values observed in `train`.
pub fn ontology_sizes(registry: &SlotRegistry, domain: &str, train: &[Dialogue]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for slot in registry.domain_slots(domain) {
        let size = if !slot.candidates.is_empty() {
            slot.candidates.len()
        } else {
            let key = slot.key();
            let seen: BTreeSet<String> = train
                .iter()
                .flat_map(|d| &d.turns)
                .filter_map(|t| t.state.get(&key))
                .map(|v| crate::eval::normalize(v))
                .filter(|v| !v.is_empty() && v != NONE)
                .collect();
            seen.len()
        };
        out.insert(slot.key(), size);
    }
    out
}
