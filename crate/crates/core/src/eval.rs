//! Answer extraction, value normalization, JGA/SA metrics and error taxonomy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{SlotRegistry, NONE};
use crate::error::{Error, Result};

pub const ANSWER_ANCHOR: &str = "answer is";
const TRAILING: &[char] = &['.', ',', '!', '?'];

/// Text after the last `answer is`, trimmed and stripped of trailing
/// `.,!?`; the whole trimmed generation when the anchor is absent.
pub fn extract_answer(generation: &str) -> String {
    let tail = match generation.rfind(ANSWER_ANCHOR) {
        Some(i) => &generation[i + ANSWER_ANCHOR.len()..],
        None => generation,
    };
    tail.trim().trim_end_matches(TRAILING).trim_end().to_owned()
}

/// Lowercase with runs of whitespace collapsed to one space.
pub fn normalize(value: &str) -> String {
    value.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub dialogue_id: String,
    pub turn: usize,
    pub domain: String,
    pub slot: String,
    pub generation: String,
    pub extracted: String,
    pub gold: String,
}

impl Prediction {
    pub fn is_correct(&self) -> bool {
        normalize(&self.extracted) == normalize(&self.gold)
    }

    fn sort_key(&self) -> (&str, usize, &str, &str) {
        (&self.dialogue_id, self.turn, &self.domain, &self.slot)
    }
}

/// Deterministic ordering: dialogue id, turn, domain, slot.
pub fn sort_predictions(preds: &mut [Prediction]) {
    preds.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// A value predicted for an empty slot.
    Hallucination,
    /// `none` predicted for a filled slot.
    Omission,
    WrongValue,
}

/// Category of one prediction, `None` when it is correct.
pub fn categorize(gold: &str, predicted: &str) -> Option<ErrorKind> {
    let (g, p) = (normalize(gold), normalize(predicted));
    if g == p {
        None
    } else if g == NONE {
        Some(ErrorKind::Hallucination)
    } else if p == NONE {
        Some(ErrorKind::Omission)
    } else {
        Some(ErrorKind::WrongValue)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub hallucination: usize,
    pub omission: usize,
    pub wrong_value: usize,
}

impl ErrorCounts {
    pub fn total(&self) -> usize {
        self.hallucination + self.omission + self.wrong_value
    }

    fn add(&mut self, kind: ErrorKind) {
        match kind {
            ErrorKind::Hallucination => self.hallucination += 1,
            ErrorKind::Omission => self.omission += 1,
            ErrorKind::WrongValue => self.wrong_value += 1,
        }
    }
}

pub fn categorize_errors(preds: &[Prediction]) -> ErrorCounts {
    let mut c = ErrorCounts::default();
    for p in preds {
        if let Some(k) = categorize(&p.gold, &p.extracted) {
            c.add(k);
        }
    }
    c
}

/// Fraction of (dialogue, turn, domain) groups whose predictions are all
/// correct. Unlike [`evaluate`], no registry coverage is checked.
pub fn joint_goal_accuracy(preds: &[Prediction]) -> f64 {
    let mut groups: BTreeMap<(&str, usize, &str), bool> = BTreeMap::new();
    for p in preds {
        let ok = groups.entry((&p.dialogue_id, p.turn, &p.domain)).or_insert(true);
        *ok &= p.is_correct();
    }
    if groups.is_empty() {
        return 0.0;
    }
    groups.values().filter(|&&ok| ok).count() as f64 / groups.len() as f64
}

pub fn slot_accuracy(preds: &[Prediction]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().filter(|p| p.is_correct()).count() as f64 / preds.len() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Accuracy {
    fn push(&mut self, ok: bool) {
        self.total += 1;
        self.correct += usize::from(ok);
        self.accuracy = self.correct as f64 / self.total as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain: String,
    pub turns: usize,
    pub predictions: usize,
    pub jga: f64,
    pub slot_accuracy: f64,
    /// Slot accuracy restricted to predictions whose gold value is not `none`.
    pub non_empty_slot_accuracy: f64,
    pub per_slot_accuracy: BTreeMap<String, Accuracy>,
    pub per_type_accuracy: BTreeMap<String, Accuracy>,
    pub error_counts: ErrorCounts,
    /// Keyed by ontology size.
    pub ontology_size_buckets: BTreeMap<usize, Accuracy>,
}

/// Metrics for one domain. Every (dialogue, turn) present must carry a
/// prediction for each of the domain's slots. `ontology` maps slot keys to
/// ontology sizes; slots missing from it fall back to their candidate count.
pub fn evaluate(
    preds: &[Prediction],
    registry: &SlotRegistry,
    domain: &str,
    ontology: Option<&BTreeMap<String, usize>>,
) -> Result<EvalReport> {
    let slots = registry.domain_slots(domain);
    if slots.is_empty() {
        return Err(Error::invalid(format!("registry has no slots for domain `{domain}`")));
    }
    if preds.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    let by_name: BTreeMap<&str, _> = slots.iter().map(|s| (s.name.as_str(), *s)).collect();
    let mut turns: BTreeMap<(&str, usize), BTreeMap<&str, bool>> = BTreeMap::new();
    for p in preds {
        if p.domain != domain || !by_name.contains_key(p.slot.as_str()) {
            return Err(Error::invalid(format!("prediction for unknown slot {}-{}", p.domain, p.slot)));
        }
        let entry = turns.entry((&p.dialogue_id, p.turn)).or_default();
        if entry.insert(&p.slot, p.is_correct()).is_some() {
            return Err(Error::invalid(format!(
                "duplicate prediction for {} turn {} slot {}",
                p.dialogue_id, p.turn, p.slot
            )));
        }
    }
    let mut gaps = Vec::new();
    for ((id, t), got) in &turns {
        for name in by_name.keys() {
            if !got.contains_key(name) {
                gaps.push(format!("{id}#{t}:{name}"));
            }
        }
    }
    if !gaps.is_empty() {
        return Err(Error::invalid(format!("missing predictions: {}", gaps.join(", "))));
    }

    let joint = turns.values().filter(|m| m.values().all(|&ok| ok)).count();
    let mut overall = Accuracy::default();
    let mut non_empty = Accuracy::default();
    let mut per_slot: BTreeMap<String, Accuracy> = BTreeMap::new();
    let mut per_type: BTreeMap<String, Accuracy> = BTreeMap::new();
    let mut buckets: BTreeMap<usize, Accuracy> = BTreeMap::new();
    for p in preds {
        let spec = by_name[p.slot.as_str()];
        let ok = p.is_correct();
        overall.push(ok);
        if normalize(&p.gold) != NONE {
            non_empty.push(ok);
        }
        per_slot.entry(spec.key()).or_default().push(ok);
        per_type.entry(spec.slot_type.name().to_owned()).or_default().push(ok);
        let size = ontology.and_then(|o| o.get(&spec.key()).copied()).unwrap_or(spec.candidates.len());
        buckets.entry(size).or_default().push(ok);
    }
    Ok(EvalReport {
        domain: domain.to_owned(),
        turns: turns.len(),
        predictions: preds.len(),
        jga: joint as f64 / turns.len() as f64,
        slot_accuracy: overall.accuracy,
        non_empty_slot_accuracy: non_empty.accuracy,
        per_slot_accuracy: per_slot,
        per_type_accuracy: per_type,
        error_counts: categorize_errors(preds),
        ontology_size_buckets: buckets,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_file(path, self.to_json())
    }

    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "domain {}  turns {}  predictions {}", self.domain, self.turns, self.predictions);
        let _ = writeln!(
            s,
            "JGA {:.4}  SA {:.4}  SA(non-empty) {:.4}",
            self.jga, self.slot_accuracy, self.non_empty_slot_accuracy
        );
        let e = &self.error_counts;
        let _ = writeln!(
            s,
            "errors: hallucination {}  omission {}  wrong value {}",
            e.hallucination, e.omission, e.wrong_value
        );
        let mut section = |title: &str, rows: Vec<(String, &Accuracy)>| {
            let _ = writeln!(s, "\n{title:<28} {:>8} {:>8} {:>8}", "correct", "total", "acc");
            for (k, a) in rows {
                let _ = writeln!(s, "{k:<28} {:>8} {:>8} {:>8.4}", a.correct, a.total, a.accuracy);
            }
        };
        section("slot", self.per_slot_accuracy.iter().map(|(k, a)| (k.clone(), a)).collect());
        section("type", self.per_type_accuracy.iter().map(|(k, a)| (k.clone(), a)).collect());
        section("ontology size", self.ontology_size_buckets.iter().map(|(k, a)| (k.to_string(), a)).collect());
        s
    }
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    crate::write_file(path, out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    crate::read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
