//! Trainable parameters: five prompt segments plus the segment embedding table.
//!
//! Task segments (domain, slot, type) hold `k` rows per distinct task name,
//! keyed `<domain_hotel_0>`, `<slot_price_range_3>`, `<type_open_1>`. The
//! word-mapping segments (prefix, question) hold one row per distinct
//! tokenizer surface token, keyed by that token, so the same word gets
//! separate rows in the two segments.
//!
//! Bank files use the tensor container with header
//! `[5, d_model, 8, prompt_rows, k, 0]`, records `prompt.<segment>`,
//! `init.<segment>`, `segment_embeddings`, and a JSON `~manifest`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Real, Tensor, Var};
use crate::backbone::BackboneWeights;
use crate::container::{record_text, text_record, Container};
use crate::corpus::SlotRegistry;
use crate::error::{Error, Result};
use crate::instance::prefix_text;
use crate::tokenizer::Tokenizer;

pub const N_SEGMENTS: usize = 8;
const MANIFEST: &str = "~manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentId {
    DomainPrompt = 0,
    SlotPrompt = 1,
    TypePrompt = 2,
    Prefix = 3,
    Question = 4,
    SystemTurn = 5,
    UserTurn = 6,
    Answer = 7,
}

impl SegmentId {
    pub const ALL: [SegmentId; N_SEGMENTS] = [
        SegmentId::DomainPrompt,
        SegmentId::SlotPrompt,
        SegmentId::TypePrompt,
        SegmentId::Prefix,
        SegmentId::Question,
        SegmentId::SystemTurn,
        SegmentId::UserTurn,
        SegmentId::Answer,
    ];

    /// Segments backed by trainable prompt rows.
    pub const PROMPTS: [SegmentId; 5] =
        [SegmentId::DomainPrompt, SegmentId::SlotPrompt, SegmentId::TypePrompt, SegmentId::Prefix, SegmentId::Question];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SegmentId::DomainPrompt => "domain",
            SegmentId::SlotPrompt => "slot",
            SegmentId::TypePrompt => "type",
            SegmentId::Prefix => "prefix",
            SegmentId::Question => "question",
            SegmentId::SystemTurn => "system",
            SegmentId::UserTurn => "user",
            SegmentId::Answer => "answer",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Index into the five prompt segments, if this is one.
    pub fn prompt_index(self) -> Option<usize> {
        Self::PROMPTS.iter().position(|&s| s == self)
    }
}

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Key of a task prompt row, e.g. `<domain_attraction_4>`.
pub fn task_key(segment: SegmentId, name: &str, i: usize) -> String {
    let name = name.split_whitespace().collect::<Vec<_>>().join("_");
    format!("<{}_{}_{}>", segment.name(), name, i)
}

/// `(rows + 8) × d_model`: every prompt row plus the segment table.
pub fn parameter_count_for(prompt_rows: usize, d_model: usize) -> usize {
    (prompt_rows + N_SEGMENTS) * d_model
}

#[derive(Clone)]
pub struct SegmentRows<T> {
    keys: Vec<String>,
    index: HashMap<String, usize>,
    /// PE′, trainable.
    pub current: Tensor<T>,
    /// PE, frozen at initialization.
    pub snapshot: Arc<Tensor<T>>,
}

impl<T: Real> SegmentRows<T> {
    fn new(keys: Vec<String>, rows: Tensor<T>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, k) in keys.iter().enumerate() {
            if index.insert(k.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate prompt key `{k}`")));
            }
        }
        Ok(Self { keys, index, snapshot: Arc::new(rows.clone()), current: rows })
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn row_of(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[derive(Clone)]
pub struct PromptBank<T = f32> {
    pub d_model: usize,
    pub k: usize,
    pub seed: u64,
    pub registry_hash: String,
    pub backbone_hash: String,
    /// Indexed by [`SegmentId::prompt_index`].
    pub segments: [SegmentRows<T>; 5],
    /// `8 × d_model`, trainable, not anchored by the drift penalty.
    pub segment_embeddings: Tensor<T>,
}

/// Distinct surface tokens of the prefix and question texts, first-seen order.
fn word_keys(registry: &SlotRegistry, tok: &dyn Tokenizer) -> Result<[Vec<(String, usize)>; 2]> {
    let mut out: [Vec<(String, usize)>; 2] = Default::default();
    let mut seen: [BTreeSet<usize>; 2] = Default::default();
    for slot in registry.slots() {
        for (i, text) in [prefix_text(slot), slot.question.clone()].iter().enumerate() {
            for id in tok.encode(text) {
                if seen[i].insert(id) {
                    let key = tok.token(id).ok_or_else(|| Error::invalid(format!("token id {id} has no surface")))?;
                    out[i].push((key.to_owned(), id));
                }
            }
        }
    }
    Ok(out)
}

/// Prompt rows [`PromptBank::init`] would create for `registry` at `k`.
pub fn prompt_row_count(registry: &SlotRegistry, k: usize, tok: &dyn Tokenizer) -> Result<usize> {
    let mut names: [BTreeSet<&str>; 3] = Default::default();
    for slot in registry.slots() {
        names[0].insert(&slot.domain);
        names[1].insert(&slot.name);
        names[2].insert(slot.slot_type.name());
    }
    let tasks: usize = names.iter().map(BTreeSet::len).sum();
    let words: usize = word_keys(registry, tok)?.iter().map(Vec::len).sum();
    Ok(tasks * k + words)
}

impl<T: Real> PromptBank<T> {
    /// Task rows copy the frozen embedding of a token drawn uniformly (with
    /// replacement, per row) from the task name's tokens; word rows copy the
    /// embedding of their own token; segment embeddings are N(0, 0.02).
    pub fn init(
        registry: &SlotRegistry,
        k: usize,
        backbone: &BackboneWeights<T>,
        tok: &dyn Tokenizer,
        seed: u64,
    ) -> Result<Self> {
        if registry.slots().is_empty() {
            return Err(Error::invalid("cannot build a prompt bank from an empty registry"));
        }
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names: [Vec<String>; 3] = Default::default();
        for slot in registry.slots() {
            for (i, n) in [&slot.domain, &slot.name, &slot.slot_type.name().to_owned()].into_iter().enumerate() {
                if !names[i].contains(n) {
                    names[i].push(n.clone());
                }
            }
        }
        names[0].sort();
        names[2].sort();

        let mut segs: Vec<SegmentRows<T>> = Vec::with_capacity(5);
        for (s, list) in names.iter().enumerate() {
            let segment = SegmentId::PROMPTS[s];
            let mut keys = Vec::with_capacity(list.len() * k);
            let mut ids = Vec::with_capacity(list.len() * k);
            for name in list {
                let toks = tok.encode(name);
                if toks.is_empty() {
                    return Err(Error::invalid(format!("task name `{name}` tokenizes to nothing")));
                }
                for i in 0..k {
                    keys.push(task_key(segment, name, i));
                    ids.push(toks[rng.random_range(0..toks.len())]);
                }
            }
            segs.push(SegmentRows::new(keys, backbone.token_embed(&ids)?)?);
        }
        for words in word_keys(registry, tok)? {
            let (keys, ids): (Vec<String>, Vec<usize>) = words.into_iter().unzip();
            segs.push(SegmentRows::new(keys, backbone.token_embed(&ids)?)?);
        }
        let d = backbone.config.d_model;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let seg_data = (0..N_SEGMENTS * d).map(|_| T::lit(normal.sample(&mut rng))).collect();
        let segments: [SegmentRows<T>; 5] = segs.try_into().map_err(|_| Error::invalid("segment count"))?;
        Ok(Self {
            d_model: d,
            k,
            seed,
            registry_hash: registry.content_hash(),
            backbone_hash: backbone.content_hash(),
            segments,
            segment_embeddings: Tensor::new(vec![N_SEGMENTS, d], seg_data)?,
        })
    }

    pub fn segment(&self, s: SegmentId) -> &SegmentRows<T> {
        &self.segments[s.prompt_index().expect("prompt segment")]
    }

    pub fn segment_mut(&mut self, s: SegmentId) -> &mut SegmentRows<T> {
        &mut self.segments[s.prompt_index().expect("prompt segment")]
    }

    pub fn prompt_rows(&self) -> usize {
        self.segments.iter().map(SegmentRows::len).sum()
    }

    pub fn row_counts(&self) -> BTreeMap<SegmentId, usize> {
        SegmentId::PROMPTS.iter().map(|&s| (s, self.segment(s).len())).collect()
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count_for(self.prompt_rows(), self.d_model)
    }

    /// `λ · Σ ‖PE′ − PE‖²` over all prompt rows.
    pub fn drift_penalty(&self, lambda: f64) -> Result<f64> {
        check_lambda(lambda)?;
        let mut total = 0.0;
        for s in &self.segments {
            for (a, b) in s.current.data().iter().zip(s.snapshot.data()) {
                let d = a.as_f64() - b.as_f64();
                total += d * d;
            }
        }
        Ok(lambda * total)
    }

    pub fn cast<U: Real>(&self) -> PromptBank<U> {
        let seg = |s: &SegmentRows<T>| SegmentRows {
            keys: s.keys.clone(),
            index: s.index.clone(),
            current: s.current.cast(),
            snapshot: Arc::new(s.snapshot.cast()),
        };
        PromptBank {
            d_model: self.d_model,
            k: self.k,
            seed: self.seed,
            registry_hash: self.registry_hash.clone(),
            backbone_hash: self.backbone_hash.clone(),
            segments: [
                seg(&self.segments[0]),
                seg(&self.segments[1]),
                seg(&self.segments[2]),
                seg(&self.segments[3]),
                seg(&self.segments[4]),
            ],
            segment_embeddings: self.segment_embeddings.cast(),
        }
    }

    /// Adds the trainable tensors as parameters and the snapshots as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundBank {
        let prompts = std::array::from_fn(|i| g.param(self.segments[i].current.clone()));
        let snapshots = std::array::from_fn(|i| g.constant(Arc::clone(&self.segments[i].snapshot)));
        let segment_embeddings = g.param(self.segment_embeddings.clone());
        BoundBank { prompts, snapshots, segment_embeddings }
    }

    pub fn manifest(&self, lambda: f64, extra: serde_json::Value) -> BankManifest {
        BankManifest {
            k: self.k,
            lambda,
            seed: self.seed,
            d_model: self.d_model,
            registry_hash: self.registry_hash.clone(),
            backbone_hash: self.backbone_hash.clone(),
            keys: SegmentId::PROMPTS.iter().map(|&s| (s.name().to_owned(), self.segment(s).keys.clone())).collect(),
            extra,
        }
    }

    pub fn to_container(&self, lambda: f64, extra: serde_json::Value) -> Container {
        let d = self.d_model as u32;
        let mut c = Container::new([5, d, N_SEGMENTS as u32, self.prompt_rows() as u32, self.k as u32, 0]);
        let f32s = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f32()).collect::<Vec<f32>>();
        for &s in &SegmentId::PROMPTS {
            let rows = self.segment(s);
            c.insert(format!("prompt.{}", s.name()), rows.current.shape().to_vec(), f32s(&rows.current));
            c.insert(format!("init.{}", s.name()), rows.snapshot.shape().to_vec(), f32s(&rows.snapshot));
        }
        c.insert("segment_embeddings", self.segment_embeddings.shape().to_vec(), f32s(&self.segment_embeddings));
        let manifest = serde_json::to_string(&self.manifest(lambda, extra)).expect("manifest serializes");
        c.records.insert(MANIFEST.into(), text_record(&manifest));
        c
    }

    pub fn save(&self, path: &Path, lambda: f64, extra: serde_json::Value) -> Result<()> {
        self.to_container(lambda, extra).save(path)
    }

    pub fn from_container(mut c: Container) -> Result<(Self, BankManifest)> {
        let manifest: BankManifest = serde_json::from_str(&record_text(&c.take(MANIFEST)?)?)?;
        let d = manifest.d_model;
        let mut take = |name: &str, rows: usize| -> Result<Tensor<T>> {
            let rec = c.take(name)?;
            if rec.dims != [rows, d] {
                return Err(Error::Format(format!("record `{name}` has shape {:?}, expected [{rows}, {d}]", rec.dims)));
            }
            Tensor::new(rec.dims, rec.values.iter().map(|&v| T::lit(f64::from(v))).collect())
        };
        let mut segs = Vec::with_capacity(5);
        for &s in &SegmentId::PROMPTS {
            let keys = manifest
                .keys
                .get(s.name())
                .cloned()
                .ok_or_else(|| Error::Format(format!("manifest lacks keys for segment {s}")))?;
            let n = keys.len();
            let current = take(&format!("prompt.{}", s.name()), n)?;
            let snapshot = take(&format!("init.{}", s.name()), n)?;
            let mut rows = SegmentRows::new(keys, snapshot)?;
            rows.current = current;
            segs.push(rows);
        }
        let segment_embeddings = take("segment_embeddings", N_SEGMENTS)?;
        if let Some(extra) = c.records.keys().next() {
            return Err(Error::Format(format!("unexpected record `{extra}` in bank file")));
        }
        let bank = Self {
            d_model: d,
            k: manifest.k,
            seed: manifest.seed,
            registry_hash: manifest.registry_hash.clone(),
            backbone_hash: manifest.backbone_hash.clone(),
            segments: segs.try_into().map_err(|_| Error::Format("segment count".into()))?,
            segment_embeddings,
        };
        Ok((bank, manifest))
    }

    pub fn load(path: &Path) -> Result<(Self, BankManifest)> {
        Self::from_container(Container::load(path)?)
    }

    /// Per segment, the `top_changed` rows with the largest `‖PE′ − PE‖₂`,
    /// each with its `top_similar` nearest vocabulary tokens by cosine
    /// similarity against the frozen token embeddings.
    pub fn analyze(
        &self,
        backbone: &BackboneWeights<T>,
        tok: &dyn Tokenizer,
        top_changed: usize,
        top_similar: usize,
    ) -> AnalysisReport {
        let wte = &backbone.wte;
        let vocab_norms: Vec<f64> = (0..wte.rows()).map(|v| norm(wte.row(v))).collect();
        let mut segments = Vec::new();
        for &s in &SegmentId::PROMPTS {
            let rows = self.segment(s);
            let mut changes: Vec<(usize, f64)> = (0..rows.len())
                .map(|r| {
                    let d: f64 = rows
                        .current
                        .row(r)
                        .iter()
                        .zip(rows.snapshot.row(r))
                        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                        .sum();
                    (r, d.sqrt())
                })
                .collect();
            changes.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let rows_out = changes
                .into_iter()
                .take(top_changed)
                .map(|(r, change)| {
                    let e = rows.current.row(r);
                    let n = norm(e);
                    let neighbors = (n > 0.0).then(|| {
                        let mut sims: Vec<(usize, f64)> = (0..wte.rows())
                            .filter(|&v| vocab_norms[v] > 0.0)
                            .map(|v| (v, kernels::dot(e, wte.row(v)).as_f64() / (n * vocab_norms[v])))
                            .collect();
                        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                        sims.into_iter()
                            .take(top_similar)
                            .map(|(v, cosine)| Neighbor {
                                token_id: v,
                                token: tok.token(v).unwrap_or("<?>").to_owned(),
                                cosine,
                            })
                            .collect()
                    });
                    RowAnalysis { key: rows.keys[r].clone(), change, neighbors }
                })
                .collect();
            segments.push(SegmentAnalysis { segment: s, rows: rows_out });
        }
        AnalysisReport { segments }
    }
}

fn norm<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::invalid(format!("drift weight λ must be finite and ≥ 0, got {lambda}")));
    }
    Ok(())
}

/// Graph handles for a bound bank.
#[derive(Debug, Clone, Copy)]
pub struct BoundBank {
    pub prompts: [Var; 5],
    pub snapshots: [Var; 5],
    pub segment_embeddings: Var,
}

impl BoundBank {
    /// Differentiable `λ · Σ ‖PE′ − PE‖²`.
    pub fn drift_penalty<T: Real>(&self, g: &mut Graph<T>, lambda: f64) -> Result<Var> {
        check_lambda(lambda)?;
        let mut total: Option<Var> = None;
        for i in 0..5 {
            let diff = g.sub(self.prompts[i], self.snapshots[i])?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum(sq);
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        Ok(g.scale(total.expect("five segments"), lambda))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub k: usize,
    pub lambda: f64,
    pub seed: u64,
    pub d_model: usize,
    pub registry_hash: String,
    pub backbone_hash: String,
    /// Segment name → row keys in row order.
    pub keys: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub token_id: usize,
    pub token: String,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowAnalysis {
    pub key: String,
    /// `‖PE′ − PE‖₂`.
    pub change: f64,
    /// `None` when the learned row has zero norm (cosine undefined).
    pub neighbors: Option<Vec<Neighbor>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnalysis {
    pub segment: SegmentId,
    pub rows: Vec<RowAnalysis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub segments: Vec<SegmentAnalysis>,
}

impl AnalysisReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for seg in &self.segments {
            s.push_str(&format!("[{}]\n", seg.segment));
            for r in &seg.rows {
                let near = match &r.neighbors {
                    Some(n) => n.iter().map(|n| n.token.as_str()).collect::<Vec<_>>().join("; "),
                    None => "degenerate".into(),
                };
                s.push_str(&format!("  {:<32} {:>10.4}  {}\n", r.key, r.change, near));
            }
        }
        s
    }
}
