//! Prompt-only optimization: regularized generation loss, grouped Adam,
//! reduce-on-plateau scheduling and dev-JGA early stopping.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::backbone::{self, BackboneWeights};
use crate::corpus::SlotInstance;
use crate::decode::Predictor;
use crate::error::{Error, Result};
use crate::eval::joint_goal_accuracy;
use crate::instance::{embed_graph, Ablation, AssembledInstance, AssemblyOptions, DEFAULT_MAX_NEW};
use crate::prompt_bank::{BankManifest, BoundBank, PromptBank, SegmentId};
use crate::tokenizer::Tokenizer;

/// Learning-rate groups: the five prompt segments, then the segment table.
pub const LR_GROUPS: [&str; 6] = ["domain", "slot", "type", "prefix", "question", "segment_embeddings"];

/// Best task-prompt count per domain.
pub fn best_k(domain: &str) -> Option<usize> {
    match domain {
        "attraction" => Some(5),
        "hotel" | "restaurant" => Some(20),
        "taxi" | "train" => Some(10),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Task prompt tokens per task; `None` picks [`best_k`] for the domain.
    pub k: Option<usize>,
    pub lambda: f64,
    pub base_learning_rate: f64,
    /// Overrides keyed by [`LR_GROUPS`] names. A rate of 0 freezes the group.
    pub per_segment_lr: BTreeMap<String, f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_learning_rate: f64,
    pub seed: u64,
    pub reiteration: bool,
    /// Segment ablations; `reiteration` controls the target form.
    pub ablations: Vec<Ablation>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: None,
            lambda: 0.01,
            base_learning_rate: 1e-3,
            per_segment_lr: BTreeMap::new(),
            batch_size: 4,
            max_epochs: 100,
            early_stop_patience: 8,
            plateau_patience: 5,
            plateau_factor: 0.5,
            min_learning_rate: 1e-6,
            seed: 0,
            reiteration: true,
            ablations: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::read_text(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive("base_learning_rate", self.base_learning_rate)?;
        positive("plateau_factor", self.plateau_factor)?;
        positive("min_learning_rate", self.min_learning_rate)?;
        if self.plateau_factor >= 1.0 {
            return Err(Error::invalid("plateau_factor must be below 1"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        for (group, &lr) in &self.per_segment_lr {
            if !LR_GROUPS.contains(&group.as_str()) {
                return Err(Error::invalid(format!(
                    "unknown learning-rate group `{group}` (expected one of {})",
                    LR_GROUPS.join(", ")
                )));
            }
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::invalid(format!("learning rate for `{group}` must be non-negative, got {lr}")));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("early_stop_patience", self.early_stop_patience),
            ("plateau_patience", self.plateau_patience),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.k == Some(0) {
            return Err(Error::invalid("k must be at least 1"));
        }
        Ok(())
    }

    pub fn resolve_k(&self, domain: &str) -> Result<usize> {
        self.k
            .or_else(|| best_k(domain))
            .ok_or_else(|| Error::invalid(format!("no default k for domain `{domain}`; set k explicitly")))
    }

    pub fn learning_rates(&self) -> [f64; 6] {
        LR_GROUPS.map(|g| self.per_segment_lr.get(g).copied().unwrap_or(self.base_learning_rate))
    }

    pub fn assembly_options(&self) -> AssemblyOptions {
        let mut opts = AssemblyOptions::with(self.ablations.iter().copied());
        if !self.reiteration {
            opts.ablations.insert(Ablation::Reiteration);
        }
        opts.max_new = DEFAULT_MAX_NEW;
        opts
    }
}

fn check_logits<T: Real>(g: &Graph<T>, logits: Var, rows: usize) -> Result<()> {
    let shape = g.value(logits).shape();
    if shape.len() != 2 || shape[0] != rows {
        return Err(Error::Shape(format!("loss: logits of shape {shape:?}, expected {rows} rows")));
    }
    Ok(())
}

/// Masked next-token cross-entropy over the target positions of `inst`
/// plus `λ · Σ ‖PE′ − PE‖²`. `logits` holds one row per fed position.
pub fn compute_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    inst: &AssembledInstance,
    bank: &BoundBank,
    lambda: f64,
) -> Result<Var> {
    check_logits(g, logits, inst.fed_len())?;
    let labels = inst.labels();
    if labels.iter().all(Option::is_none) {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    let ce = g.cross_entropy(logits, &labels)?;
    let drift = bank.drift_penalty(g, lambda)?;
    g.add(ce, drift)
}

/// Batch loss: cross-entropy averaged over all target positions in the
/// batch plus one drift term. Logits are computed only for the rows that
/// predict a target token.
pub fn batch_loss<T: Real>(
    g: &mut Graph<T>,
    batch: &[&AssembledInstance],
    bank: &BoundBank,
    backbone: &BackboneWeights<T>,
    lambda: f64,
) -> Result<Var> {
    let bb = backbone.bind(g, false);
    let counts: Vec<usize> = batch.iter().map(|i| i.labels().iter().flatten().count()).collect();
    let total: usize = counts.iter().sum();
    if batch.is_empty() || counts.contains(&0) {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    let mut sum: Option<Var> = None;
    for (inst, &count) in batch.iter().zip(&counts) {
        let x = embed_graph(g, inst, bank, &bb)?;
        let (hidden, _) = backbone::forward_hidden(g, &bb, &backbone.config, x)?;
        let labels = inst.labels();
        let first = labels.iter().position(Option::is_some).expect("non-empty mask");
        let rows = g.slice(hidden, 0, first, labels.len())?;
        let logits = backbone::head(g, &bb, rows)?;
        let ce = g.cross_entropy(logits, &labels[first..])?;
        let weighted = g.scale(ce, count as f64 / total as f64);
        sum = Some(match sum {
            Some(s) => g.add(s, weighted)?,
            None => weighted,
        });
    }
    let drift = bank.drift_penalty(g, lambda)?;
    g.add(sum.expect("non-empty batch"), drift)
}

/// Adam over the six trainable groups, with moments kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rates: [f64; 6],
    m: [Vec<f64>; 6],
    v: [Vec<f64>; 6],
    t: u64,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

impl Adam {
    pub fn new<T: Real>(bank: &PromptBank<T>, learning_rates: [f64; 6]) -> Self {
        let sizes: [usize; 6] =
            std::array::from_fn(|i| if i < 5 { bank.segments[i].current.len() } else { bank.segment_embeddings.len() });
        Self { learning_rates, m: sizes.map(|n| vec![0.0; n]), v: sizes.map(|n| vec![0.0; n]), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    fn update<T: Real>(&mut self, group: usize, param: &mut [T], grad: &[T]) {
        let lr = self.learning_rates[group];
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        let (m, v) = (&mut self.m[group], &mut self.v[group]);
        for i in 0..param.len() {
            let gi = grad[i].as_f64();
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            if lr > 0.0 {
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPSILON);
                param[i] = T::lit(param[i].as_f64() - step);
            }
        }
    }
}

/// One optimizer step on `batch`; returns the batch loss.
pub fn train_step<T: Real>(
    bank: &mut PromptBank<T>,
    backbone: &BackboneWeights<T>,
    batch: &[&AssembledInstance],
    lambda: f64,
    adam: &mut Adam,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = bank.bind(&mut g);
    let loss = batch_loss(&mut g, batch, &bound, backbone, lambda)?;
    let value = g.value(loss).item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value} at optimizer step {}", adam.t + 1)));
    }
    let grads = g.backward(loss)?;
    adam.t += 1;
    for i in 0..5 {
        let grad = grads.get(bound.prompts[i]).ok_or_else(|| Error::invalid("missing prompt gradient"))?;
        adam.update(i, bank.segments[i].current.data_mut(), grad.data());
    }
    let grad = grads.get(bound.segment_embeddings).ok_or_else(|| Error::invalid("missing segment gradient"))?;
    adam.update(5, bank.segment_embeddings.data_mut(), grad.data());
    Ok(value)
}

/// Counts epochs without a strict improvement of a maximized metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Patience {
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Patience {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::NEG_INFINITY, bad_epochs: 0 }
    }

    /// Records `metric`; true when it improved on the best so far.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn exhausted(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

/// Multiplies every group's rate by `factor` once `patience` epochs pass
/// without improvement, then starts counting again.
#[derive(Debug, Clone, PartialEq)]
pub struct ReduceOnPlateau {
    pub counter: Patience,
    pub factor: f64,
    pub min_lr: f64,
}

impl ReduceOnPlateau {
    pub fn new(patience: usize, factor: f64, min_lr: f64) -> Self {
        Self { counter: Patience::new(patience), factor, min_lr }
    }

    /// True when the rates were reduced.
    pub fn observe(&mut self, metric: f64, rates: &mut [f64; 6]) -> bool {
        self.counter.observe(metric);
        if !self.counter.exhausted() {
            return false;
        }
        self.counter.bad_epochs = 0;
        for r in rates.iter_mut() {
            *r = (*r * self.factor).max(self.min_lr.min(*r));
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_jga: f64,
    pub lr_by_group: BTreeMap<String, f64>,
}

pub struct Checkpoint<T> {
    pub bank: PromptBank<T>,
    pub best_dev_jga: f64,
    pub epoch: usize,
    pub config: TrainConfig,
    pub backbone_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    best_dev_jga: f64,
    epoch: usize,
    config: TrainConfig,
    backbone_hash: String,
}

impl<T: Real> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            best_dev_jga: self.best_dev_jga,
            epoch: self.epoch,
            config: self.config.clone(),
            backbone_hash: self.backbone_hash.clone(),
        };
        self.bank.save(path, self.config.lambda, serde_json::to_value(meta)?)
    }

    pub fn load(path: &Path) -> Result<(Self, BankManifest)> {
        let (bank, manifest) = PromptBank::load(path)?;
        let meta: CheckpointMeta = serde_json::from_value(manifest.extra.clone())
            .map_err(|e| Error::Format(format!("{}: not a training checkpoint: {e}", path.display())))?;
        let c = Checkpoint {
            bank,
            best_dev_jga: meta.best_dev_jga,
            epoch: meta.epoch,
            config: meta.config,
            backbone_hash: meta.backbone_hash,
        };
        Ok((c, manifest))
    }
}

pub struct FitOutcome<T> {
    /// Bank of the best dev-JGA epoch.
    pub checkpoint: Checkpoint<T>,
    pub history: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Trains `bank` on `train` and keeps the best epoch by `dev_jga`, which is
/// called with the bank after every epoch.
pub fn fit<T: Real>(
    train: &[AssembledInstance],
    mut bank: PromptBank<T>,
    backbone: &BackboneWeights<T>,
    config: &TrainConfig,
    dev_jga: &mut dyn FnMut(&PromptBank<T>) -> Result<f64>,
    mut log: Option<&mut dyn Write>,
) -> Result<FitOutcome<T>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("no training instances"));
    }
    let backbone_hash = backbone.content_hash();
    let mut adam = Adam::new(&bank, config.learning_rates());
    let mut plateau = ReduceOnPlateau::new(config.plateau_patience, config.plateau_factor, config.min_learning_rate);
    let mut early = Patience::new(config.early_stop_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(PromptBank<T>, usize, f64)> = None;
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&AssembledInstance> = idx.iter().map(|&i| &train[i]).collect();
            let loss = train_step(&mut bank, backbone, &batch, config.lambda, &mut adam).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch}, batch {}: {msg}", step + 1)),
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
        }
        let jga = dev_jga(&bank)?;
        let lr_by_group = LR_GROUPS.iter().zip(adam.learning_rates).map(|(g, r)| (g.to_string(), r)).collect();
        let entry = EpochLog { epoch, train_loss: loss_sum / batches as f64, dev_jga: jga, lr_by_group };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&entry)?)
                .map_err(|e| Error::invalid(format!("writing log: {e}")))?;
        }
        history.push(entry);
        if early.observe(jga) {
            best = Some((bank.clone(), epoch, jga));
        }
        plateau.observe(jga, &mut adam.learning_rates);
        if early.exhausted() {
            stopped_early = true;
            break;
        }
    }

    if backbone.content_hash() != backbone_hash {
        return Err(Error::invalid("backbone weights changed during training"));
    }
    let (bank, epoch, best_dev_jga) = best.expect("at least one epoch ran");
    Ok(FitOutcome {
        checkpoint: Checkpoint { bank, best_dev_jga, epoch, config: config.clone(), backbone_hash },
        history,
        stopped_early,
    })
}

/// Dev JGA by greedy decoding over `dev`, fanned out over `threads`.
pub fn dev_evaluator<'a, T: Real>(
    backbone: &'a BackboneWeights<T>,
    tok: &'a dyn Tokenizer,
    dev: &'a [SlotInstance],
    opts: AssemblyOptions,
    threads: usize,
) -> impl FnMut(&PromptBank<T>) -> Result<f64> + 'a {
    move |bank| {
        let predictor = Predictor { backbone, bank, tok, opts: opts.clone() };
        Ok(joint_goal_accuracy(&predictor.predict(dev, threads)?))
    }
}

/// Prompt rows of `segment` that received a non-zero gradient from `batch`.
pub fn rows_with_gradient<T: Real>(
    bank: &PromptBank<T>,
    backbone: &BackboneWeights<T>,
    batch: &[&AssembledInstance],
    segment: SegmentId,
) -> Result<Vec<usize>> {
    let idx = segment.prompt_index().ok_or_else(|| Error::invalid(format!("{segment} has no prompt rows")))?;
    let mut g = Graph::new();
    let bound = bank.bind(&mut g);
    let loss = batch_loss(&mut g, batch, &bound, backbone, 0.0)?;
    let grads = g.backward(loss)?;
    let grad = grads.get(bound.prompts[idx]).ok_or_else(|| Error::invalid("missing prompt gradient"))?;
    Ok((0..grad.rows()).filter(|&r| grad.row(r).iter().any(|v| *v != T::zero())).collect())
}

#[cfg(test)]
mod tests;
