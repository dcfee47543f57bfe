//! Synthetic two-domain world, corpus generator and toy-backbone pretraining.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real};
use crate::backbone::{self, BackboneConfig, BackboneWeights};
use crate::corpus::{Corpus, Dialogue, SlotInstance, SlotRegistry, SlotSpec, SlotType, Turn, NONE};
use crate::error::{Error, Result};
use crate::instance::{prefix_text, target_text};
use crate::tokenizer::{Tokenizer, WordTokenizer, SYS, USR};

pub const TOY_SEED: u64 = 7;
pub const TOY_TRAIN_INSTANCES: usize = 40;

static SHIPPED_BACKBONE: &[u8] = include_bytes!("../assets/toy_backbone.sptw");

/// The pretrained toy backbone produced by [`pretrain_toy_backbone`] with
/// the default configuration and [`TOY_SEED`].
pub fn shipped_backbone() -> Result<BackboneWeights<f32>> {
    BackboneWeights::from_container(crate::container::Container::from_bytes(SHIPPED_BACKBONE)?, &BackboneConfig::toy())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySlot {
    pub spec: SlotSpec,
    /// Word following the value in user requests.
    pub word: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorld {
    pub slots: Vec<ToySlot>,
    pub vocabulary: Vec<String>,
    pub seed: u64,
}

fn words(list: &str) -> Vec<String> {
    list.split_whitespace().map(str::to_owned).collect()
}

fn slot(domain: &str, name: &str, t: SlotType, word: &str, question: &str, values: &str) -> ToySlot {
    let values = words(values);
    let candidates = if t == SlotType::Categorical { values.clone() } else { Vec::new() };
    ToySlot {
        spec: SlotSpec {
            domain: domain.into(),
            name: name.into(),
            slot_type: t,
            description: format!("{name} of the {domain}"),
            question: question.into(),
            candidates,
        },
        word: word.into(),
        values,
    }
}

fn request(value: &str, word: &str) -> String {
    format!("i want a {value} {word}")
}

fn confirm(value: &str) -> String {
    format!("booked {value}")
}

impl ToyWorld {
    /// Two domains with one categorical, one open and one number slot each.
    pub fn standard(seed: u64) -> Self {
        use SlotType::*;
        let slots = vec![
            slot("cafe", "area", Categorical, "area", "what area is the cafe in ?", "north south east west centre"),
            slot(
                "cafe",
                "name",
                Open,
                "cafe",
                "what is the name of the cafe ?",
                "alba bruno cosmo delta ember fable giro halo",
            ),
            slot("cafe", "people", Number, "people", "how many people for the cafe ?", "1 2 3 4 5 6 7 8"),
            slot("gym", "level", Categorical, "pass", "what level is the gym pass ?", "basic silver gold elite"),
            slot("gym", "coach", Open, "coach", "who is the coach at the gym ?", "ana ben cara dov eli fay gus hana"),
            slot("gym", "hours", Number, "hours", "how many hours at the gym ?", "1 2 3 4 5 6 7 8"),
        ];
        let mut texts = Vec::new();
        for s in &slots {
            texts.push(prefix_text(&s.spec));
            texts.push(s.spec.question.clone());
            for v in s.values.iter().map(String::as_str).chain([NONE]) {
                texts.push(request(v, &s.word));
                texts.push(confirm(v));
                texts.push(target_text(&s.spec, v, true));
            }
        }
        let vocabulary = WordTokenizer::from_texts(texts).words().to_vec();
        Self { slots, vocabulary, seed }
    }

    pub fn registry(&self) -> SlotRegistry {
        SlotRegistry::new(self.slots.iter().map(|s| s.spec.clone()).collect()).expect("toy registry is valid")
    }

    pub fn tokenizer(&self) -> WordTokenizer {
        WordTokenizer::new(&self.vocabulary)
    }

    pub fn domains(&self) -> Vec<String> {
        let mut d: Vec<String> = self.slots.iter().map(|s| s.spec.domain.clone()).collect();
        d.dedup();
        d
    }

    fn domain_slots(&self, domain: &str) -> Vec<&ToySlot> {
        self.slots.iter().filter(|s| s.spec.domain == domain).collect()
    }

    /// Single-domain dialogues. Each turn the user requests a value for one
    /// slot, preferring slots not yet filled; the system confirms the
    /// previous request. States are cumulative.
    pub fn generate_corpus(&self, n_dialogues: usize, turns_per_dialogue: usize, seed: u64) -> Result<Corpus> {
        if n_dialogues == 0 || turns_per_dialogue == 0 {
            return Err(Error::invalid("toy corpus needs at least one dialogue and one turn"));
        }
        let tok = self.tokenizer();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let domains = self.domains();
        let mut dialogues = Vec::with_capacity(n_dialogues);
        for i in 0..n_dialogues {
            let domain = domains.choose(&mut rng).expect("toy world has domains").clone();
            let mut slots = self.domain_slots(&domain);
            slots.shuffle(&mut rng);
            let mut state = BTreeMap::new();
            let mut turns = Vec::with_capacity(turns_per_dialogue);
            let mut last: Option<String> = None;
            for t in 0..turns_per_dialogue {
                let s = if t < slots.len() { slots[t] } else { slots[rng.random_range(0..slots.len())] };
                let value = s.values.choose(&mut rng).expect("non-empty value pool").clone();
                let system = last.as_deref().map(confirm).unwrap_or_default();
                let user = request(&value, &s.word);
                for text in [&system, &user] {
                    if !tok.covers(text) {
                        return Err(Error::invalid(format!("toy vocabulary misses a word of `{text}`")));
                    }
                }
                state.insert(s.spec.key(), value.clone());
                turns.push(Turn { system, user, state: state.clone() });
                last = Some(value);
            }
            dialogues.push(Dialogue { id: format!("toy-{seed}-{i:04}"), domains: vec![domain], turns });
        }
        Ok(Corpus::new(dialogues))
    }

    /// Plain-text pretraining documents: a dialogue's utterances, optionally
    /// with turn markers and preceded by one slot's prefix text, followed by
    /// questions about the domain's slots answered in the reiterated form.
    pub fn pretraining_documents(&self, n: usize, seed: u64) -> Result<Vec<String>> {
        let corpus = self.generate_corpus(n, 3, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut docs = Vec::with_capacity(n);
        for d in &corpus.dialogues {
            let turns = rng.random_range(1..=d.turns.len());
            let marked = rng.random_bool(0.5);
            let mut slots = self.domain_slots(&d.domains[0]);
            slots.shuffle(&mut rng);
            let mut text: Vec<String> = Vec::new();
            if rng.random_bool(0.5) {
                text.push(prefix_text(&slots[0].spec));
            }
            for turn in &d.turns[..turns] {
                if !turn.system.is_empty() {
                    text.push(if marked { format!("{SYS} {}", turn.system) } else { turn.system.clone() });
                }
                text.push(if marked { format!("{USR} {}", turn.user) } else { turn.user.clone() });
            }
            let state = &d.turns[turns - 1].state;
            for s in &slots[..2] {
                let value = state.get(&s.spec.key()).map(String::as_str).unwrap_or(NONE);
                text.push(format!("{} {}", s.spec.question, target_text(&s.spec, value, true)));
            }
            docs.push(text.join(" "));
        }
        Ok(docs)
    }
}

/// Toy train/dev/test splits of the standard world.
pub struct ToyData {
    pub world: ToyWorld,
    pub registry: SlotRegistry,
    pub tokenizer: WordTokenizer,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl ToyData {
    pub fn generate(seed: u64) -> Result<Self> {
        let world = ToyWorld::standard(seed);
        Ok(Self {
            registry: world.registry(),
            tokenizer: world.tokenizer(),
            train: world.generate_corpus(8, 2, seed)?,
            dev: world.generate_corpus(16, 2, seed + 1)?,
            test: world.generate_corpus(6, 2, seed + 2)?,
            world,
        })
    }
}

/// Instances of every domain a dialogue mentions, in corpus order.
pub fn all_domain_instances(corpus: &Corpus, registry: &SlotRegistry) -> Vec<SlotInstance> {
    let mut out = Vec::new();
    for d in &corpus.dialogues {
        for domain in registry.domains() {
            if d.mentions(domain) {
                out.extend(crate::corpus::make_instances(d, registry, domain));
            }
        }
    }
    out
}

/// Seeded subset of `n` instances, kept in corpus order.
pub fn sample_instances(instances: &[SlotInstance], n: usize, seed: u64) -> Result<Vec<SlotInstance>> {
    if n > instances.len() {
        return Err(Error::invalid(format!("asked for {n} of {} instances", instances.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, instances.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| instances[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub documents: usize,
    pub heldout_documents: usize,
    /// Mean training CE over the last `window` steps must fall below this.
    pub target_ce: f64,
    pub window: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 3e-3,
            warmup_steps: 50,
            documents: 4000,
            heldout_documents: 100,
            target_ce: 1.0,
            window: 50,
            clip_norm: 1.0,
            seed: TOY_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean training CE per window of steps.
    pub curve: Vec<f64>,
    pub final_ce: f64,
    pub heldout_ce: f64,
    pub heldout_answer_accuracy: f64,
    pub steps: usize,
    pub content_hash: String,
}

fn doc_ids(tok: &dyn Tokenizer, doc: &str) -> Vec<usize> {
    let mut ids = vec![tok.eos_id()];
    ids.extend(tok.encode(doc));
    ids.push(tok.eos_id());
    ids
}

/// Mean next-token CE of `weights` over `docs`, weighting every token equally.
pub fn corpus_cross_entropy<T: Real>(
    weights: &BackboneWeights<T>,
    tok: &dyn Tokenizer,
    docs: &[String],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for doc in docs {
        let ids = doc_ids(tok, doc);
        let mut g = Graph::new();
        let bb = weights.bind(&mut g, false);
        let x = backbone::embed_tokens(&mut g, &bb, &ids[..ids.len() - 1])?;
        let logits = backbone::forward(&mut g, &bb, &weights.config, x)?.logits;
        let labels: Vec<Option<usize>> = ids[1..].iter().map(|&i| Some(i)).collect();
        let ce = g.cross_entropy(logits, &labels)?;
        total += g.value(ce).item()?.as_f64() * labels.len() as f64;
        count += labels.len();
    }
    Ok(total / count as f64)
}

/// Fraction of `answer is` continuations in `docs` whose next token is the
/// greedy prediction, with the document as context.
pub fn answer_accuracy<T: Real>(weights: &BackboneWeights<T>, tok: &dyn Tokenizer, docs: &[String]) -> Result<f64> {
    let anchor = tok.encode(crate::eval::ANSWER_ANCHOR);
    let mut hits = 0;
    let mut total = 0;
    for doc in docs {
        let ids = doc_ids(tok, doc);
        let mut rows = weights.token_embed(&ids)?;
        for p in 0..ids.len() {
            for (x, y) in rows.row_mut(p).iter_mut().zip(weights.wpe.row(p)) {
                *x = *x + *y;
            }
        }
        let logits = weights.logits(&rows)?;
        for end in anchor.len()..ids.len() {
            if ids[end - anchor.len()..end] == anchor[..] {
                total += 1;
                hits += usize::from(crate::autodiff::kernels::argmax(logits.row(end - 1)) == ids[end]);
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("no answer clauses in documents"));
    }
    Ok(hits as f64 / total as f64)
}

struct FullAdam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

/// Trains every backbone weight on next-token prediction over templated
/// toy documents, then checks the CE targets.
pub fn pretrain_toy_backbone(
    world: &ToyWorld,
    backbone_config: BackboneConfig,
    config: &PretrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(BackboneWeights<f32>, PretrainReport)> {
    let tok = world.tokenizer();
    if tok.vocab_size() > backbone_config.vocab_size {
        return Err(Error::invalid(format!(
            "toy vocabulary of {} tokens exceeds backbone vocabulary {}",
            tok.vocab_size(),
            backbone_config.vocab_size
        )));
    }
    if config.batch_size == 0 || config.window == 0 || config.steps < config.window {
        return Err(Error::invalid("pretraining needs batch_size, window >= 1 and steps >= window"));
    }
    let docs = world.pretraining_documents(config.documents, config.seed)?;
    let heldout = world.pretraining_documents(config.heldout_documents, config.seed.wrapping_add(1_000_003))?;
    let mut weights = BackboneWeights::<f32>::random(backbone_config, config.seed)?;
    let names: Vec<String> = weights.named_tensors().into_iter().map(|(n, _)| n).collect();
    let sizes: Vec<usize> = weights.named_tensors().into_iter().map(|(_, t)| t.len()).collect();
    let mut adam = FullAdam {
        m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(config.steps);
    let mut curve = Vec::new();

    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(doc_ids(&tok, &docs[order[cursor]]));
            cursor += 1;
        }
        let total: usize = batch.iter().map(|ids| ids.len() - 1).sum();
        let mut g = Graph::new();
        let bb = weights.bind(&mut g, true);
        let mut loss = None;
        for ids in &batch {
            let x = backbone::embed_tokens(&mut g, &bb, &ids[..ids.len() - 1])?;
            let logits = backbone::forward(&mut g, &bb, &weights.config, x)?.logits;
            let labels: Vec<Option<usize>> = ids[1..].iter().map(|&i| Some(i)).collect();
            let ce = g.cross_entropy(logits, &labels)?;
            let ce = g.scale(ce, labels.len() as f64 / total as f64);
            loss = Some(match loss {
                Some(l) => g.add(l, ce)?,
                None => ce,
            });
        }
        let loss = loss.expect("non-empty batch");
        let value = g.value(loss).item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("pretraining loss is {value} at step {}", step + 1)));
        }
        losses.push(value);
        let grads = g.backward(loss)?;
        let vars = bb.named_vars();
        let norm = vars
            .iter()
            .filter_map(|(_, v)| grads.get(*v))
            .flat_map(|t| t.data().iter().map(|x| (*x as f64).powi(2)))
            .sum::<f64>()
            .sqrt();
        let clip = if norm > config.clip_norm { config.clip_norm / norm } else { 1.0 };
        let lr = schedule(config, step);
        adam.t += 1;
        let c1 = 1.0 - 0.9f64.powi(adam.t);
        let c2 = 1.0 - 0.999f64.powi(adam.t);
        for (i, (name, var)) in vars.iter().enumerate() {
            debug_assert_eq!(name, &names[i]);
            let Some(grad) = grads.get(*var) else { continue };
            let param = Arc::make_mut(weights.tensor_mut(name).expect("named tensor"));
            let (m, v) = (&mut adam.m[i], &mut adam.v[i]);
            for (j, p) in param.data_mut().iter_mut().enumerate() {
                let gj = grad.data()[j] as f64 * clip;
                m[j] = 0.9 * m[j] + 0.1 * gj;
                v[j] = 0.999 * v[j] + 0.001 * gj * gj;
                *p = (*p as f64 - lr * (m[j] / c1) / ((v[j] / c2).sqrt() + 1e-8)) as f32;
            }
        }
        if (step + 1) % config.window == 0 {
            let mean = losses[step + 1 - config.window..].iter().sum::<f64>() / config.window as f64;
            curve.push(mean);
            progress(step + 1, mean);
        }
    }

    let final_ce = losses[losses.len() - config.window..].iter().sum::<f64>() / config.window as f64;
    if final_ce >= config.target_ce {
        let shown: Vec<String> = curve.iter().map(|c| format!("{c:.3}")).collect();
        return Err(Error::Numerical(format!(
            "toy pretraining ended at CE {final_ce:.4} (target {}); curve per {} steps: [{}]",
            config.target_ce,
            config.window,
            shown.join(", ")
        )));
    }
    let report = PretrainReport {
        curve,
        final_ce,
        heldout_ce: corpus_cross_entropy(&weights, &tok, &heldout)?,
        heldout_answer_accuracy: answer_accuracy(&weights, &tok, &heldout)?,
        steps: config.steps,
        content_hash: weights.content_hash(),
    };
    Ok((weights, report))
}

fn schedule(config: &PretrainConfig, step: usize) -> f64 {
    if step < config.warmup_steps {
        return config.learning_rate * (step + 1) as f64 / config.warmup_steps as f64;
    }
    let span = (config.steps - config.warmup_steps).max(1) as f64;
    let progress = (step - config.warmup_steps) as f64 / span;
    config.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
