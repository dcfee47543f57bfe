//! Library-level workflows shared by the subcommands.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use spt_core::backbone::BackboneWeights;
use spt_core::corpus::{make_all_instances, ontology_sizes, Corpus, SlotInstance, SlotRegistry};
use spt_core::decode::Predictor;
use spt_core::eval::{evaluate, EvalReport, Prediction};
use spt_core::instance::{assemble, AssemblyOptions};
use spt_core::prompt_bank::PromptBank;
use spt_core::tokenizer::WordTokenizer;
use spt_core::toy::all_domain_instances;
use spt_core::trainer::{dev_evaluator, fit, FitOutcome, TrainConfig};
use spt_core::{Error, Result};

/// Registry, tokenizer and frozen backbone of one setup.
pub struct Inputs {
    pub registry: SlotRegistry,
    pub tokenizer: WordTokenizer,
    pub backbone: BackboneWeights<f32>,
}

impl Inputs {
    pub fn load(registry: &Path, vocab: &Path, backbone: &Path) -> Result<Self> {
        let config = BackboneWeights::<f32>::peek_config(backbone)?;
        Ok(Self {
            registry: SlotRegistry::load(registry)?,
            tokenizer: WordTokenizer::load(vocab)?,
            backbone: BackboneWeights::load(backbone, &config)?,
        })
    }
}

/// Slot instances of `domain`, or of every domain each dialogue mentions.
pub fn slot_instances(corpus: &Corpus, registry: &SlotRegistry, domain: Option<&str>) -> Result<Vec<SlotInstance>> {
    let out = match domain {
        Some(d) => {
            if registry.domain_slots(d).is_empty() {
                return Err(Error::invalid(format!("registry has no slots for domain `{d}`")));
            }
            make_all_instances(&corpus.for_domain(d), registry, d)
        }
        None => all_domain_instances(corpus, registry),
    };
    if out.is_empty() {
        return Err(Error::invalid("corpus yields no slot instances"));
    }
    Ok(out)
}

/// Fresh bank, assembled training instances, and a fit with dev-JGA selection.
pub fn train(
    inputs: &Inputs,
    train: &[SlotInstance],
    dev: &[SlotInstance],
    config: &TrainConfig,
    k: usize,
    threads: usize,
    log: Option<&mut dyn Write>,
) -> Result<FitOutcome<f32>> {
    config.validate()?;
    let bank = PromptBank::init(&inputs.registry, k, &inputs.backbone, &inputs.tokenizer, config.seed)?;
    let opts = config.assembly_options();
    let max = inputs.backbone.config.max_positions;
    let assembled = train
        .iter()
        .map(|i| assemble(&i.context, &i.slot, Some(&i.gold), &bank, &inputs.tokenizer, max, &opts))
        .collect::<Result<Vec<_>>>()?;
    let mut dev_jga = dev_evaluator(&inputs.backbone, &inputs.tokenizer, dev, opts, threads);
    fit(&assembled, bank, &inputs.backbone, config, &mut dev_jga, log)
}

pub fn predict(
    inputs: &Inputs,
    bank: &PromptBank<f32>,
    instances: &[SlotInstance],
    opts: AssemblyOptions,
    threads: usize,
) -> Result<Vec<Prediction>> {
    Predictor { backbone: &inputs.backbone, bank, tok: &inputs.tokenizer, opts }.predict(instances, threads)
}

/// One report per domain present in `preds`; ontology sizes come from `train`.
pub fn reports(
    preds: &[Prediction],
    registry: &SlotRegistry,
    train: Option<&Corpus>,
) -> Result<BTreeMap<String, EvalReport>> {
    let mut by_domain: BTreeMap<&str, Vec<Prediction>> = BTreeMap::new();
    for p in preds {
        by_domain.entry(&p.domain).or_default().push(p.clone());
    }
    let mut out = BTreeMap::new();
    for (domain, preds) in by_domain {
        let ontology = train.map(|c| ontology_sizes(registry, domain, &c.for_domain(domain)));
        out.insert(domain.to_owned(), evaluate(&preds, registry, domain, ontology.as_ref())?);
    }
    Ok(out)
}

/// Checks that a checkpoint was trained against these inputs.
pub fn check_compatible(inputs: &Inputs, bank: &PromptBank<f32>) -> Result<()> {
    if bank.registry_hash != inputs.registry.content_hash() {
        return Err(Error::invalid("checkpoint was trained with a different slot registry"));
    }
    if bank.backbone_hash != inputs.backbone.content_hash() {
        return Err(Error::invalid("checkpoint was trained against a different backbone"));
    }
    Ok(())
}
