//! Small registries, tokenizers and backbones shared by unit tests.

use crate::autodiff::Real;
use crate::backbone::{BackboneConfig, BackboneWeights};
use crate::corpus::SlotRegistry;
use crate::instance::prefix_text;
use crate::prompt_bank::PromptBank;
use crate::tokenizer::WordTokenizer;

pub fn tokenizer_for(registry: &SlotRegistry, extra: &[&str]) -> WordTokenizer {
    let mut texts: Vec<String> = Vec::new();
    for s in registry.slots() {
        texts.push(prefix_text(s));
        texts.push(s.question.clone());
        texts.push(format!("domain is {}, slot is {}, type is {}, answer is none", s.domain, s.name, s.slot_type));
        texts.extend(s.candidates.iter().cloned());
    }
    texts.extend(extra.iter().map(|s| s.to_string()));
    WordTokenizer::from_texts(texts)
}

pub fn backbone<T: Real>(vocab_size: usize, d_model: usize, seed: u64) -> BackboneWeights<T> {
    let config = BackboneConfig { n_layers: 1, d_model, n_heads: 2, vocab_size, max_positions: 128, head_tied: true };
    BackboneWeights::random(config, seed).expect("valid config")
}

pub struct Setup<T> {
    pub registry: SlotRegistry,
    pub tok: WordTokenizer,
    pub backbone: BackboneWeights<T>,
    pub bank: PromptBank<T>,
}

pub fn domain_setup<T: Real>(domain: &str, k: usize, d_model: usize) -> Setup<T> {
    let registry = SlotRegistry::default_multiwoz().for_domain(domain).expect("known domain");
    let tok = tokenizer_for(&registry, &["i want a hotel in the north", "sure , which area ?"]);
    let backbone = backbone::<T>(crate::tokenizer::Tokenizer::vocab_size(&tok), d_model, 11);
    let bank = PromptBank::init(&registry, k, &backbone, &tok, 5).expect("bank");
    Setup { registry, tok, backbone, bank }
}
