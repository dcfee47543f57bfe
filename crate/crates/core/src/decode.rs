//! Greedy decoding over the frozen backbone, and prediction over slot instances.

use std::sync::Arc;

use crate::autodiff::kernels::argmax;
use crate::autodiff::{Graph, Real};
use crate::backbone::{self, BackboneWeights};
use crate::corpus::SlotInstance;
use crate::error::{Error, Result};
use crate::eval::{extract_answer, sort_predictions, Prediction};
use crate::instance::{assemble, compose_rows, AssembledInstance, AssemblyOptions, Element};
use crate::prompt_bank::{PromptBank, SegmentId};
use crate::tokenizer::Tokenizer;

fn check_headroom(prompt: &AssembledInstance, max_new: usize, max_positions: usize) -> Result<usize> {
    let n = prompt.input_len;
    if n == 0 {
        return Err(Error::invalid("cannot decode from an empty prompt"));
    }
    if n + max_new > max_positions {
        return Err(Error::invalid(format!(
            "prompt of {n} positions leaves no room for {max_new} new tokens within max_positions {max_positions}"
        )));
    }
    Ok(n)
}

/// Greedy generation from the input part of `prompt`. Generated tokens are
/// embedded as answer-segment tokens at the next position. Stops at `eos`
/// (not included) or after `max_new` tokens.
pub fn greedy_decode<T: Real>(
    prompt: &AssembledInstance,
    bank: &PromptBank<T>,
    backbone: &BackboneWeights<T>,
    eos: usize,
    max_new: usize,
) -> Result<Vec<usize>> {
    let n = check_headroom(prompt, max_new, backbone.config.max_positions)?;
    let seg_on = prompt.segment_embeddings;
    let mut cache = backbone.new_cache();
    let rows = compose_rows(&prompt.elements[..n], &prompt.segment_ids[..n], 0, seg_on, bank, backbone)?;
    let hidden = backbone.extend(&mut cache, &rows)?;
    let mut last = hidden.row(n - 1).to_vec();
    let mut out = Vec::new();
    for step in 0..max_new {
        let next = argmax(&backbone.head_logits(&last));
        if next == eos {
            break;
        }
        out.push(next);
        if step + 1 == max_new {
            break;
        }
        let row = compose_rows(&[Element::Token(next)], &[SegmentId::Answer], cache.len(), seg_on, bank, backbone)?;
        last = backbone.extend(&mut cache, &row)?.row(0).to_vec();
    }
    Ok(out)
}

/// Same contract as [`greedy_decode`], recomputing the whole sequence
/// through the autodiff graph at every step.
pub fn greedy_decode_full<T: Real>(
    prompt: &AssembledInstance,
    bank: &PromptBank<T>,
    backbone: &BackboneWeights<T>,
    eos: usize,
    max_new: usize,
) -> Result<Vec<usize>> {
    let n = check_headroom(prompt, max_new, backbone.config.max_positions)?;
    let mut elements = prompt.elements[..n].to_vec();
    let mut segments = prompt.segment_ids[..n].to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let rows = compose_rows(&elements, &segments, 0, prompt.segment_embeddings, bank, backbone)?;
        let mut g = Graph::new();
        let bb = backbone.bind(&mut g, false);
        let x = g.constant(Arc::new(rows));
        let logits = backbone::forward(&mut g, &bb, &backbone.config, x)?.logits;
        let logits = g.value(logits);
        let next = argmax(logits.row(logits.rows() - 1));
        if next == eos {
            break;
        }
        out.push(next);
        elements.push(Element::Token(next));
        segments.push(SegmentId::Answer);
    }
    Ok(out)
}

/// Decodes slot instances into predictions.
pub struct Predictor<'a, T> {
    pub backbone: &'a BackboneWeights<T>,
    pub bank: &'a PromptBank<T>,
    pub tok: &'a dyn Tokenizer,
    pub opts: AssemblyOptions,
}

impl<T: Real> Predictor<'_, T> {
    pub fn predict_one(&self, inst: &SlotInstance) -> Result<Prediction> {
        let ctx = &inst.context;
        let prompt =
            assemble(ctx, &inst.slot, None, self.bank, self.tok, self.backbone.config.max_positions, &self.opts)?;
        let ids = greedy_decode(&prompt, self.bank, self.backbone, self.tok.eos_id(), self.opts.max_new)?;
        let generation = self.tok.decode(&ids);
        Ok(Prediction {
            dialogue_id: ctx.dialogue_id.clone(),
            turn: ctx.turn,
            domain: inst.slot.domain.clone(),
            slot: inst.slot.name.clone(),
            extracted: extract_answer(&generation),
            generation,
            gold: inst.gold.clone(),
        })
    }

    /// Predictions for all instances on up to `threads` workers, sorted by
    /// dialogue, turn, domain and slot. The first error aborts the run.
    pub fn predict(&self, instances: &[SlotInstance], threads: usize) -> Result<Vec<Prediction>> {
        let threads = threads.clamp(1, instances.len().max(1));
        let chunk = instances.len().div_ceil(threads).max(1);
        let mut preds = if threads == 1 {
            instances.iter().map(|i| self.predict_one(i)).collect::<Result<Vec<_>>>()?
        } else {
            let parts: Vec<Result<Vec<Prediction>>> = std::thread::scope(|s| {
                let handles: Vec<_> = instances
                    .chunks(chunk)
                    .map(|part| s.spawn(move || part.iter().map(|i| self.predict_one(i)).collect()))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::invalid("prediction worker panicked"))))
                    .collect()
            });
            let mut all = Vec::with_capacity(instances.len());
            for p in parts {
                all.extend(p?);
            }
            all
        };
        sort_predictions(&mut preds);
        Ok(preds)
    }
}

#[cfg(test)]
mod tests;
