use super::*;
use crate::corpus::{SlotInstance, TurnContext};
use crate::fixtures::{domain_setup, Setup};
use crate::instance::Ablation;

fn context(turns: &[(&str, &str)]) -> Arc<TurnContext> {
    Arc::new(TurnContext {
        dialogue_id: format!("d{}", turns.len()),
        turn: turns.len() - 1,
        history: turns.iter().map(|(s, u)| (s.to_string(), u.to_string())).collect(),
    })
}

fn instances<T: Real>(s: &Setup<T>) -> Vec<SlotInstance> {
    let ctxs = [
        context(&[("", "i want a hotel in the north")]),
        context(&[("", "i want a hotel"), ("sure , which area ?", "north")]),
    ];
    let mut out = Vec::new();
    for c in ctxs {
        for slot in s.registry.slots() {
            out.push(SlotInstance { context: Arc::clone(&c), slot: slot.clone(), gold: "none".into() });
        }
    }
    out
}

fn prompt<T: Real>(s: &Setup<T>, inst: &SlotInstance, opts: &AssemblyOptions) -> AssembledInstance {
    assemble(&inst.context, &inst.slot, None, &s.bank, &s.tok, s.backbone.config.max_positions, opts).unwrap()
}

#[test]
fn cached_decoding_matches_full_recompute() {
    let s = domain_setup::<f64>("hotel", 2, 16);
    for opts in [AssemblyOptions::default(), AssemblyOptions::with([Ablation::Segment])] {
        for inst in instances(&s).iter().step_by(3) {
            let p = prompt(&s, inst, &opts);
            let fast = greedy_decode(&p, &s.bank, &s.backbone, s.tok.eos_id(), 6).unwrap();
            let full = greedy_decode_full(&p, &s.bank, &s.backbone, s.tok.eos_id(), 6).unwrap();
            assert_eq!(fast, full);
        }
    }
    let s = domain_setup::<f32>("taxi", 1, 8);
    for inst in instances(&s) {
        let p = prompt(&s, &inst, &AssemblyOptions::default());
        let fast = greedy_decode(&p, &s.bank, &s.backbone, s.tok.eos_id(), 4).unwrap();
        assert_eq!(fast, greedy_decode_full(&p, &s.bank, &s.backbone, s.tok.eos_id(), 4).unwrap());
    }
}

#[test]
fn stops_at_eos_and_at_max_new() {
    let s = domain_setup::<f64>("train", 1, 8);
    let inst = &instances(&s)[0];
    let p = prompt(&s, inst, &AssemblyOptions::default());
    let free = greedy_decode(&p, &s.bank, &s.backbone, usize::MAX, 5).unwrap();
    assert_eq!(free.len(), 5);
    // treat the first greedy token as end of sequence
    assert!(greedy_decode(&p, &s.bank, &s.backbone, free[0], 5).unwrap().is_empty());
    let cut = greedy_decode(&p, &s.bank, &s.backbone, usize::MAX, 2).unwrap();
    assert_eq!(cut, free[..2]);
    assert!(greedy_decode(&p, &s.bank, &s.backbone, usize::MAX, 0).unwrap().is_empty());
}

#[test]
fn headroom_is_checked() {
    let s = domain_setup::<f64>("train", 1, 8);
    let p = prompt(&s, &instances(&s)[0], &AssemblyOptions::default());
    let room = s.backbone.config.max_positions - p.input_len;
    assert!(greedy_decode(&p, &s.bank, &s.backbone, usize::MAX, room).is_ok());
    assert!(greedy_decode(&p, &s.bank, &s.backbone, usize::MAX, room + 1).is_err());
    assert!(greedy_decode_full(&p, &s.bank, &s.backbone, usize::MAX, room + 1).is_err());
}

#[test]
fn predictions_do_not_depend_on_thread_count() {
    let s = domain_setup::<f32>("hotel", 1, 8);
    let insts = instances(&s);
    let predictor = Predictor { backbone: &s.backbone, bank: &s.bank, tok: &s.tok, opts: AssemblyOptions::default() };
    let one = predictor.predict(&insts, 1).unwrap();
    assert_eq!(one.len(), insts.len());
    for threads in [2, 3, 64] {
        assert_eq!(predictor.predict(&insts, threads).unwrap(), one);
    }
    let mut sorted = one.clone();
    sort_predictions(&mut sorted);
    assert_eq!(sorted, one);
    assert!(one.iter().all(|p| p.extracted == extract_answer(&p.generation)));
}
