use std::collections::BTreeSet;
use std::sync::Arc;

use super::*;
use crate::autodiff::Tensor;
use crate::corpus::TurnContext;
use crate::fixtures::{domain_setup, Setup};
use crate::instance::{assemble, Element};

fn context(user: &str) -> TurnContext {
    TurnContext { dialogue_id: "d".into(), turn: 0, history: vec![(String::new(), user.into())] }
}

fn train_set<T: Real>(s: &Setup<T>, opts: &AssemblyOptions) -> Vec<AssembledInstance> {
    let golds = ["none", "18:30", "cambridge", "none"];
    s.registry
        .slots()
        .iter()
        .zip(golds)
        .map(|(slot, gold)| {
            let c = context("i want a hotel in the north");
            assemble(&c, slot, Some(gold), &s.bank, &s.tok, s.backbone.config.max_positions, opts).unwrap()
        })
        .collect()
}

fn full_logits(g: &mut Graph<f64>, s: &Setup<f64>, inst: &AssembledInstance, bound: &BoundBank) -> Var {
    let bb = s.backbone.bind(g, false);
    let x = embed_graph(g, inst, bound, &bb).unwrap();
    backbone::forward(g, &bb, &s.backbone.config, x).unwrap().logits
}

#[test]
fn loss_is_zero_for_confident_correct_logits() {
    let s = domain_setup::<f64>("taxi", 1, 8);
    let inst = &train_set(&s, &AssemblyOptions::default())[0];
    let v = s.backbone.config.vocab_size;
    let mut data = vec![0.0; inst.fed_len() * v];
    for (p, label) in inst.labels().iter().enumerate() {
        if let Some(t) = label {
            data[p * v + t] = 1e3;
        }
    }
    let mut g = Graph::new();
    let bound = s.bank.bind(&mut g);
    let logits = g.param(Tensor::new(vec![inst.fed_len(), v], data.clone()).unwrap());
    let loss = compute_loss(&mut g, logits, inst, &bound, 0.5).unwrap();
    assert_eq!(g.value(loss).item().unwrap(), 0.0);

    // rows outside the mask do not matter
    data[0] = 77.0;
    data[v + 3] = -5.0;
    let logits = g.param(Tensor::new(vec![inst.fed_len(), v], data).unwrap());
    let loss = compute_loss(&mut g, logits, inst, &bound, 0.5).unwrap();
    assert_eq!(g.value(loss).item().unwrap(), 0.0);

    let wrong = g.param(Tensor::zeros(vec![inst.fed_len() + 1, v]));
    assert!(compute_loss(&mut g, wrong, inst, &bound, 0.5).is_err());
    let prompt = inst.prompt_only();
    let l = g.param(Tensor::zeros(vec![prompt.fed_len(), v]));
    assert!(compute_loss(&mut g, l, &prompt, &bound, 0.5).is_err());
}

#[test]
fn cross_entropy_matches_per_position_oracle() {
    let mut s = domain_setup::<f64>("taxi", 1, 8);
    s.bank.segments[1].current.data_mut()[0] += 0.25;
    let inst = &train_set(&s, &AssemblyOptions::default())[1];
    let mut g = Graph::new();
    let bound = s.bank.bind(&mut g);
    let logits = full_logits(&mut g, &s, inst, &bound);
    let lambda = 0.3;
    let loss = compute_loss(&mut g, logits, inst, &bound, lambda).unwrap();
    let got = g.value(loss).item().unwrap();

    // oracle: explicit log-softmax at each target position
    let table = g.value(logits);
    let mut nll = 0.0;
    let mut n = 0;
    for p in 0..inst.fed_len() {
        if !inst.loss_mask[p + 1] {
            continue;
        }
        let Element::Token(t) = inst.elements[p + 1] else { panic!("target is a token") };
        let row = table.row(p);
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        nll -= row[t] - max - z.ln();
        n += 1;
    }
    let want = nll / n as f64 + s.bank.drift_penalty(lambda).unwrap();
    assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn zero_lambda_leaves_masked_cross_entropy() {
    let mut s = domain_setup::<f64>("taxi", 1, 8);
    s.bank.segments[0].current.data_mut()[2] += 1.0;
    let inst = &train_set(&s, &AssemblyOptions::default())[2];
    let mut g = Graph::new();
    let bound = s.bank.bind(&mut g);
    let logits = full_logits(&mut g, &s, inst, &bound);
    let loss = compute_loss(&mut g, logits, inst, &bound, 0.0).unwrap();
    let ce = g.cross_entropy(logits, &inst.labels()).unwrap();
    assert!((g.value(loss).item().unwrap() - g.value(ce).item().unwrap()).abs() < 1e-7);
}

#[test]
fn batch_loss_weights_instances_by_target_length() {
    let s = domain_setup::<f64>("taxi", 1, 8);
    let opts = AssemblyOptions::default();
    let set = train_set(&s, &opts);
    let batch: Vec<&AssembledInstance> = set.iter().take(3).collect();
    let lambda = 0.2;
    let mut g = Graph::new();
    let bound = s.bank.bind(&mut g);
    let got = batch_loss(&mut g, &batch, &bound, &s.backbone, lambda).unwrap();
    let got = g.value(got).item().unwrap();
    let mut sum = 0.0;
    let mut count = 0;
    for inst in &batch {
        let logits = full_logits(&mut g, &s, inst, &bound);
        let loss = compute_loss(&mut g, logits, inst, &bound, 0.0).unwrap();
        let n = inst.target.len();
        sum += g.value(loss).item().unwrap() * n as f64;
        count += n;
    }
    assert!((got - sum / count as f64).abs() < 1e-12);
}

#[test]
fn every_prompt_row_in_the_batch_gets_a_gradient() {
    let mut s = domain_setup::<f64>("taxi", 2, 8);
    for seg in &mut s.bank.segments {
        for (i, v) in seg.current.data_mut().iter_mut().enumerate() {
            *v += 0.01 * (i as f64 * 0.7).cos();
        }
    }
    let set = train_set(&s, &AssemblyOptions::default());
    let batch: Vec<&AssembledInstance> = set.iter().collect();
    for segment in SegmentId::PROMPTS {
        let used: BTreeSet<usize> = set
            .iter()
            .flat_map(|i| i.elements[..i.fed_len()].iter().copied())
            .filter_map(|e| match e {
                Element::Prompt { segment: s, row } if s == segment => Some(row),
                _ => None,
            })
            .collect();
        let got: BTreeSet<usize> =
            rows_with_gradient(&s.bank, &s.backbone, &batch, segment).unwrap().into_iter().collect();
        assert_eq!(got, used, "{segment}");
    }
}

#[test]
fn patience_counts_strict_improvements() {
    let mut p = Patience::new(8);
    let seq = [0.1, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2];
    let mut stop = None;
    for (i, &m) in seq.iter().enumerate() {
        p.observe(m);
        if p.exhausted() {
            stop = Some(i + 1);
            break;
        }
    }
    assert_eq!(stop, Some(10));

    let mut rates = [1e-3; 6];
    rates[2] = 0.0;
    let mut r = ReduceOnPlateau::new(5, 0.5, 1e-6);
    let fired: Vec<bool> = (0..12).map(|_| r.observe(0.5, &mut rates)).collect();
    assert_eq!(fired.iter().filter(|&&f| f).count(), 2);
    assert!(fired[5] && fired[10]);
    assert_eq!(rates[0], 2.5e-4);
    assert_eq!(rates[2], 0.0);
    let mut tiny = [1.5e-6; 6];
    r.counter.bad_epochs = 4;
    r.observe(0.1, &mut tiny);
    assert_eq!(tiny, [1e-6; 6]);
}

fn scripted(seq: Vec<f64>) -> impl FnMut(&PromptBank<f32>) -> Result<f64> {
    let mut i = 0;
    move |_| {
        i += 1;
        Ok(seq.get(i - 1).copied().unwrap_or(0.0))
    }
}

#[test]
fn fit_stops_early_and_returns_best_epoch() {
    let s = domain_setup::<f32>("taxi", 1, 8);
    let set = train_set(&s, &AssemblyOptions::default());
    let config = TrainConfig { max_epochs: 50, ..TrainConfig::default() };
    let seq = vec![0.1, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2];
    let mut snapshots = Vec::new();
    let mut script = scripted(seq);
    let mut dev = |b: &PromptBank<f32>| {
        snapshots.push(b.segments[0].current.clone());
        script(b)
    };
    let mut log = Vec::new();
    let out = fit(&set, s.bank.clone(), &s.backbone, &config, &mut dev, Some(&mut log)).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.history.len(), 10);
    assert_eq!(out.checkpoint.epoch, 2);
    assert_eq!(out.checkpoint.best_dev_jga, 0.2);
    assert_eq!(out.checkpoint.bank.segments[0].current, snapshots[1]);
    assert_ne!(snapshots[1], snapshots[9]);
    assert_eq!(out.checkpoint.backbone_hash, s.backbone.content_hash());

    let lines: Vec<EpochLog> =
        String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines, out.history);
    // improvement at epoch 2, so the plateau fires after epoch 7
    for e in &lines {
        let want = if e.epoch <= 7 { 1e-3 } else { 5e-4 };
        assert!(e.lr_by_group.values().all(|&r| r == want), "epoch {}", e.epoch);
    }
}

#[test]
fn zero_rate_group_stays_bit_identical() {
    let s = domain_setup::<f32>("taxi", 1, 8);
    let set = train_set(&s, &AssemblyOptions::default());
    let mut config = TrainConfig { max_epochs: 3, ..TrainConfig::default() };
    config.per_segment_lr.insert("prefix".into(), 0.0);
    config.per_segment_lr.insert("segment_embeddings".into(), 0.0);
    let out = fit(&set, s.bank.clone(), &s.backbone, &config, &mut |_| Ok(1.0 / 3.0), None).unwrap();
    let mut out_bank = out.checkpoint.bank;
    // the best epoch is the first one; train further by hand
    let mut adam = Adam::new(&out_bank, config.learning_rates());
    let batch: Vec<&AssembledInstance> = set.iter().collect();
    for _ in 0..5 {
        train_step(&mut out_bank, &s.backbone, &batch, config.lambda, &mut adam).unwrap();
    }
    assert_eq!(out_bank.segments[3].current, s.bank.segments[3].current);
    assert_eq!(out_bank.segment_embeddings, s.bank.segment_embeddings);
    assert_ne!(out_bank.segments[4].current, s.bank.segments[4].current);
    assert_ne!(out_bank.segments[1].current, s.bank.segments[1].current);
}

#[test]
fn fit_is_deterministic_and_leaves_the_backbone_alone() {
    let s = domain_setup::<f32>("taxi", 1, 8);
    let set = train_set(&s, &AssemblyOptions::default());
    let config = TrainConfig { max_epochs: 3, batch_size: 3, seed: 9, ..TrainConfig::default() };
    let before = s.backbone.content_hash();
    let run = || {
        let out = fit(&set, s.bank.clone(), &s.backbone, &config, &mut scripted(vec![0.1, 0.2, 0.3]), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.sptw");
        out.checkpoint.save(&path).unwrap();
        (std::fs::read(&path).unwrap(), out)
    };
    let (a, out) = run();
    let (b, _) = run();
    assert_eq!(a, b);
    assert_eq!(s.backbone.content_hash(), before);
    assert_eq!(out.checkpoint.epoch, 3);
    assert!(!out.stopped_early);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.sptw");
    out.checkpoint.save(&path).unwrap();
    let (back, manifest) = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(back.epoch, 3);
    assert_eq!(back.config, config);
    assert_eq!(back.backbone_hash, before);
    assert_eq!(manifest.lambda, config.lambda);
    assert_eq!(back.bank.segments[2].current, out.checkpoint.bank.segments[2].current);
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let mut s = domain_setup::<f32>("taxi", 1, 8);
    s.bank.segments[0].current.data_mut()[0] = f32::NAN;
    let set = train_set(&s, &AssemblyOptions::default());
    let config = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
    let err = fit(&set, s.bank.clone(), &s.backbone, &config, &mut |_| Ok(0.0), None).err().unwrap();
    assert!(matches!(err, Error::Numerical(_)));
    assert!(err.to_string().contains("epoch 1, batch 1"), "{err}");
}

#[test]
fn config_round_trips_and_validates() {
    let mut c = TrainConfig { k: Some(2), seed: 4, reiteration: false, ..TrainConfig::default() };
    c.per_segment_lr.insert("slot".into(), 5e-3);
    c.ablations.push(Ablation::Question);
    assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
    assert_eq!(c.learning_rates(), [1e-3, 5e-3, 1e-3, 1e-3, 1e-3, 1e-3]);
    let opts = c.assembly_options();
    assert!(opts.has(Ablation::Question) && !opts.reiteration());
    assert_eq!(TrainConfig::from_json("{}").unwrap(), TrainConfig::default());
    for bad in [
        r#"{"base_learning_rate": 0}"#,
        r#"{"batch_size": 0}"#,
        r#"{"early_stop_patience": 0}"#,
        r#"{"per_segment_lr": {"answer": 0.1}}"#,
        r#"{"per_segment_lr": {"slot": -1}}"#,
        r#"{"lambda": -0.5}"#,
        r#"{"learning_rate": 0.1}"#,
    ] {
        assert!(TrainConfig::from_json(bad).is_err(), "{bad}");
    }
    assert_eq!(TrainConfig::default().resolve_k("hotel").unwrap(), 20);
    assert_eq!(TrainConfig::default().resolve_k("attraction").unwrap(), 5);
    assert!(TrainConfig::default().resolve_k("toyland").is_err());
    assert_eq!(c.resolve_k("toyland").unwrap(), 2);
}

#[test]
fn dev_evaluator_decodes_the_dev_set() {
    let s = domain_setup::<f32>("taxi", 1, 8);
    let ctx = Arc::new(context("i want a hotel"));
    let dev: Vec<SlotInstance> = s
        .registry
        .slots()
        .iter()
        .map(|slot| SlotInstance { context: Arc::clone(&ctx), slot: slot.clone(), gold: "none".into() })
        .collect();
    let mut eval = dev_evaluator(&s.backbone, &s.tok, &dev, AssemblyOptions::default(), 2);
    let jga = eval(&s.bank).unwrap();
    assert!((0.0..=1.0).contains(&jga));
}
