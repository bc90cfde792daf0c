mod common;

use common::{tiny_batch, tiny_config};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalant::data::{make_batches, synth_task, Batch, Pair, TaskKind};
use scalant::model::{materialize, ModelConfig, ParameterStore, WidthSpec};
use scalant::tensor::{kernels, Tape, Tensor, Var};
use scalant::training::{
    average_stores, distill_loss, lambda2, soft_targets, stage1_loss, stage2_loss, stage3_loss, train_stage,
    window_gradients, GradBuffer, Objective, StageConfig, Targets,
};

fn store(cfg: &ModelConfig, seed: u64) -> ParameterStore {
    ParameterStore::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Widest and sub-model logits on one tape, plus smoothed targets.
fn forward_all(store: &ParameterStore, specs: &[WidthSpec], batch: &Batch) -> (Tape, Var, Vec<Var>, Targets) {
    let cfg = store.config();
    let mut tape = Tape::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let top = materialize(store, &WidthSpec::widest(cfg)).unwrap().forward(&mut tape, batch, &mut rng).unwrap();
    let subs = specs
        .iter()
        .map(|s| materialize(store, s).unwrap().forward(&mut tape, batch, &mut rng).unwrap())
        .collect();
    let targets = Targets::for_batch(&batch.tgt_out, cfg.vocab_size, 0.1).unwrap();
    (tape, top, subs, targets)
}

fn ce(tape: &mut Tape, logits: Var, dist: &Tensor, t: &Targets) -> f64 {
    let v = tape.cross_entropy_weighted(logits, dist, &t.weights, t.norm).unwrap();
    tape.value(v).item().unwrap()
}

/// Weighted mean of `-sum(target * log_softmax(logits))`, computed
/// directly from the logit values.
fn ce_by_hand(logits: &Tensor, dist: &Tensor, t: &Targets) -> f64 {
    let n = logits.last_dim();
    let mut total = 0.0;
    for (r, (row, target)) in logits.data().chunks(n).zip(dist.data().chunks(n)).enumerate() {
        let mut lp = row.to_vec();
        kernels::log_softmax_in_place(&mut lp);
        total += t.weights[r] * -target.iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
    }
    total / t.norm
}

fn two_specs(cfg: &ModelConfig) -> Vec<WidthSpec> {
    vec![WidthSpec::type1(cfg, 4), WidthSpec::type2(cfg, vec![4, 8, 8, 4])]
}

#[test]
fn stage2_at_step_zero_equals_stage1() {
    let cfg = tiny_config(2, 0.0);
    let s = store(&cfg, 1);
    let (mut tape, top, subs, t) = forward_all(&s, &two_specs(&cfg), &tiny_batch());
    let l1 = stage1_loss(&mut tape, top, &subs, &t).unwrap();
    let l2 = stage2_loss(&mut tape, top, &subs, &t, 0, 4000).unwrap();
    assert!((tape.value(l1).item().unwrap() - tape.value(l2).item().unwrap()).abs() < 1e-12);
}

#[test]
fn stage1_is_the_sum_of_separate_cross_entropies() {
    let cfg = tiny_config(2, 0.0);
    let s = store(&cfg, 2);
    let (mut tape, top, subs, t) = forward_all(&s, &two_specs(&cfg), &tiny_batch());
    let total = stage1_loss(&mut tape, top, &subs, &t).unwrap();
    let total = tape.value(total).item().unwrap();
    let by_hand: f64 = [top, subs[0], subs[1]].iter().map(|&v| ce_by_hand(tape.value(v), &t.dist, &t)).sum();
    assert!((total - by_hand).abs() < 1e-12, "{total} vs {by_hand}");
    let alone = stage1_loss(&mut tape, top, &[], &t).unwrap();
    assert!((tape.value(alone).item().unwrap() - ce_by_hand(tape.value(top), &t.dist, &t)).abs() < 1e-12);
}

#[test]
fn stage3_is_the_hand_assembled_weighted_sum() {
    let cfg = tiny_config(2, 0.0);
    let s = store(&cfg, 3);
    let (mut tape, top, subs, t) = forward_all(&s, &two_specs(&cfg), &tiny_batch());
    let teacher = soft_targets(&tape, top);
    for lambda in [0.0, 0.1, 1.0] {
        let total = stage3_loss(&mut tape, top, &subs, &t, lambda).unwrap();
        let total = tape.value(total).item().unwrap();
        let mut by_hand = ce_by_hand(tape.value(top), &t.dist, &t);
        for &sub in &subs {
            by_hand += lambda * ce_by_hand(tape.value(sub), &t.dist, &t)
                + (1.0 - lambda) * ce_by_hand(tape.value(sub), &teacher, &t);
        }
        assert!((total - by_hand).abs() < 1e-12, "lambda {lambda}: {total} vs {by_hand}");
    }
}

#[test]
fn distilling_the_widest_into_itself_adds_half_its_entropy() {
    let cfg = tiny_config(2, 0.0);
    let s = store(&cfg, 4);
    let (mut tape, top, _, t) = forward_all(&s, &[], &tiny_batch());
    let widest_ce = ce(&mut tape, top, &t.dist, &t);
    let total = distill_loss(&mut tape, top, &[top], &t, 0.5).unwrap();
    let soft = tape.value(total).item().unwrap() - widest_ce - 0.5 * widest_ce;
    let p = soft_targets(&tape, top);
    let n = p.last_dim();
    let entropy: f64 = p
        .data()
        .chunks(n)
        .zip(&t.weights)
        .map(|(row, w)| w * -row.iter().map(|q| if *q > 0.0 { q * q.ln() } else { 0.0 }).sum::<f64>())
        .sum::<f64>()
        / t.norm;
    assert!((soft - 0.5 * entropy).abs() < 1e-10, "{soft} vs {}", 0.5 * entropy);
}

#[test]
fn teacher_receives_no_gradient_from_the_distillation_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = common::random_tensor(vec![3, 5], -2.0, 2.0, &mut rng);
    let x = common::random_tensor(vec![3, 5], -2.0, 2.0, &mut rng);
    let hard = Tensor::new(vec![3, 5], {
        let mut d = vec![0.0; 15];
        d[1] = 1.0;
        d[5 + 3] = 1.0;
        d[10 + 4] = 1.0;
        d
    })
    .unwrap();
    let t = Targets {
        dist: hard,
        weights: vec![1.0, 1.0, 0.0],
        norm: 2.0,
    };
    let mut tape = Tape::new();
    let (wv, xv) = (tape.variable(w.clone()), tape.variable(x.clone()));
    let loss = distill_loss(&mut tape, wv, &[xv], &t, 0.0).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut alone = Tape::new();
    let wa = alone.variable(w);
    let la = alone.cross_entropy_weighted(wa, &t.dist, &t.weights, t.norm).unwrap();
    let ga = alone.backward(la).unwrap();
    assert_eq!(grads.get(wv).unwrap(), ga.get(wa).unwrap());

    // the student gradient is (softmax(x) - softmax(w)) * weight / norm
    let p = soft_targets(&tape, wv);
    let q = soft_targets(&tape, xv);
    for (i, g) in grads.get(xv).unwrap().iter().enumerate() {
        let expect = (q.data()[i] - p.data()[i]) * t.weights[i / 5] / t.norm;
        assert!((g - expect).abs() < 1e-14);
    }
}

#[test]
fn lambda2_interpolates_between_the_stages() {
    assert_eq!(lambda2(0, 4000), 1.0);
    assert_eq!(lambda2(2000, 4000), 0.75);
    assert_eq!(lambda2(4000, 4000), 0.5);
    assert_eq!(lambda2(100_000, 4000), 0.5);
}

fn copy_pairs(n: usize, seed: u64) -> Vec<Pair> {
    synth_task(TaskKind::Copy, n, 12, (2, 6), seed).unwrap()
}

#[test]
fn split_window_matches_fused_batch() {
    let cfg = tiny_config(2, 0.0);
    let s = store(&cfg, 6);
    let pairs = copy_pairs(16, 1);
    let fused = make_batches(&pairs, 10_000, 0).unwrap();
    assert_eq!(fused.len(), 1);
    let split = fused[0].split(2, &pairs).unwrap();
    assert_eq!(split.len(), 2);
    for objective in [Objective::Joint, Objective::Distill { lambda: 0.7 }] {
        let run = |micro: &[Batch]| {
            let mut buf = GradBuffer::new(&s);
            let loss = window_gradients(
                &s,
                micro,
                &two_specs(&cfg),
                objective,
                0.1,
                &mut buf,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
            (loss, buf)
        };
        let (lf, gf) = run(&fused);
        let (ls, gs) = run(&split);
        assert!((lf - ls).abs() < 1e-12);
        for key in 0..s.params().len() {
            for (a, b) in gf.grad(key).iter().zip(gs.grad(key)) {
                assert!((a - b).abs() < 1e-12, "{}: {a} vs {b}", s.params()[key].name);
            }
        }
        assert_eq!(gf.covered_count(), gs.covered_count());
    }
}

#[test]
fn repeated_windows_see_no_hidden_state() {
    let cfg = tiny_config(2, 0.1);
    let s = store(&cfg, 7);
    let batch = [tiny_batch()];
    let run = || {
        let mut buf = GradBuffer::new(&s);
        let l = window_gradients(&s, &batch, &[], Objective::Joint, 0.1, &mut buf, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (l.to_bits(), buf.grad(0).to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn padding_does_not_change_a_pair_logits() {
    let cfg = tiny_config(2, 0.0);
    let s = store(&cfg, 8);
    let a = Pair {
        src: vec![4, 5],
        tgt: vec![6],
    };
    let b = Pair {
        src: vec![7, 8, 9, 10, 11],
        tgt: vec![4, 5, 6, 7],
    };
    let sub = materialize(&s, &WidthSpec::type2(&cfg, vec![8, 4, 4, 8])).unwrap();
    let logits = |batch: &Batch| {
        let mut tape = Tape::inference();
        let v = sub.forward(&mut tape, batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        tape.value(v).data().to_vec()
    };
    let alone = logits(&Batch::of(&[a.clone()]).unwrap());
    let padded = logits(&Batch::of(&[a, b]).unwrap());
    // row 0 of the padded batch has width 5; its first two positions are real
    for (x, y) in alone.iter().zip(&padded[..alone.len()]) {
        assert!((x - y).abs() < 1e-12);
    }
}

fn small_run_config(seed: u64) -> StageConfig {
    StageConfig {
        n_sampled: 1,
        max_lr: 3e-3,
        warmup_iters: 20,
        epochs: 3,
        token_budget: 200,
        seed,
        ..StageConfig::default()
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        max_width: 32,
        width_menu: vec![8, 16, 24, 32],
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        head_dim: 8,
        ffn_multiplier: 2,
        dropout: vec![0.0; 4],
        max_seq_len: 10,
    }
}

#[test]
fn same_seed_gives_identical_store_and_log() {
    let pairs = copy_pairs(120, 2);
    let (train, valid) = pairs.split_at(100);
    let run = || {
        let mut s = store(&small_model(), 9);
        let mut log = Vec::new();
        let cfg = StageConfig {
            max_steps: Some(8),
            ..small_run_config(4)
        };
        train_stage(&mut s, train, valid, None, &cfg, Some(&mut log)).unwrap();
        (s, log)
    };
    let (s1, log1) = run();
    let (s2, log2) = run();
    assert_eq!(log1, log2);
    assert!(!log1.is_empty());
    for (a, b) in s1.params().iter().zip(s2.params()) {
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn every_probe_width_loss_falls_epoch_over_epoch() {
    let pairs = copy_pairs(700, 3);
    let (train, valid) = pairs.split_at(600);
    let mut s = store(&small_model(), 10);
    let report = train_stage(&mut s, train, valid, None, &small_run_config(5), None).unwrap();
    assert_eq!(report.records.len(), 3);
    for w in 0..4 {
        let losses: Vec<f64> = report.records.iter().map(|r| r.metrics[w].val_loss).collect();
        assert!(losses.windows(2).all(|p| p[1] < p[0]), "width {}: {losses:?}", report.records[0].metrics[w].spec);
    }
}

#[test]
fn stage3_without_a_corpus_is_refused() {
    let pairs = copy_pairs(20, 4);
    let mut s = store(&small_model(), 11);
    let cfg = StageConfig {
        stage: 3,
        ..small_run_config(1)
    };
    assert!(train_stage(&mut s, &pairs, &pairs, None, &cfg, None).is_err());
}

#[test]
fn averaging_matches_the_elementwise_mean() {
    let cfg = tiny_config(1, 0.0);
    let stores: Vec<ParameterStore> = (0..10).map(|i| store(&cfg, 100 + i)).collect();
    let avg = average_stores(&stores).unwrap();
    for key in 0..avg.params().len() {
        for (k, &v) in avg.get(key).data().iter().enumerate() {
            let oracle = stores.iter().rev().map(|s| s.get(key).data()[k] / 10.0).sum::<f64>();
            assert!((v - oracle).abs() <= 1e-15, "{v} vs {oracle}");
        }
    }
    let single = average_stores(&stores[..1]).unwrap();
    assert_eq!(single.params(), stores[0].params());
    let zeros = ParameterStore::zeros(cfg.clone()).unwrap();
    let half = average_stores(&[stores[0].clone(), zeros]).unwrap();
    for (h, p) in half.params().iter().zip(stores[0].params()) {
        assert!(h.value.data().iter().zip(p.value.data()).all(|(a, b)| *a == b / 2.0));
    }
    let other = store(&tiny_config(2, 0.0), 1);
    assert!(average_stores(&[stores[0].clone(), other]).is_err());
}

#[test]
fn stage_ends_with_the_mean_of_recent_snapshots() {
    let pairs = copy_pairs(120, 6);
    let (train, valid) = pairs.split_at(100);
    let run = |steps: u64, average_last: usize| {
        let mut s = store(&small_model(), 12);
        let cfg = StageConfig {
            max_steps: Some(steps),
            average_last,
            snapshot_every: Some(1),
            ..small_run_config(8)
        };
        let report = train_stage(&mut s, train, valid, None, &cfg, None).unwrap();
        (s, report)
    };
    let (one, _) = run(1, 0);
    let (two, _) = run(2, 0);
    let (three, _) = run(3, 0);
    let (averaged, report) = run(3, 2);
    let oracle = average_stores(&[two.clone(), three]).unwrap();
    assert_eq!(averaged.params(), oracle.params());
    assert_ne!(averaged.params(), one.params());
    // the extra record scores the averaged weights
    let last = report.records.last().unwrap();
    assert_eq!(last.step, 3);
    assert_eq!(report.records.len(), 2);
}
