//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalant::data::{Batch, Pair};
use scalant::model::{materialize, ModelConfig, ParameterStore, WidthSpec};
use scalant::tensor::{Tape, Tensor, Var};
use scalant::training::{GradBuffer, Targets};
use scalant::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, FD_FLOOR)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn random_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn kink_free_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Builder,
}

#[derive(Debug)]
pub struct FdReport {
    pub name: String,
    pub max_rel: f64,
    pub checked: usize,
}

/// Scalar loss `sum(out * probe)` with a fixed random probe, so every
/// output element carries a distinct weight.
fn probed_loss(tape: &mut Tape, inputs: &[Tensor], build: &Builder, probe: &mut Option<Tensor>) -> Result<(Var, Vec<Var>)> {
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let p = probe.get_or_insert_with(|| random_tensor(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(99)));
    let pv = tape.constant(p.clone());
    let prod = tape.mul(out, pv)?;
    Ok((tape.sum(prod), vars))
}

/// Central-difference check of every input element of an op.
pub fn fd_check_op(case: &OpCase) -> FdReport {
    let mut probe = None;
    let mut tape = Tape::new();
    let (loss, vars) = probed_loss(&mut tape, &case.inputs, &case.build, &mut probe).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], |g| g.to_vec()))
        .collect();
    let eval = |inputs: &[Tensor], probe: &mut Option<Tensor>| {
        let mut tape = Tape::new();
        let (loss, _) = probed_loss(&mut tape, inputs, &case.build, probe).unwrap();
        tape.value(loss).item().unwrap()
    };
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (i, input) in case.inputs.iter().enumerate() {
        for k in 0..input.len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[k] -= FD_STEP;
            let numeric = (eval(&plus, &mut probe) - eval(&minus, &mut probe)) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(analytic[i][k], numeric));
            checked += 1;
        }
    }
    FdReport {
        name: case.name.to_string(),
        max_rel,
        checked,
    }
}

/// One case per differentiable tape op (and per transpose variant).
pub fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut r = |shape: Vec<usize>| random_tensor(shape, -1.0, 1.0, &mut rng);
    let mut cases = Vec::new();
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { r(vec![4, 3]) } else { r(vec![3, 4]) };
        let b = if tb { r(vec![5, 4]) } else { r(vec![4, 5]) };
        cases.push(OpCase {
            name: ["matmul", "matmul_ta", "matmul_tb", "matmul_tab"][usize::from(ta) + 2 * usize::from(tb)],
            inputs: vec![a, b],
            build: Box::new(move |t, v| t.matmul_t(v[0], v[1], ta, tb)),
        });
        let a = if ta { r(vec![2, 4, 3]) } else { r(vec![2, 3, 4]) };
        let b = if tb { r(vec![2, 5, 4]) } else { r(vec![2, 4, 5]) };
        cases.push(OpCase {
            name: ["batch_matmul", "batch_matmul_ta", "batch_matmul_tb", "batch_matmul_tab"]
                [usize::from(ta) + 2 * usize::from(tb)],
            inputs: vec![a, b],
            build: Box::new(move |t, v| t.batch_matmul(v[0], v[1], ta, tb)),
        });
    }
    cases.push(OpCase {
        name: "add",
        inputs: vec![r(vec![3, 4]), r(vec![3, 4])],
        build: Box::new(|t, v| t.add(v[0], v[1])),
    });
    cases.push(OpCase {
        name: "add_bias",
        inputs: vec![r(vec![3, 4]), r(vec![4])],
        build: Box::new(|t, v| t.add_bias(v[0], v[1])),
    });
    let c = r(vec![3, 4]);
    cases.push(OpCase {
        name: "add_const",
        inputs: vec![r(vec![3, 4])],
        build: Box::new(move |t, v| t.add_const(v[0], &c)),
    });
    let mut m = vec![0.0; 2 * 3 * 3];
    m[2] = -1e9;
    m[13] = -1e9;
    let mask = Tensor::new(vec![2, 3, 3], m).unwrap();
    cases.push(OpCase {
        name: "add_mask",
        inputs: vec![r(vec![4, 3, 3])],
        build: Box::new(move |t, v| {
            let s = t.add_mask(v[0], &mask, 2)?;
            t.softmax(s, 2)
        }),
    });
    cases.push(OpCase {
        name: "scale",
        inputs: vec![r(vec![2, 5])],
        build: Box::new(|t, v| Ok(t.scale(v[0], -1.7))),
    });
    cases.push(OpCase {
        name: "mul",
        inputs: vec![r(vec![3, 4]), r(vec![3, 4])],
        build: Box::new(|t, v| t.mul(v[0], v[1])),
    });
    let mut krng = ChaCha8Rng::seed_from_u64(5);
    cases.push(OpCase {
        name: "relu",
        inputs: vec![kink_free_tensor(vec![4, 5], &mut krng)],
        build: Box::new(|t, v| Ok(t.relu(v[0]))),
    });
    cases.push(OpCase {
        name: "dropout",
        inputs: vec![r(vec![6, 5])],
        build: Box::new(|t, v| t.dropout(v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(17))),
    });
    for axis in 0..3 {
        cases.push(OpCase {
            name: ["softmax_axis0", "softmax_axis1", "softmax_axis2"][axis],
            inputs: vec![r(vec![3, 4, 5])],
            build: Box::new(move |t, v| t.softmax(v[0], axis)),
        });
    }
    cases.push(OpCase {
        name: "layer_norm",
        inputs: vec![r(vec![3, 6]), r(vec![6]), r(vec![6])],
        build: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
    });
    cases.push(OpCase {
        name: "transpose",
        inputs: vec![r(vec![3, 5])],
        build: Box::new(|t, v| t.transpose(v[0])),
    });
    cases.push(OpCase {
        name: "reshape",
        inputs: vec![r(vec![3, 4])],
        build: Box::new(|t, v| t.reshape(v[0], vec![2, 6])),
    });
    for axis in 0..2 {
        cases.push(OpCase {
            name: ["concat_axis0", "concat_axis1"][axis],
            inputs: vec![r(vec![2, 3]), r(vec![2, 3])],
            build: Box::new(move |t, v| t.concat(&[v[0], v[1]], axis)),
        });
        cases.push(OpCase {
            name: ["slice_axis0", "slice_axis1"][axis],
            inputs: vec![r(vec![4, 5])],
            build: Box::new(move |t, v| t.slice(v[0], axis, 1, 2)),
        });
    }
    cases.push(OpCase {
        name: "gather_rows",
        inputs: vec![r(vec![5, 3])],
        build: Box::new(|t, v| t.gather_rows(v[0], &[4, 0, 4, 2])),
    });
    cases.push(OpCase {
        name: "split_heads",
        inputs: vec![r(vec![2 * 3, 2 * 4])],
        build: Box::new(|t, v| t.split_heads(v[0], 2, 2)),
    });
    cases.push(OpCase {
        name: "merge_heads",
        inputs: vec![r(vec![2 * 2, 3, 4])],
        build: Box::new(|t, v| t.merge_heads(v[0], 2)),
    });
    cases.push(OpCase {
        name: "sum",
        inputs: vec![r(vec![3, 3])],
        build: Box::new(|t, v| Ok(t.sum(v[0]))),
    });
    let hard = Tensor::new(
        vec![3, 4],
        vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0],
    )
    .unwrap();
    cases.push(OpCase {
        name: "cross_entropy",
        inputs: vec![r(vec![3, 4])],
        build: Box::new(move |t, v| t.cross_entropy(v[0], &hard, &[1.0, 0.0, 1.0])),
    });
    let soft = Tensor::new(
        vec![3, 4],
        vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25, 0.7, 0.1, 0.1, 0.1],
    )
    .unwrap();
    cases.push(OpCase {
        name: "cross_entropy_weighted",
        inputs: vec![r(vec![3, 4])],
        build: Box::new(move |t, v| t.cross_entropy_weighted(v[0], &soft, &[0.5, 1.0, 2.0], 3.0)),
    });
    let full = r(vec![5, 6]);
    cases.push(OpCase {
        name: "param_crop",
        inputs: vec![r(vec![3, 4])],
        build: Box::new(move |t, v| {
            let p = t.param(0, &full, 4, 5)?;
            t.matmul(v[0], p)
        }),
    });
    cases
}

/// Two-layer encoder and decoder on a tiny vocabulary.
pub fn tiny_config(layers: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        max_width: 8,
        width_menu: vec![4, 8],
        n_encoder_layers: layers,
        n_decoder_layers: layers,
        head_dim: 4,
        ffn_multiplier: 2,
        dropout: vec![dropout, dropout],
        max_seq_len: 8,
    }
}

pub fn tiny_batch() -> Batch {
    Batch::of(&[
        Pair {
            src: vec![4, 5, 6, 7],
            tgt: vec![8, 9],
        },
        Pair {
            src: vec![10, 11],
            tgt: vec![4, 6, 8],
        },
    ])
    .unwrap()
}

/// Label-smoothed CE of one sub-model on a batch; dropout draws come from
/// a fixed seed so repeated calls see the same masks.
pub fn model_loss(store: &ParameterStore, spec: &WidthSpec, batch: &Batch) -> Result<(Tape, Var)> {
    let sub = materialize(store, spec)?;
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let logits = sub.forward(&mut tape, batch, &mut rng)?;
    let targets = Targets::for_batch(&batch.tgt_out, store.config().vocab_size, 0.1)?;
    let loss = tape.cross_entropy_weighted(logits, &targets.dist, &targets.weights, targets.norm)?;
    Ok((tape, loss))
}

/// Central differences over every scalar of the store against the cropped
/// parameter gradients of a full encoder-decoder pass.
pub fn fd_check_model(store: &ParameterStore, spec: &WidthSpec) -> FdReport {
    let batch = tiny_batch();
    let (tape, loss) = model_loss(store, spec, &batch).unwrap();
    let mut buf = GradBuffer::new(store);
    buf.accumulate(&tape.backward(loss).unwrap()).unwrap();
    let eval = |s: &ParameterStore| {
        let (tape, loss) = model_loss(s, spec, &batch).unwrap();
        tape.value(loss).item().unwrap()
    };
    let mut work = store.clone();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for key in 0..store.params().len() {
        for k in 0..store.get(key).len() {
            let orig = store.get(key).data()[k];
            work.get_mut(key).data_mut()[k] = orig + FD_STEP;
            let plus = eval(&work);
            work.get_mut(key).data_mut()[k] = orig - FD_STEP;
            let minus = eval(&work);
            work.get_mut(key).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(buf.grad(key)[k], numeric));
            checked += 1;
        }
    }
    FdReport {
        name: format!("encoder-decoder {spec}"),
        max_rel,
        checked,
    }
}

/// One ADAM step through `spec`; returns `Err` describing the first
/// element whose change disagrees with the active regions of `spec`.
pub fn sharing_step_check(store: &mut ParameterStore, state: &mut scalant::training::OptimizerState, spec: &WidthSpec) -> std::result::Result<usize, String> {
    let before = store.clone();
    let (tape, loss) = model_loss(store, spec, &tiny_batch()).map_err(|e| e.to_string())?;
    let mut buf = GradBuffer::new(store);
    buf.accumulate(&tape.backward(loss).unwrap()).unwrap();
    drop(tape);
    let active = store.coverage(&store.active_regions(spec).unwrap());
    scalant::training::adam_step(state, store, &buf, 1e-3).map_err(|e| e.to_string())?;
    let mut changed_count = 0;
    for (key, p) in store.params().iter().enumerate() {
        let cols = p.value.as_matrix_dims().1;
        let old = before.get(key).data();
        for (k, (&new, &old)) in p.value.data().iter().zip(old).enumerate() {
            let changed = new.to_bits() != old.to_bits();
            let covered = buf.is_covered(key, k / cols, k % cols);
            if covered != active[key][k] {
                return Err(format!("{}[{k}]: gradient coverage {covered}, active region {}", p.name, active[key][k]));
            }
            if changed && !active[key][k] {
                return Err(format!("{}[{k}] changed outside the active region", p.name));
            }
            if active[key][k] && !changed && buf.grad(key)[k] != 0.0 {
                return Err(format!("{}[{k}] active with gradient but unchanged", p.name));
            }
            changed_count += usize::from(changed);
        }
    }
    Ok(changed_count)
}

pub fn decoder_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        max_seq_len: 10,
        ..tiny_config(2, 0.0)
    }
}

/// A random store with its embedding and output projection scaled up, so
/// next-token distributions are peaked rather than near uniform.
pub fn sharp_store(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParameterStore {
    let mut store = ParameterStore::init(cfg.clone(), rng).unwrap();
    let layout = store.layout().clone();
    for (key, factor) in [(layout.embedding, 4.0), (layout.output_proj.weight, 3.0)] {
        for v in store.get_mut(key).data_mut() {
            *v *= factor;
        }
    }
    store
}

/// Log-probability of `tokens` (after BOS) under a full tape forward.
pub fn sequence_log_prob(sub: &scalant::model::SubModel<'_>, src: &[usize], tokens: &[usize]) -> f64 {
    use scalant::data::EOS;
    let body = match tokens.last() {
        Some(&EOS) => &tokens[..tokens.len() - 1],
        _ => tokens,
    };
    let batch = Batch::of(&[Pair {
        src: src.to_vec(),
        tgt: body.to_vec(),
    }])
    .unwrap();
    let mut tape = Tape::inference();
    let logits = sub.forward(&mut tape, &batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let vocab = sub.config().vocab_size;
    let mut logp = tape.value(logits).data().to_vec();
    for row in logp.chunks_mut(vocab) {
        scalant::tensor::kernels::log_softmax_in_place(row);
    }
    tokens.iter().enumerate().map(|(pos, &t)| logp[pos * vocab + t]).sum()
}

/// Best finished hypothesis over every emittable sequence of at most
/// `max_len` tokens, by brute force.
pub fn exhaustive_best(sub: &scalant::model::SubModel<'_>, src: &[usize], max_len: usize, alpha: f64) -> (Vec<usize>, f64) {
    use scalant::data::EOS;
    use scalant::decoding::{emittable, length_normalized};
    let vocab = sub.config().vocab_size;
    let toks: Vec<usize> = (0..vocab).filter(|&t| emittable(t)).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for len in 1..=max_len {
        let mut next = Vec::new();
        for prefix in &frontier {
            for &t in &toks {
                let mut seq = prefix.clone();
                seq.push(t);
                if t == EOS || len == max_len {
                    let score = length_normalized(sequence_log_prob(sub, src, &seq), len, alpha);
                    if best.as_ref().map_or(true, |(_, s)| score > *s) {
                        best = Some((seq, score));
                    }
                } else {
                    next.push(seq);
                }
            }
        }
        frontier = next;
    }
    best.expect("max_len >= 1")
}

/// Width-1 beam against greedy over `cases` random models and sources.
pub fn beam1_vs_greedy(cases: usize) -> std::result::Result<(), String> {
    use scalant::decoding::{beam_search, greedy_decode};
    let cfg = decoder_config(12);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for case in 0..cases {
        let store = sharp_store(&cfg, &mut ChaCha8Rng::seed_from_u64(case as u64));
        let spec = if case % 2 == 0 {
            WidthSpec::widest(&cfg)
        } else {
            WidthSpec::type1(&cfg, 4)
        };
        let sub = materialize(&store, &spec).unwrap();
        let len = rng.gen_range(1..=6);
        let src: Vec<usize> = (0..len).map(|_| rng.gen_range(4..12)).collect();
        let max_len = rng.gen_range(1..=8);
        let greedy = greedy_decode(&sub, &src, max_len).unwrap();
        let beam = beam_search(&sub, &src, 1, 0.6, max_len).unwrap();
        if beam.output() != greedy.as_slice() {
            return Err(format!("case {case}: beam {:?} vs greedy {greedy:?}", beam.output()));
        }
    }
    Ok(())
}

/// Beam 16 against exhaustive enumeration with 4 emittable ids and
/// `max_len` 3, one random model per seed.
pub fn beam16_vs_exhaustive(seeds: u64) -> std::result::Result<(), String> {
    use scalant::decoding::beam_search;
    let cfg = decoder_config(6);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let store = sharp_store(&cfg, &mut rng);
        let sub = materialize(&store, &WidthSpec::widest(&cfg)).unwrap();
        let len = rng.gen_range(1..=4);
        let src: Vec<usize> = (0..len).map(|_| rng.gen_range(4..6)).collect();
        let alpha = [0.0, 0.6, 1.0][seed as usize % 3];
        let (tokens, score) = exhaustive_best(&sub, &src, 3, alpha);
        let beam = beam_search(&sub, &src, 16, alpha, 3).unwrap();
        if beam.tokens != tokens || (beam.score(alpha) - score).abs() > 1e-9 {
            return Err(format!(
                "seed {seed}: beam {:?} ({}) vs exhaustive {tokens:?} ({score})",
                beam.tokens,
                beam.score(alpha)
            ));
        }
    }
    Ok(())
}
