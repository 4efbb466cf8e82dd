use rand::Rng as _;

use super::*;
use crate::embed::EmbeddingMatrix;
use crate::nn::{finite_difference_check, AdamState, CheckOptions, Gradients};

fn spec(name: &str, k: usize, l: usize, dim: usize) -> StreamSpec {
    StreamSpec {
        name: name.into(),
        branch_k: k,
        depth: l,
        distill_dim: dim,
    }
}

fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::new(6, vec![spec("behavior", 3, 2, 4), spec("semantic", 4, 2, 5)]);
    c.hidden = 8;
    c.heads = 2;
    c.dec_layers = 2;
    c.ffn_mult = 2;
    c.dropout = 0.0;
    c.num_negatives = 2;
    c.seed = 7;
    c
}

/// Perturb every parameter so layer norms and biases are not at their
/// symmetric initial values.
fn jitter(m: &mut EagerModel, seed: u64, scale: f64) {
    let mut rng = rng_for(seed, "jitter", &[]);
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        for v in &mut m.params_mut().value_mut(id).data {
            *v += rng.random_range(-scale..scale);
        }
    }
}

fn targets(c: &ModelConfig, seed: u64) -> Vec<EmbeddingMatrix> {
    c.streams
        .iter()
        .enumerate()
        .map(|(s, sp)| {
            let mut rng = rng_for(seed, "targets", &[s as u64]);
            let v = (0..c.num_items * sp.distill_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            EmbeddingMatrix::new(c.num_items, sp.distill_dim, v, "test").unwrap()
        })
        .collect()
}

fn batch() -> Vec<Instance> {
    let sample = |mask: usize, negs: Vec<u32>, rep: (usize, u32)| TransferSample {
        mask: vec![mask],
        negatives: vec![negs],
        replace: vec![rep],
    };
    vec![
        Instance {
            history: vec![0, 3, 2],
            target: 4,
            codes: vec![vec![1, 2], vec![3, 0]],
            transfer: Some(sample(1, vec![0, 1], (0, 2))),
        },
        Instance {
            history: vec![5],
            target: 1,
            codes: vec![vec![0, 1], vec![1, 2]],
            transfer: Some(sample(0, vec![2, 1], (1, 0))),
        },
    ]
}

#[test]
fn encoder_shapes_and_positions() {
    let m = EagerModel::new(tiny_config()).unwrap();
    let mut t = Tape::new(m.params());
    let e = m.encode(&mut t, &[&[3]]).unwrap();
    assert_eq!(t.value(e.h).shape(), (1, 8));
    assert!(m.encode(&mut t, &[&[]]).is_err());
    assert!(m.encode(&mut t, &[&[6]]).is_err());

    let a = m.encode(&mut t, &[&[1, 2]]).unwrap();
    let b = m.encode(&mut t, &[&[2, 1]]).unwrap();
    let (ha, hb) = (t.value(a.h).clone(), t.value(b.h).clone());
    assert_ne!(ha.row(0), hb.row(1));
    assert_ne!(ha.row(1), hb.row(0));
}

#[test]
fn encoder_caps_history() {
    let mut c = tiny_config();
    c.max_history = 3;
    let m = EagerModel::new(c).unwrap();
    let mut t = Tape::new(m.params());
    let long = m.encode(&mut t, &[&[0, 1, 2, 3, 4]]).unwrap();
    let short = m.encode(&mut t, &[&[2, 3, 4]]).unwrap();
    assert_eq!(t.value(long.h), t.value(short.h));
}

#[test]
fn batched_forward_matches_single() {
    let c = tiny_config();
    let mut m = EagerModel::new(c.clone()).unwrap();
    jitter(&mut m, 1, 0.2);
    let tg = targets(&c, 1);
    let tr: Vec<&EmbeddingMatrix> = tg.iter().collect();
    let b = batch();
    let mut t = Tape::new(m.params());
    let (_, both) = m.total_loss(&mut t, &b, &tr, TaskFlags::FULL).unwrap();
    let mut sum = 0.0;
    for one in &b {
        let mut t = Tape::new(m.params());
        let (_, l) = m.total_loss(&mut t, std::slice::from_ref(one), &tr, TaskFlags::FULL).unwrap();
        assert!(l.con > 0.0);
        sum += l.gen + l.recon + l.recog;
    }
    // contrastive smooth-l1 averages over all elements, the rest over examples
    assert!((both.gen + both.recon + both.recog - sum / 2.0).abs() < 1e-12);
}

#[test]
fn untrained_generation_loss_is_uniform() {
    let mut c = ModelConfig::new(40, vec![spec("behavior", 256, 2, 4)]);
    c.hidden = 32;
    c.dec_layers = 2;
    let m = EagerModel::new(c).unwrap();
    let mut t = Tape::new(m.params());
    let enc = m.encode(&mut t, &[&[1, 2, 3], &[7]]).unwrap();
    let mem = m.memory(&mut t, 0, &enc);
    let codes: Vec<&[u32]> = vec![&[17, 200], &[0, 255]];
    let out = m.decode_teacher_forced(&mut t, 0, &mem, &codes).unwrap();
    let loss = m.generation_loss(&mut t, 0, &out, &codes).unwrap();
    let want = 2.0 * 256f64.ln();
    assert!((want - 11.090).abs() < 1e-3);
    let got = t.value(loss).item();
    assert!((got - want).abs() / want < 0.02, "{got} vs {want}");
}

#[test]
fn generation_rejects_bad_digits() {
    let m = EagerModel::new(tiny_config()).unwrap();
    let mut t = Tape::new(m.params());
    let enc = m.encode(&mut t, &[&[1]]).unwrap();
    let mem = m.memory(&mut t, 0, &enc);
    assert!(m.decode_teacher_forced(&mut t, 0, &mem, &[&[3, 0]]).is_err());
    assert!(m.decode_teacher_forced(&mut t, 0, &mem, &[&[0]]).is_err());
}

fn gen_loss_of(m: &EagerModel, stream: usize, code: &[u32]) -> f64 {
    let mut t = Tape::new(m.params());
    let enc = m.encode(&mut t, &[&[0, 1]]).unwrap();
    let mem = m.memory(&mut t, stream, &enc);
    let out = m.decode_teacher_forced(&mut t, stream, &mem, &[code]).unwrap();
    let l = m.generation_loss(&mut t, stream, &out, &[code]).unwrap();
    t.value(l).item()
}

#[test]
fn generation_loss_ignores_other_streams() {
    let mut m = EagerModel::new(tiny_config()).unwrap();
    jitter(&mut m, 2, 0.2);
    let before = gen_loss_of(&m, 0, &[1, 2]);
    let ids: Vec<_> = m.params().ids().filter(|&id| m.params().name(id).starts_with("dec.semantic.")).collect();
    for id in ids {
        m.params_mut().value_mut(id).data.iter_mut().for_each(|v| *v += 0.5);
    }
    assert_eq!(before, gen_loss_of(&m, 0, &[1, 2]));
}

fn level_logits_for(m: &EagerModel, code: &[u32], level: usize) -> Vec<f64> {
    let mut t = Tape::new(m.params());
    let enc = m.encode(&mut t, &[&[2, 4]]).unwrap();
    let mem = m.memory(&mut t, 1, &enc);
    let out = m.decode_teacher_forced(&mut t, 1, &mem, &[code]).unwrap();
    let l = m.level_logits(&mut t, 1, &out, level);
    t.value(l).data.clone()
}

#[test]
fn causal_integrity_for_every_summary_position() {
    for pos in [SummaryPosition::Tail, SummaryPosition::Head, SummaryPosition::Mean] {
        let mut c = tiny_config();
        c.summary_position = pos;
        c.streams[1].depth = 3;
        let mut m = EagerModel::new(c).unwrap();
        jitter(&mut m, 3, 0.3);
        for level in 0..3 {
            let base = level_logits_for(&m, &[1, 2, 3], level);
            for changed in level..3 {
                let mut code = vec![1, 2, 3];
                code[changed] = (code[changed] + 1) % 4;
                assert_eq!(base, level_logits_for(&m, &code, level), "{pos} level {level} digit {changed}");
            }
            if level > 0 {
                let mut code = vec![1, 2, 3];
                code[level - 1] = (code[level - 1] + 1) % 4;
                assert_ne!(base, level_logits_for(&m, &code, level));
            }
        }
    }
}

fn summary_of(m: &EagerModel, code: &[u32], hidden: bool) -> Vec<f64> {
    let mut t = Tape::new(m.params());
    let enc = m.encode(&mut t, &[&[2, 4]]).unwrap();
    let mem = m.memory(&mut t, 0, &enc);
    let out = m.decode_teacher_forced(&mut t, 0, &mem, &[code]).unwrap();
    let s = if hidden {
        m.summary_hidden(&mut t, 0, &out)
    } else {
        m.summary_embedding(&mut t, 0, &out)
    };
    t.value(s).data.clone()
}

#[test]
fn summary_position_semantics() {
    let mut c = tiny_config();
    let mut m = EagerModel::new(c.clone()).unwrap();
    jitter(&mut m, 4, 0.3);
    assert_ne!(summary_of(&m, &[1, 2], false), summary_of(&m, &[1, 0], false));

    c.summary_position = SummaryPosition::Head;
    let mut m = EagerModel::new(c.clone()).unwrap();
    jitter(&mut m, 4, 0.3);
    let base = summary_of(&m, &[1, 2], false);
    assert_eq!(base, summary_of(&m, &[0, 0], false));
    assert_eq!(base, summary_of(&m, &[2, 1], false));

    c.summary_position = SummaryPosition::Mean;
    c.streams[0].depth = 1;
    let mut m = EagerModel::new(c).unwrap();
    jitter(&mut m, 4, 0.3);
    let mut t = Tape::new(m.params());
    let enc = m.encode(&mut t, &[&[2, 4]]).unwrap();
    let mem = m.memory(&mut t, 0, &enc);
    let out = m.decode_teacher_forced(&mut t, 0, &mem, &[&[2]]).unwrap();
    let s = m.summary_hidden(&mut t, 0, &out);
    assert_eq!(t.value(s).row(0), t.value(out.hidden).row(1));
}

#[test]
fn contrastive_metric_identities() {
    let target = EmbeddingMatrix::new(2, 3, vec![0.5, -1.0, 2.0, 1.0, 0.25, -0.75], "t").unwrap();
    let ps = ParamStore::new();
    let mut t = Tape::new(&ps);
    let s = t.constant(Mat::from_vec(1, 3, target.row_f64(0)));
    let l = contrastive_loss(&mut t, s, &target, &[0], ContrastiveMetric::SmoothL1, 0.07).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
    let l = contrastive_loss(&mut t, s, &target, &[0], ContrastiveMetric::Cosine, 0.07).unwrap();
    assert!(t.value(l).item().abs() < 1e-15);

    let z = t.constant(Mat::zeros(1, 3));
    assert!(contrastive_loss(&mut t, z, &target, &[0], ContrastiveMetric::Cosine, 0.07).is_err());

    let mut rng = rng_for(5, "huber", &[]);
    let v: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
    let s = t.constant(Mat::from_vec(2, 3, v.clone()));
    let l = contrastive_loss(&mut t, s, &target, &[1, 0], ContrastiveMetric::SmoothL1, 0.07).unwrap();
    let rows = [target.row_f64(1), target.row_f64(0)].concat();
    let oracle = v
        .iter()
        .zip(&rows)
        .map(|(a, b)| {
            let d: f64 = a - b;
            if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            }
        })
        .sum::<f64>()
        / 6.0;
    assert!((t.value(l).item() - oracle).abs() < 1e-10);
}

#[test]
fn infonce_uses_in_batch_candidates() {
    let target = EmbeddingMatrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0], "t").unwrap();
    let ps = ParamStore::new();
    let mut t = Tape::new(&ps);
    let s = t.constant(Mat::from_vec(3, 2, vec![2.0, 0.0, 0.0, 3.0, 2.0, 0.0]));
    let l = contrastive_loss(&mut t, s, &target, &[0, 1, 0], ContrastiveMetric::InfoNce, 0.07).unwrap();
    // two unique candidates; every summary is aligned with its own target
    let want = (1.0 + (-1.0f64 / 0.07).exp()).ln();
    assert!((t.value(l).item() - want).abs() < 1e-12);
}

#[test]
fn info_nce_two_term_closed_form() {
    let ps = ParamStore::new();
    let mut t = Tape::new(&ps);
    let r = t.constant(Mat::from_vec(1, 2, vec![1.0, 0.0]));
    let c = t.constant(Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
    let l = info_nce_rows(&mut t, r, c, 2);
    let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((t.value(l).item() - want).abs() < 1e-15);
    assert!((want - 0.3133).abs() < 1e-4);
}

#[test]
fn transfer_shapes_guide_dependence_and_errors() {
    let c = tiny_config();
    let mut m = EagerModel::new(c).unwrap();
    jitter(&mut m, 6, 0.3);
    assert_eq!(m.transfer_pair(), Some((1, 0)));
    let code = [1u32, 2];
    let run = |guide: Mat| {
        let mut t = Tape::new(m.params());
        let g = t.constant(guide);
        let inp = [TransferInput { code: &code, guide_row: 0, mask: &[], replace: &[] }];
        let s = m.transfer_forward(&mut t, &inp, g).unwrap();
        t.value(s).clone()
    };
    let zero = run(Mat::zeros(1, 8));
    assert_eq!(zero.shape(), (3, 8));
    let mut rng = rng_for(6, "guide", &[]);
    let other = run(Mat::from_vec(1, 8, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()));
    assert_ne!(zero, other);

    let mut t = Tape::new(m.params());
    let g = t.constant(Mat::zeros(1, 8));
    let both = [TransferInput { code: &code, guide_row: 0, mask: &[0], replace: &[(1, 0)] }];
    assert!(m.transfer_forward(&mut t, &both, g).is_err());
    let same = [TransferInput { code: &code, guide_row: 0, mask: &[], replace: &[(1, 2)] }];
    assert!(m.transfer_forward(&mut t, &same, g).is_err());
}

#[test]
fn gradient_reaches_guide_summary() {
    let mut m = EagerModel::new(tiny_config()).unwrap();
    jitter(&mut m, 7, 0.3);
    let mut rng = rng_for(7, "guide", &[]);
    let guide = Mat::from_vec(1, 8, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
    let code = [2u32, 1];
    let f = |t: &mut Tape, v: &[Var]| {
        let inp = [
            TransferInput { code: &code, guide_row: 0, mask: &[1], replace: &[] },
            TransferInput { code: &code, guide_row: 0, mask: &[], replace: &[] },
            TransferInput { code: &code, guide_row: 0, mask: &[], replace: &[(0, 0)] },
        ];
        let s = m.transfer_forward(t, &inp, v[0]).unwrap();
        let a = m.reconstruction_loss(t, s, &inp, &[0], &[vec![0, 2]]).unwrap();
        let b = m.recognition_loss(t, s, &[1], &[2]).unwrap();
        t.add(a, b)
    };
    let mut sink = Gradients::zeros_like(m.params());
    let mut t = Tape::new(m.params());
    let g = t.input(guide.clone());
    let loss = f(&mut t, &[g]);
    let grads = t.backward(loss, 1.0, &mut sink);
    assert!(grads.get(g).unwrap().data.iter().any(|v| v.abs() > 1e-8));
    let r = finite_difference_check(m.params(), &[guide], f, &CheckOptions {
        max_coords_per_tensor: Some(6),
        ..CheckOptions::default()
    });
    assert!(r.passed(1e-4), "{r:?}");
}

#[test]
fn recognition_at_zero_head_is_two_ln_two() {
    let mut m = EagerModel::new(tiny_config()).unwrap();
    let (w, b) = m.recognition_output().unwrap();
    m.params_mut().value_mut(w).data.fill(0.0);
    m.params_mut().value_mut(b).data.fill(0.0);
    let mut t = Tape::new(m.params());
    let g = t.constant(Mat::zeros(1, 8));
    let code = [1u32, 1];
    let inp = [
        TransferInput { code: &code, guide_row: 0, mask: &[], replace: &[] },
        TransferInput { code: &code, guide_row: 0, mask: &[], replace: &[(1, 0)] },
    ];
    let s = m.transfer_forward(&mut t, &inp, g).unwrap();
    let l = m.recognition_loss(&mut t, s, &[0], &[1]).unwrap();
    assert!((t.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-15);
    assert!((t.value(l).item() - 1.3863).abs() < 1e-4);
}

#[test]
fn reconstruction_rejects_too_many_negatives() {
    let m = EagerModel::new(tiny_config()).unwrap();
    let mut t = Tape::new(m.params());
    let g = t.constant(Mat::zeros(1, 8));
    let code = [1u32, 1];
    let inp = [TransferInput { code: &code, guide_row: 0, mask: &[0], replace: &[] }];
    let s = m.transfer_forward(&mut t, &inp, g).unwrap();
    assert!(m.reconstruction_loss(&mut t, s, &inp, &[0], &[vec![0, 2, 2]]).is_err());
    assert!(m.reconstruction_loss(&mut t, s, &inp, &[0], &[vec![0, 1]]).is_err());
    assert!(m.reconstruction_loss(&mut t, s, &inp, &[0], &[vec![0, 2]]).is_ok());
}

#[test]
fn reconstruction_loss_decreases_on_fixed_example() {
    let mut m = EagerModel::new(tiny_config()).unwrap();
    let mut adam = AdamState::new(m.params(), 0.01, 0);
    let guide = Mat::from_vec(1, 8, vec![0.3, -0.2, 0.5, 0.1, 0.0, -0.4, 0.2, 0.9]);
    let code = [2u32, 1];
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut grads = Gradients::zeros_like(m.params());
        {
            let mut t = Tape::new(m.params());
            let g = t.constant(guide.clone());
            let inp = [TransferInput { code: &code, guide_row: 0, mask: &[1], replace: &[] }];
            let s = m.transfer_forward(&mut t, &inp, g).unwrap();
            let l = m.reconstruction_loss(&mut t, s, &inp, &[0], &[vec![0, 2]]).unwrap();
            losses.push(t.value(l).item());
            t.backward(l, 1.0, &mut grads);
        }
        adam.step(m.params_mut(), &grads).unwrap();
    }
    assert!(losses[199] < 0.5 * losses[0], "{} -> {}", losses[0], losses[199]);
}

#[test]
fn loss_breakdown_flags_and_additivity() {
    let c = tiny_config();
    let mut m = EagerModel::new(c.clone()).unwrap();
    jitter(&mut m, 8, 0.2);
    let tg = targets(&c, 8);
    let tr: Vec<&EmbeddingMatrix> = tg.iter().collect();
    let b = batch();

    let mut t = Tape::new(m.params());
    let (_, full) = m.total_loss(&mut t, &b, &tr, TaskFlags::FULL).unwrap();
    assert!(full.gen > 0.0 && full.con > 0.0 && full.recon > 0.0 && full.recog > 0.0);
    let sum = full.gen + full.con + full.recon + full.recog;
    assert!((full.total - sum).abs() < 1e-12);
    assert!((full.total - full.combined()).abs() < 1e-12);

    let mut t = Tape::new(m.params());
    let (_, tsg) = m.total_loss(&mut t, &b, &tr, TaskFlags::TSG_ONLY).unwrap();
    assert_eq!((tsg.con, tsg.recon, tsg.recog), (0.0, 0.0, 0.0));
    assert_eq!(tsg.total, tsg.gen);

    let mut c0 = c.clone();
    c0.lambda1 = 0.0;
    c0.lambda2 = 0.0;
    let mut m0 = EagerModel::new(c0).unwrap();
    *m0.params_mut() = m.params().clone();
    let mut t = Tape::new(m0.params());
    let (_, z) = m0.total_loss(&mut t, &b, &tr, TaskFlags::FULL).unwrap();
    assert_eq!(z.total, z.gen);
    assert_eq!(z.gen, full.gen);
}

#[test]
fn tsg_only_leaves_auxiliary_parameters_without_gradient() {
    let c = tiny_config();
    let mut m = EagerModel::new(c.clone()).unwrap();
    jitter(&mut m, 9, 0.2);
    let tg = targets(&c, 9);
    let tr: Vec<&EmbeddingMatrix> = tg.iter().collect();
    let mut grads = Gradients::zeros_like(m.params());
    let mut t = Tape::new(m.params());
    let (loss, _) = m.total_loss(&mut t, &batch(), &tr, TaskFlags::TSG_ONLY).unwrap();
    t.backward(loss, 1.0, &mut grads);
    for id in m.params().ids() {
        let name = m.params().name(id);
        if name.starts_with("xfer.") || name.contains(".proj.") {
            assert!(grads.is_zero(id), "{name}");
        }
    }
}

#[test]
fn stream_isolation_under_single_stream_loss() {
    let mut m = EagerModel::new(tiny_config()).unwrap();
    jitter(&mut m, 10, 0.2);
    let mut grads = Gradients::zeros_like(m.params());
    let mut t = Tape::new(m.params());
    let enc = m.encode(&mut t, &[&[1, 2, 3]]).unwrap();
    let mem = m.memory(&mut t, 1, &enc);
    let codes: Vec<&[u32]> = vec![&[3, 1]];
    let out = m.decode_teacher_forced(&mut t, 1, &mem, &codes).unwrap();
    let l = m.generation_loss(&mut t, 1, &out, &codes).unwrap();
    t.backward(l, 1.0, &mut grads);
    let mut touched = 0;
    for id in m.params().ids() {
        let name = m.params().name(id);
        if name.starts_with("dec.behavior.") {
            assert!(grads.is_zero(id), "{name}");
        }
        if name.starts_with("dec.semantic.") && !grads.is_zero(id) {
            touched += 1;
        }
    }
    assert!(touched > 0);
}

#[test]
fn tail_summary_has_gradient_path_to_first_digit() {
    let c = tiny_config();
    let mut m = EagerModel::new(c.clone()).unwrap();
    jitter(&mut m, 11, 0.2);
    let tg = targets(&c, 11);
    let mut grads = Gradients::zeros_like(m.params());
    let mut t = Tape::new(m.params());
    let enc = m.encode(&mut t, &[&[0, 5]]).unwrap();
    let mem = m.memory(&mut t, 0, &enc);
    let code: &[u32] = &[2, 1];
    let out = m.decode_teacher_forced(&mut t, 0, &mem, &[code]).unwrap();
    let e = m.summary_embedding(&mut t, 0, &out);
    let l = contrastive_loss(&mut t, e, &tg[0], &[3], ContrastiveMetric::SmoothL1, 0.07).unwrap();
    t.backward(l, 1.0, &mut grads);
    let tok = m.params().get("dec.behavior.tok").unwrap();
    let y1 = m.stream(0).token(0, 2);
    assert!(grads.get(tok).row(y1).iter().any(|v| v.abs() > 0.0));
}

#[test]
fn full_loss_passes_finite_differences() {
    for pos in [SummaryPosition::Tail, SummaryPosition::Mean] {
        for metric in [ContrastiveMetric::SmoothL1, ContrastiveMetric::Cosine, ContrastiveMetric::InfoNce] {
            let mut c = tiny_config();
            c.summary_position = pos;
            c.metric = metric;
            c.dec_layers = 1;
            let mut m = EagerModel::new(c.clone()).unwrap();
            jitter(&mut m, 12, 0.2);
            let tg = targets(&c, 12);
            let tr: Vec<&EmbeddingMatrix> = tg.iter().collect();
            let b = batch();
            let r = finite_difference_check(
                m.params(),
                &[],
                |t, _| m.total_loss(t, &b, &tr, TaskFlags::FULL).unwrap().0,
                &CheckOptions {
                    // the 1/temperature scaling inflates the third derivative,
                    // so a smaller step keeps truncation error below tolerance
                    rel_step: 1e-5,
                    max_coords_per_tensor: Some(12),
                    ..CheckOptions::default()
                },
            );
            assert!(r.passed(1e-4), "{pos} {metric}: {r:?}");
        }
    }
}

#[test]
fn checkpoint_roundtrip_and_mismatch() {
    let c = tiny_config();
    let mut m = EagerModel::new(c.clone()).unwrap();
    jitter(&mut m, 13, 0.1);
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let back = EagerModel::load(dir.path()).unwrap();
    assert_eq!(back.params(), m.params());
    let mut other = c;
    other.hidden = 12;
    let err = EagerModel::load_with_config(dir.path(), other).unwrap_err().to_string();
    assert!(err.contains("tensor `enc.item_emb`"), "{err}");
}

#[test]
fn step_log_probs_match_teacher_forcing() {
    for pos in [SummaryPosition::Tail, SummaryPosition::Head] {
        let mut c = tiny_config();
        c.summary_position = pos;
        let mut m = EagerModel::new(c).unwrap();
        jitter(&mut m, 14, 0.3);
        let mut t = Tape::new(m.params());
        let enc = m.encode(&mut t, &[&[1, 4]]).unwrap();
        let mem = m.memory(&mut t, 1, &enc);
        let lp = m.step_log_probs(&mut t, 1, &mem, &[vec![3], vec![0]]).unwrap();
        let code: &[u32] = &[3, 2];
        let out = m.decode_teacher_forced(&mut t, 1, &mem, &[code]).unwrap();
        let logits = m.level_logits(&mut t, 1, &out, 1);
        let want = crate::nn::log_softmax(t.value(logits).row(0));
        for (a, b) in lp[0].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_ne!(lp[0], lp[1]);
    }
}
