//! Built-in correctness suites: tape gradients against central finite
//! differences, and full-width beam search against exhaustive enumeration.
//!
//! Both suites are deterministic for a given seed and run in seconds.

use rand::Rng as _;

use crate::codes::{CodeTree, Digit};
use crate::corpus::TrainingExample;
use crate::embed::EmbeddingMatrix;
use crate::infer::{beam_search, InferenceSession};
use crate::model::{ContrastiveMetric, EagerModel, ModelConfig, StreamSpec, SummaryPosition, TaskFlags};
use crate::nn::{finite_difference_check, log_softmax, AttnMask, CheckOptions, Linear, Mat, ParamStore, Tape, TransformerLayer, Var};
use crate::rng::{rng_for, Rng};
use crate::train::build_instances;

/// Maximum relative error accepted by the gradient suite.
pub const GRAD_TOL: f64 = 1e-4;
/// Maximum absolute log-probability gap accepted by the beam suite.
pub const BEAM_TOL: f64 = 1e-9;
/// Largest code space `branch_k^depth` used by the beam suite.
pub const MAX_CODE_SPACE: usize = 4096;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn rand_mat(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Weighted sum with fixed random weights so every output entry matters.
fn probe(t: &mut Tape, x: Var, tag: u64) -> Var {
    let (r, c) = t.value(x).shape();
    let mut rng = rng_for(tag, "probe", &[r as u64, c as u64]);
    let w = t.constant(rand_mat(r, c, &mut rng));
    let p = t.mul(x, w);
    t.sum_all(p)
}

fn grad_case<F>(name: &str, params: &ParamStore, inputs: &[Mat], opts: &CheckOptions, f: F) -> CheckResult
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let r = finite_difference_check(params, inputs, f, opts);
    CheckResult {
        name: format!("gradient {name}"),
        passed: r.passed(GRAD_TOL),
        detail: format!("max rel error {:.2e} over {} coords (worst {})", r.max_rel_error, r.checked, r.worst),
    }
}

/// Perturb every parameter so norms and biases leave their symmetric init.
pub fn jitter(model: &mut EagerModel, scale: f64, rng: &mut Rng) {
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for v in &mut model.params_mut().value_mut(id).data {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// A tree over `n` distinct codes drawn uniformly from the full code space.
pub fn random_code_tree(n: usize, k: usize, depth: usize, rng: &mut Rng) -> crate::Result<CodeTree> {
    let total = k.pow(depth as u32);
    let picked = rand::seq::index::sample(rng, total, n);
    let mut codes = Vec::with_capacity(n * depth);
    for c in picked {
        let mut digits = vec![0 as Digit; depth];
        let mut x = c;
        for d in digits.iter_mut().rev() {
            *d = (x % k) as Digit;
            x /= k;
        }
        codes.extend(digits);
    }
    CodeTree::from_codes(k, depth, codes, "random".into(), 0)
}

fn op_cases(seed: u64) -> Vec<CheckResult> {
    let mut rng = rng_for(seed, "selfcheck-ops", &[]);
    let opts = CheckOptions::default();
    let empty = ParamStore::new();
    let a = rand_mat(3, 4, &mut rng);
    let b = rand_mat(3, 4, &mut rng);
    let row = rand_mat(1, 4, &mut rng);
    let x = rand_mat(3, 5, &mut rng);
    let gain = rand_mat(1, 5, &mut rng);
    let bias = rand_mat(1, 5, &mut rng);
    let table = rand_mat(5, 3, &mut rng);
    let mask = AttnMask::block(&[3], &[5], true).expect("valid mask");
    let target: Vec<f64> = x.data.iter().map(|p| p + if *p > 0.0 { -0.4 } else { 2.5 }).collect();

    let mut out = vec![
        grad_case("add/mul/gelu/affine", &empty, &[a.clone(), b.clone()], &opts, |t, v| {
            let s = t.add(v[0], v[1]);
            let m = t.mul(s, v[0]);
            let g = t.gelu(m);
            let af = t.affine(g, 1.7, 0.3);
            probe(t, af, 1)
        }),
        grad_case("add_row/slice/concat/mean", &empty, &[a.clone(), row], &opts, |t, v| {
            let s = t.add_row(v[0], v[1]);
            let sl = t.slice_cols(s, 1, 2);
            let c = t.concat_cols(&[sl, v[0]]);
            let r = t.concat_rows(&[c, c]);
            let m = t.mean_rows(r);
            probe(t, m, 2)
        }),
        grad_case("matmul", &empty, &[a.clone(), b], &opts, |t, v| {
            let m = t.matmul_t(v[0], false, v[1], true);
            let m2 = t.matmul_t(v[0], true, v[1], false);
            let m3 = t.matmul_t(m, true, v[0], false);
            let p1 = probe(t, m2, 3);
            let p2 = probe(t, m3, 4);
            t.add(p1, p2)
        }),
        grad_case("gather/l2_normalize", &empty, &[table], &opts, |t, v| {
            let g = t.gather(v[0], &[4, 1, 4, 0]);
            let n = t.l2_normalize_rows(g);
            probe(t, n, 5)
        }),
        grad_case("softmax", &empty, &[x.clone()], &opts, |t, v| {
            let s = t.softmax(v[0]);
            probe(t, s, 6)
        }),
        grad_case("masked_softmax", &empty, &[x.clone()], &opts, |t, v| {
            let s = t.masked_softmax(v[0], &mask.allowed);
            probe(t, s, 7)
        }),
        grad_case("layer_norm", &empty, &[x.clone(), gain, bias], &opts, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            probe(t, y, 8)
        }),
        grad_case("cross_entropy", &empty, &[x.clone()], &opts, |t, v| t.cross_entropy(v[0], &[4, 0, 2])),
        grad_case("smooth_l1", &empty, &[x.clone()], &opts, |t, v| t.smooth_l1(v[0], &target)),
        grad_case("bce_with_logits", &empty, &[Mat::from_vec(3, 1, vec![0.37, -1.2, 2.0])], &opts, |t, v| {
            t.bce_with_logits(v[0], &[1.0, 0.0, 0.3])
        }),
        grad_case("reshape/add_scalars", &empty, &[x], &opts, |t, v| {
            let r = t.reshape(v[0], 5, 3);
            let p = probe(t, r, 12);
            let q = probe(t, v[0], 13);
            t.add_scalars(&[p, q])
        }),
    ];

    let mut ps = ParamStore::new();
    let lin = Linear::new(&mut ps, "lin", 4, 3, &mut rng);
    let xin = rand_mat(2, 4, &mut rng);
    out.push(grad_case("linear", &ps, &[xin], &opts, |t, v| {
        let y = lin.forward(t, v[0]);
        probe(t, y, 9)
    }));

    let mut ps = ParamStore::new();
    let layer = TransformerLayer::new(&mut ps, "blk", 8, 2, 16, true, &mut rng).expect("valid layer");
    for id in ps.ids().collect::<Vec<_>>() {
        for v in &mut ps.value_mut(id).data {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let xs = rand_mat(5, 8, &mut rng);
    let mem = rand_mat(4, 8, &mut rng);
    let self_mask = AttnMask::block(&[3, 2], &[3, 2], true).expect("valid mask");
    let cross_mask = AttnMask::block(&[3, 2], &[1, 3], false).expect("valid mask");
    out.push(grad_case("decoder block", &ps, &[xs, mem], &opts, |t, v| {
        let kv = layer.project_memory(t, v[1]).expect("cross-attention layer");
        let y = layer
            .forward(t, v[0], Some(&self_mask), Some((kv, Some(&cross_mask))))
            .expect("shapes agree");
        probe(t, y, 10)
    }));
    out
}

fn loss_case(pos: SummaryPosition, metric: ContrastiveMetric, seed: u64) -> crate::Result<CheckResult> {
    let mut rng = rng_for(seed, "selfcheck-loss", &[pos as u64, metric as u64]);
    let n = 9;
    let spec = |name: &str, k: usize, depth: usize, dim: usize| StreamSpec {
        name: name.into(),
        branch_k: k,
        depth,
        distill_dim: dim,
    };
    let mut c = ModelConfig::new(n, vec![spec("behavior", 3, 2, 4), spec("semantic", 4, 2, 5)]);
    c.hidden = 8;
    c.heads = 2;
    c.dec_layers = 1;
    c.ffn_mult = 2;
    c.dropout = 0.0;
    c.num_negatives = 2;
    c.summary_position = pos;
    c.metric = metric;
    c.seed = seed;
    let mut model = EagerModel::new(c.clone())?;
    jitter(&mut model, 0.2, &mut rng);
    let trees = [
        random_code_tree(n, 3, 2, &mut rng)?,
        random_code_tree(n, 4, 2, &mut rng)?,
    ];
    let targets: Vec<EmbeddingMatrix> = c
        .streams
        .iter()
        .map(|s| {
            let v = (0..n * s.distill_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            EmbeddingMatrix::new(n, s.distill_dim, v, "random")
        })
        .collect::<crate::Result<_>>()?;
    let examples: Vec<TrainingExample> = (0..3)
        .map(|u| TrainingExample {
            user: u,
            history: (0..rng.random_range(1..5)).map(|_| rng.random_range(0..n)).collect(),
            target: rng.random_range(0..n),
        })
        .collect();
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    let tree_refs: Vec<&CodeTree> = trees.iter().collect();
    let batch = build_instances(&model, &tree_refs, &refs, TaskFlags::FULL, &mut rng);
    let target_refs: Vec<&EmbeddingMatrix> = targets.iter().collect();
    model.total_loss(&mut Tape::new(model.params()), &batch, &target_refs, TaskFlags::FULL)?;
    let opts = CheckOptions {
        // the 1/temperature factor in InfoNCE inflates third derivatives
        rel_step: 1e-5,
        max_coords_per_tensor: Some(12),
        ..CheckOptions::default()
    };
    Ok(grad_case(&format!("full loss ({pos}, {metric})"), model.params(), &[], &opts, |t, _| {
        model
            .total_loss(t, &batch, &target_refs, TaskFlags::FULL)
            .expect("checked above")
            .0
    }))
}

/// Every differentiable op plus the full two-stream loss for each summary
/// position and contrastive metric.
pub fn gradient_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = op_cases(seed);
    for pos in [SummaryPosition::Tail, SummaryPosition::Head, SummaryPosition::Mean] {
        for metric in [ContrastiveMetric::SmoothL1, ContrastiveMetric::Cosine, ContrastiveMetric::InfoNce] {
            out.push(loss_case(pos, metric, seed).unwrap_or_else(|e| CheckResult {
                name: format!("gradient full loss ({pos}, {metric})"),
                passed: false,
                detail: e.to_string(),
            }));
        }
    }
    out
}

/// Exhaustive teacher-forced scores of every item's code, best first.
fn enumerate(model: &EagerModel, stream: usize, tree: &CodeTree, history: &[usize]) -> crate::Result<Vec<(Vec<Digit>, f64)>> {
    let mut t = Tape::new(model.params());
    let enc = model.encode(&mut t, &[history])?;
    let mem = model.memory(&mut t, stream, &enc);
    let mut all = Vec::with_capacity(tree.num_items());
    for i in 0..tree.num_items() {
        let code = tree.digits(i);
        let out = model.decode_teacher_forced(&mut t, stream, &mem, &[code])?;
        let mut lp = 0.0;
        for (j, &d) in code.iter().enumerate() {
            let z = model.level_logits(&mut t, stream, &out, j);
            lp += log_softmax(t.value(z).row(0))[d as usize];
        }
        all.push((code.to_vec(), lp));
    }
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(all)
}

fn beam_instance(index: usize, seed: u64) -> crate::Result<(bool, String)> {
    let mut rng = rng_for(seed, "selfcheck-beam", &[index as u64]);
    let (k, depth) = loop {
        let k = rng.random_range(2..=16usize);
        let depth = rng.random_range(1..=3usize);
        if k.pow(depth as u32) <= MAX_CODE_SPACE && k.pow(depth as u32) >= 2 {
            break (k, depth);
        }
    };
    let space = k.pow(depth as u32);
    let n = rng.random_range(2..=space.min(300));
    let spec = StreamSpec {
        name: "behavior".into(),
        branch_k: k,
        depth,
        distill_dim: 4,
    };
    let mut c = ModelConfig::new(n, vec![spec]);
    c.hidden = 8;
    c.heads = 2;
    c.dec_layers = 1;
    c.num_negatives = 1;
    c.seed = rng.random();
    let mut model = EagerModel::new(c)?;
    jitter(&mut model, 0.5, &mut rng);
    let tree = random_code_tree(n, k, depth, &mut rng)?;
    let history: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..n)).collect();

    let want = enumerate(&model, 0, &tree, &history)?;
    let mut session = InferenceSession::new(&model, &history)?;
    let got = beam_search(&mut session.stream(0), &tree, space, n)?;
    let mut gap = 0.0f64;
    let mut same = got.len() == want.len();
    for ((code, lp), (wc, wlp)) in got.iter().zip(&want) {
        same &= code.digits() == &wc[..];
        gap = gap.max((lp - wlp).abs());
    }
    let ok = same && gap <= BEAM_TOL;
    Ok((ok, format!("k={k} l={depth} n={n}: ranking {}, max gap {gap:.1e}", if same { "identical" } else { "differs" })))
}

/// `instances` random (model, tree) pairs with `branch_k^depth <= 4096`.
pub fn beam_oracle_suite(instances: usize, seed: u64) -> Vec<CheckResult> {
    (0..instances)
        .map(|i| {
            let (passed, detail) = beam_instance(i, seed).unwrap_or_else(|e| (false, e.to_string()));
            CheckResult {
                name: format!("beam oracle #{i}"),
                passed,
                detail,
            }
        })
        .collect()
}

pub fn run_all() -> Vec<CheckResult> {
    let mut out = gradient_suite(0);
    out.extend(beam_oracle_suite(20, 0));
    out
}
