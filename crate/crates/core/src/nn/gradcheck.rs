//! Central finite-difference verification of tape gradients.

use super::mat::Mat;
use super::params::{Gradients, ParamStore};
use super::tape::{Tape, Var};

/// Gradients smaller than this are compared in absolute terms.
pub const DENOM_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Step is `rel_step * max(1, |x|)`.
    pub rel_step: f64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_coords_per_tensor: Option<usize>,
    /// Added to every analytic gradient entry; only for negative controls.
    pub analytic_bias: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            rel_step: 1e-4,
            max_coords_per_tensor: None,
            analytic_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if err > self.max_rel_error || err.is_nan() {
            self.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            self.worst = format!("{} analytic={analytic:.6e} numeric={numeric:.6e}", what());
        }
    }
}

fn coords(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

fn eval<F>(params: &ParamStore, inputs: &[Mat], f: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut t = Tape::new(params);
    let vars: Vec<Var> = inputs.iter().map(|m| t.input(m.clone())).collect();
    let out = f(&mut t, &vars);
    t.value(out).item()
}

/// Compare the tape's gradients of the scalar `f` with respect to every
/// input and every parameter against central differences.
pub fn finite_difference_check<F>(params: &ParamStore, inputs: &[Mat], f: F, opts: &CheckOptions) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut sink = Gradients::zeros_like(params);
    let input_grads = {
        let mut t = Tape::new(params);
        let vars: Vec<Var> = inputs.iter().map(|m| t.input(m.clone())).collect();
        let out = f(&mut t, &vars);
        let g = t.backward(out, 1.0, &mut sink);
        vars.iter()
            .zip(inputs)
            .map(|(&v, m)| g.get(v).cloned().unwrap_or_else(|| Mat::zeros(m.rows, m.cols)))
            .collect::<Vec<_>>()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };

    let mut work = inputs.to_vec();
    for (i, grad) in input_grads.iter().enumerate() {
        for c in coords(grad.len(), opts.max_coords_per_tensor) {
            let x = work[i].data[c];
            let h = opts.rel_step * x.abs().max(1.0);
            work[i].data[c] = x + h;
            let fp = eval(params, &work, &f);
            work[i].data[c] = x - h;
            let fm = eval(params, &work, &f);
            work[i].data[c] = x;
            let numeric = (fp - fm) / (2.0 * h);
            report.record(|| format!("input {i}[{c}]"), grad.data[c] + opts.analytic_bias, numeric);
        }
    }

    let mut ps = params.clone();
    for id in params.ids() {
        let grad = sink.get(id).clone();
        for c in coords(grad.len(), opts.max_coords_per_tensor) {
            let x = ps.value(id).data[c];
            let h = opts.rel_step * x.abs().max(1.0);
            ps.value_mut(id).data[c] = x + h;
            let fp = eval(&ps, inputs, &f);
            ps.value_mut(id).data[c] = x - h;
            let fm = eval(&ps, inputs, &f);
            ps.value_mut(id).data[c] = x;
            let numeric = (fp - fm) / (2.0 * h);
            report.record(|| format!("{}[{c}]", params.name(id)), grad.data[c] + opts.analytic_bias, numeric);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{AttnMask, Linear, TransformerLayer};
    use crate::rng::{rng_for, Rng};
    use rand::Rng as _;

    const TOL: f64 = 1e-4;

    fn rand_mat(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn check<F: Fn(&mut Tape, &[Var]) -> Var>(params: &ParamStore, inputs: &[Mat], f: F) -> GradCheckReport {
        let r = finite_difference_check(params, inputs, f, &CheckOptions::default());
        assert!(r.passed(TOL), "{r:?}");
        r
    }

    /// Weighted sum with fixed random weights, so every output entry matters.
    fn probe(t: &mut Tape, x: Var, seed: u64) -> Var {
        let (r, c) = t.value(x).shape();
        let mut rng = rng_for(seed, "probe", &[r as u64, c as u64]);
        let w = t.constant(rand_mat(r, c, &mut rng));
        let p = t.mul(x, w);
        t.sum_all(p)
    }

    #[test]
    fn elementwise_and_structural_ops() {
        let mut rng = rng_for(10, "gc", &[]);
        let ps = ParamStore::new();
        let a = rand_mat(3, 4, &mut rng);
        let b = rand_mat(3, 4, &mut rng);
        let row = rand_mat(1, 4, &mut rng);
        check(&ps, &[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]);
            let m = t.mul(s, v[0]);
            let g = t.gelu(m);
            let af = t.affine(g, 1.7, 0.3);
            probe(t, af, 1)
        });
        check(&ps, &[a.clone(), row.clone()], |t, v| {
            let s = t.add_row(v[0], v[1]);
            let sl = t.slice_cols(s, 1, 2);
            let c = t.concat_cols(&[sl, v[0]]);
            let r = t.concat_rows(&[c, c]);
            let m = t.mean_rows(r);
            probe(t, m, 2)
        });
        check(&ps, &[a.clone(), b.clone()], |t, v| {
            let m = t.matmul_t(v[0], false, v[1], true);
            let m2 = t.matmul_t(v[0], true, v[1], false);
            let m3 = t.matmul_t(m, true, v[0], false);
            let p1 = probe(t, m2, 3);
            let p2 = probe(t, m3, 4);
            t.add(p1, p2)
        });
        let table = rand_mat(5, 3, &mut rng);
        check(&ps, &[table], |t, v| {
            let g = t.gather(v[0], &[4, 1, 4, 0]);
            let n = t.l2_normalize_rows(g);
            probe(t, n, 5)
        });
    }

    #[test]
    fn softmax_layer_norm_and_losses() {
        let mut rng = rng_for(11, "gc", &[]);
        let ps = ParamStore::new();
        let x = rand_mat(3, 5, &mut rng);
        let gain = rand_mat(1, 5, &mut rng);
        let bias = rand_mat(1, 5, &mut rng);
        check(&ps, &[x.clone()], |t, v| {
            let s = t.softmax(v[0]);
            probe(t, s, 6)
        });
        let mask = AttnMask::block(&[3], &[5], true).unwrap();
        check(&ps, &[x.clone()], |t, v| {
            let s = t.masked_softmax(v[0], &mask.allowed);
            probe(t, s, 7)
        });
        check(&ps, &[x.clone(), gain, bias], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            probe(t, y, 8)
        });
        check(&ps, &[x.clone()], |t, v| t.cross_entropy(v[0], &[4, 0, 2]));
        let target: Vec<f64> = x.data.iter().map(|p| p + if *p > 0.0 { -0.4 } else { 2.5 }).collect();
        check(&ps, &[x.clone()], |t, v| t.smooth_l1(v[0], &target));
        check(&ps, &[Mat::from_vec(3, 1, vec![0.37, -1.2, 2.0])], |t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 0.3]));
        check(&ps, &[x.clone()], |t, v| {
            let r = t.reshape(v[0], 5, 3);
            probe(t, r, 12)
        });
    }

    #[test]
    fn linear_layer_is_exact() {
        let mut rng = rng_for(12, "gc", &[]);
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "lin", 4, 3, &mut rng);
        let x = rand_mat(2, 4, &mut rng);
        let r = check(&ps, &[x], |t, v| {
            let y = lin.forward(t, v[0]);
            probe(t, y, 9)
        });
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn decoder_block() {
        let mut rng = rng_for(13, "gc", &[]);
        let mut ps = ParamStore::new();
        let layer = TransformerLayer::new(&mut ps, "blk", 8, 2, 16, true, &mut rng).unwrap();
        for id in ps.ids().collect::<Vec<_>>() {
            for v in &mut ps.value_mut(id).data {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let x = rand_mat(5, 8, &mut rng);
        let mem = rand_mat(4, 8, &mut rng);
        let self_mask = AttnMask::block(&[3, 2], &[3, 2], true).unwrap();
        let cross_mask = AttnMask::block(&[3, 2], &[1, 3], false).unwrap();
        check(&ps, &[x, mem], |t, v| {
            let kv = layer.project_memory(t, v[1]).unwrap();
            let y = layer.forward(t, v[0], Some(&self_mask), Some((kv, Some(&cross_mask)))).unwrap();
            probe(t, y, 10)
        });
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut rng = rng_for(14, "gc", &[]);
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "lin", 3, 2, &mut rng);
        let opts = CheckOptions {
            analytic_bias: 0.05,
            ..CheckOptions::default()
        };
        let r = finite_difference_check(&ps, &[rand_mat(2, 3, &mut rng)], |t, v| {
            let y = lin.forward(t, v[0]);
            probe(t, y, 11)
        }, &opts);
        assert!(!r.passed(TOL), "{r:?}");
    }
}
