use super::{ContrastiveMetric, EagerModel, TransferInput};
use crate::codes::Digit;
use crate::embed::EmbeddingMatrix;
use crate::error::{invalid, EagerError, Result};
use crate::nn::{Mat, Tape, Var};

/// Auxiliary tasks switched on for a loss evaluation. Generation is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskFlags {
    pub enable_gct: bool,
    pub enable_stt: bool,
}

impl TaskFlags {
    pub const FULL: TaskFlags = TaskFlags {
        enable_gct: true,
        enable_stt: true,
    };
    pub const TSG_ONLY: TaskFlags = TaskFlags {
        enable_gct: false,
        enable_stt: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub gen: f64,
    pub con: f64,
    pub recon: f64,
    pub recog: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    /// `gen + λ1·con + λ2·(recon + recog)` from the stored components.
    pub fn combined(&self) -> f64 {
        self.gen + self.lambda1 * self.con + self.lambda2 * (self.recon + self.recog)
    }
}

/// Per-example corruption for the transfer tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferSample {
    /// Masked code positions for reconstruction.
    pub mask: Vec<usize>,
    /// Same-level negative digits, one list per masked position.
    pub negatives: Vec<Vec<Digit>>,
    /// `(position, new digit)` replacements for recognition.
    pub replace: Vec<(usize, Digit)>,
}

/// One training example with its target code in every stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub history: Vec<usize>,
    pub target: usize,
    pub codes: Vec<Vec<Digit>>,
    pub transfer: Option<TransferSample>,
}

/// Row-wise InfoNCE: row `m` of `r` is scored by dot product against rows
/// `m·per_row .. (m+1)·per_row` of `cands`, the first of which is the
/// positive. Returns the mean negative log-softmax of the positive.
pub fn info_nce_rows(t: &mut Tape, r: Var, cands: Var, per_row: usize) -> Var {
    let (m, d) = t.value(r).shape();
    assert_eq!(t.value(cands).rows, m * per_row, "candidate count mismatch");
    let idx: Vec<usize> = (0..m * per_row).map(|i| i / per_row).collect();
    let rep = t.gather(r, &idx);
    let prod = t.mul(rep, cands);
    let ones = t.constant(Mat::from_vec(d, 1, vec![1.0; d]));
    let dots = t.matmul(prod, ones);
    let logits = t.reshape(dots, m, per_row);
    t.cross_entropy(logits, &vec![0; m])
}

fn row_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Distillation of projected summaries toward frozen embedding rows
/// `target[items[b]]`; batch mean. The targets are constants.
pub fn contrastive_loss(
    t: &mut Tape,
    summary: Var,
    target: &EmbeddingMatrix,
    items: &[usize],
    metric: ContrastiveMetric,
    temperature: f64,
) -> Result<Var> {
    let (b, d) = t.value(summary).shape();
    if b != items.len() {
        return Err(invalid!("{b} summaries for {} targets", items.len()));
    }
    if d != target.dim() {
        return Err(EagerError::Shape(format!("summary dim {d} vs target dim {}", target.dim())));
    }
    if let Some(&bad) = items.iter().find(|&&i| i >= target.len()) {
        return Err(invalid!("target item {bad} out of range {}", target.len()));
    }
    let rows: Vec<Vec<f64>> = items.iter().map(|&i| target.row_f64(i)).collect();
    if metric != ContrastiveMetric::SmoothL1 {
        let s = t.value(summary);
        for r in 0..b {
            if row_norm(s.row(r)) == 0.0 || row_norm(&rows[r]) == 0.0 {
                return Err(invalid!("zero-norm vector under {metric} metric (row {r})"));
            }
        }
    }
    Ok(match metric {
        ContrastiveMetric::SmoothL1 => {
            let flat: Vec<f64> = rows.concat();
            t.smooth_l1(summary, &flat)
        }
        ContrastiveMetric::Cosine => {
            let unit: Vec<f64> = rows
                .iter()
                .flat_map(|r| {
                    let n = row_norm(r);
                    r.iter().map(move |x| x / n)
                })
                .collect();
            let n = t.l2_normalize_rows(summary);
            let tgt = t.constant(Mat::from_vec(b, d, unit));
            let prod = t.mul(n, tgt);
            let s = t.sum_all(prod);
            t.affine(s, -1.0 / b as f64, 1.0)
        }
        ContrastiveMetric::InfoNce => {
            let mut uniq: Vec<usize> = Vec::new();
            let mut labels = Vec::with_capacity(b);
            for &i in items {
                let pos = uniq.iter().position(|&u| u == i).unwrap_or_else(|| {
                    uniq.push(i);
                    uniq.len() - 1
                });
                labels.push(pos);
            }
            let cand: Vec<f64> = uniq
                .iter()
                .flat_map(|&i| {
                    let r = target.row_f64(i);
                    let n = row_norm(&r);
                    r.into_iter().map(move |x| x / n)
                })
                .collect();
            let n = t.l2_normalize_rows(summary);
            let c = t.constant(Mat::from_vec(uniq.len(), d, cand));
            let logits = t.matmul_t(n, false, c, true);
            let logits = t.affine(logits, 1.0 / temperature, 0.0);
            t.cross_entropy(logits, &labels)
        }
    })
}

pub(super) fn total_loss(
    m: &EagerModel,
    t: &mut Tape,
    batch: &[Instance],
    targets: &[&EmbeddingMatrix],
    flags: TaskFlags,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let ns = m.num_streams();
    if let Some(bad) = batch.iter().find(|b| b.codes.len() != ns) {
        return Err(invalid!("example has {} codes for {ns} streams", bad.codes.len()));
    }
    if flags.enable_gct && targets.len() != ns {
        return Err(invalid!("{} distillation targets for {ns} streams", targets.len()));
    }
    if flags.enable_stt && m.transfer_pair().is_none() {
        return Err(invalid!("the transfer task needs at least two streams"));
    }
    let cfg = m.config();
    let histories: Vec<&[usize]> = batch.iter().map(|b| b.history.as_slice()).collect();
    let items: Vec<usize> = batch.iter().map(|b| b.target).collect();
    let enc = m.encode(t, &histories)?;

    let mut gen_terms = Vec::with_capacity(ns);
    let mut con_terms = Vec::new();
    let mut outs = Vec::with_capacity(ns);
    for s in 0..ns {
        let codes: Vec<&[Digit]> = batch.iter().map(|b| b.codes[s].as_slice()).collect();
        let mem = m.memory(t, s, &enc);
        let out = m.decode_teacher_forced(t, s, &mem, &codes)?;
        gen_terms.push(m.generation_loss(t, s, &out, &codes)?);
        if flags.enable_gct {
            let e = m.summary_embedding(t, s, &out);
            con_terms.push(contrastive_loss(t, e, targets[s], &items, cfg.metric, cfg.infonce_temperature)?);
        }
        outs.push(out);
    }

    let gen = t.add_scalars(&gen_terms);
    let mut total = gen;
    let mut con_v = 0.0;
    if !con_terms.is_empty() {
        let con = t.add_scalars(&con_terms);
        con_v = t.value(con).item();
        let weighted = t.affine(con, cfg.lambda1, 0.0);
        total = t.add(total, weighted);
    }

    let (mut recon_v, mut recog_v) = (0.0, 0.0);
    if flags.enable_stt {
        let (guide, guided) = m.transfer_pair().expect("checked above");
        let guide_h = m.summary_hidden(t, guide, &outs[guide]);
        let mut samples = Vec::with_capacity(batch.len());
        for b in batch {
            samples.push(b.transfer.as_ref().ok_or_else(|| invalid!("transfer task enabled but example has no corruption sample"))?);
        }
        let mut inputs = Vec::with_capacity(3 * batch.len());
        for (i, (b, s)) in batch.iter().zip(&samples).enumerate() {
            let code = b.codes[guided].as_slice();
            inputs.push(TransferInput { code, guide_row: i, mask: &s.mask, replace: &[] });
            inputs.push(TransferInput { code, guide_row: i, mask: &[], replace: &[] });
            inputs.push(TransferInput { code, guide_row: i, mask: &[], replace: &s.replace });
        }
        let states = m.transfer_forward(t, &inputs, guide_h)?;
        let masked: Vec<usize> = (0..batch.len()).map(|i| 3 * i).collect();
        let clean: Vec<usize> = (0..batch.len()).map(|i| 3 * i + 1).collect();
        let corrupted: Vec<usize> = (0..batch.len()).map(|i| 3 * i + 2).collect();
        let negatives: Vec<Vec<Digit>> = samples.iter().flat_map(|s| s.negatives.iter().cloned()).collect();
        let recon = m.reconstruction_loss(t, states, &inputs, &masked, &negatives)?;
        let recog = m.recognition_loss(t, states, &clean, &corrupted)?;
        recon_v = t.value(recon).item();
        recog_v = t.value(recog).item();
        let aux = t.add(recon, recog);
        let weighted = t.affine(aux, cfg.lambda2, 0.0);
        total = t.add(total, weighted);
    }

    let total_v = t.value(total).item();
    if !total_v.is_finite() {
        return Err(EagerError::NonFinite(format!("loss is {total_v}")));
    }
    Ok((
        total,
        LossBreakdown {
            gen: t.value(gen).item(),
            con: con_v,
            recon: recon_v,
            recog: recog_v,
            total: total_v,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
        },
    ))
}
