//! The two-stream network: a shared history encoder, one causal decoder per
//! code stream with a summary token and projection head, and a bidirectional
//! transfer module that reads one stream's codes while attending to another
//! stream's summary state.
//!
//! All forwards take a batch. Sequences are stacked row-wise and kept apart
//! by block attention masks.

mod config;
mod losses;

use std::path::Path;

pub use config::{ContrastiveMetric, GuidanceDirection, ModelConfig, StreamSpec, SummaryPosition};
pub use losses::{contrastive_loss, info_nce_rows, Instance, LossBreakdown, TaskFlags, TransferSample};

use crate::codes::Digit;
use crate::error::{invalid, EagerError, Result};
use crate::nn::{AttnMask, KeyValue, LayerNorm, Linear, Mat, ParamId, ParamStore, Tape, TransformerLayer, Var};
use crate::rng::{rng_for, Rng};

const INIT_STD: f64 = crate::nn::layers::INIT_STD;

#[derive(Debug, Clone)]
struct Encoder {
    item_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<TransformerLayer>,
    ln_f: LayerNorm,
}

#[derive(Debug, Clone)]
struct StreamDecoder {
    tok: ParamId,
    pos: ParamId,
    layers: Vec<TransformerLayer>,
    ln_f: LayerNorm,
    heads: Vec<Linear>,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct Transfer {
    guide: usize,
    guided: usize,
    cls: ParamId,
    mask: ParamId,
    pos: ParamId,
    layers: Vec<TransformerLayer>,
    ln_f: LayerNorm,
    recon: Linear,
    recog_hidden: Linear,
    recog_out: Linear,
}

#[derive(Debug, Clone)]
pub struct EagerModel {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    decoders: Vec<StreamDecoder>,
    transfer: Option<Transfer>,
}

/// Encoder output for a batch of histories.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub h: Var,
    pub lens: Vec<usize>,
}

/// Per-layer cross-attention keys/values of one stream decoder over an
/// encoded batch. Computed once and reused across decoding steps.
#[derive(Debug, Clone)]
pub struct Memory {
    kv: Vec<KeyValue>,
    key_lens: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    pub hidden: Var,
    pub seq_len: usize,
    pub batch: usize,
}

/// One sequence for the transfer module. At most one corruption mode may be
/// non-empty.
#[derive(Debug, Clone, Copy)]
pub struct TransferInput<'a> {
    pub code: &'a [Digit],
    /// Row of the guide-summary matrix this sequence attends to.
    pub guide_row: usize,
    pub mask: &'a [usize],
    pub replace: &'a [(usize, Digit)],
}

fn layer_stack(
    ps: &mut ParamStore,
    name: &str,
    n: usize,
    cfg: &ModelConfig,
    cross: bool,
    rng: &mut Rng,
) -> Result<Vec<TransformerLayer>> {
    (0..n)
        .map(|i| TransformerLayer::new(ps, &format!("{name}.l{i}"), cfg.hidden, cfg.heads, cfg.hidden * cfg.ffn_mult, cross, rng))
        .collect()
}

impl EagerModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, "model-init", &[]);
        let mut ps = ParamStore::new();
        let d = config.hidden;

        let encoder = Encoder {
            item_emb: ps.add_normal("enc.item_emb", config.num_items, d, INIT_STD, &mut rng),
            pos_emb: ps.add_normal("enc.pos_emb", config.max_history, d, INIT_STD, &mut rng),
            layers: layer_stack(&mut ps, "enc", config.enc_layers, &config, false, &mut rng)?,
            ln_f: LayerNorm::new(&mut ps, "enc.ln_f", d),
        };

        let mut decoders = Vec::with_capacity(config.streams.len());
        for s in &config.streams {
            let name = format!("dec.{}", s.name);
            decoders.push(StreamDecoder {
                tok: ps.add_normal(format!("{name}.tok"), s.vocab(), d, INIT_STD, &mut rng),
                pos: ps.add_normal(format!("{name}.pos"), s.depth + 2, d, INIT_STD, &mut rng),
                layers: layer_stack(&mut ps, &name, config.dec_layers, &config, true, &mut rng)?,
                ln_f: LayerNorm::new(&mut ps, &format!("{name}.ln_f"), d),
                heads: (0..s.depth)
                    .map(|j| Linear::new(&mut ps, &format!("{name}.head{j}"), d, s.branch_k, &mut rng))
                    .collect(),
                proj: Linear::new(&mut ps, &format!("{name}.proj"), d, s.distill_dim, &mut rng),
            });
        }

        let transfer = match config.transfer_pair() {
            None => None,
            Some((guide, guided)) => {
                let l = config.streams[guided].depth;
                Some(Transfer {
                    guide,
                    guided,
                    cls: ps.add_normal("xfer.cls", 1, d, INIT_STD, &mut rng),
                    mask: ps.add_normal("xfer.mask", 1, d, INIT_STD, &mut rng),
                    pos: ps.add_normal("xfer.pos", l + 1, d, INIT_STD, &mut rng),
                    layers: layer_stack(&mut ps, "xfer", config.transfer_layers, &config, true, &mut rng)?,
                    ln_f: LayerNorm::new(&mut ps, "xfer.ln_f", d),
                    recon: Linear::new(&mut ps, "xfer.recon", d, d, &mut rng),
                    recog_hidden: Linear::new(&mut ps, "xfer.recog1", d, d, &mut rng),
                    recog_out: Linear::new(&mut ps, "xfer.recog2", d, 1, &mut rng),
                })
            }
        };

        Ok(Self {
            config,
            params: ps,
            encoder,
            decoders,
            transfer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_streams(&self) -> usize {
        self.decoders.len()
    }

    pub fn stream(&self, s: usize) -> &StreamSpec {
        &self.config.streams[s]
    }

    /// `(guide, guided)` when the model has a transfer module.
    pub fn transfer_pair(&self) -> Option<(usize, usize)> {
        self.transfer.as_ref().map(|x| (x.guide, x.guided))
    }

    /// Weight and bias of the recognition output layer (for tests and diagnostics).
    pub fn recognition_output(&self) -> Option<(ParamId, ParamId)> {
        self.transfer.as_ref().map(|x| (x.recog_out.w, x.recog_out.b))
    }

    /// Write `model.cfg`, `model.manifest` and `model.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| EagerError::io(dir, e))?;
        self.config.save(&dir.join("model.cfg"))?;
        self.params.save(&dir.join("model"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = ModelConfig::load(&dir.join("model.cfg"))?;
        Self::load_with_config(dir, config)
    }

    /// Load weights against an externally supplied config; mismatched
    /// tensors are reported by name.
    pub fn load_with_config(dir: &Path, config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.params.load_into(&dir.join("model"))?;
        Ok(m)
    }

    /// Encode a batch of histories. Histories longer than `max_history`
    /// keep their most recent items. Positions are right-aligned so the most
    /// recent item always uses the last position row, as with left padding.
    pub fn encode(&self, t: &mut Tape, histories: &[&[usize]]) -> Result<Encoded> {
        if histories.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let cap = self.config.max_history;
        let mut items = Vec::new();
        let mut positions = Vec::new();
        let mut lens = Vec::with_capacity(histories.len());
        for h in histories {
            if h.is_empty() {
                return Err(invalid!("history must contain at least one item"));
            }
            let h = &h[h.len().saturating_sub(cap)..];
            if let Some(&bad) = h.iter().find(|&&i| i >= self.config.num_items) {
                return Err(invalid!("item {bad} out of range for {} items", self.config.num_items));
            }
            items.extend_from_slice(h);
            positions.extend(cap - h.len()..cap);
            lens.push(h.len());
        }
        let e = &self.encoder;
        let table = t.param(e.item_emb);
        let x = t.gather(table, &items);
        let pos_table = t.param(e.pos_emb);
        let p = t.gather(pos_table, &positions);
        let mut x = t.add(x, p);
        x = t.dropout(x);
        let mask = AttnMask::block(&lens, &lens, false)?;
        for layer in &e.layers {
            x = layer.forward(t, x, Some(&mask), None)?;
        }
        let h = e.ln_f.forward(t, x);
        Ok(Encoded { h, lens })
    }

    pub fn memory(&self, t: &mut Tape, stream: usize, enc: &Encoded) -> Memory {
        let kv = self.decoders[stream]
            .layers
            .iter()
            .map(|l| l.project_memory(t, enc.h).expect("decoder layers have cross-attention"))
            .collect();
        Memory {
            kv,
            key_lens: enc.lens.clone(),
        }
    }

    fn summary_offset(&self) -> usize {
        match self.config.summary_position {
            SummaryPosition::Head => 1,
            SummaryPosition::Mean | SummaryPosition::Tail => 0,
        }
    }

    /// Teacher-forcing input length for a stream.
    pub fn seq_len(&self, stream: usize) -> usize {
        let l = self.config.streams[stream].depth;
        match self.config.summary_position {
            SummaryPosition::Tail => l + 2,
            SummaryPosition::Head | SummaryPosition::Mean => l + 1,
        }
    }

    fn check_code(&self, stream: usize, code: &[Digit]) -> Result<()> {
        let s = &self.config.streams[stream];
        if code.len() != s.depth {
            return Err(invalid!("code length {} for stream `{}` of depth {}", code.len(), s.name, s.depth));
        }
        if let Some(d) = code.iter().find(|&&d| d as usize >= s.branch_k) {
            return Err(invalid!("digit {d} outside level range 0..{} of stream `{}`", s.branch_k, s.name));
        }
        Ok(())
    }

    fn teacher_tokens(&self, stream: usize, code: &[Digit]) -> Vec<usize> {
        let s = &self.config.streams[stream];
        let digits = code.iter().enumerate().map(|(j, &d)| s.token(j, d));
        match self.config.summary_position {
            SummaryPosition::Tail => std::iter::once(s.sos()).chain(digits).chain(std::iter::once(s.sum())).collect(),
            SummaryPosition::Mean => std::iter::once(s.sos()).chain(digits).collect(),
            SummaryPosition::Head => [s.sum(), s.sos()].into_iter().chain(digits.take(s.depth - 1)).collect(),
        }
    }

    /// Run one stream decoder over `batch` stacked token sequences of equal
    /// length. With a single-history memory every sequence attends to it;
    /// otherwise sequence `b` attends to history `b`.
    pub fn decode(&self, t: &mut Tape, stream: usize, tokens: &[usize], seq_len: usize, mem: &Memory) -> Result<DecoderOutput> {
        if seq_len == 0 || tokens.len() % seq_len != 0 {
            return Err(invalid!("{} tokens do not split into sequences of {seq_len}", tokens.len()));
        }
        let batch = tokens.len() / seq_len;
        let dec = &self.decoders[stream];
        let q_lens = vec![seq_len; batch];
        let self_mask = AttnMask::block(&q_lens, &q_lens, true)?;
        let cross_mask = if mem.key_lens.len() == 1 {
            None
        } else if mem.key_lens.len() == batch {
            Some(AttnMask::block(&q_lens, &mem.key_lens, false)?)
        } else {
            return Err(invalid!("{batch} decoder sequences for {} encoded histories", mem.key_lens.len()));
        };
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq_len).collect();
        let tok = t.param(dec.tok);
        let x = t.gather(tok, tokens);
        let pos = t.param(dec.pos);
        let p = t.gather(pos, &positions);
        let mut x = t.add(x, p);
        x = t.dropout(x);
        for (layer, kv) in dec.layers.iter().zip(&mem.kv) {
            x = layer.forward(t, x, Some(&self_mask), Some((*kv, cross_mask.as_ref())))?;
        }
        let hidden = dec.ln_f.forward(t, x);
        Ok(DecoderOutput { hidden, seq_len, batch })
    }

    /// Teacher-forced decoder pass over the target codes (one per history).
    pub fn decode_teacher_forced(&self, t: &mut Tape, stream: usize, mem: &Memory, codes: &[&[Digit]]) -> Result<DecoderOutput> {
        let mut tokens = Vec::new();
        for code in codes {
            self.check_code(stream, code)?;
            tokens.extend(self.teacher_tokens(stream, code));
        }
        self.decode(t, stream, &tokens, self.seq_len(stream), mem)
    }

    /// Logits (batch × branch_k) for code level `level`.
    pub fn level_logits(&self, t: &mut Tape, stream: usize, out: &DecoderOutput, level: usize) -> Var {
        let row = self.summary_offset() + level;
        let rows: Vec<usize> = (0..out.batch).map(|b| b * out.seq_len + row).collect();
        let h = t.gather(out.hidden, &rows);
        self.decoders[stream].heads[level].forward(t, h)
    }

    /// Σ over levels of the batch-mean cross-entropy of the target digits.
    pub fn generation_loss(&self, t: &mut Tape, stream: usize, out: &DecoderOutput, codes: &[&[Digit]]) -> Result<Var> {
        let depth = self.config.streams[stream].depth;
        let mut terms = Vec::with_capacity(depth);
        for level in 0..depth {
            let logits = self.level_logits(t, stream, out, level);
            let targets: Vec<usize> = codes.iter().map(|c| c[level] as usize).collect();
            terms.push(t.cross_entropy(logits, &targets));
        }
        Ok(t.add_scalars(&terms))
    }

    /// Decoder hidden state at the summary position (batch × hidden).
    pub fn summary_hidden(&self, t: &mut Tape, stream: usize, out: &DecoderOutput) -> Var {
        let l = self.config.streams[stream].depth;
        match self.config.summary_position {
            SummaryPosition::Tail => {
                let rows: Vec<usize> = (0..out.batch).map(|b| b * out.seq_len + l + 1).collect();
                t.gather(out.hidden, &rows)
            }
            SummaryPosition::Head => {
                let rows: Vec<usize> = (0..out.batch).map(|b| b * out.seq_len).collect();
                t.gather(out.hidden, &rows)
            }
            SummaryPosition::Mean => {
                let mut avg = Mat::zeros(out.batch, out.batch * out.seq_len);
                for b in 0..out.batch {
                    for j in 1..=l {
                        avg.data[b * avg.cols + b * out.seq_len + j] = 1.0 / l as f64;
                    }
                }
                let a = t.constant(avg);
                t.matmul(a, out.hidden)
            }
        }
    }

    /// Summary state passed through the stream's projection head.
    pub fn summary_embedding(&self, t: &mut Tape, stream: usize, out: &DecoderOutput) -> Var {
        let h = self.summary_hidden(t, stream, out);
        self.decoders[stream].proj.forward(t, h)
    }

    /// Bidirectional pass over `[CLS, tokens]` for each input, cross-attending
    /// to row `guide_row` of `guide`. Returns stacked states: input `i`
    /// occupies rows `i·(l+1) .. (i+1)·(l+1)`, CLS first.
    pub fn transfer_forward(&self, t: &mut Tape, inputs: &[TransferInput], guide: Var) -> Result<Var> {
        let x = self.transfer.as_ref().ok_or_else(|| invalid!("model has no transfer module (needs two streams)"))?;
        let spec = &self.config.streams[x.guided];
        let l = spec.depth;
        let guide_rows = t.value(guide).rows;
        let vocab = spec.vocab();
        let (cls_tok, mask_tok) = (vocab, vocab + 1);
        let mut tokens = Vec::with_capacity(inputs.len() * (l + 1));
        let mut rows = Vec::with_capacity(inputs.len());
        for inp in inputs {
            self.check_code(x.guided, inp.code)?;
            if !inp.mask.is_empty() && !inp.replace.is_empty() {
                return Err(invalid!("mask and replace corruption in one transfer call"));
            }
            if inp.guide_row >= guide_rows {
                return Err(invalid!("guide row {} out of range {guide_rows}", inp.guide_row));
            }
            let mut seq: Vec<usize> = inp.code.iter().enumerate().map(|(j, &d)| spec.token(j, d)).collect();
            for &p in inp.mask {
                if p >= l {
                    return Err(invalid!("mask position {p} out of range {l}"));
                }
                seq[p] = mask_tok;
            }
            for &(p, d) in inp.replace {
                if p >= l || d as usize >= spec.branch_k || d == inp.code[p] {
                    return Err(invalid!("bad replacement ({p}, {d})"));
                }
                seq[p] = spec.token(p, d);
            }
            tokens.push(cls_tok);
            tokens.extend(seq);
            rows.push(inp.guide_row);
        }
        let n = inputs.len();
        let tok = t.param(self.decoders[x.guided].tok);
        let cls = t.param(x.cls);
        let mask = t.param(x.mask);
        let table = t.concat_rows(&[tok, cls, mask]);
        let e = t.gather(table, &tokens);
        let pos_table = t.param(x.pos);
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..=l).collect();
        let p = t.gather(pos_table, &positions);
        let mut h = t.add(e, p);
        h = t.dropout(h);

        let memory = t.gather(guide, &rows);
        let q_lens = vec![l + 1; n];
        let self_mask = AttnMask::block(&q_lens, &q_lens, false)?;
        let cross_mask = AttnMask::block(&q_lens, &vec![1; n], false)?;
        for layer in &x.layers {
            let kv = layer.project_memory(t, memory).expect("transfer layers have cross-attention");
            h = layer.forward(t, h, Some(&self_mask), Some((kv, Some(&cross_mask))))?;
        }
        Ok(x.ln_f.forward(t, h))
    }

    /// InfoNCE over the masked positions of `inputs` (all masked-mode):
    /// the reconstruction of each masked slot is scored against its true
    /// token embedding and `negatives[m]` same-level digits.
    pub fn reconstruction_loss(
        &self,
        t: &mut Tape,
        states: Var,
        inputs: &[TransferInput],
        input_index: &[usize],
        negatives: &[Vec<Digit>],
    ) -> Result<Var> {
        let x = self.transfer.as_ref().ok_or_else(|| invalid!("model has no transfer module"))?;
        let spec = &self.config.streams[x.guided];
        let l = spec.depth;
        let mut rows = Vec::new();
        let mut cands = Vec::new();
        let mut m = 0;
        for &i in input_index {
            let inp = &inputs[i];
            for &p in inp.mask {
                let negs = negatives.get(m).ok_or_else(|| invalid!("missing negatives for masked slot {m}"))?;
                if negs.len() != self.config.num_negatives {
                    return Err(invalid!("{} negatives given, config says {}", negs.len(), self.config.num_negatives));
                }
                if negs.len() >= spec.branch_k {
                    return Err(invalid!("{} negatives need an alphabet larger than {}", negs.len(), spec.branch_k));
                }
                rows.push(i * (l + 1) + 1 + p);
                cands.push(spec.token(p, inp.code[p]));
                for &d in negs {
                    if d == inp.code[p] || d as usize >= spec.branch_k {
                        return Err(invalid!("bad negative digit {d} at level {p}"));
                    }
                    cands.push(spec.token(p, d));
                }
                m += 1;
            }
        }
        if rows.is_empty() {
            return Err(invalid!("reconstruction needs at least one masked position"));
        }
        let r = t.gather(states, &rows);
        let r = x.recon.forward(t, r);
        let tok = t.param(self.decoders[x.guided].tok);
        let c = t.gather(tok, &cands);
        Ok(info_nce_rows(t, r, c, self.config.num_negatives + 1))
    }

    /// Batch-mean of `BCE(clean, 1) + BCE(corrupted, 0)` on the CLS states.
    pub fn recognition_loss(&self, t: &mut Tape, states: Var, clean: &[usize], corrupted: &[usize]) -> Result<Var> {
        let x = self.transfer.as_ref().ok_or_else(|| invalid!("model has no transfer module"))?;
        if clean.len() != corrupted.len() || clean.is_empty() {
            return Err(invalid!("recognition needs matched clean/corrupted pairs"));
        }
        let l = self.config.streams[x.guided].depth;
        let rows: Vec<usize> = clean.iter().chain(corrupted).map(|&i| i * (l + 1)).collect();
        let labels: Vec<f64> = clean.iter().map(|_| 1.0).chain(corrupted.iter().map(|_| 0.0)).collect();
        let h = t.gather(states, &rows);
        let h = x.recog_hidden.forward(t, h);
        let h = t.gelu(h);
        let z = x.recog_out.forward(t, h);
        let s = t.bce_with_logits(z, &labels);
        Ok(t.affine(s, 1.0 / clean.len() as f64, 0.0))
    }

    /// Recognition logit per CLS row (positive = judged clean).
    pub fn recognition_logits(&self, t: &mut Tape, states: Var, inputs: &[usize]) -> Result<Vec<f64>> {
        let x = self.transfer.as_ref().ok_or_else(|| invalid!("model has no transfer module"))?;
        let l = self.config.streams[x.guided].depth;
        let rows: Vec<usize> = inputs.iter().map(|&i| i * (l + 1)).collect();
        let h = t.gather(states, &rows);
        let h = x.recog_hidden.forward(t, h);
        let h = t.gelu(h);
        let z = x.recog_out.forward(t, h);
        Ok(t.value(z).data.clone())
    }

    /// Full-alphabet log-probabilities of the next digit for each prefix
    /// (all prefixes share one length `< l`).
    pub fn step_log_probs(&self, t: &mut Tape, stream: usize, mem: &Memory, prefixes: &[Vec<Digit>]) -> Result<Vec<Vec<f64>>> {
        let s = &self.config.streams[stream];
        let level = prefixes.first().map_or(0, Vec::len);
        if level >= s.depth || prefixes.iter().any(|p| p.len() != level) {
            return Err(invalid!("prefixes must share a length below {}", s.depth));
        }
        let lead: Vec<usize> = match self.config.summary_position {
            SummaryPosition::Head => vec![s.sum(), s.sos()],
            _ => vec![s.sos()],
        };
        let seq_len = lead.len() + level;
        let mut tokens = Vec::with_capacity(prefixes.len() * seq_len);
        for p in prefixes {
            tokens.extend_from_slice(&lead);
            tokens.extend(p.iter().enumerate().map(|(j, &d)| s.token(j, d)));
        }
        let out = self.decode(t, stream, &tokens, seq_len, mem)?;
        let rows: Vec<usize> = (0..out.batch).map(|b| b * seq_len + seq_len - 1).collect();
        let h = t.gather(out.hidden, &rows);
        let logits = self.decoders[stream].heads[level].forward(t, h);
        let v = t.value(logits);
        Ok((0..v.rows).map(|r| crate::nn::log_softmax(v.row(r))).collect())
    }

    /// Multi-task loss over a batch. Disabled tasks are skipped entirely.
    pub fn total_loss(
        &self,
        t: &mut Tape,
        batch: &[Instance],
        targets: &[&crate::embed::EmbeddingMatrix],
        flags: TaskFlags,
    ) -> Result<(Var, LossBreakdown)> {
        losses::total_loss(self, t, batch, targets, flags)
    }
}

#[cfg(test)]
mod tests;
