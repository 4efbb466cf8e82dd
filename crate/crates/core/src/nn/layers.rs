//! Transformer building blocks over the tape.
//!
//! Several independent sequences are processed in one pass by stacking
//! their rows and restricting attention with a block mask built from the
//! per-sequence lengths, so no padding is ever materialized.

use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{invalid, Result};
use crate::rng::Rng;

pub const INIT_STD: f64 = 0.02;

/// Attention visibility: `allowed[q * keys + k]`.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub queries: usize,
    pub keys: usize,
    pub allowed: Rc<Vec<bool>>,
}

impl AttnMask {
    /// Query segment `s` sees only key segment `s`; with `causal`, query
    /// offset `i` sees key offsets `≤ i`.
    pub fn block(query_lens: &[usize], key_lens: &[usize], causal: bool) -> Result<Self> {
        if query_lens.len() != key_lens.len() {
            return Err(invalid!(
                "mask needs one key segment per query segment ({} vs {})",
                query_lens.len(),
                key_lens.len()
            ));
        }
        let queries: usize = query_lens.iter().sum();
        let keys: usize = key_lens.iter().sum();
        let mut allowed = vec![false; queries * keys];
        let (mut q0, mut k0) = (0, 0);
        for (&ql, &kl) in query_lens.iter().zip(key_lens) {
            for i in 0..ql {
                let row = &mut allowed[(q0 + i) * keys..(q0 + i + 1) * keys];
                let visible = if causal { kl.min(i + 1) } else { kl };
                row[k0..k0 + visible].fill(true);
            }
            q0 += ql;
            k0 += kl;
        }
        Ok(Self {
            queries,
            keys,
            allowed: Rc::new(allowed),
        })
    }

    /// Additionally hide keys flagged `false` in `key_valid`.
    pub fn with_key_padding(mut self, key_valid: &[bool]) -> Result<Self> {
        if key_valid.len() != self.keys {
            return Err(invalid!("key padding mask has {} entries, expected {}", key_valid.len(), self.keys));
        }
        let mut allowed = (*self.allowed).clone();
        for q in 0..self.queries {
            for (a, &ok) in allowed[q * self.keys..(q + 1) * self.keys].iter_mut().zip(key_valid) {
                *a &= ok;
            }
        }
        self.allowed = Rc::new(allowed);
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            w: ps.add_normal(format!("{name}.w"), d_in, d_out, INIT_STD, rng),
            b: ps.add_const(format!("{name}.b"), 1, d_out, 0.0),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let b = t.param(self.b);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: ps.add_const(format!("{name}.g"), 1, dim, 1.0),
            bias: ps.add_const(format!("{name}.b"), 1, dim, 0.0),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = t.param(self.gain);
        let b = t.param(self.bias);
        t.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, inner: usize, rng: &mut Rng) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), dim, inner, rng),
            down: Linear::new(ps, &format!("{name}.down"), inner, dim, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.up.forward(t, x);
        let h = t.gelu(h);
        self.down.forward(t, h)
    }
}

/// Projected keys and values, reusable across queries.
#[derive(Debug, Clone, Copy)]
pub struct KeyValue {
    pub k: Var,
    pub v: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(invalid!("hidden size {dim} is not divisible by {heads} heads"));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn project_kv(&self, t: &mut Tape, kv_in: Var) -> KeyValue {
        KeyValue {
            k: self.k.forward(t, kv_in),
            v: self.v.forward(t, kv_in),
        }
    }

    /// Scaled dot-product attention of `q_in` over already-projected keys.
    pub fn attend(&self, t: &mut Tape, q_in: Var, kv: KeyValue, mask: Option<&AttnMask>) -> Result<Var> {
        let (qr, qc) = t.value(q_in).shape();
        let kr = t.value(kv.k).rows;
        if qc != self.dim || t.value(kv.k).cols != self.dim {
            return Err(invalid!("attention input width {qc}, expected {}", self.dim));
        }
        if let Some(m) = mask {
            if m.queries != qr || m.keys != kr {
                return Err(invalid!("mask is {}x{}, attention is {qr}x{kr}", m.queries, m.keys));
            }
        }
        let q = self.q.forward(t, q_in);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, kv.k, kv.v)
            } else {
                (
                    t.slice_cols(q, h * dh, dh),
                    t.slice_cols(kv.k, h * dh, dh),
                    t.slice_cols(kv.v, h * dh, dh),
                )
            };
            let s = t.matmul_t(qh, false, kh, true);
            let s = t.affine(s, scale, 0.0);
            let p = match mask {
                Some(m) => t.masked_softmax(s, &m.allowed),
                None => t.softmax(s),
            };
            outs.push(t.matmul(p, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
        Ok(self.o.forward(t, cat))
    }

    pub fn forward(&self, t: &mut Tape, q_in: Var, kv_in: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let kv = self.project_kv(t, kv_in);
        self.attend(t, q_in, kv, mask)
    }
}

/// Pre-norm transformer block: self-attention, optional cross-attention,
/// feed-forward, each wrapped in a residual connection.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerLayer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        cross: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let ln_self = LayerNorm::new(ps, &format!("{name}.ln1"), dim);
        let self_attn = Attention::new(ps, &format!("{name}.self"), dim, heads, rng)?;
        let cross = if cross {
            Some((
                LayerNorm::new(ps, &format!("{name}.ln_x"), dim),
                Attention::new(ps, &format!("{name}.cross"), dim, heads, rng)?,
            ))
        } else {
            None
        };
        let ln_ff = LayerNorm::new(ps, &format!("{name}.ln2"), dim);
        let ff = FeedForward::new(ps, &format!("{name}.ff"), dim, ffn_dim, rng);
        Ok(Self {
            ln_self,
            self_attn,
            cross,
            ln_ff,
            ff,
        })
    }

    /// Cross-attention keys and values for `memory`; `None` without cross-attention.
    pub fn project_memory(&self, t: &mut Tape, memory: Var) -> Option<KeyValue> {
        self.cross.as_ref().map(|(_, a)| a.project_kv(t, memory))
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        x: Var,
        self_mask: Option<&AttnMask>,
        memory: Option<(KeyValue, Option<&AttnMask>)>,
    ) -> Result<Var> {
        let h = self.ln_self.forward(t, x);
        let a = self.self_attn.forward(t, h, h, self_mask)?;
        let a = t.dropout(a);
        let mut x = t.add(x, a);
        if let Some((ln, attn)) = &self.cross {
            let (kv, mask) = memory.ok_or_else(|| invalid!("cross-attention layer called without memory"))?;
            let h = ln.forward(t, x);
            let c = attn.attend(t, h, kv, mask)?;
            let c = t.dropout(c);
            x = t.add(x, c);
        }
        let h = self.ln_ff.forward(t, x);
        let f = self.ff.forward(t, h);
        let f = t.dropout(f);
        Ok(t.add(x, f))
    }
}
