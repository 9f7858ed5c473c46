//! Building blocks assembled by the encoder and both decoders.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamBuilder, ParamId};
use super::tape::{Segments, Tape, Var};

/// Transformer hyperparameters shared by every network in the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    #[serde(rename = "transformer_dim")]
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_registers: usize,
    pub mlp_dim: usize,
    pub n_mlp: usize,
    #[serde(rename = "dropout_rate")]
    pub dropout: f64,
}

impl TransformerConfig {
    /// Full-size configuration.
    pub fn paper() -> Self {
        TransformerConfig { d_model: 256, n_blocks: 4, n_heads: 4, n_registers: 2, mlp_dim: 128, n_mlp: 2, dropout: 0.1 }
    }

    /// Reduced configuration that trains on one CPU core.
    pub fn desk() -> Self {
        TransformerConfig { d_model: 64, n_blocks: 2, n_heads: 2, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.mlp_dim == 0 || self.n_blocks == 0 {
            return Err("mlp_dim and n_blocks must be positive".into());
        }
        Ok(())
    }
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        pb.scope(name, |pb| Linear { w: pb.normal("w", d_in, d_out), b: Some(pb.zeros("b", 1, d_out)) })
    }

    pub fn no_bias<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        pb.scope(name, |pb| Linear { w: pb.normal("w", d_in, d_out), b: None })
    }

    /// Weights and bias start at zero.
    pub fn zeroed<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        pb.scope(name, |pb| Linear { w: pb.zeros("w", d_in, d_out), b: Some(pb.zeros("b", 1, d_out)) })
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let w = t.param(self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Layer norm with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize) -> Self {
        pb.scope(name, |pb| LayerNorm { scale: pb.ones("scale", 1, d), shift: pb.zeros("shift", 1, d) })
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let n = t.layer_norm(x);
        let s = t.param(self.scale);
        let b = t.param(self.shift);
        let y = t.mul_row(n, s);
        t.add_row(y, b)
    }
}

/// `n_hidden` GELU layers of width `hidden`, then a linear read-out.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub dropout: bool,
}

impl Mlp {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        d_in: usize,
        hidden: usize,
        n_hidden: usize,
        d_out: usize,
    ) -> Self {
        pb.scope(name, |pb| {
            let mut layers = Vec::with_capacity(n_hidden + 1);
            let mut d = d_in;
            for i in 0..n_hidden {
                layers.push(Linear::new(pb, &format!("l{i}"), d, hidden));
                d = hidden;
            }
            layers.push(Linear::new(pb, &format!("l{n_hidden}"), d, d_out));
            Mlp { layers, dropout: false }
        })
    }

    /// Enables dropout on hidden activations (training tapes only).
    pub fn with_dropout(mut self) -> Self {
        self.dropout = true;
        self
    }

    pub fn forward(&self, t: &mut Tape<'_>, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(t, x);
            if i < last {
                x = t.gelu(x);
                if self.dropout {
                    x = t.dropout(x);
                }
            }
        }
        x
    }
}

/// Adaptive layer norm: `layer_norm(h) ⊙ (1 + γ(c)) + β(c)` with γ, β linear
/// in the conditioning vector and zero-initialized.
#[derive(Clone, Debug)]
pub struct AdaLn {
    pub gamma: Linear,
    pub beta: Linear,
}

impl AdaLn {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d_cond: usize, d: usize) -> Self {
        pb.scope(name, |pb| AdaLn { gamma: Linear::zeroed(pb, "gamma", d_cond, d), beta: Linear::zeroed(pb, "beta", d_cond, d) })
    }

    /// `cond` holds one row per conditioning group; `owner[i]` is the group of row `i` of `h`.
    pub fn forward(&self, t: &mut Tape<'_>, h: Var, cond: Var, owner: &Rc<[usize]>) -> Var {
        let n = t.layer_norm(h);
        let g = self.gamma.forward(t, cond);
        let b = self.beta.forward(t, cond);
        t.modulate(n, g, b, owner.clone())
    }
}

/// Multi-head self-attention with output projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize, heads: usize) -> Self {
        pb.scope(name, |pb| SelfAttention {
            wq: Linear::no_bias(pb, "q", d, d),
            wk: Linear::no_bias(pb, "k", d, d),
            wv: Linear::no_bias(pb, "v", d, d),
            wo: Linear::no_bias(pb, "o", d, d),
            heads,
        })
    }

    pub fn forward(&self, t: &mut Tape<'_>, h: Var, segs: &Segments, causal: bool) -> Var {
        let q = self.wq.forward(t, h);
        let k = self.wk.forward(t, h);
        let v = self.wv.forward(t, h);
        let a = t.attention(q, k, v, segs, segs, self.heads, causal, true);
        self.wo.forward(t, a)
    }
}

/// Residual cross-attention `H + CrossAtt(H, C)`.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize, heads: usize) -> Self {
        pb.scope(name, |pb| CrossAttention {
            wq: Linear::no_bias(pb, "q", d, d),
            wk: Linear::no_bias(pb, "k", d, d),
            wv: Linear::no_bias(pb, "v", d, d),
            wo: Linear::no_bias(pb, "o", d, d),
            heads,
        })
    }

    pub fn forward(&self, t: &mut Tape<'_>, h: Var, h_segs: &Segments, c: Var, c_segs: &Segments) -> Var {
        let q = self.wq.forward(t, h);
        let k = self.wk.forward(t, c);
        let v = self.wv.forward(t, c);
        let a = t.attention(q, k, v, h_segs, c_segs, self.heads, false, true);
        let o = self.wo.forward(t, a);
        t.add(h, o)
    }
}

/// Single learned-query attention pooling each segment to one row.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub query: ParamId,
    pub wk: Linear,
    pub wv: Linear,
}

impl AttentionPool {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize) -> Self {
        pb.scope(name, |pb| AttentionPool {
            query: pb.normal_std("query", 1, d, 1.0),
            wk: Linear::no_bias(pb, "k", d, d),
            wv: Linear::no_bias(pb, "v", d, d),
        })
    }

    /// (total × d) rows grouped by `segs` → (segments × d).
    pub fn forward(&self, t: &mut Tape<'_>, h: Var, segs: &Segments) -> Var {
        let q = t.param(self.query);
        let idx: Rc<[usize]> = vec![0; segs.len()].into();
        let q = t.gather(q, idx);
        let k = self.wk.forward(t, h);
        let v = self.wv.forward(t, h);
        let q_segs = Segments::uniform(segs.len(), 1).expect("segments are non-empty");
        t.attention(q, k, v, &q_segs, segs, 1, false, false)
    }
}

/// Pre-norm transformer block with AdaLN conditioning and an optional
/// cross-attention layer between self-attention and feed-forward.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm_attn: AdaLn,
    pub attn: SelfAttention,
    pub cross: Option<CrossAttention>,
    pub norm_ff: AdaLn,
    pub ff: Mlp,
}

/// Conditioning for a block stack: one row per group plus row→group map.
pub struct Conditioning {
    pub cond: Var,
    pub owner: Rc<[usize]>,
}

/// Keys/values for cross-attention.
pub struct CrossContext<'s> {
    pub keys: Var,
    pub segs: &'s Segments,
}

impl Block {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, cfg: &TransformerConfig, cross: bool) -> Self {
        let d = cfg.d_model;
        pb.scope(name, |pb| Block {
            norm_attn: AdaLn::new(pb, "ada_attn", d, d),
            attn: SelfAttention::new(pb, "attn", d, cfg.n_heads),
            cross: cross.then(|| CrossAttention::new(pb, "cross", d, cfg.n_heads)),
            norm_ff: AdaLn::new(pb, "ada_ff", d, d),
            ff: Mlp::new(pb, "ff", d, cfg.mlp_dim, cfg.n_mlp, d).with_dropout(),
        })
    }

    pub fn forward(
        &self,
        t: &mut Tape<'_>,
        h: Var,
        segs: &Segments,
        cond: &Conditioning,
        causal: bool,
        cross: Option<&CrossContext<'_>>,
    ) -> Var {
        let a = self.norm_attn.forward(t, h, cond.cond, &cond.owner);
        let a = self.attn.forward(t, a, segs, causal);
        let mut h = t.add(h, a);
        if let (Some(layer), Some(ctx)) = (&self.cross, cross) {
            h = layer.forward(t, h, segs, ctx.keys, ctx.segs);
        }
        let f = self.norm_ff.forward(t, h, cond.cond, &cond.owner);
        let f = self.ff.forward(t, f);
        t.add(h, f)
    }
}

/// Stack of [`Block`]s.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub blocks: Vec<Block>,
}

impl Transformer {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, cfg: &TransformerConfig, cross: bool) -> Self {
        pb.scope(name, |pb| Transformer {
            blocks: (0..cfg.n_blocks).map(|i| Block::new(pb, &format!("block{i}"), cfg, cross)).collect(),
        })
    }

    pub fn forward(
        &self,
        t: &mut Tape<'_>,
        mut h: Var,
        segs: &Segments,
        cond: &Conditioning,
        causal: bool,
        cross: Option<&CrossContext<'_>>,
    ) -> Var {
        for b in &self.blocks {
            h = b.forward(t, h, segs, cond, causal, cross);
        }
        h
    }
}
