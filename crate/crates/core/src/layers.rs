//! Transformer building blocks recorded on a [`Tape`].

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::params::{ParamGroup, ParamId, ParamSet};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, group: ParamGroup, dim: usize) -> Self {
        LayerNorm {
            gain: ps.add(format!("{name}.gain"), group, Mat::filled(1, dim, 1.0)),
            bias: ps.add(format!("{name}.bias"), group, Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let g = t.param(self.gain);
        let b = t.param(self.bias);
        t.layer_norm(x, g, b)
    }
}

/// `x · W + b` with `W` stored as in×out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        group: ParamGroup,
        weight: Mat,
        with_bias: bool,
    ) -> Self {
        let out = weight.cols();
        let weight = ps.add(format!("{name}.weight"), group, weight);
        let bias = with_bias.then(|| ps.add(format!("{name}.bias"), group, Mat::zeros(1, out)));
        Linear { weight, bias }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let w = t.param(self.weight);
        let y = t.matmul(x, w);
        match self.bias {
            Some(b) => {
                let bv = t.param(b);
                t.add_row(y, bv)
            }
            None => y,
        }
    }
}

/// Multi-head attention with separate query and key/value inputs.
///
/// Scores are scaled per head by `sqrt(dim / heads)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiHeadAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// Post-softmax weights, one Lq×Lk node per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        zero_output: bool,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by heads {heads}");
        let std = 1.0 / (dim as f64).sqrt();
        let mut mk = |suffix: &str, zero: bool, rng: &mut R| {
            let m = if zero {
                Mat::zeros(dim, dim)
            } else {
                Mat::randn(dim, dim, std, rng)
            };
            ps.add(format!("{name}.{suffix}"), group, m)
        };
        let w_q = mk("w_q", false, rng);
        let w_k = mk("w_k", false, rng);
        let w_v = mk("w_v", false, rng);
        let w_o = mk("w_o", zero_output, rng);
        MultiHeadAttention {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
            dim,
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, q_in: Var, kv_in: Var) -> AttentionOutput {
        self.forward_qkv(t, q_in, kv_in, kv_in)
    }

    /// Attention with distinct key and value inputs.
    pub fn forward_qkv(&self, t: &mut Tape<'_>, q_in: Var, k_in: Var, v_in: Var) -> AttentionOutput {
        let (wq, wk, wv, wo) = (
            t.param(self.w_q),
            t.param(self.w_k),
            t.param(self.w_v),
            t.param(self.w_o),
        );
        let q = t.matmul(q_in, wq);
        let k = t.matmul(k_in, wk);
        let v = t.matmul(v_in, wv);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    t.slice_cols(q, h * head_dim, head_dim),
                    t.slice_cols(k, h * head_dim, head_dim),
                    t.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = t.matmul_nt(qh, kh);
            let scores = t.scale(scores, scale);
            let a = t.softmax_rows(scores);
            weights.push(a);
            heads.push(t.matmul(a, vh));
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            t.concat_cols(&heads)
        };
        let out = t.matmul(joined, wo);
        AttentionOutput { out, weights }
    }
}

/// Pre-norm transformer layer: `x + SA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub fc_in: Linear,
    pub fc_out: Linear,
}

impl TransformerLayer {
    /// With `zero_residual`, the attention output and the second MLP
    /// projection start at zero so the layer is initially the identity.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        zero_residual: bool,
        rng: &mut R,
    ) -> Self {
        let hidden = dim * mlp_ratio;
        let ln_attn = LayerNorm::new(ps, &format!("{name}.ln_attn"), group, dim);
        let attn = MultiHeadAttention::new(
            ps,
            &format!("{name}.attn"),
            group,
            dim,
            heads,
            zero_residual,
            rng,
        );
        let ln_mlp = LayerNorm::new(ps, &format!("{name}.ln_mlp"), group, dim);
        let fc_in = Linear::new(
            ps,
            &format!("{name}.fc_in"),
            group,
            Mat::randn(dim, hidden, 1.0 / (dim as f64).sqrt(), rng),
            true,
        );
        let out_w = if zero_residual {
            Mat::zeros(hidden, dim)
        } else {
            Mat::randn(hidden, dim, 1.0 / (hidden as f64).sqrt(), rng)
        };
        let fc_out = Linear::new(ps, &format!("{name}.fc_out"), group, out_w, true);
        TransformerLayer {
            ln_attn,
            attn,
            ln_mlp,
            fc_in,
            fc_out,
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let h = self.ln_attn.forward(t, x);
        let a = self.attn.forward(t, h, h).out;
        let x = t.add(x, a);
        let h = self.ln_mlp.forward(t, x);
        let h = self.fc_in.forward(t, h);
        let h = t.gelu(h);
        let h = self.fc_out.forward(t, h);
        t.add(x, h)
    }
}

pub fn transformer_forward(layers: &[TransformerLayer], t: &mut Tape<'_>, mut x: Var) -> Var {
    for layer in layers {
        x = layer.forward(t, x);
    }
    x
}
