//! Generative intermediate fusion.
//!
//! Each branch normalizes its query sequence (image or text tokens) and the
//! generated-image tokens with separate layer norms, cross-attends from the
//! query to the generated tokens, and runs the result through its own
//! transformer stack. The fused vector is read at the query's global slot.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::TokenSequence;
use crate::error::{bail_arg, GeaError, Result};
use crate::layers::{transformer_forward, LayerNorm, MultiHeadAttention, TransformerLayer};
use crate::params::{ParamGroup, ParamSet};
use crate::tensor::Mat;

/// Projection matrices `W_q, W_k, W_v, W_o` of one cross-attention layer.
pub type CrossAttentionParams = MultiHeadAttention;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GifConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
}

impl Default for GifConfig {
    fn default() -> Self {
        GifConfig {
            dim: 512,
            heads: 8,
            layers: 6,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GifBranch {
    pub ln_query: LayerNorm,
    pub ln_generated: LayerNorm,
    pub cross: CrossAttentionParams,
    pub layers: Vec<TransformerLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GifParams {
    pub config: GifConfig,
    pub image_branch: GifBranch,
    pub text_branch: GifBranch,
}

impl GifBranch {
    fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, cfg: &GifConfig, rng: &mut R) -> Self {
        let g = ParamGroup::Fusion;
        GifBranch {
            ln_query: LayerNorm::new(ps, &format!("{name}.ln_query"), g, cfg.dim),
            ln_generated: LayerNorm::new(ps, &format!("{name}.ln_generated"), g, cfg.dim),
            cross: MultiHeadAttention::new(ps, &format!("{name}.cross"), g, cfg.dim, cfg.heads, false, rng),
            layers: (0..cfg.layers)
                .map(|i| {
                    TransformerLayer::new(
                        ps,
                        &format!("{name}.layer{i}"),
                        g,
                        cfg.dim,
                        cfg.heads,
                        cfg.mlp_ratio,
                        true,
                        rng,
                    )
                })
                .collect(),
        }
    }

    /// Records the branch on the tape; returns the full output sequence.
    pub fn forward(&self, t: &mut Tape<'_>, query: Var, generated: Var) -> Var {
        let q = self.ln_query.forward(t, query);
        let kv = self.ln_generated.forward(t, generated);
        let ca = self.cross.forward(t, q, kv).out;
        transformer_forward(&self.layers, t, ca)
    }

    /// Pooled fused vector (1×d) at row `pool`.
    pub fn fuse(&self, t: &mut Tape<'_>, query: Var, generated: Var, pool: usize) -> Var {
        let out = self.forward(t, query, generated);
        t.row(out, pool)
    }
}

impl GifParams {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, config: GifConfig, rng: &mut R) -> Result<Self> {
        if config.heads == 0 || !config.dim.is_multiple_of(config.heads) {
            bail_arg!("fusion dim {} not divisible by heads {}", config.dim, config.heads);
        }
        let image_branch = GifBranch::new(ps, "gif.image", &config, rng);
        let text_branch = GifBranch::new(ps, "gif.text", &config, rng);
        Ok(GifParams {
            config,
            image_branch,
            text_branch,
        })
    }
}

fn check_dims(query: &Mat, keys: &Mat, values: &Mat, dim: usize) -> Result<()> {
    if query.cols() != dim || keys.cols() != dim || values.cols() != dim {
        bail_arg!(
            "attention inputs must all have d={dim}, got {} / {} / {}",
            query.cols(),
            keys.cols(),
            values.cols()
        );
    }
    if keys.rows() == 0 || keys.rows() != values.rows() {
        bail_arg!("need Lk >= 1 with matching key/value rows, got {} / {}", keys.rows(), values.rows());
    }
    Ok(())
}

/// Multi-head `softmax(Q Kᵀ / sqrt(d / heads)) V`, projected by `W_o`.
pub fn cross_attention(
    ps: &ParamSet,
    params: &CrossAttentionParams,
    query: &Mat,
    keys: &Mat,
    values: &Mat,
) -> Result<Mat> {
    check_dims(query, keys, values, params.dim)?;
    let mut t = Tape::new(ps);
    let q = t.constant(query.clone());
    let k = t.constant(keys.clone());
    let v = t.constant(values.clone());
    let out = params.forward_qkv(&mut t, q, k, v).out;
    let m = t.value(out).clone();
    if !m.is_finite() {
        return Err(GeaError::Numeric("cross-attention produced non-finite output".into()));
    }
    Ok(m)
}

/// Head-averaged post-softmax attention weights (Lq×Lk); rows sum to 1.
pub fn attention_heatmap(
    ps: &ParamSet,
    params: &CrossAttentionParams,
    query: &Mat,
    keys: &Mat,
) -> Result<Mat> {
    check_dims(query, keys, keys, params.dim)?;
    let mut t = Tape::new(ps);
    let q = t.constant(query.clone());
    let k = t.constant(keys.clone());
    let weights = params.forward(&mut t, q, k).weights;
    let mut avg = Mat::zeros(query.rows(), keys.rows());
    for w in &weights {
        avg.add_assign(t.value(*w));
    }
    Ok(avg.scale(1.0 / weights.len() as f64))
}

fn fuse(
    ps: &ParamSet,
    branch: &GifBranch,
    query: &TokenSequence,
    generated: &TokenSequence,
) -> Result<Vec<f64>> {
    if query.dim() != generated.dim() {
        bail_arg!("query d={} vs generated d={}", query.dim(), generated.dim());
    }
    if generated.is_empty() {
        bail_arg!("generated sequence is empty");
    }
    let mut t = Tape::new(ps);
    let q = t.constant(query.rows.clone());
    let g = t.constant(generated.rows.clone());
    let out = branch.fuse(&mut t, q, g, query.global_index());
    let v = t.value(out).clone().into_vec();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(GeaError::Numeric("fusion produced non-finite output".into()));
    }
    Ok(v)
}

/// Fused image representation, read at the class-token row.
pub fn fuse_image(
    ps: &ParamSet,
    params: &GifParams,
    image: &TokenSequence,
    generated: &TokenSequence,
) -> Result<Vec<f64>> {
    fuse(ps, &params.image_branch, image, generated)
}

/// Fused text representation, read at the eos row.
pub fn fuse_text(
    ps: &ParamSet,
    params: &GifParams,
    text: &TokenSequence,
    generated: &TokenSequence,
) -> Result<Vec<f64>> {
    fuse(ps, &params.text_branch, text, generated)
}
