//! Toy image and text encoders with CLIP-style token layouts.
//!
//! Image sequences are `[cls, patch_1 .. patch_M]` and pool at row 0.
//! Text sequences are `[sos, word_1 .. word_n, eos]` and pool at the eos row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{bail_arg, GeaError, Result};
use crate::feature_store::{FeatureBundle, Modality};
use crate::hashing::{fnv1a, words};
use crate::layers::{transformer_forward, Linear, TransformerLayer};
use crate::params::{ParamGroup, ParamId, ParamSet};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    /// Total text budget including the sos and eos markers.
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 512,
            heads: 8,
            layers: 2,
            patch_size: 16,
            image_height: 384,
            image_width: 128,
            channels: 3,
            max_text_len: 77,
            vocab_size: 1000,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            bail_arg!(
                "image {}x{} not divisible by patch size {p}",
                self.image_height,
                self.image_width
            );
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            bail_arg!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads);
        }
        if self.max_text_len < 3 {
            bail_arg!("max_text_len must leave room for one word");
        }
        if self.vocab_size < 3 {
            bail_arg!("vocab_size must be at least 3");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height * self.image_width) / (self.patch_size * self.patch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceKind {
    Image,
    Generated,
    Text { eos: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub rows: Mat,
    pub kind: SequenceKind,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    /// Row that carries the global representation.
    pub fn global_index(&self) -> usize {
        match self.kind {
            SequenceKind::Image | SequenceKind::Generated => 0,
            SequenceKind::Text { eos } => eos,
        }
    }

    /// Image and generated bundles become `[global; tokens]`, text bundles
    /// `[tokens; global]` with the global token in the eos slot.
    pub fn from_bundle(b: &FeatureBundle) -> Self {
        let d = b.dim();
        let l = b.num_tokens();
        let global = b.global().iter().map(|&v| v as f64);
        let tokens = b.tokens().iter().map(|&v| v as f64);
        match b.modality() {
            Modality::Image | Modality::Generated => TokenSequence {
                rows: Mat::from_vec(l + 1, d, global.chain(tokens).collect()),
                kind: if b.modality() == Modality::Image {
                    SequenceKind::Image
                } else {
                    SequenceKind::Generated
                },
            },
            Modality::Text => TokenSequence {
                rows: Mat::from_vec(l + 1, d, tokens.chain(global).collect()),
                kind: SequenceKind::Text { eos: l },
            },
        }
    }

    pub fn to_bundle(&self) -> Result<FeatureBundle> {
        let gi = self.global_index();
        let global = self.rows.row(gi).to_vec();
        let tokens: Vec<Vec<f64>> = (0..self.len())
            .filter(|&r| r != gi)
            .map(|r| self.rows.row(r).to_vec())
            .collect();
        let modality = match self.kind {
            SequenceKind::Image => Modality::Image,
            SequenceKind::Generated => Modality::Generated,
            SequenceKind::Text { .. } => Modality::Text,
        };
        FeatureBundle::from_f64(modality, &global, &tokens)
    }
}

pub fn select_global(seq: &TokenSequence) -> Vec<f64> {
    seq.rows.row(seq.global_index()).to_vec()
}

/// H×W×C image stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            bail_arg!("image buffer has {} values, expected {height}x{width}x{channels}", data.len());
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Splits an image into non-overlapping P×P patches in row-major grid order.
/// Each patch is flattened as (row, column, channel).
pub fn patchify(image: &Image, p: usize) -> Result<Mat> {
    if p == 0 || !image.height.is_multiple_of(p) || !image.width.is_multiple_of(p) {
        bail_arg!("image {}x{} not divisible by patch size {p}", image.height, image.width);
    }
    let (gh, gw) = (image.height / p, image.width / p);
    let c = image.channels;
    let mut out = Mat::zeros(gh * gw, p * p * c);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    row[k..k + c].copy_from_slice(image.pixel(gy * p + y, gx * p + x));
                    k += c;
                }
            }
        }
    }
    Ok(out)
}

/// Lowercase + whitespace split + modular hash into the vocabulary.
///
/// The last two ids are reserved for the sos and eos markers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tokenizer {
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Tokenizer {
    pub fn sos(&self) -> usize {
        self.vocab_size - 2
    }

    pub fn eos(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ws = words(text);
        if ws.is_empty() {
            bail_arg!("text is empty");
        }
        let budget = self.max_len - 2;
        let mut ids = Vec::with_capacity(ws.len().min(budget) + 2);
        ids.push(self.sos());
        ids.extend(
            ws.iter()
                .take(budget)
                .map(|w| (fnv1a(w.as_bytes()) % (self.vocab_size as u64 - 2)) as usize),
        );
        ids.push(self.eos());
        Ok(ids)
    }
}

fn init_layers<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    name: &str,
    cfg: &EncoderConfig,
    rng: &mut R,
) -> Vec<TransformerLayer> {
    (0..cfg.layers)
        .map(|i| {
            TransformerLayer::new(
                ps,
                &format!("{name}.layer{i}"),
                ParamGroup::Backbone,
                cfg.embed_dim,
                cfg.heads,
                cfg.mlp_ratio,
                false,
                rng,
            )
        })
        .collect()
}

/// ViT-style encoder: patch projection, class token, learned positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let patch_dim = config.patch_size * config.patch_size * config.channels;
        let g = ParamGroup::Backbone;
        let patch_embed = Linear::new(
            ps,
            &format!("{name}.patch_embed"),
            g,
            Mat::randn(patch_dim, d, 1.0 / (patch_dim as f64).sqrt(), rng),
            true,
        );
        let cls = ps.add(format!("{name}.cls"), g, Mat::randn(1, d, 0.02, rng));
        let pos = ps.add(
            format!("{name}.pos"),
            g,
            Mat::randn(config.num_patches() + 1, d, 0.02, rng),
        );
        let layers = init_layers(ps, name, &config, rng);
        Ok(ImageEncoder {
            config,
            patch_embed,
            cls,
            pos,
            layers,
        })
    }

    pub fn forward(&self, t: &mut Tape<'_>, patches: Var) -> Result<Var> {
        let (m, pd) = t.value(patches).shape();
        let c = &self.config;
        if m != c.num_patches() || pd != c.patch_size * c.patch_size * c.channels {
            bail_arg!(
                "patch matrix {m}x{pd} does not match geometry ({} patches of {})",
                c.num_patches(),
                c.patch_size * c.patch_size * c.channels
            );
        }
        let emb = self.patch_embed.forward(t, patches);
        let cls = t.param(self.cls);
        let x = t.concat_rows(&[cls, emb]);
        let pos = t.param(self.pos);
        let x = t.add(x, pos);
        Ok(transformer_forward(&self.layers, t, x))
    }

    pub fn encode(&self, ps: &ParamSet, image: &Image) -> Result<TokenSequence> {
        let c = &self.config;
        if image.height != c.image_height || image.width != c.image_width || image.channels != c.channels
        {
            bail_arg!(
                "image {}x{}x{} does not match encoder geometry {}x{}x{}",
                image.height,
                image.width,
                image.channels,
                c.image_height,
                c.image_width,
                c.channels
            );
        }
        let patches = patchify(image, c.patch_size)?;
        let mut t = Tape::new(ps);
        let p = t.constant(patches);
        let out = self.forward(&mut t, p)?;
        finite_sequence(t.value(out).clone(), SequenceKind::Image)
    }
}

fn finite_sequence(rows: Mat, kind: SequenceKind) -> Result<TokenSequence> {
    if !rows.is_finite() {
        return Err(GeaError::Numeric("encoder produced non-finite output".into()));
    }
    Ok(TokenSequence { rows, kind })
}

/// Token embedding table, learned positions, transformer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub config: EncoderConfig,
    pub token_embed: ParamId,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let g = ParamGroup::Backbone;
        let token_embed = ps.add(
            format!("{name}.token_embed"),
            g,
            Mat::randn(config.vocab_size, d, 1.0 / (d as f64).sqrt(), rng),
        );
        let pos = ps.add(format!("{name}.pos"), g, Mat::randn(config.max_text_len, d, 0.02, rng));
        let layers = init_layers(ps, name, &config, rng);
        Ok(TextEncoder {
            config,
            token_embed,
            pos,
            layers,
        })
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer {
            vocab_size: self.config.vocab_size,
            max_len: self.config.max_text_len,
        }
    }

    /// Returns the sequence node; the eos row is the last one.
    pub fn forward(&self, t: &mut Tape<'_>, ids: &[usize]) -> Var {
        let emb = t.param(self.token_embed);
        let x = t.select_rows(emb, ids);
        let pos_all = t.param(self.pos);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = t.select_rows(pos_all, &positions);
        let x = t.add(x, pos);
        transformer_forward(&self.layers, t, x)
    }

    pub fn encode(&self, ps: &ParamSet, text: &str) -> Result<TokenSequence> {
        let ids = self.tokenizer().tokenize(text)?;
        let mut t = Tape::new(ps);
        let out = self.forward(&mut t, &ids);
        finite_sequence(t.value(out).clone(), SequenceKind::Text { eos: ids.len() - 1 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            heads: 2,
            layers: 1,
            patch_size: 4,
            image_height: 8,
            image_width: 4,
            channels: 2,
            max_text_len: 6,
            vocab_size: 50,
            mlp_ratio: 2,
        }
    }

    fn ramp_image(h: usize, w: usize, c: usize) -> Image {
        Image::new(h, w, c, (0..h * w * c).map(|i| i as f64 * 0.01).collect()).unwrap()
    }

    #[test]
    fn default_geometry_has_192_patches() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.num_patches(), 192);
        let p = patchify(&ramp_image(384, 128, 1), 16).unwrap();
        assert_eq!(p.shape(), (192, 256));
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let img = ramp_image(4, 4, 3);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), (1, 48));
        assert_eq!(p.data(), img.data.as_slice());
    }

    #[test]
    fn non_divisible_geometry_is_rejected() {
        assert!(patchify(&ramp_image(10, 8, 1), 4).is_err());
    }

    #[test]
    fn tokenizer_layout() {
        let tok = Tokenizer {
            vocab_size: 1000,
            max_len: 77,
        };
        let ids = tok.tokenize("Hello").unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!((ids[0], ids[2]), (998, 999));
        let long = vec!["word"; 200].join(" ");
        let ids = tok.tokenize(&long).unwrap();
        assert_eq!(ids.len(), 77);
        assert_eq!(*ids.last().unwrap(), tok.eos());
        assert!(tok.tokenize("   ").is_err());
    }

    #[test]
    fn text_encoder_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let enc = TextEncoder::new(&mut ps, "text", small(), &mut rng).unwrap();
        let s = enc.encode(&ps, "walker").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.kind, SequenceKind::Text { eos: 2 });
        assert_eq!(select_global(&s), s.rows.row(2));
        let long = enc.encode(&ps, "a b c d e f g h").unwrap();
        assert_eq!(long.len(), 6);
        assert_eq!(enc.encode(&ps, "walker").unwrap(), s);
    }

    #[test]
    fn zeroed_residual_branches_leave_embedding_plus_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let cfg = small();
        let enc = ImageEncoder::new(&mut ps, "image", cfg.clone(), &mut rng).unwrap();
        for l in &enc.layers {
            *ps.get_mut(l.attn.w_o) = Mat::zeros(8, 8);
            *ps.get_mut(l.fc_out.weight) = Mat::zeros(16, 8);
        }
        let img = ramp_image(8, 4, 2);
        let seq = enc.encode(&ps, &img).unwrap();
        assert_eq!(seq.len(), cfg.num_patches() + 1);

        let patches = patchify(&img, 4).unwrap();
        let emb = patches.matmul(ps.get(enc.patch_embed.weight));
        let pos = ps.get(enc.pos);
        for c in 0..8 {
            let want = ps.get(enc.cls).get(0, c) + pos.get(0, c);
            assert!((seq.rows.get(0, c) - want).abs() < 1e-12);
        }
        for r in 0..cfg.num_patches() {
            for c in 0..8 {
                let want = emb.get(r, c) + pos.get(r + 1, c);
                assert!((seq.rows.get(r + 1, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn image_geometry_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let enc = ImageEncoder::new(&mut ps, "image", small(), &mut rng).unwrap();
        assert!(enc.encode(&ps, &ramp_image(4, 4, 2)).is_err());
    }

    #[test]
    fn bundle_sequence_conversion() {
        let b = FeatureBundle::from_f64(
            Modality::Text,
            &[9.0, 9.0],
            &[vec![1.0, 1.0], vec![2.0, 2.0]],
        )
        .unwrap();
        let s = TokenSequence::from_bundle(&b);
        assert_eq!(s.kind, SequenceKind::Text { eos: 2 });
        assert_eq!(select_global(&s), vec![9.0, 9.0]);
        assert!(s.to_bundle().unwrap().bit_eq(&b));

        let img = b.clone().with_modality(Modality::Image);
        let s = TokenSequence::from_bundle(&img);
        assert_eq!(s.rows.row(0), &[9.0, 9.0]);
        assert!(s.to_bundle().unwrap().bit_eq(&img));
    }
}
