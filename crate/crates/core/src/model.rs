//! The trainable retrieval model: projection heads in front of the cosine
//! score, an optional text encoder, and the fusion branches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::{EncoderConfig, SequenceKind, TextEncoder, TokenSequence};
use crate::error::{bail_arg, GeaError, Result};
use crate::feature_store::{DatasetManifest, IdentityLabel, Sample};
use crate::gif::{GifConfig, GifParams};
use crate::layers::Linear;
use crate::params::{ParamGroup, ParamSet};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Present when some samples carry raw text only.
    pub text_encoder: Option<EncoderConfig>,
    pub gif: GifConfig,
    pub init_seed: u64,
}

#[derive(Debug, Clone)]
pub struct GeaModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    /// Shared by original and generated image features.
    pub image_proj: Linear,
    pub text_proj: Linear,
    pub text_encoder: Option<TextEncoder>,
    pub gif: GifParams,
}

impl GeaModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let d = config.embed_dim;
        if d == 0 {
            bail_arg!("embed_dim must be positive");
        }
        if config.gif.dim != d {
            bail_arg!("fusion dim {} must equal embed_dim {d}", config.gif.dim);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamSet::new();
        let image_proj = Linear::new(&mut params, "proj.image", ParamGroup::Backbone, Mat::identity(d), false);
        let text_proj = Linear::new(&mut params, "proj.text", ParamGroup::Backbone, Mat::identity(d), false);
        let text_encoder = match &config.text_encoder {
            Some(ec) => {
                if ec.embed_dim != d {
                    bail_arg!("text encoder dim {} must equal embed_dim {d}", ec.embed_dim);
                }
                Some(TextEncoder::new(&mut params, "text_encoder", ec.clone(), &mut rng)?)
            }
            None => None,
        };
        let gif = GifParams::new(&mut params, config.gif.clone(), &mut rng)?;
        Ok(GeaModel {
            config,
            params,
            image_proj,
            text_proj,
            text_encoder,
            gif,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }
}

/// Text input of one sample: frozen features or token ids for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum TextInput {
    Features(Mat),
    Tokens(Vec<usize>),
}

/// Model inputs for one sample, built once per dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub identity: IdentityLabel,
    /// `[cls; tokens]`.
    pub image: Mat,
    pub text: TextInput,
    /// `[cls; tokens]` of the generated image, if any.
    pub generated: Option<Mat>,
}

pub fn prepare_sample(model: &GeaModel, s: &Sample) -> Result<PreparedSample> {
    let image = TokenSequence::from_bundle(&s.image).rows;
    let text = match (&s.text_feature, &model.text_encoder) {
        (Some(tf), _) => TextInput::Features(TokenSequence::from_bundle(tf).rows),
        (None, Some(enc)) => TextInput::Tokens(enc.tokenizer().tokenize(&s.text)?),
        (None, None) => {
            return Err(GeaError::Validation(format!(
                "sample {} has no text features and the model has no text encoder",
                s.sample_id
            )))
        }
    };
    let generated = s.generated.as_ref().map(|g| TokenSequence::from_bundle(g).rows);
    Ok(PreparedSample {
        identity: s.identity,
        image,
        text,
        generated,
    })
}

pub fn prepare_manifest(model: &GeaModel, m: &DatasetManifest) -> Result<Vec<PreparedSample>> {
    if m.embedding_dim != model.embed_dim() {
        return Err(GeaError::Validation(format!(
            "manifest embedding_dim {} does not match model {}",
            m.embedding_dim,
            model.embed_dim()
        )));
    }
    m.records.iter().map(|s| prepare_sample(model, s)).collect()
}

/// Tape nodes produced for one sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleVars {
    pub image_seq: Var,
    pub text_seq: Var,
    pub text_eos: usize,
    pub generated_seq: Option<Var>,
    /// 1×d global tokens.
    pub image_global: Var,
    pub text_global: Var,
    pub generated_global: Option<Var>,
}

impl GeaModel {
    pub fn record_text(&self, t: &mut Tape<'_>, text: &TextInput) -> Result<(Var, usize)> {
        let seq = match text {
            TextInput::Features(m) => t.constant(m.clone()),
            TextInput::Tokens(ids) => match &self.text_encoder {
                Some(enc) => enc.forward(t, ids),
                None => bail_arg!("token input but the model has no text encoder"),
            },
        };
        let eos = t.value(seq).rows() - 1;
        let projected = self.text_proj.forward(t, seq);
        Ok((projected, eos))
    }

    pub fn record_image(&self, t: &mut Tape<'_>, rows: &Mat) -> Var {
        let x = t.constant(rows.clone());
        self.image_proj.forward(t, x)
    }

    /// Projected sequences and global tokens of one sample.
    pub fn record_sample(&self, t: &mut Tape<'_>, s: &PreparedSample) -> Result<SampleVars> {
        let image_seq = self.record_image(t, &s.image);
        let (text_seq, text_eos) = self.record_text(t, &s.text)?;
        let generated_seq = s.generated.as_ref().map(|g| self.record_image(t, g));
        let image_global = t.row(image_seq, 0);
        let text_global = t.row(text_seq, text_eos);
        let generated_global = generated_seq.map(|g| t.row(g, 0));
        Ok(SampleVars {
            image_seq,
            text_seq,
            text_eos,
            generated_seq,
            image_global,
            text_global,
            generated_global,
        })
    }

    /// Fused `(v^f, t^f)` for an image sequence and a text sequence that
    /// share one generated sequence.
    pub fn record_fusion(
        &self,
        t: &mut Tape<'_>,
        image_seq: Var,
        text_seq: Var,
        text_eos: usize,
        generated_seq: Var,
    ) -> (Var, Var) {
        let vf = self.gif.image_branch.fuse(t, image_seq, generated_seq, 0);
        let tf = self.gif.text_branch.fuse(t, text_seq, generated_seq, text_eos);
        (vf, tf)
    }

    /// Projected image sequence (inference).
    pub fn image_sequence(&self, rows: &Mat) -> TokenSequence {
        let mut t = Tape::new(&self.params);
        let v = self.record_image(&mut t, rows);
        TokenSequence {
            rows: t.value(v).clone(),
            kind: SequenceKind::Image,
        }
    }

    pub fn generated_sequence(&self, rows: &Mat) -> TokenSequence {
        TokenSequence {
            kind: SequenceKind::Generated,
            ..self.image_sequence(rows)
        }
    }

    /// Projected text sequence (inference).
    pub fn text_sequence(&self, text: &TextInput) -> Result<TokenSequence> {
        let mut t = Tape::new(&self.params);
        let (v, eos) = self.record_text(&mut t, text)?;
        Ok(TokenSequence {
            rows: t.value(v).clone(),
            kind: SequenceKind::Text { eos },
        })
    }
}
