//! Rectified-flow sampling of generated features.
//!
//! A latent starts at `z_1 ~ N(0, I)` and is integrated with explicit Euler
//! steps `z_{t-dt} = z_t - dt * v(z_t, t, c)` down to `t = 0`, then decoded.
//! The velocity field and decoder are traits so a real generator can be
//! attached; the desk implementations here are deterministic and cheap.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, GeaError, Result};
use crate::feature_store::{
    write_feature_bundle, write_manifest, DatasetManifest, FeatureBundle, FeatureRef, Modality,
};
use crate::hashing::{fnv1a, words};
use crate::par::{self, Execution};
use crate::tensor::Mat;

const TIME_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub t: f64,
}

impl LatentState {
    pub fn new(z: Vec<f64>, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            bail_arg!("flow time {t} outside [0, 1]");
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(GeaError::Numeric("latent contains NaN or Inf".into()));
        }
        Ok(LatentState { z, t })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    /// Recorded for provenance only; no pixels are produced.
    pub width: u32,
    pub height: u32,
    pub positive_suffix: String,
    pub negative_prompt: String,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            steps: 28,
            guidance_scale: 7.0,
            width: 1024,
            height: 336,
            positive_suffix: "pedestrian".into(),
            negative_prompt: "cartoon".into(),
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            bail_arg!("steps must be >= 1");
        }
        if !(self.guidance_scale >= 0.0) {
            bail_arg!("guidance_scale must be >= 0, got {}", self.guidance_scale);
        }
        Ok(())
    }
}

pub trait VelocityField: Sync {
    fn evaluate(&self, z: &[f64], t: f64, c: &[f64]) -> Vec<f64>;
}

pub trait Decoder: Sync {
    fn decode(&self, z0: &[f64]) -> Result<FeatureBundle>;
}

impl<F: Fn(&[f64], f64, &[f64]) -> Vec<f64> + Sync> VelocityField for F {
    fn evaluate(&self, z: &[f64], t: f64, c: &[f64]) -> Vec<f64> {
        self(z, t, c)
    }
}

/// One Euler step backwards in flow time.
pub fn euler_step(
    state: &LatentState,
    field: &dyn VelocityField,
    c: &[f64],
    dt: f64,
) -> Result<LatentState> {
    if !(dt >= 0.0) {
        bail_arg!("dt must be non-negative, got {dt}");
    }
    if state.t - dt < -TIME_SLACK {
        bail_arg!("step dt={dt} overshoots t={}", state.t);
    }
    if dt == 0.0 {
        return Ok(state.clone());
    }
    let v = field.evaluate(&state.z, state.t, c);
    check_velocity(&v, state.z.len())?;
    let z = state.z.iter().zip(&v).map(|(z, v)| z - dt * v).collect();
    Ok(LatentState {
        z,
        t: (state.t - dt).max(0.0),
    })
}

fn check_velocity(v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(GeaError::Numeric(format!(
            "velocity has dimension {}, latent has {dim}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(GeaError::Numeric("velocity field returned NaN or Inf".into()));
    }
    Ok(())
}

/// Classifier-free guidance: `v_u + g * (v_c - v_u)`.
pub fn guided_velocity(
    field: &dyn VelocityField,
    z: &[f64],
    t: f64,
    c_cond: &[f64],
    c_uncond: &[f64],
    g: f64,
) -> Result<Vec<f64>> {
    if !(g >= 0.0) {
        bail_arg!("guidance scale must be >= 0, got {g}");
    }
    let vc = field.evaluate(z, t, c_cond);
    let vu = field.evaluate(z, t, c_uncond);
    check_velocity(&vc, z.len())?;
    check_velocity(&vu, z.len())?;
    Ok(vu.iter().zip(&vc).map(|(u, c)| u + g * (c - u)).collect())
}

struct Guided<'a> {
    field: &'a dyn VelocityField,
    uncond: &'a [f64],
    scale: f64,
}

impl VelocityField for Guided<'_> {
    fn evaluate(&self, z: &[f64], t: f64, c: &[f64]) -> Vec<f64> {
        let vc = self.field.evaluate(z, t, c);
        let vu = self.field.evaluate(z, t, self.uncond);
        if vc.len() != vu.len() {
            return vec![f64::NAN; z.len()];
        }
        vu.iter().zip(&vc).map(|(u, c)| u + self.scale * (c - u)).collect()
    }
}

pub fn initial_latent(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Full guided Euler trajectory from `t = 1` to `t = 0`, endpoints included.
pub fn sample_trajectory(
    config: &GenerationConfig,
    field: &dyn VelocityField,
    latent_dim: usize,
    c_cond: &[f64],
    c_uncond: &[f64],
) -> Result<Vec<LatentState>> {
    config.validate()?;
    let guided = Guided {
        field,
        uncond: c_uncond,
        scale: config.guidance_scale,
    };
    let steps = config.steps;
    let dt = 1.0 / steps as f64;
    let mut state = LatentState::new(initial_latent(latent_dim, config.seed), 1.0)?;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(state.clone());
    for k in 0..steps {
        state = euler_step(&state, &guided, c_cond, dt)?;
        // Pin the grid so the final time is exactly zero.
        state.t = (steps - k - 1) as f64 / steps as f64;
        out.push(state.clone());
    }
    Ok(out)
}

/// Integrates the guided flow and decodes `z_0` into a generated bundle.
pub fn sample(
    config: &GenerationConfig,
    field: &dyn VelocityField,
    decoder: &dyn Decoder,
    latent_dim: usize,
    c_cond: &[f64],
    c_uncond: &[f64],
) -> Result<FeatureBundle> {
    let traj = sample_trajectory(config, field, latent_dim, c_cond, c_uncond)?;
    let z0 = &traj.last().expect("at least one state").z;
    Ok(decoder.decode(z0)?.with_modality(Modality::Generated))
}

/// Positive prompt is the text plus `", " + suffix`; the negative prompt is fixed.
pub fn build_prompt(text: &str, config: &GenerationConfig) -> Result<(String, String)> {
    if text.trim().is_empty() {
        bail_arg!("prompt text is empty");
    }
    let positive = if config.positive_suffix.is_empty() {
        text.to_string()
    } else {
        format!("{text}, {}", config.positive_suffix)
    };
    Ok((positive, config.negative_prompt.clone()))
}

/// Bag-of-words hash embedding used as desk conditioning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashEmbedding {
    pub dim: usize,
}

impl HashEmbedding {
    /// Unit-norm sum of per-word Gaussian vectors seeded by the word hash.
    pub fn embed(&self, prompt: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for w in words(prompt) {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(w.as_bytes()));
            for a in acc.iter_mut() {
                *a += rng.sample::<f64, _>(StandardNormal);
            }
        }
        let n = crate::tensor::norm(&acc);
        if n > 0.0 {
            acc.iter_mut().for_each(|a| *a /= n);
        }
        acc
    }
}

/// Straight-line field towards the conditioning vector: `v = (z - c) / t`.
///
/// Euler integration of this field reaches `c` exactly at `t = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TargetField;

impl VelocityField for TargetField {
    fn evaluate(&self, z: &[f64], t: f64, c: &[f64]) -> Vec<f64> {
        let t = t.max(1e-12);
        z.iter().zip(c).map(|(z, c)| (z - c) / t).collect()
    }
}

/// Fixed seeded linear map from latent space to a bundle with `L = 1`.
#[derive(Debug, Clone)]
pub struct LinearDecoder {
    global_map: Mat,
    token_map: Mat,
}

impl LinearDecoder {
    pub fn new(latent_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (latent_dim as f64).sqrt();
        LinearDecoder {
            global_map: Mat::randn(latent_dim, embed_dim, std, &mut rng),
            token_map: Mat::randn(latent_dim, embed_dim, std, &mut rng),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.global_map.rows()
    }
}

impl Decoder for LinearDecoder {
    fn decode(&self, z0: &[f64]) -> Result<FeatureBundle> {
        if z0.len() != self.latent_dim() {
            bail_arg!("latent dim {} vs decoder {}", z0.len(), self.latent_dim());
        }
        let z = Mat::row_vector(z0);
        let g = z.matmul(&self.global_map);
        let t = z.matmul(&self.token_map);
        FeatureBundle::from_f64(Modality::Generated, g.data(), &[t.into_vec()])
    }
}

/// Desk generator: hash-embedded prompts, [`TargetField`], [`LinearDecoder`].
#[derive(Debug, Clone)]
pub struct DeskGenerator {
    pub config: GenerationConfig,
    pub embedding: HashEmbedding,
    pub decoder: LinearDecoder,
}

pub const DESK_LATENT_DIM: usize = 16;

impl DeskGenerator {
    pub fn new(config: GenerationConfig, embed_dim: usize) -> Self {
        let decoder = LinearDecoder::new(DESK_LATENT_DIM, embed_dim, config.seed ^ 0x9e37_79b9_7f4a_7c15);
        DeskGenerator {
            config,
            embedding: HashEmbedding {
                dim: DESK_LATENT_DIM,
            },
            decoder,
        }
    }

    /// Generates the bundle for one text; `index` decorrelates the noise of
    /// different records while keeping every call reproducible.
    pub fn generate(&self, text: &str, index: u64) -> Result<FeatureBundle> {
        let (positive, negative) = build_prompt(text, &self.config)?;
        let c_cond = self.embedding.embed(&positive);
        let c_uncond = self.embedding.embed(&negative);
        let cfg = GenerationConfig {
            seed: self.config.seed.wrapping_add(index),
            ..self.config.clone()
        };
        sample(&cfg, &TargetField, &self.decoder, DESK_LATENT_DIM, &c_cond, &c_uncond)
    }
}

/// Generates one bundle per record of `manifest` into `out_dir/generated`
/// and writes `out_dir/manifest.json` pointing at them. Other file
/// references are rewritten as absolute paths so the new manifest stands
/// alone.
pub fn generate_for_manifest(
    manifest: &DatasetManifest,
    config: &GenerationConfig,
    out_dir: &Path,
    exec: Execution,
) -> Result<PathBuf> {
    config.validate()?;
    let gen_dir = out_dir.join("generated");
    fs::create_dir_all(&gen_dir).map_err(|e| GeaError::io(&gen_dir, e))?;
    let generator = DeskGenerator::new(config.clone(), manifest.embedding_dim);
    let names = par::try_map_range(exec, manifest.len(), |i| {
        let r = &manifest.records[i];
        let bundle = generator.generate(&r.text, i as u64)?;
        let name = format!("generated/{}.geaf", r.sample_id);
        write_feature_bundle(&bundle, &out_dir.join(&name))?;
        Ok(name)
    })?;
    let absolute = |r: &FeatureRef| -> Result<String> {
        if r.is_inline() {
            return Ok(r.as_str().to_string());
        }
        let p = r.resolve(&manifest.base_dir);
        let abs = std::path::absolute(&p).map_err(|e| GeaError::io(&p, e))?;
        Ok(abs.to_string_lossy().into_owned())
    };
    let mut file = manifest.to_file();
    for ((entry, sample), name) in file.records.iter_mut().zip(&manifest.records).zip(names) {
        entry.image_feature = absolute(&sample.image_ref)?;
        entry.text_feature = sample.text_feature_ref.as_ref().map(absolute).transpose()?;
        entry.generated_feature = Some(name);
    }
    let path = out_dir.join("manifest.json");
    write_manifest(&file, &path)?;
    Ok(path)
}
