//! Training loop, optimizer, learning-rate schedule and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::encoders::{EncoderConfig, TokenSequence};
use crate::error::{bail_arg, GeaError, Result};
use crate::feature_store::{DatasetManifest, IdentityLabel};
use crate::flow_sampler::{DeskGenerator, GenerationConfig};
use crate::gif::GifConfig;
use crate::model::{prepare_sample, GeaModel, ModelConfig, PreparedSample};
use crate::par::{self, Execution};
use crate::params::{Grads, ParamGroup, ParamSet};
use crate::retrieval::{evaluate, hex_string, RetrievalReport};
use crate::tal::{tal_with_grad, SimilarityMatrix, TalConfig};
use crate::tensor::Mat;
use crate::tgte::{cosine_matrix, cosine_matrix_backward, mix_tokens, omega_at, MixSchedule};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GEAC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Baseline,
    TgteOnly,
    GifOnly,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Baseline,
        Ablation::TgteOnly,
        Ablation::GifOnly,
        Ablation::Full,
    ];

    pub fn uses_mixing(self) -> bool {
        matches!(self, Ablation::TgteOnly | Ablation::Full)
    }

    pub fn uses_fusion(self) -> bool {
        matches!(self, Ablation::GifOnly | Ablation::Full)
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::TgteOnly => "tgte_only",
            Ablation::GifOnly => "gif_only",
            Ablation::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    /// Cosine from the base rate down to `decay_floor × base` at the last epoch.
    #[default]
    Cosine,
    Constant,
}

/// What to do with samples that have no generated feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingGenerated {
    /// Run the desk flow sampler once per text and cache the result.
    #[default]
    Sample,
    /// Substitute a single all-zero token.
    Zero,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Architecture knobs not fixed by the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub fusion_heads: usize,
    pub fusion_layers: usize,
    pub mlp_ratio: usize,
    /// Used only when some records have no precomputed text features.
    pub text_encoder: EncoderConfig,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            fusion_heads: 8,
            fusion_layers: 6,
            mlp_ratio: 4,
            text_encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_backbone: f64,
    pub lr_fusion: f64,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub tal: TalConfig,
    /// Overrides `tal` for the fusion loss only.
    pub fusion_tal: Option<TalConfig>,
    pub mix: MixSchedule,
    pub ablation: Ablation,
    pub seed: u64,
    pub decay: Decay,
    pub decay_floor: f64,
    /// P in the P×Q identity-aware sampler; Q = batch_size / P.
    pub identities_per_batch: usize,
    pub adam: AdamConfig,
    pub model: ModelSettings,
    pub execution: Execution,
    pub missing_generated: MissingGenerated,
    pub generation: GenerationConfig,
    /// Mix weight used at evaluation; defaults to `mix.omega_end` when
    /// mixing is enabled and 0 otherwise.
    pub eval_omega: Option<f64>,
    pub rerank_fused: bool,
    pub max_steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 60,
            lr_backbone: 1e-5,
            lr_fusion: 1e-4,
            warmup_epochs: 5,
            warmup_start_lr: 1e-6,
            tal: TalConfig::default(),
            fusion_tal: None,
            mix: MixSchedule::default(),
            ablation: Ablation::Full,
            seed: 0,
            decay: Decay::Cosine,
            decay_floor: 0.1,
            identities_per_batch: 16,
            adam: AdamConfig::default(),
            model: ModelSettings::default(),
            execution: Execution::Parallel,
            missing_generated: MissingGenerated::Sample,
            generation: GenerationConfig::default(),
            eval_omega: None,
            rerank_fused: false,
            max_steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings for the synthetic fixture: 30 epochs, a single
    /// fusion layer and rates far above the full-scale defaults, which
    /// assume pretrained encoders.
    pub fn desk(ablation: Ablation, seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            warmup_epochs: 2,
            lr_backbone: 3e-3,
            lr_fusion: 3e-3,
            warmup_start_lr: 3e-4,
            mix: MixSchedule {
                total_epochs: 30,
                ..MixSchedule::default()
            },
            ablation,
            seed,
            model: ModelSettings {
                fusion_layers: 1,
                mlp_ratio: 2,
                ..ModelSettings::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            bail_arg!("epochs and batch_size must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            bail_arg!("warmup_epochs {} must be < epochs {}", self.warmup_epochs, self.epochs);
        }
        self.tal.validate()?;
        if let Some(t) = &self.fusion_tal {
            t.validate()?;
        }
        let rates = [self.lr_backbone, self.lr_fusion, self.warmup_start_lr];
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            bail_arg!("learning rates must be finite and non-negative");
        }
        if self.identities_per_batch == 0 || !self.batch_size.is_multiple_of(self.identities_per_batch) {
            bail_arg!(
                "batch_size {} must be a multiple of identities_per_batch {}",
                self.batch_size,
                self.identities_per_batch
            );
        }
        if !(0.0..=1.0).contains(&self.decay_floor) {
            bail_arg!("decay_floor must lie in [0, 1]");
        }
        if let Some(w) = self.eval_omega {
            if !(0.0..=1.0).contains(&w) {
                bail_arg!("eval_omega {w} outside [0, 1]");
            }
        }
        self.tal.validate()?;
        self.mix.validate()?;
        self.generation.validate()
    }

    pub fn eval_omega(&self) -> f64 {
        match self.eval_omega {
            Some(w) => w,
            None if self.ablation.uses_mixing() => self.mix.omega_end,
            None => 0.0,
        }
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_string(&Sha256::digest(&json))
    }

    fn base_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Fusion => self.lr_fusion,
        }
    }
}

/// Per-epoch learning rate of a parameter group.
///
/// Warm-up runs linearly from `warmup_start_lr` (scaled by the group's
/// ratio to the backbone rate) to the group's base rate, which is reached
/// at epoch `warmup_epochs`. After that the configured decay applies.
pub fn lr_at(config: &TrainConfig, epoch: usize, group: ParamGroup) -> Result<f64> {
    if epoch >= config.epochs {
        bail_arg!("epoch {epoch} outside [0, {})", config.epochs);
    }
    let base = config.base_lr(group);
    let w = config.warmup_epochs;
    if epoch < w {
        let start = if config.lr_backbone > 0.0 {
            config.warmup_start_lr * base / config.lr_backbone
        } else {
            config.warmup_start_lr
        };
        return Ok(start + (base - start) * epoch as f64 / w as f64);
    }
    match config.decay {
        Decay::Constant => Ok(base),
        Decay::Cosine => {
            let span = config.epochs - 1 - w;
            if span == 0 {
                return Ok(base);
            }
            let p = (epoch - w) as f64 / span as f64;
            let floor = config.decay_floor;
            Ok(base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Mat> = params
            .iter()
            .map(|(_, p)| Mat::zeros(p.value.rows(), p.value.cols()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One Adam update. Parameters whose group rate is zero are left
    /// untouched; parameters without a gradient are skipped entirely.
    pub fn apply(
        &mut self,
        params: &mut ParamSet,
        grads: &Grads,
        cfg: &AdamConfig,
        lr: impl Fn(ParamGroup) -> f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (id, p) in params.iter_mut() {
            let Some(g) = grads.get(id) else { continue };
            let rate = lr(p.group);
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let w = p.value.data_mut();
            for k in 0..w.len() {
                let gk = g.data()[k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                if rate != 0.0 {
                    let mh = m[k] / bc1;
                    let vh = v[k] / bc2;
                    w[k] -= rate * mh / (vh.sqrt() + cfg.eps);
                }
            }
        }
    }
}

/// P identities × Q samples per batch, reshuffled every call.
///
/// Identities with fewer than Q samples contribute all of them; a trailing
/// group of fewer than P identities is dropped unless it is the only one.
pub fn identity_batches(
    ids: &[IdentityLabel],
    identities_per_batch: usize,
    samples_per_identity: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if identities_per_batch == 0 || samples_per_identity == 0 {
        bail_arg!("sampler needs P >= 1 and Q >= 1");
    }
    let mut by_id: BTreeMap<IdentityLabel, Vec<usize>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        by_id.entry(*id).or_default().push(i);
    }
    let mut identities: Vec<IdentityLabel> = by_id.keys().copied().collect();
    identities.shuffle(rng);
    let mut batches = Vec::new();
    for chunk in identities.chunks(identities_per_batch) {
        if chunk.len() < identities_per_batch && !batches.is_empty() {
            break;
        }
        let mut batch = Vec::with_capacity(chunk.len() * samples_per_identity);
        for id in chunk {
            let mut members = by_id[id].clone();
            members.shuffle(rng);
            batch.extend(members.into_iter().take(samples_per_identity));
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub align: f64,
    pub fusion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
}

impl From<&RetrievalReport> for EvalSummary {
    fn from(r: &RetrievalReport) -> Self {
        EvalSummary {
            rank1: r.rank1,
            rank5: r.rank5,
            rank10: r.rank10,
            map: r.map,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub omega: f64,
    pub lr_backbone: f64,
    pub lr_fusion: f64,
    pub step_losses: Vec<f64>,
    pub mean_loss: f64,
    pub eval: Option<EvalSummary>,
}

/// Mutable training state: model, optimizer, sampler RNG, progress.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: GeaModel,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
    pub best_map: Option<f64>,
}

pub fn model_config_for(manifest: &DatasetManifest, config: &TrainConfig) -> ModelConfig {
    let d = manifest.embedding_dim;
    let needs_text_encoder = manifest.records.iter().any(|r| r.text_feature.is_none());
    ModelConfig {
        embed_dim: d,
        text_encoder: needs_text_encoder.then(|| EncoderConfig {
            embed_dim: d,
            ..config.model.text_encoder.clone()
        }),
        gif: GifConfig {
            dim: d,
            heads: config.model.fusion_heads,
            layers: config.model.fusion_layers,
            mlp_ratio: config.model.mlp_ratio,
        },
        init_seed: config.seed,
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, model_config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let model = GeaModel::new(model_config)?;
        let adam = AdamState::new(&model.params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
        Ok(Trainer {
            config,
            model,
            adam,
            epoch: 0,
            step: 0,
            rng,
            history: Vec::new(),
            best_map: None,
        })
    }

    pub fn for_manifest(config: TrainConfig, manifest: &DatasetManifest) -> Result<Self> {
        let mc = model_config_for(manifest, &config);
        Self::new(config, mc)
    }

    /// Model inputs with the missing-generated policy applied.
    pub fn prepare(&self, manifest: &DatasetManifest) -> Result<Vec<PreparedSample>> {
        let d = self.model.embed_dim();
        if manifest.embedding_dim != d {
            return Err(GeaError::Validation(format!(
                "manifest embedding_dim {} does not match model {d}",
                manifest.embedding_dim
            )));
        }
        let generator = DeskGenerator::new(self.config.generation.clone(), d);
        par::try_map_range(self.config.execution, manifest.len(), |i| {
            let s = &manifest.records[i];
            let mut p = prepare_sample(&self.model, s)?;
            if p.generated.is_none() {
                p.generated = match self.config.missing_generated {
                    MissingGenerated::Zero => Some(Mat::zeros(1, d)),
                    MissingGenerated::Sample => {
                        let b = generator.generate(&s.text, i as u64)?;
                        Some(TokenSequence::from_bundle(&b).rows)
                    }
                    MissingGenerated::Error => {
                        return Err(GeaError::Validation(format!(
                            "sample {} has no generated feature",
                            s.sample_id
                        )))
                    }
                };
            }
            Ok(p)
        })
    }

    pub fn current_omega(&self) -> Result<f64> {
        if !self.config.ablation.uses_mixing() {
            return Ok(0.0);
        }
        let last = self.config.mix.total_epochs - 1;
        omega_at(&self.config.mix, self.epoch.min(last))
    }

    /// Forward, loss and gradients for one batch without updating anything.
    pub fn loss_and_grads(&self, batch: &[&PreparedSample]) -> Result<(StepLoss, Grads)> {
        let k = batch.len();
        if k == 0 {
            bail_arg!("empty batch");
        }
        let ablation = self.config.ablation;
        let omega = self.current_omega()?;
        let model = &self.model;
        let exec = self.config.execution;

        let recorded = par::try_map(exec, batch, |s| {
            let mut t = Tape::new(&model.params);
            let sv = model.record_sample(&mut t, s)?;
            let fused = if ablation.uses_fusion() {
                let g = sv.generated_seq.ok_or_else(|| {
                    GeaError::Validation("fusion requires a generated feature for every sample".into())
                })?;
                Some(model.record_fusion(&mut t, sv.image_seq, sv.text_seq, sv.text_eos, g))
            } else {
                None
            };
            Ok::<_, GeaError>((t, sv, fused))
        })?;

        let ids: Vec<IdentityLabel> = batch.iter().map(|s| s.identity).collect();
        let vec_of = |t: &Tape<'_>, v| t.value(v).data().to_vec();
        let images: Vec<Vec<f64>> = recorded.iter().map(|(t, sv, _)| vec_of(t, sv.image_global)).collect();
        let texts: Vec<Vec<f64>> = recorded.iter().map(|(t, sv, _)| vec_of(t, sv.text_global)).collect();
        let gens: Vec<Option<Vec<f64>>> = recorded
            .iter()
            .map(|(t, sv, _)| sv.generated_global.map(|g| vec_of(t, g)))
            .collect();
        let mixed = texts
            .iter()
            .zip(&gens)
            .map(|(t, g)| match g {
                Some(g) if omega > 0.0 => mix_tokens(t, g, omega),
                _ => Ok(t.clone()),
            })
            .collect::<Result<Vec<_>>>()?;

        let scores = cosine_matrix(&images, &mixed)?;
        let sim = SimilarityMatrix::new(scores, ids.clone(), ids.clone())?;
        let (align, g_sim) = tal_with_grad(&sim, &self.config.tal)?;
        let (d_img, d_mixed) = cosine_matrix_backward(&images, &mixed, sim.scores(), &g_sim);

        let mut fusion = None;
        let mut d_fused: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = None;
        if ablation.uses_fusion() {
            let vf: Vec<Vec<f64>> = recorded
                .iter()
                .map(|(t, _, f)| vec_of(t, f.expect("fusion recorded").0))
                .collect();
            let tf: Vec<Vec<f64>> = recorded
                .iter()
                .map(|(t, _, f)| vec_of(t, f.expect("fusion recorded").1))
                .collect();
            let fs = SimilarityMatrix::new(cosine_matrix(&vf, &tf)?, ids.clone(), ids)?;
            let (lf, g_f) = tal_with_grad(&fs, self.config.fusion_tal.as_ref().unwrap_or(&self.config.tal))?;
            fusion = Some(lf);
            d_fused = Some(cosine_matrix_backward(&vf, &tf, fs.scores(), &g_f));
        }

        let row = |v: &[f64]| Mat::row_vector(v);
        let per_sample = par::map_range(exec, k, |i| {
            let (tape, sv, fused) = &recorded[i];
            let mut seeds = vec![(sv.image_global, row(&d_img[i]))];
            let has_gen = gens[i].is_some() && omega > 0.0;
            let text_scale = if has_gen { 1.0 - omega } else { 1.0 };
            seeds.push((sv.text_global, row(&d_mixed[i]).scale(text_scale)));
            if has_gen {
                let g = sv.generated_global.expect("generated present");
                seeds.push((g, row(&d_mixed[i]).scale(omega)));
            }
            if let (Some((vf, tf)), Some((dv, dt))) = (fused, &d_fused) {
                seeds.push((*vf, row(&dv[i])));
                seeds.push((*tf, row(&dt[i])));
            }
            tape.backward(&seeds)
        });
        let mut grads = Grads::zeros_like(&model.params);
        for g in per_sample {
            grads.merge(g);
        }
        let total = align + fusion.unwrap_or(0.0);
        if !total.is_finite() {
            return Err(GeaError::Numeric(format!("non-finite loss {total}")));
        }
        Ok((
            StepLoss {
                total,
                align,
                fusion,
            },
            grads,
        ))
    }

    /// One optimizer step on `batch` at the current epoch's rates.
    pub fn train_step(&mut self, batch: &[&PreparedSample]) -> Result<StepLoss> {
        let (loss, grads) = self.loss_and_grads(batch)?;
        let lr_b = lr_at(&self.config, self.epoch, ParamGroup::Backbone)?;
        let lr_f = lr_at(&self.config, self.epoch, ParamGroup::Fusion)?;
        let cfg = self.config.adam.clone();
        self.adam.apply(&mut self.model.params, &grads, &cfg, |g| match g {
            ParamGroup::Backbone => lr_b,
            ParamGroup::Fusion => lr_f,
        });
        self.step += 1;
        Ok(loss)
    }

    /// Runs one epoch over `train` and evaluates on `val` when given.
    pub fn run_epoch(
        &mut self,
        train: &[PreparedSample],
        val: Option<&DatasetManifest>,
    ) -> Result<EpochRecord> {
        if self.epoch >= self.config.epochs {
            bail_arg!("training already finished {} epochs", self.config.epochs);
        }
        let omega = self.current_omega()?;
        let lr_backbone = lr_at(&self.config, self.epoch, ParamGroup::Backbone)?;
        let lr_fusion = lr_at(&self.config, self.epoch, ParamGroup::Fusion)?;
        let ids: Vec<IdentityLabel> = train.iter().map(|s| s.identity).collect();
        let p = self.config.identities_per_batch;
        let q = self.config.batch_size / p;
        let mut batches = identity_batches(&ids, p, q, &mut self.rng)?;
        if let Some(max) = self.config.max_steps_per_epoch {
            batches.truncate(max);
        }
        let mut step_losses = Vec::with_capacity(batches.len());
        for b in &batches {
            let refs: Vec<&PreparedSample> = b.iter().map(|&i| &train[i]).collect();
            step_losses.push(self.train_step(&refs)?.total);
        }
        let eval = match val {
            Some(v) => {
                let r = evaluate(v, &self.model, self.config.eval_omega(), self.config.rerank_fused, self.config.execution)?;
                Some(EvalSummary::from(&r))
            }
            None => None,
        };
        let mean_loss = if step_losses.is_empty() {
            0.0
        } else {
            step_losses.iter().sum::<f64>() / step_losses.len() as f64
        };
        let record = EpochRecord {
            epoch: self.epoch,
            omega,
            lr_backbone,
            lr_fusion,
            step_losses,
            mean_loss,
            eval,
        };
        self.history.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                model_config: self.model.config.clone(),
                train_config: self.config.clone(),
                config_digest: self.config.digest(),
                epoch: self.epoch,
                step: self.step,
                adam_step: self.adam.step,
                rng_seed: hex_string(&self.rng.get_seed()),
                rng_word_pos: self.rng.get_word_pos().to_string(),
                history: self.history.clone(),
                best_map: self.best_map,
                params: self
                    .model
                    .params
                    .iter()
                    .map(|(_, p)| ParamEntry {
                        name: p.name.clone(),
                        group: p.group,
                        rows: p.value.rows(),
                        cols: p.value.cols(),
                    })
                    .collect(),
            },
            params: self.model.params.iter().map(|(_, p)| p.value.clone()).collect(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let h = &ckpt.header;
        let mut trainer = Trainer::new(h.train_config.clone(), h.model_config.clone())?;
        let model_params = &mut trainer.model.params;
        if model_params.len() != h.params.len() {
            return Err(GeaError::Validation(format!(
                "checkpoint has {} parameters, model expects {}",
                h.params.len(),
                model_params.len()
            )));
        }
        for ((id, p), entry) in model_params.iter_mut().zip(&h.params) {
            if p.name != entry.name || p.value.shape() != (entry.rows, entry.cols) {
                return Err(GeaError::Validation(format!(
                    "checkpoint parameter {} ({}x{}) does not match model {} {:?}",
                    entry.name, entry.rows, entry.cols, p.name, p.value.shape()
                )));
            }
            p.value = ckpt.params[id.index()].clone();
        }
        trainer.adam = AdamState {
            step: h.adam_step,
            m: ckpt.adam_m.clone(),
            v: ckpt.adam_v.clone(),
        };
        let seed = parse_hex32(&h.rng_seed)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        let pos: u128 = h
            .rng_word_pos
            .parse()
            .map_err(|e| GeaError::parse("checkpoint rng_word_pos", e))?;
        rng.set_word_pos(pos);
        trainer.rng = rng;
        trainer.epoch = h.epoch;
        trainer.step = h.step;
        trainer.history = h.history.clone();
        trainer.best_map = h.best_map;
        Ok(trainer)
    }
}

fn parse_hex32(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(GeaError::parse("checkpoint rng_seed", "expected 64 hex digits"));
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|e| GeaError::parse("checkpoint rng_seed", e))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub config_digest: String,
    pub epoch: usize,
    pub step: u64,
    pub adam_step: u64,
    pub rng_seed: String,
    pub rng_word_pos: String,
    pub history: Vec<EpochRecord>,
    pub best_map: Option<f64>,
    pub params: Vec<ParamEntry>,
}

/// Everything needed to resume training bit-exactly.
///
/// On disk: `"GEAC" | version u32 | header_len u64 | header JSON |` then
/// parameters, Adam first moments and Adam second moments as raw
/// little-endian `f64`, in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Mat>,
    pub adam_m: Vec<Mat>,
    pub adam_v: Vec<Mat>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for m in self.params.iter().chain(&self.adam_m).chain(&self.adam_v) {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ctx = "checkpoint";
        if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(GeaError::parse(ctx, "missing GEAC magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(GeaError::parse(ctx, format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| GeaError::parse(ctx, "truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| GeaError::parse(ctx, e))?;
        let mut cursor = 16 + hlen;
        let mut read_block = || -> Result<Vec<Mat>> {
            header
                .params
                .iter()
                .map(|p| {
                    let n = p.rows * p.cols;
                    let raw = bytes
                        .get(cursor..cursor + 8 * n)
                        .ok_or_else(|| GeaError::parse(ctx, format!("truncated data for {}", p.name)))?;
                    cursor += 8 * n;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Ok(Mat::from_vec(p.rows, p.cols, data))
                })
                .collect()
        };
        let params = read_block()?;
        let adam_m = read_block()?;
        let adam_v = read_block()?;
        if cursor != bytes.len() {
            return Err(GeaError::parse(ctx, "trailing bytes after parameter data"));
        }
        Ok(Checkpoint {
            header,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| GeaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| GeaError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The model stored in this checkpoint.
    pub fn model(&self) -> Result<GeaModel> {
        Ok(Trainer::from_checkpoint(self)?.model)
    }
}

#[derive(Debug, Default)]
pub struct FitOptions<'a> {
    pub val: Option<&'a DatasetManifest>,
    /// Run directory; when set, config, checkpoints and history are written.
    pub out_dir: Option<&'a Path>,
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed epochs (total, not additional).
    pub stop_after: Option<usize>,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub trainer: Trainer,
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

pub const RUN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
struct RunConfigFile<'a> {
    schema_version: u32,
    config_digest: String,
    config: &'a TrainConfig,
}

pub fn run_paths(out_dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    (
        out_dir.join("config.json"),
        out_dir.join("checkpoints").join("last.geac"),
        out_dir.join("checkpoints").join("best.geac"),
        out_dir.join("reports").join("history.json"),
    )
}

/// Trains on `train`, keeping the best-by-mAP checkpoint (the last one
/// when there is no validation set).
pub fn fit(train: &DatasetManifest, config: &TrainConfig, opts: FitOptions<'_>) -> Result<FitOutcome> {
    if train.is_empty() {
        bail_arg!("training manifest is empty");
    }
    let mut trainer = match &opts.resume {
        Some(ckpt) => Trainer::from_checkpoint(ckpt)?,
        None => Trainer::for_manifest(config.clone(), train)?,
    };
    let prepared = trainer.prepare(train)?;
    if let Some(dir) = opts.out_dir {
        let (cfg_path, last, _, hist) = run_paths(dir);
        for d in [dir.to_path_buf(), last.parent().unwrap().into(), hist.parent().unwrap().into()] {
            fs::create_dir_all(&d).map_err(|e| GeaError::io(&d, e))?;
        }
        let file = RunConfigFile {
            schema_version: RUN_SCHEMA_VERSION,
            config_digest: trainer.config.digest(),
            config: &trainer.config,
        };
        let json = serde_json::to_string_pretty(&file).expect("config serializes");
        fs::write(&cfg_path, json).map_err(|e| GeaError::io(&cfg_path, e))?;
    }
    let mut best = trainer.checkpoint();
    let stop = opts.stop_after.unwrap_or(trainer.config.epochs).min(trainer.config.epochs);
    while trainer.epoch < stop {
        let rec = trainer.run_epoch(&prepared, opts.val)?;
        log::info!(
            "epoch {} loss {:.4} omega {:.3}{}",
            rec.epoch,
            rec.mean_loss,
            rec.omega,
            rec.eval
                .as_ref()
                .map(|e| format!(" R-1 {:.2} mAP {:.2}", e.rank1, e.map * 100.0))
                .unwrap_or_default()
        );
        let improved = match (&rec.eval, trainer.best_map) {
            (Some(e), Some(b)) => e.map > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if let Some(e) = &rec.eval {
            if improved {
                trainer.best_map = Some(e.map);
            }
        }
        let ckpt = trainer.checkpoint();
        if improved {
            best = ckpt.clone();
        }
        if let Some(dir) = opts.out_dir {
            let (_, last, best_path, hist) = run_paths(dir);
            ckpt.save(&last)?;
            if improved {
                ckpt.save(&best_path)?;
            }
            let json = serde_json::json!({
                "schema_version": RUN_SCHEMA_VERSION,
                "history": trainer.history,
            });
            fs::write(&hist, serde_json::to_string_pretty(&json).expect("history serializes"))
                .map_err(|e| GeaError::io(&hist, e))?;
        }
    }
    let history = trainer.history.clone();
    Ok(FitOutcome {
        trainer,
        best,
        history,
    })
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub tgte: bool,
    pub gif: bool,
    pub report: RetrievalReport,
}

/// Trains every ablation setting from the same config and evaluates the
/// final model on `test`.
pub fn run_ablation(
    train: &DatasetManifest,
    test: &DatasetManifest,
    config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    Ablation::ALL
        .iter()
        .map(|&ablation| {
            let cfg = TrainConfig {
                ablation,
                ..config.clone()
            };
            let out = fit(train, &cfg, FitOptions::default())?;
            let report = evaluate(
                test,
                &out.trainer.model,
                cfg.eval_omega(),
                cfg.rerank_fused,
                cfg.execution,
            )?;
            Ok(AblationRow {
                ablation,
                tgte: ablation.uses_mixing(),
                gif: ablation.uses_fusion(),
                report,
            })
        })
        .collect()
}
