//! Samples, identities and precomputed feature bundles.
//!
//! Feature files use a fixed little-endian layout:
//!
//! ```text
//! "GEAF" | version: u32 = 1 | L: u32 | d: u32 | (L + 1) * d f32 values
//! ```
//!
//! The global token comes first, followed by the `L` sequence tokens in
//! order. A manifest reference is either a path (relative paths resolve
//! against the manifest's directory) or `inline:<base64 of the file bytes>`.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{GeaError, Result};
use crate::par::{self, Execution};

pub const FEATURE_MAGIC: &[u8; 4] = b"GEAF";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const INLINE_PREFIX: &str = "inline:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentityLabel(pub u32);

impl fmt::Display for IdentityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
    Generated,
}

/// One sample's features in one modality: a global token plus `L` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    modality: Modality,
    dim: usize,
    global: Vec<f32>,
    tokens: Vec<f32>,
}

impl FeatureBundle {
    /// `tokens` is row-major with `tokens.len() % global.len() == 0`.
    pub fn new(modality: Modality, global: Vec<f32>, tokens: Vec<f32>) -> Result<Self> {
        let dim = global.len();
        if dim == 0 {
            return Err(GeaError::Validation("feature bundle has dimension 0".into()));
        }
        if !tokens.len().is_multiple_of(dim) {
            return Err(GeaError::Validation(format!(
                "token payload of {} values is not a multiple of d={dim}",
                tokens.len()
            )));
        }
        if !global.iter().chain(&tokens).all(|v| v.is_finite()) {
            return Err(GeaError::Numeric("feature bundle contains NaN or Inf".into()));
        }
        Ok(FeatureBundle {
            modality,
            dim,
            global,
            tokens,
        })
    }

    pub fn from_f64(modality: Modality, global: &[f64], tokens: &[Vec<f64>]) -> Result<Self> {
        let g = global.iter().map(|&v| v as f32).collect();
        let t = tokens.iter().flatten().map(|&v| v as f32).collect();
        Self::new(modality, g, t)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of sequence tokens `L` (the global token is not counted).
    pub fn num_tokens(&self) -> usize {
        self.tokens.len() / self.dim
    }

    pub fn global(&self) -> &[f32] {
        &self.global
    }

    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    pub fn global_f64(&self) -> Vec<f64> {
        self.global.iter().map(|&v| v as f64).collect()
    }

    /// Bit-level equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &FeatureBundle) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.modality == other.modality
            && self.dim == other.dim
            && bits(&self.global) == bits(&other.global)
            && bits(&self.tokens) == bits(&other.tokens)
    }
}

pub fn encode_bundle(bundle: &FeatureBundle) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (bundle.global.len() + bundle.tokens.len()));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(bundle.num_tokens() as u32).to_le_bytes());
    out.extend_from_slice(&(bundle.dim as u32).to_le_bytes());
    for v in bundle.global.iter().chain(&bundle.tokens) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_bundle(bytes: &[u8], expected_dim: usize, modality: Modality) -> Result<FeatureBundle> {
    let ctx = "feature file";
    if bytes.len() < HEADER_LEN {
        return Err(GeaError::parse(ctx, format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(GeaError::parse(ctx, format!("bad magic {:?}", &bytes[0..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(GeaError::parse(ctx, format!("unsupported version {version}")));
    }
    let len = word(8) as usize;
    let dim = word(12) as usize;
    if dim == 0 {
        return Err(GeaError::parse(ctx, "declared dimension 0"));
    }
    if dim != expected_dim {
        return Err(GeaError::Validation(format!(
            "feature dimension {dim} does not match expected {expected_dim}"
        )));
    }
    let count = (len + 1)
        .checked_mul(dim)
        .ok_or_else(|| GeaError::parse(ctx, "header size overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(GeaError::parse(
            ctx,
            format!("payload has {} bytes, header implies {}", payload.len(), count * 4),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GeaError::Numeric("feature payload contains NaN or Inf".into()));
    }
    let tokens = values[dim..].to_vec();
    let mut global = values;
    global.truncate(dim);
    FeatureBundle::new(modality, global, tokens)
}

/// A manifest reference to a feature bundle, kept verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureRef(String);

impl FeatureRef {
    pub fn new(raw: impl Into<String>) -> Self {
        FeatureRef(raw.into())
    }

    pub fn inline(bundle: &FeatureBundle) -> Self {
        let b64 = base64::engine::general_purpose::STANDARD.encode(encode_bundle(bundle));
        FeatureRef(format!("{INLINE_PREFIX}{b64}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_inline(&self) -> bool {
        self.0.starts_with(INLINE_PREFIX)
    }

    pub fn resolve(&self, base_dir: &Path) -> PathBuf {
        let p = Path::new(&self.0);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    }
}

pub fn load_feature_bundle(
    reference: &FeatureRef,
    base_dir: &Path,
    expected_dim: usize,
    modality: Modality,
) -> Result<FeatureBundle> {
    if let Some(b64) = reference.0.strip_prefix(INLINE_PREFIX) {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b64)
            .map_err(|e| GeaError::parse("inline feature", e))?;
        return decode_bundle(&bytes, expected_dim, modality);
    }
    let path = reference.resolve(base_dir);
    let bytes = fs::read(&path).map_err(|e| GeaError::io(&path, e))?;
    decode_bundle(&bytes, expected_dim, modality)
}

pub fn write_feature_bundle(bundle: &FeatureBundle, path: &Path) -> Result<()> {
    fs::write(path, encode_bundle(bundle)).map_err(|e| GeaError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One image-text pair with its loaded features.
#[derive(Debug, Clone)]
pub struct Sample {
    pub sample_id: String,
    pub identity: IdentityLabel,
    pub text: String,
    pub image_ref: FeatureRef,
    pub generated_ref: Option<FeatureRef>,
    /// Optional precomputed text features; when absent, the text encoder runs.
    pub text_feature_ref: Option<FeatureRef>,
    pub image: Arc<FeatureBundle>,
    pub generated: Option<Arc<FeatureBundle>>,
    pub text_feature: Option<Arc<FeatureBundle>>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub embedding_dim: usize,
    pub split: Split,
    pub records: Vec<Sample>,
    /// Directory relative feature paths resolve against.
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub sample_id: String,
    pub identity: u32,
    pub text: String,
    pub image_feature: String,
    pub generated_feature: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_feature: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub embedding_dim: usize,
    pub split: Split,
    pub records: Vec<RecordEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.identity)
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn to_file(&self) -> ManifestFile {
        ManifestFile {
            embedding_dim: self.embedding_dim,
            split: self.split,
            records: self
                .records
                .iter()
                .map(|r| RecordEntry {
                    sample_id: r.sample_id.clone(),
                    identity: r.identity.0,
                    text: r.text.clone(),
                    image_feature: r.image_ref.0.clone(),
                    generated_feature: r.generated_ref.as_ref().map(|g| g.0.clone()),
                    text_feature: r.text_feature_ref.as_ref().map(|g| g.0.clone()),
                })
                .collect(),
        }
    }
}

pub fn write_manifest(file: &ManifestFile, path: &Path) -> Result<()> {
    let mut value = serde_json::to_value(file).map_err(|e| GeaError::parse("manifest", e))?;
    value["schema_version"] = MANIFEST_SCHEMA_VERSION.into();
    let json = serde_json::to_string_pretty(&value).map_err(|e| GeaError::parse("manifest", e))?;
    fs::write(path, json).map_err(|e| GeaError::io(path, e))
}

pub fn parse_manifest_file(text: &str) -> Result<ManifestFile> {
    let root: serde_json::Value =
        serde_json::from_str(text).map_err(|e| GeaError::parse("manifest", e))?;
    let obj = root
        .as_object()
        .ok_or_else(|| GeaError::parse("manifest", "top level is not an object"))?;
    let embedding_dim = obj
        .get("embedding_dim")
        .and_then(|v| v.as_u64())
        .filter(|&d| d > 0)
        .ok_or_else(|| GeaError::parse("manifest", "embedding_dim must be a positive integer"))?
        as usize;
    let split: Split = serde_json::from_value(
        obj.get("split")
            .cloned()
            .ok_or_else(|| GeaError::parse("manifest", "missing split"))?,
    )
    .map_err(|e| GeaError::parse("manifest.split", e))?;
    let raw_records = obj
        .get("records")
        .and_then(|v| v.as_array())
        .ok_or_else(|| GeaError::parse("manifest", "records must be an array"))?;
    let mut records = Vec::with_capacity(raw_records.len());
    for (i, rec) in raw_records.iter().enumerate() {
        let label = rec
            .get("sample_id")
            .and_then(|s| s.as_str())
            .map_or_else(|| format!("records[{i}]"), |s| format!("records[{i}] ({s})"));
        let entry: RecordEntry =
            serde_json::from_value(rec.clone()).map_err(|e| GeaError::parse(label, e))?;
        records.push(entry);
    }
    Ok(ManifestFile {
        embedding_dim,
        split,
        records,
    })
}

/// Reads, parses and fully validates a manifest, loading every feature file.
pub fn ingest_manifest(path: &Path) -> Result<DatasetManifest> {
    ingest_manifest_with(path, Execution::Parallel)
}

pub fn ingest_manifest_with(path: &Path, exec: Execution) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| GeaError::io(path, e))?;
    let file = parse_manifest_file(&text)?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest_from_file(file, base_dir, exec)
}

pub fn manifest_from_file(
    file: ManifestFile,
    base_dir: PathBuf,
    exec: Execution,
) -> Result<DatasetManifest> {
    let dim = file.embedding_dim;
    let mut seen = HashSet::new();
    for r in &file.records {
        if !seen.insert(r.sample_id.as_str()) {
            return Err(GeaError::Validation(format!("duplicate sample_id {}", r.sample_id)));
        }
        if r.text.trim().is_empty() {
            return Err(GeaError::Validation(format!("sample {}: empty text", r.sample_id)));
        }
    }
    let ids: BTreeSet<u32> = file.records.iter().map(|r| r.identity).collect();
    if let Some(&max) = ids.last() {
        if max as usize + 1 != ids.len() {
            return Err(GeaError::Validation(format!(
                "identity labels are not dense: {} distinct ids but max id {max}",
                ids.len()
            )));
        }
    }

    let load = |r: &RecordEntry, raw: &str, modality: Modality| -> Result<Arc<FeatureBundle>> {
        load_feature_bundle(&FeatureRef::new(raw), &base_dir, dim, modality)
            .map(Arc::new)
            .map_err(|e| GeaError::Validation(format!("sample {}: {e}", r.sample_id)))
    };
    let records = par::try_map(exec, &file.records, |r| {
        let image = load(r, &r.image_feature, Modality::Image)?;
        let generated = r
            .generated_feature
            .as_deref()
            .map(|g| load(r, g, Modality::Generated))
            .transpose()?;
        let text_feature = r
            .text_feature
            .as_deref()
            .map(|g| load(r, g, Modality::Text))
            .transpose()?;
        Ok(Sample {
            sample_id: r.sample_id.clone(),
            identity: IdentityLabel(r.identity),
            text: r.text.clone(),
            image_ref: FeatureRef::new(r.image_feature.clone()),
            generated_ref: r.generated_feature.clone().map(FeatureRef::new),
            text_feature_ref: r.text_feature.clone().map(FeatureRef::new),
            image,
            generated,
            text_feature,
        })
    })?;
    Ok(DatasetManifest {
        embedding_dim: dim,
        split: file.split,
        records,
        base_dir,
    })
}
