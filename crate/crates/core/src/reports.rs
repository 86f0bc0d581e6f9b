//! Tabular exports: ω sweeps, mixed tokens, attention heatmaps and 2-D
//! projections. Every CSV starts with a `schema_version` column.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{bail_arg, GeaError, Result};
use crate::feature_store::DatasetManifest;
use crate::gif::attention_heatmap;
use crate::model::{prepare_sample, GeaModel};
use crate::par::{self, Execution};
use crate::projection::project_2d;
use crate::retrieval::{evaluate, RetrievalReport};
use crate::tensor::Mat;
use crate::tgte::mix_tokens;

pub const CSV_SCHEMA_VERSION: u32 = 1;

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| GeaError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> GeaError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => GeaError::io(path, io),
        other => GeaError::parse(path.display().to_string(), format!("{other:?}")),
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| GeaError::parse("json output", e))?;
    fs::write(path, json).map_err(|e| GeaError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub schema_version: u32,
    pub omega: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
}

impl From<&RetrievalReport> for SweepRow {
    fn from(r: &RetrievalReport) -> Self {
        SweepRow {
            schema_version: CSV_SCHEMA_VERSION,
            omega: r.omega,
            rank1: r.rank1,
            rank5: r.rank5,
            rank10: r.rank10,
            map: r.map,
        }
    }
}

/// One evaluation per ω, in the given order.
pub fn omega_sweep(
    manifest: &DatasetManifest,
    model: &GeaModel,
    omegas: &[f64],
    rerank_fused: bool,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if omegas.is_empty() {
        bail_arg!("omega sweep needs at least one value");
    }
    omegas
        .iter()
        .map(|&w| evaluate(manifest, model, w, rerank_fused, exec).map(|r| SweepRow::from(&r)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixedToken {
    pub schema_version: u32,
    pub sample_id: String,
    pub identity: u32,
    pub omega: f64,
    /// Space-separated components of the mixed global text token.
    pub values: String,
}

/// Mixed text global tokens `(1-ω)·t + ω·g` for every record, in the
/// model's projected space. Records without a generated feature keep `t`.
pub fn mix_manifest(
    manifest: &DatasetManifest,
    model: &GeaModel,
    omega: f64,
    exec: Execution,
) -> Result<Vec<(String, u32, Vec<f64>)>> {
    if !(0.0..=1.0).contains(&omega) {
        bail_arg!("omega {omega} outside [0, 1]");
    }
    par::try_map(exec, &manifest.records, |s| {
        let p = prepare_sample(model, s)?;
        let text = model.text_sequence(&p.text)?;
        let t = text.rows.row(text.global_index()).to_vec();
        let mixed = match &p.generated {
            Some(g) => mix_tokens(&t, model.generated_sequence(g).rows.row(0), omega)?,
            None => t,
        };
        Ok((s.sample_id.clone(), s.identity.0, mixed))
    })
}

pub fn mixed_token_rows(mixed: &[(String, u32, Vec<f64>)], omega: f64) -> Vec<MixedToken> {
    mixed
        .iter()
        .map(|(id, ident, v)| MixedToken {
            schema_version: CSV_SCHEMA_VERSION,
            sample_id: id.clone(),
            identity: *ident,
            omega,
            values: v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" "),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapCell {
    pub schema_version: u32,
    pub sample_id: String,
    pub branch: Branch,
    pub query_index: usize,
    pub key_index: usize,
    pub weight: f64,
}

/// Head-averaged cross-attention of one sample's image or text sequence
/// over its generated tokens.
pub fn sample_heatmap(
    manifest: &DatasetManifest,
    model: &GeaModel,
    sample_id: &str,
    branch: Branch,
) -> Result<Mat> {
    let s = manifest
        .records
        .iter()
        .find(|r| r.sample_id == sample_id)
        .ok_or_else(|| GeaError::Validation(format!("sample {sample_id} not in manifest")))?;
    let p = prepare_sample(model, s)?;
    let g = p
        .generated
        .as_ref()
        .ok_or_else(|| GeaError::Validation(format!("sample {sample_id} has no generated feature")))?;
    let keys = model.generated_sequence(g).rows;
    let (query, params) = match branch {
        Branch::Image => (model.image_sequence(&p.image).rows, &model.gif.image_branch),
        Branch::Text => (model.text_sequence(&p.text)?.rows, &model.gif.text_branch),
    };
    // The module applies its pre-norms before attending; show what it sees.
    let normed = |x: &Mat, ln: &crate::layers::LayerNorm| {
        let mut t = crate::autodiff::Tape::new(&model.params);
        let v = t.constant(x.clone());
        let out = ln.forward(&mut t, v);
        t.value(out).clone()
    };
    attention_heatmap(
        &model.params,
        &params.cross,
        &normed(&query, &params.ln_query),
        &normed(&keys, &params.ln_generated),
    )
}

pub fn heatmap_rows(sample_id: &str, branch: Branch, weights: &Mat) -> Vec<HeatmapCell> {
    let mut rows = Vec::with_capacity(weights.len());
    for q in 0..weights.rows() {
        for k in 0..weights.cols() {
            rows.push(HeatmapCell {
                schema_version: CSV_SCHEMA_VERSION,
                sample_id: sample_id.to_string(),
                branch,
                query_index: q,
                key_index: k,
                weight: weights.get(q, k),
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectedPoint {
    pub schema_version: u32,
    pub sample_id: String,
    pub modality: String,
    pub identity: u32,
    pub x: f64,
    pub y: f64,
}

/// Image, text and mixed ("fused") global tokens of every record projected
/// jointly onto their top two principal axes.
pub fn project_manifest(
    manifest: &DatasetManifest,
    model: &GeaModel,
    omega: f64,
    exec: Execution,
) -> Result<Vec<ProjectedPoint>> {
    let mixed = mix_manifest(manifest, model, omega, exec)?;
    let mut labels = Vec::new();
    let mut points = Vec::new();
    for (s, (_, _, m)) in manifest.records.iter().zip(&mixed) {
        let p = prepare_sample(model, s)?;
        let text = model.text_sequence(&p.text)?;
        let image = model.image_sequence(&p.image);
        for (modality, v) in [
            ("image", image.rows.row(0).to_vec()),
            ("text", text.rows.row(text.global_index()).to_vec()),
            ("fused", m.clone()),
        ] {
            labels.push((s.sample_id.clone(), modality, s.identity.0));
            points.push(v);
        }
    }
    let proj = project_2d(&points)?;
    Ok(labels
        .into_iter()
        .zip(proj.coords)
        .map(|((sample_id, modality, identity), [x, y])| ProjectedPoint {
            schema_version: CSV_SCHEMA_VERSION,
            sample_id,
            modality: modality.to_string(),
            identity,
            x,
            y,
        })
        .collect())
}
