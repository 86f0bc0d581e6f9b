//! Text-to-image retrieval metrics: Rank-k and mean average precision.
//!
//! Queries are texts, the gallery is images. Gallery items are ranked by
//! descending score; equal scores keep the lower gallery index first.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail_arg, Result};
use crate::feature_store::{DatasetManifest, IdentityLabel};
use crate::gif::{fuse_image, fuse_text};
use crate::model::{prepare_sample, GeaModel};
use crate::par::{self, Execution};
use crate::tensor::Mat;
use crate::tgte::{cosine_matrix, cosine_similarity, mix_tokens};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub schema_version: u32,
    /// Percentages in [0, 100].
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    /// Fraction in [0, 1].
    pub map: f64,
    /// 1-based rank of each query's best-ranked positive.
    pub per_query_ranks: Vec<usize>,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub omega: f64,
    pub rerank_fused: bool,
    pub config_digest: String,
}

impl RetrievalReport {
    /// Fixed-width table with two decimals, metrics as percentages.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<8}{:>8}\n", "metric", "value"));
        for (name, v) in [
            ("R-1", self.rank1),
            ("R-5", self.rank5),
            ("R-10", self.rank10),
            ("mAP", self.map * 100.0),
        ] {
            s.push_str(&format!("{name:<8}{v:>8.2}\n"));
        }
        s
    }
}

/// Gallery order for one query: descending score, ties by lower index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn check_inputs(scores: &Mat, relevance: &[Vec<bool>]) -> Result<()> {
    if scores.rows() != relevance.len() {
        bail_arg!("{} score rows vs {} relevance rows", scores.rows(), relevance.len());
    }
    for (q, rel) in relevance.iter().enumerate() {
        if rel.len() != scores.cols() {
            bail_arg!("query {q}: relevance has {} entries for {} gallery items", rel.len(), scores.cols());
        }
        if !rel.iter().any(|&r| r) {
            bail_arg!("query {q} has no positive in the gallery");
        }
    }
    Ok(())
}

/// 0-based position of the best-ranked positive for every query.
pub fn first_hit_positions(scores: &Mat, relevance: &[Vec<bool>]) -> Result<Vec<usize>> {
    check_inputs(scores, relevance)?;
    Ok((0..scores.rows())
        .map(|q| {
            ranking(scores.row(q))
                .iter()
                .position(|&g| relevance[q][g])
                .expect("checked: at least one positive")
        })
        .collect())
}

/// Rank-k percentages for each `k` in `ks`.
pub fn rank_k(scores: &Mat, relevance: &[Vec<bool>], ks: &[usize]) -> Result<Vec<f64>> {
    if let Some(&max_k) = ks.iter().max() {
        if max_k > scores.cols() {
            bail_arg!("gallery of {} is smaller than k={max_k}", scores.cols());
        }
    }
    if ks.contains(&0) {
        bail_arg!("k must be >= 1");
    }
    let hits = first_hit_positions(scores, relevance)?;
    Ok(rank_k_from_hits(&hits, ks))
}

fn rank_k_from_hits(hits: &[usize], ks: &[usize]) -> Vec<f64> {
    let n = hits.len() as f64;
    ks.iter()
        .map(|&k| 100.0 * hits.iter().filter(|&&h| h < k).count() as f64 / n)
        .collect()
}

fn average_precision(order: &[usize], relevant: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (pos, &g) in order.iter().enumerate() {
        if relevant[g] {
            found += 1;
            sum += found as f64 / (pos + 1) as f64;
        }
    }
    sum / found as f64
}

pub fn mean_average_precision(scores: &Mat, relevance: &[Vec<bool>]) -> Result<f64> {
    check_inputs(scores, relevance)?;
    let aps = per_query_ap(scores, relevance, Execution::Sequential);
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

fn per_query_ap(scores: &Mat, relevance: &[Vec<bool>], exec: Execution) -> Vec<f64> {
    par::map_range(exec, scores.rows(), |q| {
        average_precision(&ranking(scores.row(q)), &relevance[q])
    })
}

/// Scores, relevance and labels for one evaluation.
#[derive(Debug, Clone)]
pub struct ScoredRetrieval {
    /// Queries × gallery.
    pub scores: Mat,
    pub relevance: Vec<Vec<bool>>,
    pub query_ids: Vec<IdentityLabel>,
    pub gallery_ids: Vec<IdentityLabel>,
}

/// Metrics over a precomputed score matrix. `k` values larger than the
/// gallery saturate at the gallery size.
pub fn report_from_scores(
    scored: &ScoredRetrieval,
    omega: f64,
    rerank_fused: bool,
    config_digest: String,
    exec: Execution,
) -> Result<RetrievalReport> {
    let hits = first_hit_positions(&scored.scores, &scored.relevance)?;
    let g = scored.scores.cols();
    let ks: Vec<usize> = [1, 5, 10].iter().map(|&k| k.min(g)).collect();
    let r = rank_k_from_hits(&hits, &ks);
    let aps = per_query_ap(&scored.scores, &scored.relevance, exec);
    Ok(RetrievalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        rank1: r[0],
        rank5: r[1],
        rank10: r[2],
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        per_query_ranks: hits.iter().map(|h| h + 1).collect(),
        num_queries: scored.scores.rows(),
        num_gallery: g,
        omega,
        rerank_fused,
        config_digest,
    })
}

/// Query × gallery scores for a manifest. The gallery holds each distinct
/// image reference once; every record contributes one text query.
pub fn score_manifest(
    manifest: &DatasetManifest,
    model: &GeaModel,
    omega: f64,
    rerank_fused: bool,
    exec: Execution,
) -> Result<ScoredRetrieval> {
    if manifest.is_empty() {
        bail_arg!("manifest has no records to evaluate");
    }
    if !(0.0..=1.0).contains(&omega) {
        bail_arg!("omega {omega} outside [0, 1]");
    }
    let prepared = par::try_map(exec, &manifest.records, |s| prepare_sample(model, s))?;

    let mut gallery_of_ref: HashMap<&str, usize> = HashMap::new();
    let mut gallery: Vec<usize> = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        gallery_of_ref.entry(r.image_ref.as_str()).or_insert_with(|| {
            gallery.push(i);
            gallery.len() - 1
        });
    }
    let gallery_ids: Vec<IdentityLabel> = gallery.iter().map(|&i| prepared[i].identity).collect();
    let query_ids: Vec<IdentityLabel> = prepared.iter().map(|p| p.identity).collect();

    let image_seqs = par::map(exec, &gallery, |&i| model.image_sequence(&prepared[i].image));
    let text_seqs = par::try_map(exec, &prepared, |p| model.text_sequence(&p.text))?;
    let gen_seqs = par::map(exec, &prepared, |p| {
        p.generated.as_ref().map(|g| model.generated_sequence(g))
    });

    let gallery_vecs: Vec<Vec<f64>> = image_seqs.iter().map(|s| s.rows.row(0).to_vec()).collect();
    let query_vecs = (0..prepared.len())
        .map(|q| {
            let t = text_seqs[q].rows.row(text_seqs[q].global_index());
            match &gen_seqs[q] {
                // No generated feature: the query falls back to omega = 0.
                Some(g) => mix_tokens(t, g.rows.row(0), omega),
                None => Ok(t.to_vec()),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scores = cosine_matrix(&query_vecs, &gallery_vecs)?;

    if rerank_fused {
        let fused = par::try_map_range(exec, prepared.len(), |q| -> Result<Vec<Option<f64>>> {
            let Some(g) = &gen_seqs[q] else {
                return Ok(vec![None; gallery.len()]);
            };
            let tf = fuse_text(&model.params, &model.gif, &text_seqs[q], g)?;
            image_seqs
                .iter()
                .map(|img| {
                    let vf = fuse_image(&model.params, &model.gif, img, g)?;
                    cosine_similarity(&tf, &vf).map(Some)
                })
                .collect()
        })?;
        for (q, row) in fused.iter().enumerate() {
            for (g, f) in row.iter().enumerate() {
                if let Some(f) = f {
                    scores.set(q, g, 0.5 * (scores.get(q, g) + f));
                }
            }
        }
    }

    let relevance = query_ids
        .iter()
        .map(|q| gallery_ids.iter().map(|g| g == q).collect())
        .collect();
    Ok(ScoredRetrieval {
        scores,
        relevance,
        query_ids,
        gallery_ids,
    })
}

/// Digest over the model configuration, parameter bits and eval settings.
pub fn eval_digest(model: &GeaModel, omega: f64, rerank_fused: bool) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.config).unwrap_or_default());
    for (_, p) in model.params.iter() {
        h.update(p.name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.update(omega.to_le_bytes());
    h.update([rerank_fused as u8]);
    hex_string(&h.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn evaluate(
    manifest: &DatasetManifest,
    model: &GeaModel,
    omega: f64,
    rerank_fused: bool,
    exec: Execution,
) -> Result<RetrievalReport> {
    evaluate_scored(manifest, model, omega, rerank_fused, exec).map(|(r, _)| r)
}

/// Like [`evaluate`], also returning the score matrix it ranked.
pub fn evaluate_scored(
    manifest: &DatasetManifest,
    model: &GeaModel,
    omega: f64,
    rerank_fused: bool,
    exec: Execution,
) -> Result<(RetrievalReport, ScoredRetrieval)> {
    let scored = score_manifest(manifest, model, omega, rerank_fused, exec)?;
    let digest = eval_digest(model, omega, rerank_fused);
    let report = report_from_scores(&scored, omega, rerank_fused, digest, exec)?;
    Ok((report, scored))
}
