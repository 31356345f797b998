//! Retrieval evaluation: feature extraction over galleries, score fusion,
//! Rank-k accuracy, the per-stream ablation report, and WAM inspection.
//! Captions form the probe set and images the gallery set.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{tokenize, DatasetRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{FeatureBundle, Model, SimilarityTriple};

/// Feature store over the gallery images of one checkpoint.
#[derive(Serialize, Deserialize)]
pub struct GalleryIndex {
    pub bundles: Vec<FeatureBundle>,
    pub identities: Vec<u32>,
}

/// Probe-side features: one entry per caption.
#[derive(Serialize, Deserialize)]
pub struct QuerySet {
    pub bundles: Vec<FeatureBundle>,
    pub identities: Vec<u32>,
    pub captions: Vec<String>,
}

/// Overall pair score: the unweighted sum of the three stream similarities.
pub fn fuse_scores(triple: &SimilarityTriple) -> f64 {
    triple.global + triple.parts + triple.relations
}

/// Fraction of queries whose top-k gallery list contains the query identity.
/// `scores[q][g]` is the fused score of query q against gallery image g; ties
/// break toward the lower gallery index.
pub fn rank_k(
    scores: &[Vec<f64>],
    query_identities: &[u32],
    gallery_identities: &[u32],
    k: usize,
) -> Result<f64> {
    assert!(k >= 1, "k must be >= 1");
    if gallery_identities.is_empty() {
        return Err(Error::data("empty gallery"));
    }
    if scores.is_empty() {
        return Err(Error::data("no queries"));
    }
    let mut hits = 0usize;
    for (row, &qid) in scores.iter().zip(query_identities) {
        let mut order: Vec<usize> = (0..gallery_identities.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite scores").then(a.cmp(&b)));
        if order.iter().take(k).any(|&g| gallery_identities[g] == qid) {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.len() as f64)
}

/// Rank-1/5/10 for one score matrix.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RankAccuracies {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
}

fn rank_accuracies(scores: &[Vec<f64>], query_ids: &[u32], gallery_ids: &[u32]) -> Result<RankAccuracies> {
    Ok(RankAccuracies {
        rank1: rank_k(scores, query_ids, gallery_ids, 1)?,
        rank5: rank_k(scores, query_ids, gallery_ids, 5)?,
        rank10: rank_k(scores, query_ids, gallery_ids, 10)?,
    })
}

/// Cumulative per-stream ablation: global only, global+parts, all three.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct StreamAblation {
    pub global: RankAccuracies,
    pub global_parts: RankAccuracies,
    pub full: RankAccuracies,
}

/// The metrics artifact written by `evaluate`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub num_queries: usize,
    pub num_gallery: usize,
    pub streams: StreamAblation,
}

/// One query's ranked gallery, for the retrieval CLI.
#[derive(Debug, Clone, Serialize)]
pub struct RetrievalResult {
    pub caption: String,
    /// (gallery index, identity, fused score), best first.
    pub ranking: Vec<(usize, u32, f64)>,
}

fn forward_bundle_visual(model: &Model, record: &DatasetRecord) -> Result<FeatureBundle> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let image = record.image.load(None)?;
    let bundle = model.forward_visual(&mut tape, &vars, &image)?;
    Ok(crate::model::extract(&tape, &bundle))
}

fn forward_bundle_text(model: &Model, vocab: &Vocabulary, caption: &str) -> Result<FeatureBundle> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let tokens = tokenize(caption, vocab, model.config.max_caption_len)?;
    let (bundle, _) = model.forward_text(&mut tape, &vars, &tokens)?;
    Ok(crate::model::extract(&tape, &bundle))
}

fn records_digest(records: &[DatasetRecord]) -> String {
    let mut hasher = Sha256::new();
    for r in records {
        hasher.update(r.identity_id.to_le_bytes());
        for c in &r.captions {
            hasher.update(c.as_bytes());
        }
    }
    format!("{:x}", hasher.finalize())
}

/// Optional feature cache rooted at `$SSANKIT_CACHE`, keyed by parameter hash
/// and split content, so repeated evaluations of one checkpoint skip the
/// forward passes.
fn cache_path(params_hash: Option<&str>, records: &[DatasetRecord], kind: &str) -> Option<PathBuf> {
    let root = std::env::var_os("SSANKIT_CACHE")?;
    let hash = params_hash?;
    Some(PathBuf::from(root).join(format!("{hash}-{}-{kind}.json", records_digest(records))))
}

fn cache_read<T: for<'de> Deserialize<'de>>(path: &Option<PathBuf>) -> Option<T> {
    let path = path.as_ref()?;
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}

fn cache_write<T: Serialize>(path: &Option<PathBuf>, value: &T) {
    if let Some(path) = path {
        if let Some(dir) = path.parent() {
            let _ = std::fs::create_dir_all(dir);
        }
        if let Ok(json) = serde_json::to_string(value) {
            let _ = std::fs::write(path, json);
        }
    }
}

/// Extract every gallery image bundle once.
pub fn build_gallery(
    model: &Model,
    records: &[DatasetRecord],
    params_hash: Option<&str>,
) -> Result<GalleryIndex> {
    let cache = cache_path(params_hash, records, "gallery");
    if let Some(hit) = cache_read::<GalleryIndex>(&cache) {
        if hit.bundles.len() == records.len() {
            return Ok(hit);
        }
    }
    let bundles = records
        .iter()
        .map(|r| forward_bundle_visual(model, r))
        .collect::<Result<Vec<_>>>()?;
    let index = GalleryIndex {
        bundles,
        identities: records.iter().map(|r| r.identity_id).collect(),
    };
    cache_write(&cache, &index);
    Ok(index)
}

/// Extract every caption bundle once; one query per caption.
pub fn build_queries(
    model: &Model,
    vocab: &Vocabulary,
    records: &[DatasetRecord],
    params_hash: Option<&str>,
) -> Result<QuerySet> {
    let cache = cache_path(params_hash, records, "queries");
    if let Some(hit) = cache_read::<QuerySet>(&cache) {
        return Ok(hit);
    }
    let mut bundles = Vec::new();
    let mut identities = Vec::new();
    let mut captions = Vec::new();
    for r in records {
        for c in &r.captions {
            bundles.push(forward_bundle_text(model, vocab, c)?);
            identities.push(r.identity_id);
            captions.push(c.clone());
        }
    }
    let set = QuerySet {
        bundles,
        identities,
        captions,
    };
    cache_write(&cache, &set);
    Ok(set)
}

/// Full evaluation over a split: every caption queries every gallery image;
/// reports fused Rank-1/5/10 plus the cumulative stream ablation. Query
/// identities missing from the gallery are counted as automatic misses.
pub fn evaluate(
    model: &Model,
    vocab: &Vocabulary,
    records: &[DatasetRecord],
    params_hash: Option<&str>,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::data("empty evaluation split"));
    }
    let gallery = build_gallery(model, records, params_hash)?;
    let queries = build_queries(model, vocab, records, params_hash)?;
    let mut s_global = Vec::with_capacity(queries.bundles.len());
    let mut s_parts = Vec::with_capacity(queries.bundles.len());
    let mut s_full = Vec::with_capacity(queries.bundles.len());
    for q in &queries.bundles {
        let mut row_g = Vec::with_capacity(gallery.bundles.len());
        let mut row_l = Vec::with_capacity(gallery.bundles.len());
        let mut row_f = Vec::with_capacity(gallery.bundles.len());
        for g in &gallery.bundles {
            let triple = q.similarity(g)?;
            row_g.push(triple.global);
            row_l.push(triple.global + triple.parts);
            row_f.push(fuse_scores(&triple));
        }
        s_global.push(row_g);
        s_parts.push(row_l);
        s_full.push(row_f);
    }
    let streams = StreamAblation {
        global: rank_accuracies(&s_global, &queries.identities, &gallery.identities)?,
        global_parts: rank_accuracies(&s_parts, &queries.identities, &gallery.identities)?,
        full: rank_accuracies(&s_full, &queries.identities, &gallery.identities)?,
    };
    Ok(EvalReport {
        rank1: streams.full.rank1,
        rank5: streams.full.rank5,
        rank10: streams.full.rank10,
        num_queries: queries.bundles.len(),
        num_gallery: gallery.bundles.len(),
        streams,
    })
}

/// Same pipeline as [`evaluate`], applied to an unseen-domain split; words
/// outside the source vocabulary fall back to the unknown token in
/// `tokenize`, so no retraining or vocabulary rebuild is needed.
pub fn cross_domain_evaluate(
    model: &Model,
    vocab: &Vocabulary,
    target_records: &[DatasetRecord],
    params_hash: Option<&str>,
) -> Result<EvalReport> {
    evaluate(model, vocab, target_records, params_hash)
}

/// Convenience wrapper: load a checkpoint directory and evaluate a split.
pub fn evaluate_checkpoint(dir: &Path, records: &[DatasetRecord]) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(dir)?;
    let hash = Checkpoint::params_hash(dir)?;
    evaluate(&ckpt.model, &ckpt.vocab, records, Some(&hash))
}

/// Rank the gallery for one free-text caption.
pub fn retrieve(
    model: &Model,
    vocab: &Vocabulary,
    gallery: &GalleryIndex,
    caption: &str,
    top_k: usize,
) -> Result<RetrievalResult> {
    if gallery.bundles.is_empty() {
        return Err(Error::data("empty gallery"));
    }
    let q = forward_bundle_text(model, vocab, caption)?;
    let mut ranking: Vec<(usize, u32, f64)> = gallery
        .bundles
        .iter()
        .enumerate()
        .map(|(i, g)| Ok((i, gallery.identities[i], fuse_scores(&q.similarity(g)?))))
        .collect::<Result<_>>()?;
    ranking.sort_by(|a, b| b.2.partial_cmp(&a.2).expect("finite scores").then(a.0.cmp(&b.0)));
    ranking.truncate(top_k);
    Ok(RetrievalResult {
        caption: caption.to_string(),
        ranking,
    })
}

/// Word-part membership scores of one caption, for inspection tooling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WamReport {
    pub tokens: Vec<String>,
    /// `(K, n)` scores in (0,1): row k holds part k's score for each word.
    pub scores: Vec<Vec<f64>>,
}

pub fn wam_inspect(model: &Model, vocab: &Vocabulary, caption: &str) -> Result<WamReport> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let tokens = tokenize(caption, vocab, model.config.max_caption_len)?;
    let (_, scores) = model.forward_text(&mut tape, &vars, &tokens)?;
    let matrix = tape.value(scores);
    let (k, n) = (matrix.shape()[0], matrix.shape()[1]);
    let scores = (0..k)
        .map(|i| (0..n).map(|j| matrix[[i, j]]).collect())
        .collect();
    Ok(WamReport {
        tokens: tokens.tokens,
        scores,
    })
}
