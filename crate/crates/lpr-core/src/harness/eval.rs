//! Gallery scoring and recall evaluation. Inference touches only the
//! alignment embeddings: `S = V_visual . I_visual^T + lambda * V_text . I_text^T`
//! over unit-normalized instance vectors, ranked descending with ties broken
//! toward lower gallery indices.

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

use super::config::TrainConfig;
use super::model;

/// Pre-computed gallery embeddings.
pub struct GalleryEmbeddings {
    pub visual: Array2<f64>,
    pub text: Option<Array2<f64>>,
}

/// Per-query ranked gallery indices and their scores (non-increasing).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingResult {
    pub order: Vec<Vec<usize>>,
    pub scores: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall_at: Vec<(usize, f64)>,
    pub r_mean: f64,
}

pub fn embed_gallery(
    store: &ParamStore,
    cfg: &TrainConfig,
    images: &Array3<f64>,
    titles: &[Vec<u32>],
) -> Result<GalleryEmbeddings> {
    let (visual, text) = model::embed_gallery(store, cfg, images, titles)?;
    Ok(GalleryEmbeddings { visual, text })
}

/// Score query embeddings against a pre-embedded gallery.
pub fn rank_queries(
    query_visual: &Array2<f64>,
    query_text: Option<&Array2<f64>>,
    gallery: &GalleryEmbeddings,
    lambda: f64,
) -> Result<RankingResult> {
    let g = gallery.visual.nrows();
    if g == 0 {
        return Err(Error::Input("empty gallery".into()));
    }
    let mut scores = query_visual.dot(&gallery.visual.t());
    if let (Some(qt), Some(gt)) = (query_text, &gallery.text) {
        scores = scores + qt.dot(&gt.t()) * lambda;
    }
    let mut order = Vec::with_capacity(scores.nrows());
    let mut ranked_scores = Vec::with_capacity(scores.nrows());
    for q in 0..scores.nrows() {
        let mut idx: Vec<usize> = (0..g).collect();
        idx.sort_by(|&a, &b| scores[[q, b]].total_cmp(&scores[[q, a]]).then(a.cmp(&b)));
        ranked_scores.push(idx.iter().map(|&i| scores[[q, i]]).collect());
        order.push(idx);
    }
    Ok(RankingResult { order, scores: ranked_scores })
}

/// Full inference for one query against raw gallery inputs.
#[allow(clippy::too_many_arguments)]
pub fn score_gallery(
    store: &ParamStore,
    cfg: &TrainConfig,
    query_clip: &Array3<f64>,
    query_tokens: &[u32],
    gallery_images: &Array3<f64>,
    gallery_titles: &[Vec<u32>],
    lambda: f64,
) -> Result<RankingResult> {
    if gallery_images.dim().0 == 0 {
        return Err(Error::Input("empty gallery".into()));
    }
    let (l, h, w) = query_clip.dim();
    let clips = Array4::from_shape_fn((1, l, h, w), |(_, t, y, x)| query_clip[[t, y, x]]);
    let (qv, qt) = model::embed_queries(store, cfg, &clips, &[query_tokens.to_vec()])?;
    let gallery = embed_gallery(store, cfg, gallery_images, gallery_titles)?;
    rank_queries(&qv, qt.as_ref(), &gallery, lambda)
}

/// `R@K` over ranked lists plus the mean of the requested recalls.
pub fn evaluate_recall(
    rankings: &[Vec<usize>],
    truth: &[usize],
    k_list: &[usize],
) -> Result<RecallReport> {
    if rankings.len() != truth.len() {
        return Err(Error::Input("one truth index per query required".into()));
    }
    for (q, ranked) in rankings.iter().enumerate() {
        if truth[q] >= ranked.len() {
            return Err(Error::Input(format!(
                "truth index {} outside gallery of {}",
                truth[q],
                ranked.len()
            )));
        }
    }
    let n = rankings.len().max(1) as f64;
    let mut recall_at = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let hits = rankings
            .iter()
            .zip(truth)
            .filter(|(ranked, &t)| ranked.iter().take(k).any(|&g| g == t))
            .count();
        recall_at.push((k, hits as f64 / n));
    }
    let r_mean = recall_at.iter().map(|(_, r)| r).sum::<f64>() / recall_at.len().max(1) as f64;
    Ok(RecallReport { recall_at, r_mean })
}

/// Rank of the true match (1-based) per query.
pub fn truth_ranks(rankings: &[Vec<usize>], truth: &[usize]) -> Vec<usize> {
    rankings
        .iter()
        .zip(truth)
        .map(|(ranked, &t)| ranked.iter().position(|&g| g == t).map(|p| p + 1).unwrap_or(0))
        .collect()
}
