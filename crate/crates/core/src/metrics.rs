//! Cosine ranking with CMC and mean average precision.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid_err, Result};
use crate::math;

/// Identity and camera of one query/gallery entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryMeta {
    pub identity: usize,
    pub camera: usize,
}

/// Ranking outcome over one query/gallery split.
#[derive(Debug, Clone)]
pub struct RankingResult {
    /// Gallery indices in descending similarity, per ranked query.
    pub orders: Vec<Vec<usize>>,
    /// Average precision per ranked query.
    pub average_precisions: Vec<f64>,
    /// 1-based rank of the first true match, per ranked query.
    pub first_match_ranks: Vec<usize>,
    /// Query indices that were ranked (others were skipped).
    pub ranked_queries: Vec<usize>,
    /// Query indices skipped because no valid true match exists.
    pub skipped_queries: Vec<usize>,
    /// cmc[r-1] = fraction of ranked queries with a true match in the top r.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub rank1: f64,
}

/// Cosine similarity; the counterpart of the training-side cosine distance
/// (rho = 1 - D).
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (math::sqrt(na) * math::sqrt(nb) + crate::losses::NORM_EPS)
}

/// Ranks every query against the gallery. Gallery entries sharing both
/// identity and camera with the query are excluded; queries with no
/// remaining true match are skipped and reported.
pub fn rank(
    query_embeds: &[Vec<f64>],
    gallery_embeds: &[Vec<f64>],
    query_meta: &[EntryMeta],
    gallery_meta: &[EntryMeta],
) -> Result<RankingResult> {
    if query_embeds.len() != query_meta.len() || gallery_embeds.len() != gallery_meta.len() {
        return Err(invalid_err!("embedding/meta counts disagree"));
    }
    if gallery_embeds.is_empty() {
        return Err(invalid_err!("empty gallery"));
    }
    let mut result = RankingResult {
        orders: Vec::new(),
        average_precisions: Vec::new(),
        first_match_ranks: Vec::new(),
        ranked_queries: Vec::new(),
        skipped_queries: Vec::new(),
        cmc: vec![0.0; gallery_embeds.len()],
        map: 0.0,
        rank1: 0.0,
    };
    for (qi, (qe, qm)) in query_embeds.iter().zip(query_meta).enumerate() {
        let keep: Vec<usize> = (0..gallery_embeds.len())
            .filter(|&gi| {
                !(gallery_meta[gi].identity == qm.identity && gallery_meta[gi].camera == qm.camera)
            })
            .collect();
        let has_match = keep.iter().any(|&gi| gallery_meta[gi].identity == qm.identity);
        if !has_match || keep.is_empty() {
            result.skipped_queries.push(qi);
            continue;
        }
        let mut scored: Vec<(f64, usize)> = keep
            .iter()
            .map(|&gi| (similarity(qe, &gallery_embeds[gi]), gi))
            .collect();
        // Descending similarity; ties broken by ascending gallery index.
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let order: Vec<usize> = scored.iter().map(|&(_, gi)| gi).collect();

        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_rank = None;
        for (pos, &gi) in order.iter().enumerate() {
            if gallery_meta[gi].identity == qm.identity {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                if first_rank.is_none() {
                    first_rank = Some(pos + 1);
                }
            }
        }
        let ap = precision_sum / hits as f64;
        let first_rank = first_rank.expect("has_match guaranteed a hit");
        for r in first_rank..=result.cmc.len() {
            result.cmc[r - 1] += 1.0;
        }
        result.orders.push(order);
        result.average_precisions.push(ap);
        result.first_match_ranks.push(first_rank);
        result.ranked_queries.push(qi);
    }
    let ranked = result.ranked_queries.len();
    if ranked == 0 {
        return Err(invalid_err!("no query has a reachable true match"));
    }
    for c in result.cmc.iter_mut() {
        *c /= ranked as f64;
    }
    result.map = result.average_precisions.iter().sum::<f64>() / ranked as f64;
    result.rank1 = result.cmc[0];
    Ok(result)
}
