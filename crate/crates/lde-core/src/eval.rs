//! Ranking-based retrieval evaluation: cosine ranking, average precision
//! under the same-id/same-cam junk rule, mAP, and CMC (Rank-k).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Record;
use crate::error::{LdeError, Result};
use crate::tensor::Tensor;

/// Distance metric for gallery ranking. Cosine on L2-normalized embeddings
/// is the only supported metric; it is scale-invariant, which matters
/// because the embedding head is unnormalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
}

/// CMC curve sampled at the conventional reporting ranks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cmc {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

/// Retrieval metrics for one query/gallery configuration.
///
/// `num_queries` counts queries that were actually scored; `num_dropped`
/// counts queries discarded because no cross-camera positive exists for
/// them in the gallery (every same-id item shares the query's camera, or
/// the identity is absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: Cmc,
    pub num_queries: usize,
    pub num_dropped: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        // serde_json cannot fail on this struct: no maps with non-string
        // keys, no non-finite rejection at the Value level.
        serde_json::to_string_pretty(self).expect("EvalReport serializes")
    }

    pub fn csv_header() -> &'static str {
        "mAP,r1,r5,r10,num_queries,num_dropped"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.map, self.cmc.r1, self.cmc.r5, self.cmc.r10, self.num_queries, self.num_dropped
        )
    }
}

/// One labeled embedding: the unit of retrieval evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub pid: usize,
    pub cam: usize,
    pub emb: Vec<f64>,
}

fn normalized(emb: &[f64], what: &str) -> Result<Vec<f64>> {
    if emb.iter().any(|v| !v.is_finite()) {
        return Err(LdeError::numeric(format!("{what}: non-finite embedding")));
    }
    let norm = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(LdeError::numeric(format!("{what}: zero-norm embedding")));
    }
    let inv = 1.0 / norm;
    Ok(emb.iter().map(|v| v * inv).collect())
}

/// Ranks normalized gallery rows by ascending cosine distance to the
/// normalized query; ties broken by gallery index.
fn rank_rows(qn: &[f64], rows: &[Vec<f64>]) -> Vec<usize> {
    let dist: Vec<f64> = rows
        .iter()
        .map(|r| 1.0 - qn.iter().zip(r).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    order
}

/// Returns the permutation of gallery indices sorted by ascending distance
/// to the query under `metric`. Embeddings are L2-normalized internally;
/// zero-norm or non-finite embeddings are errors.
pub fn rank_gallery(query_emb: &Tensor, gallery_embs: &Tensor, metric: Metric) -> Result<Vec<usize>> {
    let Metric::Cosine = metric;
    let d = match query_emb.shape() {
        [d] => *d,
        other => {
            return Err(LdeError::shape(format!(
                "rank_gallery: query must be rank-1, got {other:?}"
            )))
        }
    };
    let (g, gd) = match gallery_embs.shape() {
        [g, gd] => (*g, *gd),
        other => {
            return Err(LdeError::shape(format!(
                "rank_gallery: gallery must be rank-2, got {other:?}"
            )))
        }
    };
    if gd != d {
        return Err(LdeError::shape(format!(
            "rank_gallery: query dim {d} vs gallery dim {gd}"
        )));
    }
    if g == 0 {
        return Err(LdeError::data("rank_gallery: empty gallery"));
    }
    let qn = normalized(query_emb.data(), "query")?;
    let rows: Vec<Vec<f64>> = (0..g)
        .map(|i| normalized(&gallery_embs.data()[i * d..(i + 1) * d], &format!("gallery item {i}")))
        .collect::<Result<_>>()?;
    Ok(rank_rows(&qn, &rows))
}

/// Average precision of `ranking` (a permutation of gallery indices) given
/// the positive and junk index sets. Junk entries (same pid and same cam as
/// the query) are removed before positions are counted, so they affect
/// neither precision denominators nor the positive count. Returns `None`
/// when no positive survives the junk filter — the caller drops the query.
pub fn average_precision(ranking: &[usize], positives: &[bool], junk: &[bool]) -> Option<f64> {
    let n_pos = (0..positives.len()).filter(|&i| positives[i] && !junk[i]).count();
    if n_pos == 0 {
        return None;
    }
    let mut seen = 0usize;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for &gi in ranking {
        if junk[gi] {
            continue;
        }
        seen += 1;
        if positives[gi] {
            hits += 1;
            sum += hits as f64 / seen as f64;
        }
    }
    Some(sum / n_pos as f64)
}

/// Per-query outcome: AP and the 1-based rank of the first true positive
/// after junk removal.
struct QueryScore {
    ap: f64,
    first_hit: usize,
}

fn score_query(q: &EvalItem, gallery: &[EvalItem], rows: &[Vec<f64>], qi: usize) -> Result<Option<QueryScore>> {
    let positives: Vec<bool> = gallery.iter().map(|g| g.pid == q.pid).collect();
    let junk: Vec<bool> = gallery
        .iter()
        .map(|g| g.pid == q.pid && g.cam == q.cam)
        .collect();
    if !(0..gallery.len()).any(|i| positives[i] && !junk[i]) {
        return Ok(None);
    }
    let qn = normalized(&q.emb, &format!("query {qi}"))?;
    let order = rank_rows(&qn, rows);
    let ap = average_precision(&order, &positives, &junk)
        .expect("positives survive the junk filter by the check above");
    let mut seen = 0usize;
    let mut first_hit = 0usize;
    for &gi in &order {
        if junk[gi] {
            continue;
        }
        seen += 1;
        if positives[gi] {
            first_hit = seen;
            break;
        }
    }
    Ok(Some(QueryScore { ap, first_hit }))
}

/// Scores every query against the gallery and aggregates mAP and CMC.
///
/// CMC Rank-k is the fraction of evaluable queries whose first true
/// positive appears within the top k after junk removal. Queries without a
/// cross-camera positive are dropped and counted in `num_dropped`; if every
/// query is dropped the evaluation is an error rather than a vacuous report.
pub fn evaluate(queries: &[EvalItem], gallery: &[EvalItem]) -> Result<EvalReport> {
    if gallery.is_empty() {
        return Err(LdeError::data("evaluate: empty gallery"));
    }
    if queries.is_empty() {
        return Err(LdeError::data("evaluate: empty query set"));
    }
    let d = gallery[0].emb.len();
    for (i, it) in gallery.iter().enumerate() {
        if it.emb.len() != d {
            return Err(LdeError::shape(format!(
                "evaluate: gallery item {i} has dim {}, expected {d}",
                it.emb.len()
            )));
        }
    }
    for (i, it) in queries.iter().enumerate() {
        if it.emb.len() != d {
            return Err(LdeError::shape(format!(
                "evaluate: query {i} has dim {}, expected {d}",
                it.emb.len()
            )));
        }
    }
    let rows: Vec<Vec<f64>> = gallery
        .iter()
        .enumerate()
        .map(|(i, it)| normalized(&it.emb, &format!("gallery item {i}")))
        .collect::<Result<_>>()?;

    // Queries are independent; collect preserves order so the reduction
    // below is deterministic regardless of scheduling.
    let scored: Vec<Option<QueryScore>> = queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| score_query(q, gallery, &rows, qi))
        .collect::<Result<_>>()?;

    let mut sum_ap = 0.0;
    let mut evaluated = 0usize;
    let mut dropped = 0usize;
    let mut hits = [0usize; 3];
    for s in &scored {
        match s {
            Some(score) => {
                evaluated += 1;
                sum_ap += score.ap;
                for (slot, k) in [1usize, 5, 10].iter().enumerate() {
                    if score.first_hit <= *k {
                        hits[slot] += 1;
                    }
                }
            }
            None => dropped += 1,
        }
    }
    if evaluated == 0 {
        return Err(LdeError::data(
            "evaluate: no evaluable queries (every query lacks a cross-camera positive)",
        ));
    }
    let n = evaluated as f64;
    Ok(EvalReport {
        map: sum_ap / n,
        cmc: Cmc {
            r1: hits[0] as f64 / n,
            r5: hits[1] as f64 / n,
            r10: hits[2] as f64 / n,
        },
        num_queries: evaluated,
        num_dropped: dropped,
    })
}

// ---------------------------------------------------------------------------
// Embedding exchange
// ---------------------------------------------------------------------------

/// One row of the embedding exchange file (JSON Lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRow {
    pub path: String,
    pub embedding: Vec<f64>,
}

pub fn write_embeddings(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row)
            .map_err(|e| LdeError::data(format!("embedding row '{}': {e}", row.path)))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| LdeError::io(path.display().to_string(), e))?;
    file.write_all(&out)
        .map_err(|e| LdeError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let file = fs::File::open(path).map_err(|e| LdeError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LdeError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: EmbeddingRow = serde_json::from_str(&line).map_err(|e| {
            LdeError::data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Joins split records with exported embeddings by path. Every record must
/// have an embedding; extra embeddings are ignored.
pub fn items_from_records(records: &[Record], embs: &[EmbeddingRow]) -> Result<Vec<EvalItem>> {
    let by_path: BTreeMap<&str, &EmbeddingRow> =
        embs.iter().map(|r| (r.path.as_str(), r)).collect();
    let mut items = Vec::with_capacity(records.len());
    for rec in records {
        let row = by_path.get(rec.path.as_str()).ok_or_else(|| {
            LdeError::data(format!("no embedding for '{}'", rec.path))
        })?;
        items.push(EvalItem {
            pid: rec.pid,
            cam: rec.cam,
            emb: row.embedding.clone(),
        });
    }
    Ok(items)
}
