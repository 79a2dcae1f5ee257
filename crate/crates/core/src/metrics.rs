//! Ranking metrics and homogenization diagnostics.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::RankingInstance;
use crate::error::{Error, Result};
use crate::rerank::{middle_zone, RankedList};

/// A metric value plus a flag set when the input was degenerate (no
/// relevant documents, empty gold set, too small a middle zone).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flagged {
    pub value: f64,
    pub degenerate: bool,
}

impl Flagged {
    fn ok(value: f64) -> Self {
        Self {
            value,
            degenerate: false,
        }
    }

    fn zero() -> Self {
        Self {
            value: 0.0,
            degenerate: true,
        }
    }
}

fn gain(grade: u8) -> f64 {
    (1u64 << grade) as f64 - 1.0
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// NDCG@k with gain `2^g − 1` and discount `1/log2(rank + 1)`. The ideal
/// ordering is taken over every judged document in `grades`.
pub fn ndcg_at_k(ranked: &RankedList, grades: &HashMap<String, u8>, k: usize) -> Result<Flagged> {
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    let dcg: f64 = ranked
        .ordering()
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(grades.get(d).copied().unwrap_or(0)) * discount(i + 1))
        .sum();
    let mut ideal: Vec<u8> = grades.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) * discount(i + 1))
        .sum();
    if idcg == 0.0 {
        return Ok(Flagged::zero());
    }
    Ok(Flagged::ok(dcg / idcg))
}

/// `|top-k ∩ gold| / |gold|`.
pub fn recall_at_k(ranked: &RankedList, gold: &HashSet<String>, k: usize) -> Result<Flagged> {
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    if gold.is_empty() {
        return Ok(Flagged::zero());
    }
    let hits = ranked.ordering().iter().take(k).filter(|d| gold.contains(*d)).count();
    Ok(Flagged::ok(hits as f64 / gold.len() as f64))
}

/// Population std of `scores[mid]` over `mean(|scores|) + 1e-8`.
pub fn mid_zone_norm_std(scores: &[f64], mid_indices: &[usize]) -> Result<Flagged> {
    if let Some(&bad) = mid_indices.iter().find(|&&i| i >= scores.len()) {
        return Err(Error::Invalid(format!("middle index {bad} out of range")));
    }
    if mid_indices.len() < 2 {
        return Ok(Flagged::zero());
    }
    let n = mid_indices.len() as f64;
    let mean = mid_indices.iter().map(|&i| scores[i]).sum::<f64>() / n;
    let var = mid_indices.iter().map(|&i| (scores[i] - mean).powi(2)).sum::<f64>() / n;
    let scale = scores.iter().map(|s| s.abs()).sum::<f64>() / scores.len() as f64;
    Ok(Flagged::ok(var.sqrt() / (scale + 1e-8)))
}

/// Positions (into the ranked list) of candidates whose original rank lies in
/// the middle zone.
pub fn mid_positions(ranked: &RankedList) -> Result<Vec<usize>> {
    let zone = middle_zone(ranked.len())?;
    Ok(ranked
        .original_ranks()
        .iter()
        .enumerate()
        .filter(|(_, r)| zone.contains(r))
        .map(|(i, _)| i)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PromotionRates {
    pub relevant_total: usize,
    pub relevant_promoted: usize,
    pub irrelevant_total: usize,
    pub irrelevant_promoted: usize,
    pub rel_pct: Option<f64>,
    pub irrel_pct: Option<f64>,
    pub gap_pp: Option<f64>,
}

/// Share of middle-zone documents (by original rank) that land in the top
/// quartile after reranking, split by `grade >= threshold`.
pub fn promotion_rates(pairs: &[(&RankingInstance, &RankedList)], threshold: u8) -> Result<PromotionRates> {
    let mut r = PromotionRates::default();
    for (inst, list) in pairs {
        let n = inst.len();
        if list.len() != n {
            return Err(Error::Invalid(format!(
                "ranked list for {} has {} entries, instance has {n}",
                inst.query_id,
                list.len()
            )));
        }
        let zone = middle_zone(n)?;
        let cutoff = n / 4;
        for c in &inst.candidates {
            if !zone.contains(&c.original_rank) {
                continue;
            }
            let pos = list.position(&c.doc_id).ok_or_else(|| {
                Error::Invalid(format!("{} missing from ranked list of {}", c.doc_id, inst.query_id))
            })?;
            let promoted = pos <= cutoff;
            if c.grade >= threshold {
                r.relevant_total += 1;
                r.relevant_promoted += promoted as usize;
            } else {
                r.irrelevant_total += 1;
                r.irrelevant_promoted += promoted as usize;
            }
        }
    }
    if r.relevant_total + r.irrelevant_total == 0 {
        return Err(Error::Invalid("no middle-zone documents".into()));
    }
    let pct = |p: usize, t: usize| (t > 0).then(|| 100.0 * p as f64 / t as f64);
    r.rel_pct = pct(r.relevant_promoted, r.relevant_total);
    r.irrel_pct = pct(r.irrelevant_promoted, r.irrelevant_total);
    r.gap_pp = r.rel_pct.zip(r.irrel_pct).map(|(a, b)| a - b);
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ndcg_k: usize,
    pub recall_ks: Vec<usize>,
    /// Grades at or above this count as relevant (recall gold set,
    /// promotion analysis).
    pub relevance_threshold: u8,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ndcg_k: 10,
            recall_ks: vec![2, 5],
            relevance_threshold: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub ndcg: f64,
    pub ndcg_degenerate: bool,
    pub recall: Vec<f64>,
    pub mid_zone_norm_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: EvalConfig,
    pub per_query: Vec<QueryMetrics>,
    pub mean_ndcg: f64,
    pub mean_recall: Vec<f64>,
    pub mid_zone_norm_std: f64,
    pub promotion: PromotionRates,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Evaluates `lists` against the instances they rank (matched by query id,
/// reported in instance order).
pub fn evaluate(instances: &[RankingInstance], lists: &[RankedList], config: &EvalConfig) -> Result<MetricReport> {
    let by_id: HashMap<&str, &RankedList> = lists.iter().map(|l| (l.query_id(), l)).collect();
    let mut per_query = Vec::with_capacity(instances.len());
    let mut matched = Vec::with_capacity(instances.len());
    for inst in instances {
        let list = *by_id
            .get(inst.query_id.as_str())
            .ok_or_else(|| Error::Invalid(format!("no ranked list for query {}", inst.query_id)))?;
        list.check_permutation_of(inst)?;
        let grades: HashMap<String, u8> = inst.candidates.iter().map(|c| (c.doc_id.clone(), c.grade)).collect();
        let gold: HashSet<String> = inst
            .candidates
            .iter()
            .filter(|c| c.grade >= config.relevance_threshold)
            .map(|c| c.doc_id.clone())
            .collect();
        let ndcg = ndcg_at_k(list, &grades, config.ndcg_k)?;
        let recall = config
            .recall_ks
            .iter()
            .map(|&k| recall_at_k(list, &gold, k).map(|f| f.value))
            .collect::<Result<Vec<_>>>()?;
        let mzs = mid_zone_norm_std(list.scores(), &mid_positions(list)?)?;
        per_query.push(QueryMetrics {
            query_id: inst.query_id.clone(),
            ndcg: ndcg.value,
            ndcg_degenerate: ndcg.degenerate,
            recall,
            mid_zone_norm_std: mzs.value,
        });
        matched.push((inst, list));
    }
    if per_query.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let n = per_query.len() as f64;
    let mean_ndcg = per_query.iter().map(|q| q.ndcg).sum::<f64>() / n;
    let mean_recall = (0..config.recall_ks.len())
        .map(|i| per_query.iter().map(|q| q.recall[i]).sum::<f64>() / n)
        .collect();
    let mid_zone_norm_std = per_query.iter().map(|q| q.mid_zone_norm_std).sum::<f64>() / n;
    let promotion = promotion_rates(&matched, config.relevance_threshold)?;
    Ok(MetricReport {
        config: config.clone(),
        per_query,
        mean_ndcg,
        mean_recall,
        mid_zone_norm_std,
        promotion,
    })
}
