//! Core retrieval-head discovery.
//!
//! Each head is scored by `Φ = S_disc · G_ent`: how sharply a temperature
//! softmax over calibrated document scores singles out the positive, times an
//! entropy gate that penalizes heads whose query-averaged attention is spread
//! over the whole sequence. The top `k` heads form the core set and the
//! deepest of them fixes the early-exit depth `l_max`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::entropy_of;
use crate::data::{selection_probe, RankingInstance};
use crate::error::{Error, Result};
use crate::model::checkpoint::params_checksum;
use crate::model::{AttentionTrace, HeadId, Retain, TransformerParams};
use crate::scoring::{calibrated_head_scores, Encoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Softmax temperature τ of the discriminative score.
    pub tau: f64,
    /// Entropy penalty weight λ.
    pub lambda: f64,
    /// Number of core heads K.
    pub k: usize,
    /// Max negatives per probe instance.
    pub negative_cap: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            tau: 0.001,
            lambda: 0.1,
            k: 8,
            negative_cap: 15,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.negative_cap == 0 {
            return Err(Error::Config("negative_cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// `e^{α⁺/τ} / Σ_{d ∈ {d⁺} ∪ D⁻} e^{α_d/τ}`, evaluated with max-subtraction.
pub fn discriminative_score(alpha_pos: f64, alpha_negs: &[f64], tau: f64) -> Result<f64> {
    if alpha_negs.is_empty() {
        return Err(Error::Invalid("discriminative score needs at least one negative".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let max = alpha_negs.iter().copied().fold(alpha_pos, f64::max);
    let pos = ((alpha_pos - max) / tau).exp();
    let mut denom = pos;
    for &a in alpha_negs {
        denom += ((a - max) / tau).exp();
    }
    Ok(pos / denom)
}

/// Query-averaged attention distribution `A_t = (1/|I_q|) Σ_{i∈I_q} A[i, t]`.
pub fn query_averaged_distribution(
    trace: &AttentionTrace,
    head: HeadId,
    query_span: std::ops::Range<usize>,
) -> Result<Vec<f64>> {
    let map = trace.map(head).ok_or(Error::MissingHead(head))?;
    if query_span.is_empty() || query_span.end > map.rows() {
        return Err(Error::Invalid(format!("query span {query_span:?} invalid")));
    }
    let inv = 1.0 / query_span.len() as f64;
    let mut dist = vec![0.0; map.cols()];
    for i in query_span {
        for (d, v) in dist.iter_mut().zip(map.row(i)) {
            *d += v;
        }
    }
    dist.iter_mut().for_each(|d| *d *= inv);
    Ok(dist)
}

/// `1 − λ · H / ln L_seq` of the query-averaged distribution; 1 when `L_seq = 1`.
pub fn entropy_gate(
    trace: &AttentionTrace,
    head: HeadId,
    query_span: std::ops::Range<usize>,
    lambda: f64,
) -> Result<f64> {
    let dist = query_averaged_distribution(trace, head, query_span)?;
    Ok(gate_from_distribution(&dist, lambda))
}

pub fn gate_from_distribution(dist: &[f64], lambda: f64) -> f64 {
    if dist.len() <= 1 {
        return 1.0;
    }
    let h = entropy_of(dist);
    // clamp away rounding that would push H/ln L a hair past [0, 1]
    let ratio = (h / (dist.len() as f64).ln()).clamp(0.0, 1.0);
    1.0 - lambda * ratio
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub head: HeadId,
    pub s_disc: f64,
    pub g_ent: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreTable {
    /// One entry per head, layer-major order.
    pub entries: Vec<HeadScore>,
    pub instances_used: usize,
    /// Query ids without a grade gap, excluded from selection.
    pub instances_rejected: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedHead {
    pub layer: usize,
    pub head: usize,
    pub phi: f64,
}

impl RankedHead {
    pub fn id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub corpus_id: String,
    pub params_checksum: String,
}

/// Selected core heads, best first, with the early-exit depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSet {
    pub config: SelectionConfig,
    pub heads: Vec<RankedHead>,
    pub l_max: usize,
    pub provenance: Provenance,
}

impl HeadSet {
    pub fn ids(&self) -> Vec<HeadId> {
        self.heads.iter().map(RankedHead::id).collect()
    }

    /// Hand-built set (e.g. from `--heads`); order is kept as given.
    pub fn from_ids(ids: &[HeadId], config: SelectionConfig) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Invalid("head set is empty".into()));
        }
        let unique: BTreeSet<_> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(Error::Invalid("duplicate head in head set".into()));
        }
        Ok(Self {
            config,
            heads: ids
                .iter()
                .map(|h| RankedHead {
                    layer: h.layer,
                    head: h.head,
                    phi: 0.0,
                })
                .collect(),
            l_max: ids.iter().map(|h| h.layer).max().expect("non-empty"),
            provenance: Provenance::default(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("head set serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: HeadSet =
            serde_json::from_str(text).map_err(|e| Error::Invalid(format!("head set: {e}")))?;
        let expected = set.heads.iter().map(|h| h.layer).max().unwrap_or(0);
        if set.heads.is_empty() || set.l_max != expected {
            return Err(Error::Invalid(format!(
                "head set l_max {} inconsistent with heads (expected {expected})",
                set.l_max
            )));
        }
        Ok(set)
    }
}

/// Parses `L2-H1,L3-H0` style lists.
pub fn parse_head_list(text: &str) -> Result<Vec<HeadId>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let bad = || Error::Invalid(format!("head {s:?} is not of the form L<layer>-H<head>"));
            let (l, h) = s.split_once('-').ok_or_else(bad)?;
            let layer = l.strip_prefix('L').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let head = h.strip_prefix('H').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            if layer == 0 {
                return Err(bad());
            }
            Ok(HeadId::new(layer, head))
        })
        .collect()
}

/// Sorts by (Φ desc, layer asc, head asc) and keeps the first `k`.
pub fn top_k(table: &HeadScoreTable, config: &SelectionConfig) -> Result<HeadSet> {
    if config.k > table.entries.len() {
        return Err(Error::Config(format!(
            "k = {} exceeds the {} available heads",
            config.k,
            table.entries.len()
        )));
    }
    let mut ranked = table.entries.clone();
    ranked.sort_by(|a, b| {
        b.phi
            .total_cmp(&a.phi)
            .then(a.head.layer.cmp(&b.head.layer))
            .then(a.head.head.cmp(&b.head.head))
    });
    ranked.truncate(config.k);
    let l_max = ranked.iter().map(|e| e.head.layer).max().expect("k >= 1");
    Ok(HeadSet {
        config: config.clone(),
        heads: ranked
            .iter()
            .map(|e| RankedHead {
                layer: e.head.layer,
                head: e.head.head,
                phi: e.phi,
            })
            .collect(),
        l_max,
        provenance: Provenance::default(),
    })
}

/// Per-instance `(S_disc, G_ent)` for every head in `heads`.
pub fn instance_head_terms(
    params: &TransformerParams,
    encoder: &Encoder,
    instance: &RankingInstance,
    heads: &[HeadId],
    config: &SelectionConfig,
) -> Result<Option<Vec<(f64, f64)>>> {
    let Some(probe) = selection_probe(instance, config.negative_cap) else {
        return Ok(None);
    };
    let encoded = encoder.encode(instance, params.config.max_seq_len)?;
    let depth = heads.iter().map(|h| h.layer).max().unwrap_or(1);
    let retain = Retain::Heads(heads.iter().copied().collect());
    let (calibrated, trace) = calibrated_head_scores(params, &encoded, depth, &retain)?;
    let mut out = Vec::with_capacity(heads.len());
    for &h in heads {
        let alpha = calibrated.head(h)?;
        let negs: Vec<f64> = probe.negatives.iter().map(|&i| alpha[i]).collect();
        let s = discriminative_score(alpha[probe.positive], &negs, config.tau)?;
        let g = entropy_gate(&trace, h, encoded.layout.query.clone(), config.lambda)?;
        out.push((s, g));
    }
    Ok(Some(out))
}

/// Scores every head over the corpus. `S_disc` and `G_ent` are each averaged
/// over instances in corpus order and `Φ` is their product.
pub fn score_heads(
    instances: &[RankingInstance],
    params: &TransformerParams,
    encoder: &Encoder,
    config: &SelectionConfig,
) -> Result<HeadScoreTable> {
    config.validate()?;
    let heads = params.config.all_heads();
    let mut s_sum = vec![0.0; heads.len()];
    let mut g_sum = vec![0.0; heads.len()];
    let mut used = 0usize;
    let mut rejected = Vec::new();
    for inst in instances {
        match instance_head_terms(params, encoder, inst, &heads, config)? {
            None => rejected.push(inst.query_id.clone()),
            Some(terms) => {
                used += 1;
                for (i, (s, g)) in terms.into_iter().enumerate() {
                    s_sum[i] += s;
                    g_sum[i] += g;
                }
            }
        }
    }
    if used == 0 {
        return Err(Error::Invalid(
            "no instance in the selection corpus has a positive with lower-graded negatives".into(),
        ));
    }
    let n = used as f64;
    let entries = heads
        .iter()
        .enumerate()
        .map(|(i, &head)| {
            let s_disc = s_sum[i] / n;
            let g_ent = g_sum[i] / n;
            HeadScore {
                head,
                s_disc,
                g_ent,
                phi: s_disc * g_ent,
            }
        })
        .collect();
    Ok(HeadScoreTable {
        entries,
        instances_used: used,
        instances_rejected: rejected,
    })
}

pub fn select_heads(
    instances: &[RankingInstance],
    params: &TransformerParams,
    encoder: &Encoder,
    config: &SelectionConfig,
    corpus_id: &str,
) -> Result<(HeadScoreTable, HeadSet)> {
    let table = score_heads(instances, params, encoder, config)?;
    let mut set = top_k(&table, config)?;
    set.provenance = Provenance {
        corpus_id: corpus_id.to_string(),
        params_checksum: params_checksum(params),
    };
    Ok((table, set))
}

/// Before/after comparison of two head sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub before: Vec<HeadId>,
    pub after: Vec<HeadId>,
    pub shared: Vec<HeadId>,
    pub k: usize,
}

impl OverlapReport {
    pub fn new(before: &HeadSet, after: &HeadSet) -> Self {
        let prev: BTreeSet<HeadId> = before.ids().into_iter().collect();
        let shared = after.ids().into_iter().filter(|h| prev.contains(h)).collect();
        Self {
            before: before.ids(),
            after: after.ids(),
            shared,
            k: after.heads.len(),
        }
    }

    pub fn shared_count(&self) -> usize {
        self.shared.len()
    }

    /// Rank / Before / After / Shared table, closed by a `Shared a / k` row.
    pub fn to_table(&self) -> String {
        let mut out = String::from("| Rank | Before | After | Shared |\n|---|---|---|---|\n");
        let prev: BTreeSet<HeadId> = self.before.iter().copied().collect();
        let rows = self.before.len().max(self.after.len());
        for i in 0..rows {
            let b = self.before.get(i).map(|h| h.to_string()).unwrap_or_default();
            let (a, mark) = match self.after.get(i) {
                Some(h) => (h.to_string(), if prev.contains(h) { "yes" } else { "" }),
                None => (String::new(), ""),
            };
            writeln!(out, "| {} | {b} | {a} | {mark} |", i + 1).expect("string write");
        }
        writeln!(out, "| Shared | {} / {} | | |", self.shared_count(), self.k).expect("string write");
        out
    }
}

/// Re-runs selection on updated parameters and compares with `previous`.
pub fn recalibrate(
    trained: &TransformerParams,
    instances: &[RankingInstance],
    encoder: &Encoder,
    config: &SelectionConfig,
    corpus_id: &str,
    previous: &HeadSet,
) -> Result<(HeadScoreTable, HeadSet, OverlapReport)> {
    let (table, set) = select_heads(instances, trained, encoder, config, corpus_id)?;
    let report = OverlapReport::new(previous, &set);
    Ok((table, set, report))
}
