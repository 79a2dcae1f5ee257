//! Decoding-free listwise reranking with one truncated prefill per query
//! (plus a cached calibration prefill).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::RankingInstance;
use crate::error::{Error, Result};
use crate::model::tokenizer::TokenId;
use crate::model::{prefill, HeadId, Retain, TransformerParams};
use crate::scoring::{aggregate_core, calibrate, score_per_head, Encoder, HeadDocScores};
use crate::selection::HeadSet;

/// Candidates of one query sorted by descending score, ties broken by
/// original rank. Only constructible through validated paths, so
/// `ordering` is always a permutation of the candidate ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedList {
    query_id: String,
    ordering: Vec<String>,
    scores: Vec<f64>,
    original_ranks: Vec<usize>,
    depth_used: usize,
    #[serde(skip)]
    elapsed: Duration,
}

impl PartialEq for RankedList {
    /// Timing is excluded.
    fn eq(&self, other: &Self) -> bool {
        self.query_id == other.query_id
            && self.ordering == other.ordering
            && self.scores.iter().map(|s| s.to_bits()).eq(other.scores.iter().map(|s| s.to_bits()))
            && self.original_ranks == other.original_ranks
            && self.depth_used == other.depth_used
    }
}

impl RankedList {
    /// Sorts `(doc_id, original_rank, score)` triples. Rejects duplicate ids,
    /// duplicate ranks and non-finite scores.
    pub fn from_scores(
        query_id: &str,
        docs: &[(String, usize)],
        scores: &[f64],
        depth_used: usize,
        elapsed: Duration,
    ) -> Result<Self> {
        if docs.len() != scores.len() {
            return Err(Error::Invalid(format!(
                "{} documents but {} scores",
                docs.len(),
                scores.len()
            )));
        }
        if docs.is_empty() {
            return Err(Error::Invalid(format!("query {query_id} has no candidates")));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Invalid(format!("non-finite score {s} for query {query_id}")));
        }
        let ids: HashSet<&str> = docs.iter().map(|(d, _)| d.as_str()).collect();
        let ranks: HashSet<usize> = docs.iter().map(|&(_, r)| r).collect();
        if ids.len() != docs.len() || ranks.len() != docs.len() {
            return Err(Error::Invalid(format!(
                "query {query_id}: duplicate document id or original rank"
            )));
        }
        let mut idx: Vec<usize> = (0..docs.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(docs[a].1.cmp(&docs[b].1)));
        Ok(Self {
            query_id: query_id.to_string(),
            ordering: idx.iter().map(|&i| docs[i].0.clone()).collect(),
            scores: idx.iter().map(|&i| scores[i]).collect(),
            original_ranks: idx.iter().map(|&i| docs[i].1).collect(),
            depth_used,
            elapsed,
        })
    }

    /// Scores each candidate of `instance` with `scores` (candidate order).
    pub fn for_instance(
        instance: &RankingInstance,
        scores: &[f64],
        depth_used: usize,
        elapsed: Duration,
    ) -> Result<Self> {
        let docs: Vec<(String, usize)> = instance
            .candidates
            .iter()
            .map(|c| (c.doc_id.clone(), c.original_rank))
            .collect();
        Self::from_scores(&instance.query_id, &docs, scores, depth_used, elapsed)
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn ordering(&self) -> &[String] {
        &self.ordering
    }

    /// Scores aligned with [`Self::ordering`]; non-increasing.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Original ranks aligned with [`Self::ordering`].
    pub fn original_ranks(&self) -> &[usize] {
        &self.original_ranks
    }

    pub fn depth_used(&self) -> usize {
        self.depth_used
    }

    pub fn elapsed(&self) -> Duration {
        self.elapsed
    }

    pub fn len(&self) -> usize {
        self.ordering.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordering.is_empty()
    }

    /// 1-based new rank of `doc_id`.
    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.ordering.iter().position(|d| d == doc_id).map(|p| p + 1)
    }

    /// Checks that the list is a complete permutation of `instance`'s
    /// candidates with non-increasing scores and rank tie-breaks.
    pub fn check_permutation_of(&self, instance: &RankingInstance) -> Result<()> {
        let fail = |why: &str| Err(Error::Invalid(format!("query {}: {why}", self.query_id)));
        if self.ordering.len() != instance.len() {
            return fail("length differs from candidate list");
        }
        let expected: BTreeSet<&str> = instance.candidates.iter().map(|c| c.doc_id.as_str()).collect();
        let got: BTreeSet<&str> = self.ordering.iter().map(String::as_str).collect();
        if expected != got || got.len() != self.ordering.len() {
            return fail("ordering is not a bijection on candidates");
        }
        for w in 0..self.len().saturating_sub(1) {
            let (a, b) = (self.scores[w], self.scores[w + 1]);
            if a < b || (a == b && self.original_ranks[w] > self.original_ranks[w + 1]) {
                return fail("scores out of order");
            }
        }
        Ok(())
    }
}

/// Middle zone as 1-based original ranks in `(n/4, 3n/4]`.
pub fn middle_zone(n: usize) -> Result<Vec<usize>> {
    if n < 4 {
        return Err(Error::Invalid(format!("middle zone needs n >= 4, got {n}")));
    }
    Ok((n / 4 + 1..=3 * n / 4).collect())
}

/// Top quartile as 1-based positions `1..=n/4`.
pub fn top_quartile(n: usize) -> Vec<usize> {
    (1..=n / 4).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankOptions {
    /// Prefill depth; defaults to the head set's `l_max`.
    pub depth: Option<usize>,
    /// Reuse calibration prefills across queries with identical layouts.
    pub cache_baselines: bool,
}

/// Holds a model and a head set; counts every prefill it runs.
pub struct Reranker<'a> {
    params: &'a TransformerParams,
    heads: Vec<HeadId>,
    depth: usize,
    encoder: &'a Encoder,
    cache_baselines: bool,
    baselines: HashMap<Vec<TokenId>, HeadDocScores>,
    prefills: usize,
}

impl<'a> Reranker<'a> {
    pub fn new(
        params: &'a TransformerParams,
        head_set: &HeadSet,
        encoder: &'a Encoder,
        options: &RerankOptions,
    ) -> Result<Self> {
        let n_layers = params.config.n_layers;
        let heads = head_set.ids();
        for &h in &heads {
            if h.layer > n_layers || h.head >= params.config.n_heads {
                return Err(Error::MissingHead(h));
            }
        }
        let depth = options.depth.unwrap_or(head_set.l_max);
        if depth < head_set.l_max || depth > n_layers {
            return Err(Error::DepthOutOfRange { depth, n_layers });
        }
        Ok(Self {
            params,
            heads,
            depth,
            encoder,
            cache_baselines: options.cache_baselines,
            baselines: HashMap::new(),
            prefills: 0,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn prefill_count(&self) -> usize {
        self.prefills
    }

    /// Calibrated core score per candidate, in candidate order.
    pub fn score(&mut self, instance: &RankingInstance) -> Result<Vec<f64>> {
        let encoded = self.encoder.encode(instance, self.params.config.max_seq_len)?;
        let retain = Retain::Heads(self.heads.iter().copied().collect());
        let trace = prefill(self.params, &encoded.tokens, self.depth, &retain)?;
        self.prefills += 1;
        let raw = score_per_head(&trace, &encoded.layout)?;
        let cached = if self.cache_baselines {
            self.baselines.get(&encoded.calibration).cloned()
        } else {
            None
        };
        let baseline = match cached {
            Some(b) => b,
            None => {
                let t = prefill(self.params, &encoded.calibration, self.depth, &retain)?;
                self.prefills += 1;
                let b = score_per_head(&t, &encoded.layout)?;
                if self.cache_baselines {
                    self.baselines.insert(encoded.calibration.clone(), b.clone());
                }
                b
            }
        };
        let layout_scores = aggregate_core(&calibrate(&raw, &baseline)?, &self.heads)?;
        let pos: HashMap<&str, usize> = raw
            .doc_ids
            .iter()
            .enumerate()
            .map(|(i, d)| (d.as_str(), i))
            .collect();
        Ok(instance
            .candidates
            .iter()
            .map(|c| layout_scores[pos[c.doc_id.as_str()]])
            .collect())
    }

    pub fn rerank(&mut self, instance: &RankingInstance) -> Result<RankedList> {
        let start = Instant::now();
        let scores = self.score(instance)?;
        RankedList::for_instance(instance, &scores, self.depth, start.elapsed())
    }

    pub fn rerank_all(&mut self, instances: &[RankingInstance]) -> Result<Vec<RankedList>> {
        instances.iter().map(|i| self.rerank(i)).collect()
    }
}

pub fn rerank(
    instance: &RankingInstance,
    params: &TransformerParams,
    head_set: &HeadSet,
    encoder: &Encoder,
    options: &RerankOptions,
) -> Result<RankedList> {
    Reranker::new(params, head_set, encoder, options)?.rerank(instance)
}

/// First-stage order as a ranked list (scores are negated ranks).
pub fn identity_list(instance: &RankingInstance) -> Result<RankedList> {
    let scores: Vec<f64> = instance
        .candidates
        .iter()
        .map(|c| -(c.original_rank as f64))
        .collect();
    RankedList::for_instance(instance, &scores, 0, Duration::ZERO)
}

/// TREC run lines `qid Q0 docid rank score tag`. Scores use the shortest
/// representation that parses back to the same `f64`.
pub fn format_run(lists: &[RankedList], tag: &str) -> String {
    let mut out = String::new();
    for list in lists {
        for (i, (doc, score)) in list.ordering.iter().zip(&list.scores).enumerate() {
            writeln!(out, "{} Q0 {doc} {} {score} {tag}", list.query_id, i + 1).expect("string write");
        }
    }
    out
}

/// Parses a run file back into ranked lists (ordering by the rank column).
/// Original ranks are unknown here and are set to the run rank.
pub fn parse_run(text: &str, source_name: &str) -> Result<Vec<RankedList>> {
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(usize, String, f64)>> = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let perr = |reason: String| Error::Parse {
            source_name: source_name.to_string(),
            line: n + 1,
            reason,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(perr(format!("expected 6 columns, found {}", f.len())));
        }
        let rank: usize = f[3].parse().map_err(|_| perr(format!("bad rank {:?}", f[3])))?;
        let score: f64 = f[4].parse().map_err(|_| perr(format!("bad score {:?}", f[4])))?;
        if !rows.contains_key(f[0]) {
            order.push(f[0].to_string());
        }
        rows.entry(f[0].to_string())
            .or_default()
            .push((rank, f[2].to_string(), score));
    }
    order
        .into_iter()
        .map(|qid| {
            let mut r = rows.remove(&qid).expect("query recorded");
            r.sort_by_key(|x| x.0);
            if r.iter().enumerate().any(|(i, x)| x.0 != i + 1) {
                return Err(Error::Parse {
                    source_name: source_name.to_string(),
                    line: 0,
                    reason: format!("query {qid}: ranks are not 1..n"),
                });
            }
            let docs: Vec<(String, usize)> = r.iter().map(|x| (x.1.clone(), x.0)).collect();
            let scores: Vec<f64> = r.iter().map(|x| x.2).collect();
            let list = RankedList::from_scores(&qid, &docs, &scores, 0, Duration::ZERO)?;
            if list.ordering.iter().zip(&docs).any(|(a, b)| *a != b.0) {
                return Err(Error::Parse {
                    source_name: source_name.to_string(),
                    line: 0,
                    reason: format!("query {qid}: scores increase down the ranking"),
                });
            }
            Ok(list)
        })
        .collect()
}
