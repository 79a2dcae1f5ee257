//! Per-document relevance from attention: sequence layout, query-to-document
//! attention mass per head, content-free calibration and core-head summation.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::autodiff::{span_mass_values, Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::tokenizer::{
    TokenId, Tokenizer, DOC_SEPARATOR, INSTRUCTION, NOT_APPLICABLE, QUERY_MARKER,
};
use crate::data::RankingInstance;
use crate::model::{prefill, AttentionTrace, HeadId, Retain, TransformerParams};

/// Token ranges of each component of a laid-out sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanLayout {
    pub instruction: Range<usize>,
    pub docs: Vec<(String, Range<usize>)>,
    pub query: Range<usize>,
}

impl SpanLayout {
    pub fn seq_len(&self) -> usize {
        self.query.end
    }

    pub fn doc_ranges(&self) -> Vec<Range<usize>> {
        self.docs.iter().map(|(_, r)| r.clone()).collect()
    }

    pub fn doc_ids(&self) -> Vec<String> {
        self.docs.iter().map(|(id, _)| id.clone()).collect()
    }

    fn check(&self, seq_len: usize) -> Result<()> {
        if self.query.is_empty() || self.query.end != seq_len {
            return Err(Error::Invalid(format!(
                "query span {:?} inconsistent with sequence length {seq_len}",
                self.query
            )));
        }
        if let Some((id, r)) = self.docs.iter().find(|(_, r)| r.end > seq_len || r.is_empty()) {
            return Err(Error::Invalid(format!("span {r:?} of {id} out of range")));
        }
        Ok(())
    }
}

/// `[instruction ⊕ d_1 ⊕ … ⊕ d_N ⊕ query]`. Each component starts with its
/// marker token (instruction, document separator, query marker), which is
/// counted inside the component's span.
pub fn layout_sequence(
    instruction: &str,
    docs: &[(&str, &str)],
    query: &str,
    tokenizer: &Tokenizer,
    max_seq_len: usize,
) -> Result<(Vec<TokenId>, SpanLayout)> {
    if docs.is_empty() {
        return Err(Error::Invalid("at least one document is required".into()));
    }
    let query_tokens = tokenizer.encode(query);
    if query_tokens.is_empty() {
        return Err(Error::Invalid("empty query".into()));
    }
    let mut tokens = vec![INSTRUCTION];
    tokens.extend(tokenizer.encode(instruction));
    let instruction_span = 0..tokens.len();

    let mut doc_spans = Vec::with_capacity(docs.len());
    for (id, text) in docs {
        let body = tokenizer.encode(text);
        if body.is_empty() {
            return Err(Error::Invalid(format!("document {id} has no tokens")));
        }
        let start = tokens.len();
        tokens.push(DOC_SEPARATOR);
        tokens.extend(body);
        doc_spans.push((id.to_string(), start..tokens.len()));
    }
    let q_start = tokens.len();
    tokens.push(QUERY_MARKER);
    tokens.extend(query_tokens);
    if tokens.len() > max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: max_seq_len,
        });
    }
    let layout = SpanLayout {
        instruction: instruction_span,
        docs: doc_spans,
        query: q_start..tokens.len(),
    };
    Ok((tokens, layout))
}

/// Same sequence with the query body replaced by content-free tokens (the
/// query marker is kept so positions and span lengths are unchanged).
pub fn calibration_tokens(tokens: &[TokenId], layout: &SpanLayout) -> Vec<TokenId> {
    let mut out = tokens.to_vec();
    for t in &mut out[layout.query.start + 1..layout.query.end] {
        *t = NOT_APPLICABLE;
    }
    out
}

/// `α_d` per head and document, documents in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDocScores {
    pub doc_ids: Vec<String>,
    pub scores: BTreeMap<HeadId, Vec<f64>>,
}

impl HeadDocScores {
    pub fn head(&self, head: HeadId) -> Result<&[f64]> {
        self.scores
            .get(&head)
            .map(|v| v.as_slice())
            .ok_or(Error::MissingHead(head))
    }
}

/// `α_d = (1/|I_q|) Σ_{i∈I_q} Σ_{j∈I_d} A[i, j]` for every head in the trace.
pub fn score_per_head(trace: &AttentionTrace, layout: &SpanLayout) -> Result<HeadDocScores> {
    layout.check(trace.seq_len)?;
    let spans = layout.doc_ranges();
    let scores = trace
        .maps
        .iter()
        .map(|(&head, map)| (head, span_mass_values(map, layout.query.clone(), &spans)))
        .collect();
    Ok(HeadDocScores {
        doc_ids: layout.doc_ids(),
        scores,
    })
}

/// Query-averaged attention on every position, summed over `heads`:
/// `w_t = Σ_h (1/|I_q|) Σ_{i∈I_q} A_h[i, t]`.
pub fn token_attention(trace: &AttentionTrace, layout: &SpanLayout, heads: &[HeadId]) -> Result<Vec<f64>> {
    layout.check(trace.seq_len)?;
    let inv = 1.0 / layout.query.len() as f64;
    let mut out = vec![0.0; trace.seq_len];
    for &h in heads {
        let map = trace.map(h).ok_or(Error::MissingHead(h))?;
        for (t, w) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in layout.query.clone() {
                acc += map.get(i, t);
            }
            *w += acc * inv;
        }
    }
    Ok(out)
}

/// Entrywise `raw − baseline`.
pub fn calibrate(raw: &HeadDocScores, baseline: &HeadDocScores) -> Result<HeadDocScores> {
    if raw.doc_ids != baseline.doc_ids {
        return Err(Error::Invalid("calibration baseline covers different documents".into()));
    }
    let mut scores = BTreeMap::new();
    for (&head, values) in &raw.scores {
        let base = baseline.head(head)?;
        scores.insert(head, values.iter().zip(base).map(|(r, b)| r - b).collect());
    }
    if baseline.scores.len() != raw.scores.len() {
        return Err(Error::Invalid("calibration baseline covers different heads".into()));
    }
    Ok(HeadDocScores {
        doc_ids: raw.doc_ids.clone(),
        scores,
    })
}

/// `s_d = Σ_{h ∈ heads} score[h][d]`, accumulated in `heads` order.
pub fn aggregate_core(scores: &HeadDocScores, heads: &[HeadId]) -> Result<Vec<f64>> {
    let mut total = vec![0.0; scores.doc_ids.len()];
    for &h in heads {
        for (t, v) in total.iter_mut().zip(scores.head(h)?) {
            *t += v;
        }
    }
    Ok(total)
}

/// Differentiable core-head score row (`1 × N`): per head, the mass of `rows`
/// on each span in the scored maps minus the same in the calibration maps,
/// summed in `heads` order. With `rows` addressing the query span this
/// matches `aggregate_core(calibrate(..))` bit for bit.
pub fn core_score_node(
    graph: &mut Graph,
    scored: &BTreeMap<HeadId, NodeId>,
    baseline: &BTreeMap<HeadId, NodeId>,
    rows: Range<usize>,
    spans: &[Range<usize>],
    heads: &[HeadId],
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for &h in heads {
        let a = *scored.get(&h).ok_or(Error::MissingHead(h))?;
        let b = *baseline.get(&h).ok_or(Error::MissingHead(h))?;
        let ra = graph.span_mass(a, rows.clone(), spans)?;
        let rb = graph.span_mass(b, rows.clone(), spans)?;
        let diff = graph.sub(ra, rb)?;
        total = Some(match total {
            None => diff,
            Some(t) => graph.add(t, diff)?,
        });
    }
    total.ok_or_else(|| Error::Invalid("empty head set".into()))
}

/// A ranking instance laid out for prefill, with its calibration twin.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInstance {
    pub tokens: Vec<TokenId>,
    pub calibration: Vec<TokenId>,
    pub layout: SpanLayout,
}

/// Lays out candidates in first-stage (original rank) order.
pub fn encode_instance(
    instance: &RankingInstance,
    instruction: &str,
    tokenizer: &Tokenizer,
    max_seq_len: usize,
) -> Result<EncodedInstance> {
    let mut order: Vec<usize> = (0..instance.len()).collect();
    order.sort_by_key(|&i| instance.candidates[i].original_rank);
    encode_in_order(instance, &order, instruction, tokenizer, max_seq_len)
}

/// Lays out candidates in the given order (indices into `candidates`).
pub fn encode_in_order(
    instance: &RankingInstance,
    order: &[usize],
    instruction: &str,
    tokenizer: &Tokenizer,
    max_seq_len: usize,
) -> Result<EncodedInstance> {
    let mut seen = vec![false; instance.len()];
    for &i in order {
        if i >= instance.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Invalid(format!(
                "layout order for {} is not a permutation",
                instance.query_id
            )));
        }
    }
    if order.len() != instance.len() {
        return Err(Error::Invalid(format!(
            "layout order for {} is not a permutation",
            instance.query_id
        )));
    }
    let docs: Vec<(&str, &str)> = order
        .iter()
        .map(|&i| {
            let c = &instance.candidates[i];
            (c.doc_id.as_str(), c.text.as_str())
        })
        .collect();
    let (tokens, layout) =
        layout_sequence(instruction, &docs, &instance.query_text, tokenizer, max_seq_len)?;
    let calibration = calibration_tokens(&tokens, &layout);
    Ok(EncodedInstance {
        tokens,
        calibration,
        layout,
    })
}

pub const DEFAULT_INSTRUCTION: &str = "rank the passages by relevance to the query";

/// Tokenizer plus instruction template, shared by every phase.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub tokenizer: Tokenizer,
    pub instruction: String,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new(DEFAULT_INSTRUCTION)
    }
}

impl Encoder {
    pub fn new(instruction: &str) -> Self {
        Self {
            tokenizer: Tokenizer::new(),
            instruction: instruction.to_string(),
        }
    }

    pub fn encode(&self, instance: &RankingInstance, max_seq_len: usize) -> Result<EncodedInstance> {
        encode_instance(instance, &self.instruction, &self.tokenizer, max_seq_len)
    }

    pub fn encode_in_order(
        &self,
        instance: &RankingInstance,
        order: &[usize],
        max_seq_len: usize,
    ) -> Result<EncodedInstance> {
        encode_in_order(instance, order, &self.instruction, &self.tokenizer, max_seq_len)
    }
}

/// Calibrated per-head scores from two inference prefills (scored and
/// content-free), plus the raw trace of the scored pass.
pub fn calibrated_head_scores(
    params: &TransformerParams,
    encoded: &EncodedInstance,
    depth: usize,
    retain: &Retain,
) -> Result<(HeadDocScores, AttentionTrace)> {
    let trace = prefill(params, &encoded.tokens, depth, retain)?;
    let baseline = prefill(params, &encoded.calibration, depth, retain)?;
    let raw = score_per_head(&trace, &encoded.layout)?;
    let base = score_per_head(&baseline, &encoded.layout)?;
    Ok((calibrate(&raw, &base)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Matrix;
    use crate::model::tokenizer::lexicon;

    fn words(n: usize, offset: usize) -> String {
        lexicon()[offset..offset + n].join(" ")
    }

    #[test]
    fn layout_offsets() {
        let tok = Tokenizer::new();
        let d: Vec<String> = (0..3).map(|i| words(4, i * 4)).collect();
        let docs: Vec<(&str, &str)> = vec![("a", &d[0]), ("b", &d[1]), ("c", &d[2])];
        let (tokens, layout) = layout_sequence(&words(1, 40), &docs, &words(3, 50), &tok, 64).unwrap();
        assert_eq!(layout.instruction, 0..2);
        assert_eq!(layout.docs[1], ("b".to_string(), 7..12));
        assert_eq!(layout.query, 17..21);
        assert_eq!(tokens.len(), 21);
    }

    #[test]
    fn layout_rejects_empty_doc_and_long_sequences() {
        let tok = Tokenizer::new();
        assert!(layout_sequence("x", &[("a", "  ")], "q", &tok, 64).is_err());
        assert!(layout_sequence("x", &[("a", "b")], "", &tok, 64).is_err());
        let err = layout_sequence("x", &[("a", "b c d")], "q", &tok, 4).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { len: 8, max: 4 }));
    }

    #[test]
    fn permuting_docs_permutes_spans() {
        let tok = Tokenizer::new();
        let (a, b) = (words(2, 0), words(3, 2));
        let (_, l1) = layout_sequence("i", &[("a", &a), ("b", &b)], "q", &tok, 64).unwrap();
        let (_, l2) = layout_sequence("i", &[("b", &b), ("a", &a)], "q", &tok, 64).unwrap();
        assert_eq!(l1.doc_ids(), vec!["a", "b"]);
        assert_eq!(l2.doc_ids(), vec!["b", "a"]);
        assert_eq!(l1.docs[0].1.len(), l2.docs[1].1.len());
    }

    fn uniform_trace(t: usize) -> AttentionTrace {
        let m = Matrix::from_fn(t, t, |_, _| 1.0 / t as f64);
        AttentionTrace {
            seq_len: t,
            recorded_depth: 1,
            maps: [(HeadId::new(1, 0), m)].into(),
        }
    }

    fn toy_layout() -> SpanLayout {
        SpanLayout {
            instruction: 0..1,
            docs: vec![("a".into(), 1..4), ("b".into(), 4..6)],
            query: 6..8,
        }
    }

    #[test]
    fn uniform_rows_give_length_fraction() {
        let s = score_per_head(&uniform_trace(8), &toy_layout()).unwrap();
        let v = s.head(HeadId::new(1, 0)).unwrap();
        assert!((v[0] - 3.0 / 8.0).abs() < 1e-15);
        assert!((v[1] - 2.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn one_hot_rows_into_one_doc() {
        let mut m = Matrix::zeros(8, 8);
        m.set(6, 4, 1.0);
        m.set(7, 5, 1.0);
        let trace = AttentionTrace {
            seq_len: 8,
            recorded_depth: 1,
            maps: [(HeadId::new(1, 0), m)].into(),
        };
        let s = score_per_head(&trace, &toy_layout()).unwrap();
        assert_eq!(s.head(HeadId::new(1, 0)).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn layout_out_of_range_rejected() {
        assert!(score_per_head(&uniform_trace(7), &toy_layout()).is_err());
    }

    fn scores(vals: &[(HeadId, Vec<f64>)]) -> HeadDocScores {
        HeadDocScores {
            doc_ids: (0..vals[0].1.len()).map(|i| format!("d{i}")).collect(),
            scores: vals.iter().cloned().collect(),
        }
    }

    #[test]
    fn calibration_arithmetic() {
        let h = HeadId::new(1, 0);
        let raw = scores(&[(h, vec![0.30, 0.2])]);
        let zero = scores(&[(h, vec![0.0, 0.0])]);
        assert_eq!(calibrate(&raw, &zero).unwrap(), raw);
        assert!(calibrate(&raw, &raw).unwrap().head(h).unwrap().iter().all(|&v| v == 0.0));
        let base = scores(&[(h, vec![0.12, 0.0])]);
        assert!((calibrate(&raw, &base).unwrap().head(h).unwrap()[0] - 0.18).abs() < 1e-15);
        let other = HeadDocScores {
            doc_ids: vec!["x".into(), "y".into()],
            ..base
        };
        assert!(calibrate(&raw, &other).is_err());
    }

    #[test]
    fn aggregation() {
        let (h1, h2) = (HeadId::new(1, 0), HeadId::new(2, 1));
        let s = scores(&[(h1, vec![0.2, 0.1]), (h2, vec![0.05, 0.4])]);
        assert_eq!(aggregate_core(&s, &[h1]).unwrap(), vec![0.2, 0.1]);
        let both = aggregate_core(&s, &[h1, h2]).unwrap();
        assert!((both[0] - 0.25).abs() < 1e-15 && (both[1] - 0.5).abs() < 1e-15);
        let missing = HeadId::new(3, 0);
        assert!(matches!(aggregate_core(&s, &[missing]), Err(Error::MissingHead(h)) if h == missing));
    }

    #[test]
    fn calibration_sequence_keeps_marker_and_length() {
        let layout = toy_layout();
        let tokens: Vec<TokenId> = (10..18).collect();
        let cal = calibration_tokens(&tokens, &layout);
        assert_eq!(&cal[..7], &tokens[..7]);
        assert_eq!(cal[7], NOT_APPLICABLE);
    }
}
