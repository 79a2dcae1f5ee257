//! Static report emitters: token-level attention heatmaps and diagnostic
//! tables.

use std::fmt::Write as _;

use headrank_core::data::RankingInstance;
use headrank_core::metrics::MetricReport;
use headrank_core::model::tokenizer::words;
use headrank_core::model::AttentionTrace;
use headrank_core::rerank::RankedList;
use headrank_core::scoring::{token_attention, EncodedInstance};
use headrank_core::selection::HeadSet;
use headrank_core::Result;

/// Weights below this fraction of the passage maximum are left unshaded.
pub const SHADE_THRESHOLD: f64 = 0.05;

/// One passage with a calibrated attention weight per word.
#[derive(Debug, Clone, PartialEq)]
pub struct PassageTokens {
    pub doc_id: String,
    pub words: Vec<String>,
    pub weights: Vec<f64>,
}

/// Per-passage intensities in `[0, 1]`: negatives floored to 0, divided by the
/// passage maximum, and values under the threshold zeroed.
pub fn intensities(weights: &[f64]) -> Vec<f64> {
    let max = weights.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return vec![0.0; weights.len()];
    }
    weights
        .iter()
        .map(|&w| {
            let v = w.max(0.0) / max;
            if v < SHADE_THRESHOLD {
                0.0
            } else {
                v
            }
        })
        .collect()
}

/// Word-level weights of every candidate, from the scored and content-free
/// traces of one encoded instance. The document separator is not shown.
pub fn passage_tokens(
    instance: &RankingInstance,
    encoded: &EncodedInstance,
    trace: &AttentionTrace,
    baseline: &AttentionTrace,
    head_set: &HeadSet,
) -> Result<Vec<PassageTokens>> {
    let heads = head_set.ids();
    let raw = token_attention(trace, &encoded.layout, &heads)?;
    let base = token_attention(baseline, &encoded.layout, &heads)?;
    let mut out = Vec::with_capacity(instance.len());
    for (doc_id, span) in &encoded.layout.docs {
        let idx = instance.doc_index(doc_id).ok_or_else(|| {
            headrank_core::Error::Invalid(format!("{doc_id} not in {}", instance.query_id))
        })?;
        let text_words: Vec<String> =
            words(&instance.candidates[idx].text).map(str::to_string).collect();
        let body = span.start + 1..span.end;
        if text_words.len() != body.len() {
            return Err(headrank_core::Error::Invalid(format!(
                "{doc_id}: {} words but {} tokens",
                text_words.len(),
                body.len()
            )));
        }
        let weights = body.map(|t| raw[t] - base[t]).collect();
        out.push(PassageTokens {
            doc_id: doc_id.clone(),
            words: text_words,
            weights,
        });
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Self-contained XHTML heatmap of the top `top_m` passages of `runs[0]`,
/// with one rank column per run.
pub fn render_heatmap(
    instance: &RankingInstance,
    passages: &[PassageTokens],
    runs: &[(String, RankedList)],
    top_m: usize,
) -> Result<String> {
    let (_, primary) = runs
        .first()
        .ok_or_else(|| headrank_core::Error::Invalid("at least one run is required".into()))?;
    let mut h = String::new();
    h.push_str("<!DOCTYPE html>\n<html xmlns=\"http://www.w3.org/1999/xhtml\" lang=\"en\">\n<head>\n");
    h.push_str("<meta charset=\"utf-8\"/>\n");
    writeln!(h, "<title>Attention heatmap for {}</title>", escape(&instance.query_id)).unwrap();
    h.push_str(
        "<style>\nbody { font-family: sans-serif; margin: 2em; }\n\
         table { border-collapse: collapse; }\n\
         td, th { border: 1px solid #ccc; padding: 4px 8px; vertical-align: top; }\n\
         .tok { padding: 0 2px; border-radius: 2px; }\n</style>\n</head>\n<body>\n",
    );
    writeln!(h, "<h1>Query {}</h1>", escape(&instance.query_id)).unwrap();
    writeln!(h, "<p class=\"query\">{}</p>", escape(&instance.query_text)).unwrap();
    h.push_str("<table>\n<thead>\n<tr>");
    for (name, _) in runs {
        write!(h, "<th>Rank ({})</th>", escape(name)).unwrap();
    }
    h.push_str("<th>Grade</th><th>Document</th><th>Passage</th></tr>\n</thead>\n<tbody>\n");
    for doc_id in primary.ordering().iter().take(top_m) {
        let passage = passages
            .iter()
            .find(|p| &p.doc_id == doc_id)
            .ok_or_else(|| headrank_core::Error::Invalid(format!("no tokens for {doc_id}")))?;
        let grade = instance
            .doc_index(doc_id)
            .map(|i| instance.candidates[i].grade.to_string())
            .unwrap_or_default();
        h.push_str("<tr>");
        for (_, run) in runs {
            let rank = run.position(doc_id).map(|r| r.to_string()).unwrap_or_else(|| "-".into());
            write!(h, "<td>{rank}</td>").unwrap();
        }
        write!(h, "<td>{grade}</td><td>{}</td><td>", escape(doc_id)).unwrap();
        for (i, (word, v)) in passage.words.iter().zip(intensities(&passage.weights)).enumerate() {
            if i > 0 {
                h.push(' ');
            }
            if v > 0.0 {
                write!(
                    h,
                    "<span class=\"tok\" style=\"background-color: rgba(102, 51, 153, {v:.3})\">{}</span>",
                    escape(word)
                )
                .unwrap();
            } else {
                write!(h, "<span class=\"tok\">{}</span>", escape(word)).unwrap();
            }
        }
        h.push_str("</td></tr>\n");
    }
    h.push_str("</tbody>\n</table>\n</body>\n</html>\n");
    Ok(h)
}

/// One markdown row per named report: quality plus homogenization and
/// promotion diagnostics.
pub fn diagnose_table(reports: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    let ndcg_k = reports.first().map(|(_, r)| r.config.ndcg_k).unwrap_or(10);
    writeln!(
        out,
        "| Run | NDCG@{ndcg_k} | Mid-zone norm. std | Promoted relevant (%) | Promoted irrelevant (%) | Gap (pp) |"
    )
    .unwrap();
    out.push_str("|---|---|---|---|---|---|\n");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".into());
    for (name, r) in reports {
        writeln!(
            out,
            "| {name} | {:.4} | {:.4} | {} | {} | {} |",
            r.mean_ndcg,
            r.mid_zone_norm_std,
            fmt(r.promotion.rel_pct),
            fmt(r.promotion.irrel_pct),
            fmt(r.promotion.gap_pp)
        )
        .unwrap();
    }
    out
}
