//! Preference optimization in attention-score space.
//!
//! The objective for one step is
//!
//! ```text
//! L = mean_q [ mean_pairs(L_align + L_prox) ] + mean_q Ω_q
//! L_align = −log σ(Δs) + [m − Δs]_+ − α·Δs
//! L_prox  = β/2 · ‖(s⁺ − s_ref⁺, s⁻ − s_ref⁻)‖²
//! Ω_q     = γ·H(softmax(s_q)) − η·Var(s_q[mid])
//! ```
//!
//! where `s` is the calibrated core-head score row of query `q`. The frozen
//! reference scores are computed once per query and enter the graph as
//! constants.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{entropy_of, log_sigmoid, Graph, Mask, Matrix, NodeId};
use crate::data::{build_pairs, cap_pairs, RankingInstance};
use crate::error::{Error, Result};
use crate::model::{prefill_tails_graph, HeadId, ParamNodes, Retain, TransformerParams};
use crate::rerank::{middle_zone, Reranker, RerankOptions};
use crate::scoring::{
    aggregate_core, calibrated_head_scores, core_score_node, Encoder, EncodedInstance,
};
use crate::selection::HeadSet;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Logistic + margin hinge + linear push.
    #[default]
    HeadRank,
    /// Plain pairwise logistic loss `−log σ(s_c − s_r)`, for ablations.
    RankNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Proximal weight β.
    pub beta: f64,
    /// Linear margin-push weight α.
    pub alpha: f64,
    /// Hinge margin m.
    pub margin_m: f64,
    /// Score-entropy weight γ.
    pub gamma: f64,
    /// Middle-zone variance weight η.
    pub eta: f64,
    pub grad_clip: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Optional cap on optimizer steps.
    pub steps: Option<usize>,
    /// Queries per step.
    pub batch_size: usize,
    /// Max preference pairs kept per query.
    pub pair_cap: usize,
    pub seed: u64,
    pub align_mode: AlignMode,
    /// Fraction of training queries whose documents are laid out in a seeded
    /// random order (fixed for the run) instead of first-stage order. At 0
    /// the score can be fitted from position alone.
    pub shuffle_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.05,
            alpha: 0.05,
            margin_m: 0.3,
            gamma: 0.01,
            eta: 0.3,
            grad_clip: 5.0,
            learning_rate: 1e-3,
            epochs: 1,
            steps: None,
            batch_size: 1,
            pair_cap: 64,
            seed: 0,
            align_mode: AlignMode::HeadRank,
            shuffle_fraction: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("margin_m", self.margin_m),
            ("learning_rate", self.learning_rate),
            ("shuffle_fraction", self.shuffle_fraction),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.shuffle_fraction > 1.0 {
            return Err(Error::Config(format!(
                "shuffle_fraction must be in [0, 1], got {}",
                self.shuffle_fraction
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        if !(self.grad_clip > 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("grad_clip must be > 0, got {}", self.grad_clip)));
        }
        if self.batch_size == 0 || self.pair_cap == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size, pair_cap and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// `−log σ(Δs) + max(0, m − Δs) − α·Δs`.
pub fn align_loss(delta_s: f64, margin_m: f64, alpha: f64) -> f64 {
    -log_sigmoid(delta_s) + (margin_m - delta_s).max(0.0) - alpha * delta_s
}

/// `−log σ(Δs)`.
pub fn ranknet_loss(delta_s: f64) -> f64 {
    -log_sigmoid(delta_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceScores {
    pub s_plus: f64,
    pub s_minus: f64,
    pub s_ref_plus: f64,
    pub s_ref_minus: f64,
}

impl PreferenceScores {
    pub fn delta_s(&self) -> f64 {
        self.s_plus - self.s_minus
    }

    pub fn delta_ref(&self) -> [f64; 2] {
        [self.s_plus - self.s_ref_plus, self.s_minus - self.s_ref_minus]
    }
}

/// `β/2 · ‖Δ_ref‖²`.
pub fn prox_penalty(ps: &PreferenceScores, beta: f64) -> f64 {
    let [a, b] = ps.delta_ref();
    0.5 * beta * (a * a + b * b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerTerms {
    pub omega: f64,
    pub h_p: f64,
    pub var_mid: f64,
    /// Fewer than two middle-zone scores; `var_mid` forced to 0.
    pub mid_degenerate: bool,
}

/// `Ω = γ·H(softmax(s)) − η·Var(s[mid])` with population variance.
pub fn distribution_regularizer(
    scores: &[f64],
    mid_indices: &[usize],
    gamma: f64,
    eta: f64,
) -> Result<RegularizerTerms> {
    if scores.is_empty() {
        return Err(Error::Invalid("empty score vector".into()));
    }
    if let Some(&bad) = mid_indices.iter().find(|&&i| i >= scores.len()) {
        return Err(Error::Invalid(format!("middle index {bad} out of range")));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let h_p = entropy_of(&p);
    let mid_degenerate = mid_indices.len() < 2;
    let var_mid = if mid_degenerate {
        0.0
    } else {
        let n = mid_indices.len() as f64;
        let mean = mid_indices.iter().map(|&i| scores[i]).sum::<f64>() / n;
        mid_indices.iter().map(|&i| (scores[i] - mean).powi(2)).sum::<f64>() / n
    };
    Ok(RegularizerTerms {
        omega: gamma * h_p - eta * var_mid,
        h_p,
        var_mid,
        mid_degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_align: f64,
    pub l_prox: f64,
    pub omega: f64,
    pub total: f64,
    pub h_p: f64,
    pub var_mid: f64,
}

/// One query prepared for training: layout, pairs as layout positions,
/// middle-zone positions and cached reference scores.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryContext {
    pub query_id: String,
    pub encoded: EncodedInstance,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
    pub mid: Vec<usize>,
    /// Frozen reference scores in layout order.
    pub reference: Vec<f64>,
}

/// Builds the training context of one query. Documents are laid out in
/// first-stage order, or in a random order drawn from `layout_seed`.
/// `None` when the query has no adjacent-level pair.
pub fn build_context(
    instance: &RankingInstance,
    reference: &TransformerParams,
    head_set: &HeadSet,
    encoder: &Encoder,
    pair_cap: usize,
    pair_seed: u64,
    layout_seed: Option<u64>,
) -> Result<Option<QueryContext>> {
    let pairs = cap_pairs(build_pairs(instance), pair_cap, pair_seed);
    if pairs.is_empty() {
        return Ok(None);
    }
    let max_len = reference.config.max_seq_len;
    let encoded = match layout_seed {
        None => encoder.encode(instance, max_len)?,
        Some(seed) => {
            let mut order: Vec<usize> = (0..instance.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            encoder.encode_in_order(instance, &order, max_len)?
        }
    };
    let pos: HashMap<&str, usize> = encoded
        .layout
        .docs
        .iter()
        .enumerate()
        .map(|(i, (d, _))| (d.as_str(), i))
        .collect();
    let lookup = |d: &str| {
        pos.get(d).copied().ok_or_else(|| {
            Error::Invalid(format!("pair document {d} absent from query {}", instance.query_id))
        })
    };
    let mut chosen = Vec::with_capacity(pairs.len());
    let mut rejected = Vec::with_capacity(pairs.len());
    for p in &pairs {
        chosen.push(lookup(&p.chosen_doc_id)?);
        rejected.push(lookup(&p.rejected_doc_id)?);
    }
    let mid = if instance.len() >= 4 {
        let zone = middle_zone(instance.len())?;
        let mut mid: Vec<usize> = instance
            .candidates
            .iter()
            .filter(|c| zone.contains(&c.original_rank))
            .map(|c| lookup(&c.doc_id))
            .collect::<Result<_>>()?;
        mid.sort_unstable();
        mid
    } else {
        Vec::new()
    };
    let heads = head_set.ids();
    let retain = Retain::Heads(heads.iter().copied().collect());
    let (calibrated, _) = calibrated_head_scores(reference, &encoded, head_set.l_max, &retain)?;
    let reference = aggregate_core(&calibrated, &heads)?;
    Ok(Some(QueryContext {
        query_id: instance.query_id.clone(),
        encoded,
        chosen,
        rejected,
        mid,
        reference,
    }))
}

/// Scalar nodes of one query's loss terms.
#[derive(Debug, Clone, Copy)]
pub struct QueryTerms {
    pub scores: NodeId,
    pub delta: NodeId,
    pub align: NodeId,
    pub prox: NodeId,
    pub omega: NodeId,
    pub h_p: NodeId,
    pub var_mid: NodeId,
}

fn constant_row(graph: &mut Graph, values: Vec<f64>) -> NodeId {
    graph.constant(Matrix::row_vector(values))
}

/// Builds one query's loss terms on the policy `nodes` at `depth`.
pub fn query_terms(
    graph: &mut Graph,
    nodes: &ParamNodes,
    ctx: &QueryContext,
    heads: &[HeadId],
    depth: usize,
    config: &LossConfig,
) -> Result<QueryTerms> {
    // the scored and content-free sequences differ only inside the query span
    let layout = &ctx.encoded.layout;
    let q = layout.query.clone();
    let tails = [&ctx.encoded.tokens[q.clone()], &ctx.encoded.calibration[q.clone()]];
    let maps = prefill_tails_graph(graph, nodes, &ctx.encoded.tokens[..q.start], &tails, depth)?;
    let s = core_score_node(graph, &maps[0], &maps[1], 0..q.len(), &layout.doc_ranges(), heads)?;

    let n_pairs = ctx.chosen.len() as f64;
    let s_plus = graph.select(s, &ctx.chosen)?;
    let s_minus = graph.select(s, &ctx.rejected)?;
    let delta = graph.sub(s_plus, s_minus)?;
    let logsig = graph.log_sigmoid(delta)?;
    let mut per_pair = graph.scale(logsig, -1.0)?;
    if config.align_mode == AlignMode::HeadRank {
        let m = constant_row(graph, vec![config.margin_m; ctx.chosen.len()]);
        let gap = graph.sub(m, delta)?;
        let hinge = graph.hinge(gap)?;
        per_pair = graph.add(per_pair, hinge)?;
        let push = graph.scale(delta, -config.alpha)?;
        per_pair = graph.add(per_pair, push)?;
    }
    let align = graph.mean(per_pair)?;

    let ref_plus = constant_row(graph, ctx.chosen.iter().map(|&i| ctx.reference[i]).collect());
    let ref_minus = constant_row(graph, ctx.rejected.iter().map(|&i| ctx.reference[i]).collect());
    let d_plus = graph.sub(s_plus, ref_plus)?;
    let d_minus = graph.sub(s_minus, ref_minus)?;
    let n_plus = graph.squared_norm(d_plus)?;
    let n_minus = graph.squared_norm(d_minus)?;
    let sq = graph.add(n_plus, n_minus)?;
    let prox = graph.scale(sq, 0.5 * config.beta / n_pairs)?;

    let p = graph.masked_softmax(s, Mask::None)?;
    let h_p = graph.entropy(p)?;
    let var_mid = if ctx.mid.len() >= 2 {
        let mid = graph.select(s, &ctx.mid)?;
        graph.variance(mid)?
    } else {
        graph.constant(Matrix::scalar(0.0))
    };
    let gh = graph.scale(h_p, config.gamma)?;
    let ev = graph.scale(var_mid, config.eta)?;
    let omega = graph.sub(gh, ev)?;
    Ok(QueryTerms {
        scores: s,
        delta,
        align,
        prox,
        omega,
        h_p,
        var_mid,
    })
}

/// Batch objective graph.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: NodeId,
    pub l_align: NodeId,
    pub l_prox: NodeId,
    pub omega: NodeId,
    pub queries: Vec<QueryTerms>,
}

fn mean_of(graph: &mut Graph, items: &[NodeId]) -> Result<NodeId> {
    let mut acc = items[0];
    for &x in &items[1..] {
        acc = graph.add(acc, x)?;
    }
    Ok(graph.scale(acc, 1.0 / items.len() as f64)?)
}

pub fn batch_loss(
    graph: &mut Graph,
    nodes: &ParamNodes,
    contexts: &[&QueryContext],
    heads: &[HeadId],
    depth: usize,
    config: &LossConfig,
) -> Result<BatchLoss> {
    if contexts.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let queries = contexts
        .iter()
        .map(|ctx| query_terms(graph, nodes, ctx, heads, depth, config))
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: fn(&QueryTerms) -> NodeId| queries.iter().map(f).collect::<Vec<_>>();
    let l_align = mean_of(graph, &pick(|q| q.align))?;
    let l_prox = mean_of(graph, &pick(|q| q.prox))?;
    let omega = mean_of(graph, &pick(|q| q.omega))?;
    let partial = graph.add(l_align, l_prox)?;
    let total = graph.add(partial, omega)?;
    Ok(BatchLoss {
        total,
        l_align,
        l_prox,
        omega,
        queries,
    })
}

impl BatchLoss {
    pub fn breakdown(&self, graph: &Graph) -> LossBreakdown {
        let n = self.queries.len() as f64;
        let avg = |f: fn(&QueryTerms) -> NodeId| {
            self.queries.iter().map(|q| graph.value(f(q)).item()).sum::<f64>() / n
        };
        LossBreakdown {
            l_align: graph.value(self.l_align).item(),
            l_prox: graph.value(self.l_prox).item(),
            omega: graph.value(self.omega).item(),
            total: graph.value(self.total).item(),
            h_p: avg(|q| q.h_p),
            var_mid: avg(|q| q.var_mid),
        }
    }

    /// Mean Δs over every pair in the batch.
    pub fn mean_delta(&self, graph: &Graph) -> f64 {
        let (sum, n) = self.queries.iter().fold((0.0, 0usize), |(s, n), q| {
            let d = graph.value(q.delta);
            (s + d.as_slice().iter().sum::<f64>(), n + d.len())
        });
        sum / n as f64
    }
}

/// A differentiable single-query objective.
pub struct LossGraph {
    pub graph: Graph,
    pub params: ParamNodes,
    pub loss: BatchLoss,
}

/// Full objective for one query in its listwise context: policy parameters
/// become trainable leaves, the reference only contributes cached scores.
pub fn total_loss(
    instance: &RankingInstance,
    policy: &TransformerParams,
    reference: &TransformerParams,
    head_set: &HeadSet,
    encoder: &Encoder,
    config: &LossConfig,
) -> Result<(LossBreakdown, LossGraph)> {
    config.validate()?;
    let ctx = build_context(instance, reference, head_set, encoder, config.pair_cap, config.seed, None)?
        .ok_or_else(|| {
            Error::Invalid(format!("query {} has no adjacent-level pair", instance.query_id))
        })?;
    let mut graph = Graph::new();
    let params = ParamNodes::register(&mut graph, policy, true);
    let loss = batch_loss(&mut graph, &params, &[&ctx], &head_set.ids(), head_set.l_max, config)?;
    Ok((
        loss.breakdown(&graph),
        LossGraph {
            graph,
            params,
            loss,
        },
    ))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &TransformerParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|(_, m)| vec![0.0; m.len()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut TransformerParams, grads: &[Matrix]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &g), m), v) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns `(norm before, norm after)`.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> (f64, f64) {
    let raw = global_norm(grads);
    if raw > max_norm {
        let scale = max_norm / raw;
        for g in grads.iter_mut() {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= scale);
        }
        (raw, global_norm(grads))
    } else {
        (raw, raw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub queries: Vec<String>,
    pub n_pairs: usize,
    pub l_align: f64,
    pub l_prox: f64,
    pub omega: f64,
    pub total: f64,
    pub h_p: f64,
    pub var_mid: f64,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
    pub grad_norm_raw: f64,
    pub mean_delta_s: f64,
}

pub fn format_log(records: &[TrainLogRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
        .collect()
}

pub fn parse_log(text: &str) -> Result<Vec<TrainLogRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                source_name: "training log".into(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: TransformerParams,
    pub log: Vec<TrainLogRecord>,
    /// Queries without any adjacent-level pair.
    pub skipped_queries: Vec<String>,
    /// Queries whose middle zone had fewer than two documents.
    pub mid_degenerate: usize,
}

fn is_non_finite(e: &Error) -> bool {
    matches!(e, Error::Autodiff(crate::autodiff::AutodiffError::NonFinite { .. }))
}

/// One or more epochs over `instances`, `batch_size` queries per step, in a
/// seeded shuffled order. The reference is a frozen copy of `initial`.
pub fn train(
    initial: &TransformerParams,
    instances: &[RankingInstance],
    head_set: &HeadSet,
    encoder: &Encoder,
    config: &LossConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let heads = head_set.ids();
    let depth = head_set.l_max;
    if depth > initial.config.n_layers {
        return Err(Error::DepthOutOfRange {
            depth,
            n_layers: initial.config.n_layers,
        });
    }
    let mut contexts = Vec::new();
    let mut skipped = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        let seed = config.seed.wrapping_add(i as u64);
        // distinct stream from the pair subsample
        let layout_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
        let draw: f64 = ChaCha8Rng::seed_from_u64(layout_seed).random();
        let layout = (draw < config.shuffle_fraction).then_some(layout_seed);
        match build_context(inst, initial, head_set, encoder, config.pair_cap, seed, layout)? {
            Some(ctx) => contexts.push(ctx),
            None => skipped.push(inst.query_id.clone()),
        }
    }
    if contexts.is_empty() {
        return Err(Error::Invalid("no training query has an adjacent-level pair".into()));
    }
    let mid_degenerate = contexts.iter().filter(|c| c.mid.len() < 2).count();

    let mut params = initial.clone();
    let mut adam = Adam::new(config.learning_rate, &params);
    let mut log: Vec<TrainLogRecord> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut step = 0usize;
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..contexts.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if config.steps.is_some_and(|cap| step >= cap) {
                break 'epochs;
            }
            let diverged = || Error::Diverged {
                step,
                last_total: log.last().map(|r| r.total),
            };
            let batch: Vec<&QueryContext> = chunk.iter().map(|&i| &contexts[i]).collect();
            let mut graph = Graph::new();
            let nodes = ParamNodes::register(&mut graph, &params, true);
            let loss = match batch_loss(&mut graph, &nodes, &batch, &heads, depth, config) {
                Ok(l) => l,
                Err(e) if is_non_finite(&e) => return Err(diverged()),
                Err(e) => return Err(e),
            };
            let breakdown = loss.breakdown(&graph);
            if !breakdown.total.is_finite() {
                return Err(diverged());
            }
            let grads = match graph.backward(loss.total) {
                Ok(g) => g,
                Err(e) => {
                    let e = Error::from(e);
                    return Err(if is_non_finite(&e) { diverged() } else { e });
                }
            };
            let mut grads: Vec<Matrix> = nodes.ids().iter().map(|&id| grads.get_or_zeros(&graph, id)).collect();
            let (raw, clipped) = clip_global_norm(&mut grads, config.grad_clip);
            if !raw.is_finite() {
                return Err(diverged());
            }
            let record = TrainLogRecord {
                step,
                epoch,
                queries: batch.iter().map(|c| c.query_id.clone()).collect(),
                n_pairs: batch.iter().map(|c| c.chosen.len()).sum(),
                l_align: breakdown.l_align,
                l_prox: breakdown.l_prox,
                omega: breakdown.omega,
                total: breakdown.total,
                h_p: breakdown.h_p,
                var_mid: breakdown.var_mid,
                grad_norm: clipped,
                grad_norm_raw: raw,
                mean_delta_s: loss.mean_delta(&graph),
            };
            adam.step(&mut params, &grads);
            if params.tensors().iter().any(|(_, m)| !m.is_finite()) {
                return Err(diverged());
            }
            log.push(record);
            step += 1;
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        skipped_queries: skipped,
        mid_degenerate,
    })
}

/// Mean `s⁺ − s⁻` over every adjacent-level pair of `instances`.
pub fn mean_pair_margin(
    params: &TransformerParams,
    instances: &[RankingInstance],
    head_set: &HeadSet,
    encoder: &Encoder,
) -> Result<f64> {
    let mut reranker = Reranker::new(params, head_set, encoder, &RerankOptions::default())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for inst in instances {
        let pairs = build_pairs(inst);
        if pairs.is_empty() {
            continue;
        }
        let scores = reranker.score(inst)?;
        for p in pairs {
            let c = inst.doc_index(&p.chosen_doc_id).expect("pair from instance");
            let r = inst.doc_index(&p.rejected_doc_id).expect("pair from instance");
            sum += scores[c] - scores[r];
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("no adjacent-level pairs".into()));
    }
    Ok(sum / n as f64)
}
