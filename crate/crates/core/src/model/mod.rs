//! Toy decoder-only transformer whose prefill records per-head attention maps.
//!
//! Block order is pre-norm: `x + Attn(RMSNorm(x))` then `x + FFN(RMSNorm(x))`,
//! with learned absolute positions. There is no output head; the model is only
//! ever run as a prefill, optionally truncated after `depth_limit` layers.

pub mod checkpoint;
pub mod tokenizer;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mask, Matrix, NodeId};
use crate::error::{Error, Result};
use tokenizer::{TokenId, ALPHABET_SIZE};

const NORM_EPS: f64 = 1e-6;

/// Attention head address. Layers are 1-based, heads 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}-H{}", self.layer, self.head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Std of the token embedding table at init.
    pub token_embed_std: f64,
    /// Std of the positional embedding table at init.
    pub pos_embed_std: f64,
    /// Correlation between each layer's query and key projections at init.
    /// Positive values give every head a prior for attending to tokens that
    /// match the querying token.
    pub qk_tie: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            vocab_size: ALPHABET_SIZE,
            max_seq_len: 256,
            seed: 0,
            token_embed_std: 1.0,
            pos_embed_std: 0.5,
            qk_tie: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("layer, head, model and ffn sizes must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < ALPHABET_SIZE {
            return fail(format!(
                "vocab_size {} smaller than tokenizer alphabet {}",
                self.vocab_size, ALPHABET_SIZE
            ));
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        if !(self.token_embed_std > 0.0 && self.pos_embed_std >= 0.0) {
            return fail("embedding std must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.qk_tie) {
            return fail(format!("qk_tie {} outside [0, 1]", self.qk_tie));
        }
        Ok(())
    }

    /// Closed-form parameter count implied by the shapes.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * d * d + 2 * d * self.d_ff;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer
    }

    pub fn all_heads(&self) -> Vec<HeadId> {
        (1..=self.n_layers)
            .flat_map(|l| (0..self.n_heads).map(move |h| HeadId::new(l, h)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Matrix,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerParams>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// Deterministic initialization from `config.seed`.
pub fn init_params(config: &ModelConfig) -> Result<TransformerParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let proj_std = 1.0 / (d as f64).sqrt();
    let out_std = 1.0 / (config.d_ff as f64).sqrt();
    let token_embedding = gaussian(&mut rng, config.vocab_size, d, config.token_embed_std);
    let position_embedding = gaussian(&mut rng, config.max_seq_len, d, config.pos_embed_std);
    let rho = config.qk_tie;
    let layers = (0..config.n_layers)
        .map(|_| {
            let wq = gaussian(&mut rng, d, d, proj_std);
            let free = gaussian(&mut rng, d, d, proj_std);
            let wk = Matrix::from_fn(d, d, |r, c| {
                rho * wq.get(r, c) + (1.0 - rho * rho).sqrt() * free.get(r, c)
            });
            LayerParams {
                attn_norm: Matrix::from_fn(1, d, |_, _| 1.0),
                wq,
                wk,
                wv: gaussian(&mut rng, d, d, proj_std),
                wo: gaussian(&mut rng, d, d, proj_std),
                ffn_norm: Matrix::from_fn(1, d, |_, _| 1.0),
                w_in: gaussian(&mut rng, d, config.d_ff, proj_std),
                w_out: gaussian(&mut rng, config.d_ff, d, out_std),
            }
        })
        .collect();
    Ok(TransformerParams {
        config: config.clone(),
        token_embedding,
        position_embedding,
        layers,
    })
}

impl TransformerParams {
    /// All tensors in canonical order (names are stable across versions).
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            out.extend([
                (format!("layer{n}.attn_norm"), &l.attn_norm),
                (format!("layer{n}.wq"), &l.wq),
                (format!("layer{n}.wk"), &l.wk),
                (format!("layer{n}.wv"), &l.wv),
                (format!("layer{n}.wo"), &l.wo),
                (format!("layer{n}.ffn_norm"), &l.ffn_norm),
                (format!("layer{n}.w_in"), &l.w_in),
                (format!("layer{n}.w_out"), &l.w_out),
            ]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_in,
                &mut l.w_out,
            ]);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// Rebuilds params from tensors in [`Self::tensors`] order, checking shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let template = init_shapes(&config);
        if tensors.len() != template.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.len(),
                tensors.len()
            )));
        }
        for (i, (t, shape)) in tensors.iter().zip(&template).enumerate() {
            if t.shape() != *shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked above");
        let token_embedding = next();
        let position_embedding = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ffn_norm: next(),
                w_in: next(),
                w_out: next(),
            })
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
        })
    }
}

fn init_shapes(config: &ModelConfig) -> Vec<(usize, usize)> {
    let d = config.d_model;
    let mut shapes = vec![(config.vocab_size, d), (config.max_seq_len, d)];
    for _ in 0..config.n_layers {
        shapes.extend([
            (1, d),
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (1, d),
            (d, config.d_ff),
            (config.d_ff, d),
        ]);
    }
    shapes
}

#[derive(Debug, Clone)]
struct LayerNodes {
    attn_norm: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    ffn_norm: NodeId,
    w_in: NodeId,
    w_out: NodeId,
}

/// Parameters registered as leaves of one graph.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    config: ModelConfig,
    token_embedding: NodeId,
    position_embedding: NodeId,
    layers: Vec<LayerNodes>,
}

impl ParamNodes {
    /// Registers every tensor; `trainable = false` makes them constants.
    pub fn register(graph: &mut Graph, params: &TransformerParams, trainable: bool) -> Self {
        Self::register_prefix(graph, params, trainable, params.layers.len())
    }

    /// Registers the embeddings and only the first `n_layers` layers.
    fn register_prefix(graph: &mut Graph, params: &TransformerParams, trainable: bool, n_layers: usize) -> Self {
        let mut leaf = |m: &Matrix| {
            if trainable {
                graph.param(m.clone())
            } else {
                graph.constant(m.clone())
            }
        };
        let token_embedding = leaf(&params.token_embedding);
        let position_embedding = leaf(&params.position_embedding);
        let layers = params
            .layers
            .iter()
            .take(n_layers)
            .map(|l| LayerNodes {
                attn_norm: leaf(&l.attn_norm),
                wq: leaf(&l.wq),
                wk: leaf(&l.wk),
                wv: leaf(&l.wv),
                wo: leaf(&l.wo),
                ffn_norm: leaf(&l.ffn_norm),
                w_in: leaf(&l.w_in),
                w_out: leaf(&l.w_out),
            })
            .collect();
        Self {
            config: params.config.clone(),
            token_embedding,
            position_embedding,
            layers,
        }
    }

    /// Rebuilds handles from leaves registered elsewhere, in
    /// [`TransformerParams::tensors`] order.
    pub fn from_ids(config: &ModelConfig, ids: &[NodeId]) -> Result<Self> {
        let expected = 2 + 8 * config.n_layers;
        if ids.len() != expected {
            return Err(Error::Invalid(format!(
                "expected {expected} parameter nodes, got {}",
                ids.len()
            )));
        }
        let layers = ids[2..]
            .chunks_exact(8)
            .map(|c| LayerNodes {
                attn_norm: c[0],
                wq: c[1],
                wk: c[2],
                wv: c[3],
                wo: c[4],
                ffn_norm: c[5],
                w_in: c[6],
                w_out: c[7],
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            token_embedding: ids[0],
            position_embedding: ids[1],
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Node ids in [`TransformerParams::tensors`] order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for l in &self.layers {
            out.extend([
                l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_in, l.w_out,
            ]);
        }
        out
    }
}

/// Which attention maps a prefill copies out into its [`AttentionTrace`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Retain {
    All,
    Heads(BTreeSet<HeadId>),
}

impl Retain {
    fn keeps(&self, head: HeadId) -> bool {
        match self {
            Retain::All => true,
            Retain::Heads(set) => set.contains(&head),
        }
    }
}

/// Attention maps `A[i, j]` captured during prefill.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub seq_len: usize,
    pub recorded_depth: usize,
    pub maps: BTreeMap<HeadId, Matrix>,
}

impl AttentionTrace {
    pub fn map(&self, head: HeadId) -> Option<&Matrix> {
        self.maps.get(&head)
    }
}

/// Result of a graph-building prefill.
#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub trace: AttentionTrace,
    /// Differentiable handles of every attention map up to the depth limit.
    pub attention_nodes: BTreeMap<HeadId, NodeId>,
    /// Residual stream after the last computed layer.
    pub hidden: NodeId,
}

/// Runs layers `1..=depth_limit` over `tokens` inside `graph`.
pub fn prefill_graph(
    graph: &mut Graph,
    nodes: &ParamNodes,
    tokens: &[TokenId],
    depth_limit: usize,
    retain: &Retain,
) -> Result<PrefillOutput> {
    let config = &nodes.config;
    if depth_limit == 0 || depth_limit > config.n_layers {
        return Err(Error::DepthOutOfRange {
            depth: depth_limit,
            n_layers: config.n_layers,
        });
    }
    if tokens.is_empty() {
        return Err(Error::Invalid("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Invalid(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    let t = tokens.len();
    let d_head = config.d_head();
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();
    let token_idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..t).collect();

    let tok = graph.gather_rows(nodes.token_embedding, &token_idx)?;
    let pos = graph.gather_rows(nodes.position_embedding, &positions)?;
    let mut x = graph.add(tok, pos)?;

    let mut attention_nodes = BTreeMap::new();
    let mut maps = BTreeMap::new();
    for (li, layer) in nodes.layers.iter().take(depth_limit).enumerate() {
        let h = graph.rms_norm(x, layer.attn_norm, NORM_EPS)?;
        let q = graph.matmul(h, layer.wq)?;
        let k = graph.matmul(h, layer.wk)?;
        let v = graph.matmul(h, layer.wv)?;
        let mut head_outputs = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let id = HeadId::new(li + 1, head);
            let qh = graph.slice_cols(q, head * d_head, d_head)?;
            let kh = graph.slice_cols(k, head * d_head, d_head)?;
            let vh = graph.slice_cols(v, head * d_head, d_head)?;
            let logits = graph.matmul_t(qh, kh)?;
            let logits = graph.scale(logits, inv_sqrt)?;
            let attn = graph.masked_softmax(logits, Mask::Causal)?;
            if retain.keeps(id) {
                maps.insert(id, graph.value(attn).clone());
            }
            attention_nodes.insert(id, attn);
            head_outputs.push(graph.matmul(attn, vh)?);
        }
        let merged = graph.concat_cols(&head_outputs)?;
        let attn_out = graph.matmul(merged, layer.wo)?;
        x = graph.add(x, attn_out)?;

        let h = graph.rms_norm(x, layer.ffn_norm, NORM_EPS)?;
        let hidden = graph.matmul(h, layer.w_in)?;
        let hidden = graph.gelu(hidden)?;
        let ffn_out = graph.matmul(hidden, layer.w_out)?;
        x = graph.add(x, ffn_out)?;
    }
    Ok(PrefillOutput {
        trace: AttentionTrace {
            seq_len: t,
            recorded_depth: depth_limit,
            maps,
        },
        attention_nodes,
        hidden: x,
    })
}

/// Attention maps of several continuations of one shared prefix, with the
/// prefix computed once. For each tail, every head's map holds the tail rows
/// over all prefix and tail columns, equal bit for bit to the same rows of
/// [`prefill_graph`] on `prefix ⊕ tail`. The last layer stops after its
/// attention weights.
pub fn prefill_tails_graph(
    graph: &mut Graph,
    nodes: &ParamNodes,
    prefix: &[TokenId],
    tails: &[&[TokenId]],
    depth_limit: usize,
) -> Result<Vec<BTreeMap<HeadId, NodeId>>> {
    let config = &nodes.config;
    if depth_limit == 0 || depth_limit > config.n_layers || depth_limit > nodes.layers.len() {
        return Err(Error::DepthOutOfRange {
            depth: depth_limit,
            n_layers: config.n_layers,
        });
    }
    if prefix.is_empty() || tails.iter().any(|t| t.is_empty()) {
        return Err(Error::Invalid("prefix and tails must be non-empty".into()));
    }
    for tail in tails {
        let len = prefix.len() + tail.len();
        if len > config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: config.max_seq_len,
            });
        }
    }
    if let Some(&bad) = prefix
        .iter()
        .chain(tails.iter().flat_map(|t| t.iter()))
        .find(|&&t| t as usize >= config.vocab_size)
    {
        return Err(Error::Invalid(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    let p = prefix.len();
    let d_head = config.d_head();
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();
    let embed = |graph: &mut Graph, tokens: &[TokenId], offset: usize| -> Result<NodeId> {
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (offset..offset + tokens.len()).collect();
        let tok = graph.gather_rows(nodes.token_embedding, &idx)?;
        let pos = graph.gather_rows(nodes.position_embedding, &positions)?;
        Ok(graph.add(tok, pos)?)
    };
    let mut xp = embed(graph, prefix, 0)?;
    let mut xt = tails
        .iter()
        .map(|t| embed(graph, t, p))
        .collect::<Result<Vec<_>>>()?;

    let mut maps = vec![BTreeMap::new(); tails.len()];
    for (li, layer) in nodes.layers.iter().take(depth_limit).enumerate() {
        let last = li + 1 == depth_limit;
        let hp = graph.rms_norm(xp, layer.attn_norm, NORM_EPS)?;
        let kp = graph.matmul(hp, layer.wk)?;
        let mut vp = None;
        let mut prefix_heads = Vec::new();
        if !last {
            let qp = graph.matmul(hp, layer.wq)?;
            let v = graph.matmul(hp, layer.wv)?;
            vp = Some(v);
            for head in 0..config.n_heads {
                let qh = graph.slice_cols(qp, head * d_head, d_head)?;
                let kh = graph.slice_cols(kp, head * d_head, d_head)?;
                let vh = graph.slice_cols(v, head * d_head, d_head)?;
                let logits = graph.matmul_t(qh, kh)?;
                let logits = graph.scale(logits, inv_sqrt)?;
                let attn = graph.masked_softmax(logits, Mask::Causal)?;
                prefix_heads.push(graph.matmul(attn, vh)?);
            }
        }
        let mut tail_heads = Vec::with_capacity(tails.len());
        for (v_idx, &x) in xt.iter().enumerate() {
            let ht = graph.rms_norm(x, layer.attn_norm, NORM_EPS)?;
            let qt = graph.matmul(ht, layer.wq)?;
            let kt = graph.matmul(ht, layer.wk)?;
            let k_all = graph.concat_rows(&[kp, kt])?;
            let v_all = match vp {
                Some(v) => {
                    let vt = graph.matmul(ht, layer.wv)?;
                    Some(graph.concat_rows(&[v, vt])?)
                }
                None => None,
            };
            let mut outs = Vec::new();
            for head in 0..config.n_heads {
                let qh = graph.slice_cols(qt, head * d_head, d_head)?;
                let kh = graph.slice_cols(k_all, head * d_head, d_head)?;
                let logits = graph.matmul_t(qh, kh)?;
                let logits = graph.scale(logits, inv_sqrt)?;
                let attn = graph.masked_softmax(logits, Mask::CausalOffset(p))?;
                maps[v_idx].insert(HeadId::new(li + 1, head), attn);
                if let Some(v) = v_all {
                    let vh = graph.slice_cols(v, head * d_head, d_head)?;
                    outs.push(graph.matmul(attn, vh)?);
                }
            }
            tail_heads.push(outs);
        }
        if last {
            break;
        }
        let block = |graph: &mut Graph, x: NodeId, heads: &[NodeId]| -> Result<NodeId> {
            let merged = graph.concat_cols(heads)?;
            let attn_out = graph.matmul(merged, layer.wo)?;
            let x = graph.add(x, attn_out)?;
            let h = graph.rms_norm(x, layer.ffn_norm, NORM_EPS)?;
            let hidden = graph.matmul(h, layer.w_in)?;
            let hidden = graph.gelu(hidden)?;
            let ffn_out = graph.matmul(hidden, layer.w_out)?;
            Ok(graph.add(x, ffn_out)?)
        };
        xp = block(graph, xp, &prefix_heads)?;
        for (x, heads) in xt.iter_mut().zip(&tail_heads) {
            *x = block(graph, *x, heads)?;
        }
    }
    Ok(maps)
}

/// Inference-mode prefill on constant parameters.
pub fn prefill(
    params: &TransformerParams,
    tokens: &[TokenId],
    depth_limit: usize,
    retain: &Retain,
) -> Result<AttentionTrace> {
    let mut graph = Graph::new();
    // layers past the exit depth are never read, so they are not copied in
    let nodes = ParamNodes::register_prefix(&mut graph, params, false, depth_limit.min(params.layers.len()));
    Ok(prefill_graph(&mut graph, &nodes, tokens, depth_limit, retain)?.trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_seq_len: 32,
            seed: 42,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_params(&small()).unwrap();
        let b = init_params(&small()).unwrap();
        for ((_, x), (_, y)) in a.tensors().iter().zip(b.tensors()) {
            let xb: Vec<u64> = x.as_slice().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn indivisible_model_width_rejected() {
        let cfg = ModelConfig {
            d_model: 65,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(init_params(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn default_parameter_count_matches_shapes() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg).unwrap();
        // 325*64 + 256*64 + 4*(2*64 + 4*64*64 + 2*64*128)
        assert_eq!(cfg.parameter_count(), 20_800 + 16_384 + 4 * (128 + 16_384 + 16_384));
        assert_eq!(params.parameter_count(), cfg.parameter_count());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let params = init_params(&small()).unwrap();
        let trace = prefill(&params, &[7], 3, &Retain::All).unwrap();
        assert_eq!(trace.maps.len(), 6);
        for m in trace.maps.values() {
            assert_eq!(m.as_slice(), &[1.0]);
        }
    }

    #[test]
    fn depth_and_length_errors() {
        let params = init_params(&small()).unwrap();
        assert!(matches!(
            prefill(&params, &[1, 2], 0, &Retain::All),
            Err(Error::DepthOutOfRange { .. })
        ));
        assert!(matches!(
            prefill(&params, &[1, 2], 4, &Retain::All),
            Err(Error::DepthOutOfRange { .. })
        ));
        let long = vec![5; 33];
        assert!(matches!(
            prefill(&params, &long, 1, &Retain::All),
            Err(Error::SequenceTooLong { len: 33, max: 32 })
        ));
    }

    #[test]
    fn retain_filters_recorded_maps() {
        let params = init_params(&small()).unwrap();
        let keep: BTreeSet<_> = [HeadId::new(2, 1)].into();
        let trace = prefill(&params, &[5, 6, 7], 3, &Retain::Heads(keep)).unwrap();
        assert_eq!(trace.maps.keys().copied().collect::<Vec<_>>(), vec![HeadId::new(2, 1)]);
    }

    #[test]
    fn tail_maps_match_full_prefill_rows() {
        let params = init_params(&small()).unwrap();
        let prefix = [1, 9, 2, 40, 41, 2, 42];
        let tails: [&[TokenId]; 2] = [&[3, 40, 17], &[3, 4, 4]];
        for depth in 1..=3 {
            let mut g = Graph::new();
            let nodes = ParamNodes::register(&mut g, &params, false);
            let maps = prefill_tails_graph(&mut g, &nodes, &prefix, &tails, depth).unwrap();
            for (tail, tail_maps) in tails.iter().zip(&maps) {
                let full: Vec<TokenId> = prefix.iter().chain(tail.iter()).copied().collect();
                let trace = prefill(&params, &full, depth, &Retain::All).unwrap();
                assert_eq!(tail_maps.len(), 2 * depth);
                for (head, &node) in tail_maps {
                    let got = g.value(node);
                    let want = trace.map(*head).unwrap();
                    for r in 0..tail.len() {
                        let a: Vec<u64> = got.row(r).iter().map(|v| v.to_bits()).collect();
                        let b: Vec<u64> = want.row(prefix.len() + r).iter().map(|v| v.to_bits()).collect();
                        assert_eq!(a, b, "{head} row {r} at depth {depth}");
                    }
                }
            }
        }
    }
}
