//! Run configuration: one TOML file covering every phase.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use headrank_core::data::SyntheticConfig;
use headrank_core::metrics::EvalConfig;
use headrank_core::selection::SelectionConfig;
use headrank_core::training::{AlignMode, LossConfig};
use headrank_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing corpus file; when unset the synthetic generator is used.
    pub corpus: Option<PathBuf>,
    /// Qrels for `corpus`.
    pub qrels: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            qrels: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualizeConfig {
    /// Passages shown per report.
    pub top_m: usize,
    /// Query to render; the first test query when unset.
    pub query_id: Option<String>,
}

impl Default for VisualizeConfig {
    fn default() -> Self {
        Self {
            top_m: 5,
            query_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for model initialization, pair subsampling and step order.
    pub seed: u64,
    pub instruction: String,
    /// Last column of emitted run files.
    pub run_tag: String,
    pub recalibration_rounds: usize,
    pub depth_override: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub selection: SelectionConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub visualize: VisualizeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instruction: headrank_core::scoring::DEFAULT_INSTRUCTION.to_string(),
            run_tag: "headrank".into(),
            recalibration_rounds: 1,
            depth_override: None,
            output_dir: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            selection: SelectionConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            visualize: VisualizeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        Ok(cfg.effective())
    }

    /// Copies the master seed into the per-phase seeds.
    pub fn effective(mut self) -> Self {
        self.model.seed = self.seed;
        self.loss.seed = self.seed;
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.selection.validate()?;
        self.loss.validate()?;
        self.data.synthetic.validate()?;
        if self.eval.ndcg_k == 0 || self.eval.recall_ks.iter().any(|&k| k == 0) {
            return Err(CliError::Config("eval cutoffs must be >= 1".into()));
        }
        if self.visualize.top_m == 0 {
            return Err(CliError::Config("visualize.top_m must be >= 1".into()));
        }
        if self.run_tag.is_empty() || self.run_tag.contains(char::is_whitespace) {
            return Err(CliError::Config("run_tag must be a single non-empty word".into()));
        }
        if let Some(d) = self.depth_override {
            if d == 0 || d > self.model.n_layers {
                return Err(CliError::Config(format!(
                    "depth_override {d} outside 1..={}",
                    self.model.n_layers
                )));
            }
        }
        match (&self.data.corpus, &self.data.qrels) {
            (None, None) => {}
            (Some(c), Some(q)) => {
                for p in [c, q] {
                    if !p.is_file() {
                        return Err(CliError::Config(format!("{} does not exist", p.display())));
                    }
                }
            }
            _ => return Err(CliError::Config("data.corpus and data.qrels go together".into())),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg = Self::parse(&text)?;
        Ok((cfg, text))
    }

    /// Commented TOML that parses back to `self`.
    pub fn render(&self) -> String {
        let mut o = String::new();
        let s = &self.data.synthetic;
        let m = &self.model;
        let sel = &self.selection;
        let l = &self.loss;
        let e = &self.eval;
        let w = &mut o;
        line(w, "# HeadRank run configuration. Every command stores the exact file it ran with.");
        line(w, "");
        line(w, "# Master seed: model init, preference-pair subsampling and step order.");
        kv(w, "seed", self.seed);
        line(w, "# Instruction placed before the documents.");
        kv(w, "instruction", quote(&self.instruction));
        line(w, "# Tag written in the last column of run files.");
        kv(w, "run_tag", quote(&self.run_tag));
        line(w, "# Head re-selection rounds after training.");
        kv(w, "recalibration_rounds", self.recalibration_rounds);
        line(w, "# Inference depth; unset means l_max of the head set.");
        opt(w, "depth_override", self.depth_override.map(|d| d.to_string()), "4");
        opt(w, "output_dir", self.output_dir.as_ref().map(|p| quote(&p.display().to_string())), "\"out\"");

        section(w, "data");
        line(w, "# Existing corpus and qrels; both unset means the synthetic corpus below.");
        opt(w, "corpus", self.data.corpus.as_ref().map(|p| quote(&p.display().to_string())), "\"corpus.jsonl\"");
        opt(w, "qrels", self.data.qrels.as_ref().map(|p| quote(&p.display().to_string())), "\"qrels.txt\"");

        section(w, "data.synthetic");
        kv(w, "seed", s.seed);
        line(w, "# Total queries; the last test_queries are the test split.");
        kv(w, "n_queries", s.n_queries);
        kv(w, "test_queries", s.test_queries);
        kv(w, "n_docs_per_query", s.n_docs_per_query);
        line(w, "# Grades run 0..grade_levels; a grade-g document holds g query words.");
        kv(w, "grade_levels", s.grade_levels);
        kv(w, "query_terms", s.query_terms);
        kv(w, "doc_len", s.doc_len);
        line(w, "# Std of the Gaussian noise in the simulated first-stage score.");
        kv(w, "retriever_noise", f(s.retriever_noise));
        line(w, "# Frequency ratio between successive grades.");
        kv(w, "grade_decay", f(s.grade_decay));

        section(w, "model");
        line(w, "# L: number of layers.");
        kv(w, "n_layers", m.n_layers);
        kv(w, "n_heads", m.n_heads);
        kv(w, "d_model", m.d_model);
        kv(w, "d_ff", m.d_ff);
        kv(w, "vocab_size", m.vocab_size);
        kv(w, "max_seq_len", m.max_seq_len);
        kv(w, "token_embed_std", f(m.token_embed_std));
        kv(w, "pos_embed_std", f(m.pos_embed_std));
        line(w, "# Correlation of query and key projections at init.");
        kv(w, "qk_tie", f(m.qk_tie));

        section(w, "selection");
        line(w, "# τ: temperature of the discriminative softmax.");
        kv(w, "tau", f(sel.tau));
        line(w, "# λ: entropy gate weight.");
        kv(w, "lambda", f(sel.lambda));
        line(w, "# K: number of core heads.");
        kv(w, "k", sel.k);
        line(w, "# Max lower-graded negatives per probe.");
        kv(w, "negative_cap", sel.negative_cap);

        section(w, "loss");
        line(w, "# β: proximal weight.");
        kv(w, "beta", f(l.beta));
        line(w, "# α: linear margin-push weight.");
        kv(w, "alpha", f(l.alpha));
        line(w, "# m: hinge margin.");
        kv(w, "margin_m", f(l.margin_m));
        line(w, "# γ: score-entropy weight.");
        kv(w, "gamma", f(l.gamma));
        line(w, "# η: middle-zone variance weight.");
        kv(w, "eta", f(l.eta));
        line(w, "# Global gradient-norm clip.");
        kv(w, "grad_clip", f(l.grad_clip));
        kv(w, "learning_rate", f(l.learning_rate));
        kv(w, "epochs", l.epochs);
        line(w, "# Optional cap on optimizer steps.");
        opt(w, "steps", l.steps.map(|v| v.to_string()), "200");
        line(w, "# Queries per optimizer step.");
        kv(w, "batch_size", l.batch_size);
        line(w, "# Max adjacent-level pairs per query.");
        kv(w, "pair_cap", l.pair_cap);
        line(w, "# \"headrank\" or \"ranknet\".");
        kv(w, "align_mode", quote(match l.align_mode {
            AlignMode::HeadRank => "headrank",
            AlignMode::RankNet => "ranknet",
        }));
        line(w, "# Fraction of training queries laid out in random document order.");
        kv(w, "shuffle_fraction", f(l.shuffle_fraction));

        section(w, "eval");
        kv(w, "ndcg_k", e.ndcg_k);
        let ks: Vec<String> = e.recall_ks.iter().map(|k| k.to_string()).collect();
        kv(w, "recall_ks", format!("[{}]", ks.join(", ")));
        line(w, "# Grades at or above this are relevant.");
        kv(w, "relevance_threshold", e.relevance_threshold);

        section(w, "visualize");
        kv(w, "top_m", self.visualize.top_m);
        opt(w, "query_id", self.visualize.query_id.as_ref().map(|q| quote(q)), "\"q0200\"");
        o
    }
}

fn line(out: &mut String, text: &str) {
    out.push_str(text);
    out.push('\n');
}

fn kv(out: &mut String, key: &str, value: impl std::fmt::Display) {
    writeln!(out, "{key} = {value}").expect("string write");
}

fn opt(out: &mut String, key: &str, value: Option<String>, example: &str) {
    match value {
        Some(v) => kv(out, key, v),
        None => writeln!(out, "# {key} = {example}").expect("string write"),
    }
}

fn section(out: &mut String, name: &str) {
    writeln!(out, "\n[{name}]").expect("string write");
}

fn quote(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// `Debug` keeps a decimal point or exponent, so the value stays a TOML float.
fn f(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_render_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn custom_render_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.depth_override = Some(3);
        cfg.loss.steps = Some(17);
        cfg.loss.align_mode = AlignMode::RankNet;
        cfg.loss.learning_rate = 2.5e-4;
        cfg.visualize.query_id = Some("q \"x\"".into());
        cfg.instruction = "tab\there".into();
        let cfg = cfg.effective();
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn master_seed_reaches_phases() {
        let cfg = RunConfig::parse("seed = 9").unwrap();
        assert_eq!((cfg.model.seed, cfg.loss.seed), (9, 9));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::parse("sed = 9"), Err(CliError::Config(_))));
        assert!(RunConfig::parse("[loss]\nbta = 1.0").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.depth_override = Some(9);
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data.corpus = Some("/nonexistent/corpus.jsonl".into());
        cfg.data.qrels = Some("/nonexistent/qrels.txt".into());
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.loss.grad_clip = 0.0;
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
