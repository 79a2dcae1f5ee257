//! One function per subcommand. Each writes its artifacts, the exact config
//! it ran with and a manifest into its output directory.

use std::path::{Path, PathBuf};

use headrank_core::data::{
    format_corpus, format_qrels, generate_synthetic, parse_corpus, parse_qrels, RankingInstance, Split,
};
use headrank_core::metrics::{evaluate, MetricReport};
use headrank_core::model::{checkpoint, init_params, prefill, Retain};
use headrank_core::pipeline::split_instances;
use headrank_core::rerank::{format_run, parse_run, RankedList, RerankOptions, Reranker};
use headrank_core::scoring::Encoder;
use headrank_core::selection::{parse_head_list, recalibrate, select_heads, HeadSet};
use headrank_core::training::{format_log, train};
use headrank_core::TransformerParams;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, PhaseExt};
use crate::manifest::{Manifest, OutputDir};
use crate::reports::{diagnose_table, passage_tokens, render_heatmap};

pub const CONFIG_FILE: &str = "config.toml";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const QRELS_FILE: &str = "qrels.txt";
pub const HEADS_FILE: &str = "heads.json";
pub const HEAD_SCORES_FILE: &str = "head_scores.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const INIT_CHECKPOINT_FILE: &str = "model_init.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const OVERLAP_FILE: &str = "overlap.md";
pub const RUN_FILE: &str = "run.txt";
pub const METRICS_FILE: &str = "metrics.json";
pub const DIAGNOSE_FILE: &str = "diagnose.md";
pub const HEATMAP_FILE: &str = "heatmap.html";

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub depth_override: Option<usize>,
    /// Head list (`L2-H1,L3-H0`) or a head-set file.
    pub heads: Option<String>,
    pub k: Option<usize>,
}

/// A config and the exact text to store with the outputs.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub text: String,
}

/// Reads `--config` (or the defaults) and applies flag overrides. The stored
/// text is the file verbatim unless a flag changed a value.
pub fn load_config(common: &Common) -> CliResult<Loaded> {
    let (mut config, text) = match &common.config {
        Some(path) => {
            let (cfg, text) = RunConfig::load(path)?;
            (cfg, Some(text))
        }
        None => (RunConfig::default(), None),
    };
    let mut changed = text.is_none();
    if let Some(seed) = common.seed {
        changed |= config.seed != seed;
        config.seed = seed;
    }
    if let Some(d) = common.depth_override {
        changed |= config.depth_override != Some(d);
        config.depth_override = Some(d);
    }
    if let Some(k) = common.k {
        changed |= config.selection.k != k;
        config.selection.k = k;
    }
    let config = config.effective();
    config.validate()?;
    let text = match text {
        Some(t) if !changed => t,
        _ => config.render(),
    };
    Ok(Loaded { config, text })
}

fn start(common: &Common, command: &str) -> CliResult<(Loaded, OutputDir)> {
    let loaded = load_config(common)?;
    let mut out = OutputDir::create(&common.out, command)?;
    out.write(CONFIG_FILE, loaded.text.as_bytes(), &[])?;
    Ok((loaded, out))
}

fn utf8(bytes: Vec<u8>, path: &Path) -> CliResult<String> {
    String::from_utf8(bytes).map_err(|e| {
        CliError::Core(headrank_core::Error::Invalid(format!("{}: {e}", path.display())))
    })
}

/// Corpus and qrels files as given by flags, else by the config.
#[derive(Debug, Clone, Default)]
pub struct CorpusArgs {
    pub corpus: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
}

fn read_corpus(out: &mut OutputDir, args: &CorpusArgs, cfg: &RunConfig) -> CliResult<Vec<RankingInstance>> {
    let corpus = args.corpus.clone().or_else(|| cfg.data.corpus.clone());
    let qrels = args.qrels.clone().or_else(|| cfg.data.qrels.clone());
    let (Some(corpus), Some(qrels)) = (corpus, qrels) else {
        return Err(CliError::Config(
            "a corpus is required: pass --corpus and --qrels or set data.corpus and data.qrels".into(),
        ));
    };
    let qrels_text = utf8(out.input("qrels", &qrels)?, &qrels)?;
    let corpus_text = utf8(out.input("corpus", &corpus)?, &corpus)?;
    let q = parse_qrels(&qrels_text, &qrels.display().to_string())?;
    Ok(parse_corpus(&corpus_text, &corpus.display().to_string(), &q)?)
}

fn read_checkpoint(out: &mut OutputDir, path: &Path) -> CliResult<TransformerParams> {
    Ok(checkpoint::decode(&out.input("checkpoint", path)?)?)
}

/// `--heads` as a head list or a head-set file; `None` when neither applies.
fn read_heads(out: &mut OutputDir, common: &Common, cfg: &RunConfig) -> CliResult<Option<HeadSet>> {
    let Some(spec) = &common.heads else {
        return Ok(None);
    };
    if let Ok(ids) = parse_head_list(spec) {
        return Ok(Some(HeadSet::from_ids(&ids, cfg.selection.clone())?));
    }
    let path = PathBuf::from(spec);
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "--heads {spec} is neither a head list nor an existing file"
        )));
    }
    let text = utf8(out.input("heads", &path)?, &path)?;
    Ok(Some(HeadSet::from_json(&text)?))
}

fn require_heads(out: &mut OutputDir, common: &Common, cfg: &RunConfig) -> CliResult<(HeadSet, Vec<&'static str>)> {
    let heads = read_heads(out, common, cfg)?
        .ok_or_else(|| CliError::Config("--heads is required".into()))?;
    let inputs = if out.manifest().inputs.iter().any(|i| i.name == "heads") {
        vec!["heads"]
    } else {
        vec![]
    };
    Ok((heads, inputs))
}

fn check_model(params: &TransformerParams, heads: &HeadSet) -> CliResult<()> {
    if heads.l_max > params.config.n_layers {
        return Err(CliError::Config(format!(
            "head set needs depth {} but the model has {} layers",
            heads.l_max, params.config.n_layers
        )));
    }
    Ok(())
}

fn encoder(cfg: &RunConfig) -> Encoder {
    Encoder::new(&cfg.instruction)
}

fn json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

pub fn gen_data(common: &Common) -> CliResult<Manifest> {
    let (loaded, mut out) = start(common, "gen-data")?;
    let instances = generate_synthetic(&loaded.config.data.synthetic)?;
    out.write(CORPUS_FILE, format_corpus(&instances).as_bytes(), &[CONFIG_FILE])?;
    out.write(QRELS_FILE, format_qrels(&instances).as_bytes(), &[CONFIG_FILE])?;
    out.finish()
}

/// Checkpoint from `--checkpoint`, or freshly initialized from the config
/// and written as `model_init.ckpt`. Returns the manifest name to cite.
fn model_or_init(
    out: &mut OutputDir,
    path: Option<&Path>,
    cfg: &RunConfig,
) -> CliResult<(TransformerParams, &'static str)> {
    match path {
        Some(p) => Ok((read_checkpoint(out, p)?, "checkpoint")),
        None => {
            let params = init_params(&cfg.model)?;
            out.write(INIT_CHECKPOINT_FILE, &checkpoint::encode(&params), &[CONFIG_FILE])?;
            Ok((params, INIT_CHECKPOINT_FILE))
        }
    }
}

pub fn select_heads_cmd(common: &Common, data: &CorpusArgs, ckpt: Option<&Path>) -> CliResult<Manifest> {
    let (loaded, mut out) = start(common, "select-heads")?;
    let cfg = &loaded.config;
    let instances = read_corpus(&mut out, data, cfg)?;
    let (train_set, _) = split_instances(&instances);
    let (params, model_name) = model_or_init(&mut out, ckpt, cfg)?;
    let corpus_id = out.manifest().inputs.iter().find(|i| i.name == "corpus").map(|i| i.sha256.clone()).unwrap_or_default();
    let (table, heads) = select_heads(&train_set, &params, &encoder(cfg), &cfg.selection, &corpus_id)?;
    let deps = [CONFIG_FILE, "corpus", model_name];
    out.write(HEAD_SCORES_FILE, json(&table).as_bytes(), &deps)?;
    out.write(HEADS_FILE, heads.to_json().as_bytes(), &deps)?;
    out.finish()
}

pub fn train_cmd(common: &Common, data: &CorpusArgs, ckpt: Option<&Path>) -> CliResult<Manifest> {
    let (loaded, mut out) = start(common, "train")?;
    let cfg = &loaded.config;
    let instances = read_corpus(&mut out, data, cfg)?;
    let (train_set, _) = split_instances(&instances);
    let (heads, head_deps) = require_heads(&mut out, common, cfg)?;
    let (params, model_name) = model_or_init(&mut out, ckpt, cfg)?;
    check_model(&params, &heads)?;
    let outcome = train(&params, &train_set, &heads, &encoder(cfg), &cfg.loss)?;
    let mut deps = vec![CONFIG_FILE, "corpus", model_name];
    deps.extend(head_deps);
    out.write(TRAIN_LOG_FILE, format_log(&outcome.log).as_bytes(), &deps)?;
    out.write(CHECKPOINT_FILE, &checkpoint::encode(&outcome.params), &deps)?;
    out.finish()
}

pub fn recalibrate_cmd(common: &Common, data: &CorpusArgs, ckpt: &Path) -> CliResult<Manifest> {
    let (loaded, mut out) = start(common, "recalibrate")?;
    let cfg = &loaded.config;
    let instances = read_corpus(&mut out, data, cfg)?;
    let (train_set, _) = split_instances(&instances);
    let (previous, head_deps) = require_heads(&mut out, common, cfg)?;
    let params = read_checkpoint(&mut out, ckpt)?;
    let corpus_id = out.manifest().inputs.iter().find(|i| i.name == "corpus").map(|i| i.sha256.clone()).unwrap_or_default();
    let (table, heads, overlap) =
        recalibrate(&params, &train_set, &encoder(cfg), &cfg.selection, &corpus_id, &previous)?;
    let mut deps = vec![CONFIG_FILE, "corpus", "checkpoint"];
    deps.extend(head_deps);
    out.write(HEAD_SCORES_FILE, json(&table).as_bytes(), &deps)?;
    out.write(HEADS_FILE, heads.to_json().as_bytes(), &deps)?;
    out.write(OVERLAP_FILE, overlap.to_table().as_bytes(), &deps)?;
    out.finish()
}

fn rerank_lists(
    params: &TransformerParams,
    heads: &HeadSet,
    cfg: &RunConfig,
    instances: &[RankingInstance],
) -> CliResult<Vec<RankedList>> {
    check_model(params, heads)?;
    let enc = encoder(cfg);
    let options = RerankOptions {
        depth: cfg.depth_override,
        cache_baselines: true,
    };
    let mut reranker = Reranker::new(params, heads, &enc, &options)?;
    let lists = reranker.rerank_all(instances)?;
    for (inst, list) in instances.iter().zip(&lists) {
        list.check_permutation_of(inst)?;
    }
    Ok(lists)
}

pub fn rerank_cmd(common: &Common, data: &CorpusArgs, ckpt: Option<&Path>) -> CliResult<Manifest> {
    let (loaded, mut out) = start(common, "rerank")?;
    let cfg = &loaded.config;
    let instances = read_corpus(&mut out, data, cfg)?;
    let (_, test) = split_instances(&instances);
    let (heads, head_deps) = require_heads(&mut out, common, cfg)?;
    let (params, model_name) = model_or_init(&mut out, ckpt, cfg)?;
    let lists = rerank_lists(&params, &heads, cfg, &test)?;
    let mut deps = vec![CONFIG_FILE, "corpus", model_name];
    deps.extend(head_deps);
    out.write(RUN_FILE, format_run(&lists, &cfg.run_tag).as_bytes(), &deps)?;
    out.finish()
}

fn evaluate_run(instances: &[RankingInstance], lists: &[RankedList], cfg: &RunConfig) -> CliResult<MetricReport> {
    // reports follow the run file's query order
    let mut matched = Vec::with_capacity(lists.len());
    for list in lists {
        let inst = instances
            .iter()
            .find(|i| i.query_id == list.query_id())
            .ok_or_else(|| CliError::Core(headrank_core::Error::Invalid(format!(
                "run query {} not in corpus",
                list.query_id()
            ))))?;
        list.check_permutation_of(inst)?;
        matched.push(inst.clone());
    }
    Ok(evaluate(&matched, lists, &cfg.eval)?)
}

fn read_run(out: &mut OutputDir, name: &str, path: &Path) -> CliResult<Vec<RankedList>> {
    let text = utf8(out.input(name, path)?, path)?;
    Ok(parse_run(&text, &path.display().to_string())?)
}

pub fn eval_cmd(common: &Common, data: &CorpusArgs, run: &Path) -> CliResult<Manifest> {
    let (loaded, mut out) = start(common, "eval")?;
    let cfg = &loaded.config;
    let instances = read_corpus(&mut out, data, cfg)?;
    let lists = read_run(&mut out, "run", run)?;
    let report = evaluate_run(&instances, &lists, cfg)?;
    out.write(METRICS_FILE, report.to_json().as_bytes(), &[CONFIG_FILE, "corpus", "run"])?;
    out.finish()
}

/// `name=path`, or a bare path named by its file stem.
pub fn parse_named_run(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(arg);
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| arg.to_string());
            (name, path)
        }
    }
}

pub fn diagnose_cmd(common: &Common, data: &CorpusArgs, runs: &[(String, PathBuf)]) -> CliResult<Manifest> {
    if runs.is_empty() {
        return Err(CliError::Config("diagnose needs at least one --run".into()));
    }
    let (loaded, mut out) = start(common, "diagnose")?;
    let cfg = &loaded.config;
    let instances = read_corpus(&mut out, data, cfg)?;
    let mut reports = Vec::new();
    let mut deps = vec![CONFIG_FILE.to_string(), "corpus".to_string()];
    for (i, (name, path)) in runs.iter().enumerate() {
        let input = format!("run{i}:{name}");
        let lists = read_run(&mut out, &input, path)?;
        reports.push((name.clone(), evaluate_run(&instances, &lists, cfg)?));
        deps.push(input);
    }
    let deps: Vec<&str> = deps.iter().map(String::as_str).collect();
    out.write(DIAGNOSE_FILE, diagnose_table(&reports).as_bytes(), &deps)?;
    out.finish()
}

fn heatmap(
    params: &TransformerParams,
    heads: &HeadSet,
    cfg: &RunConfig,
    instance: &RankingInstance,
    runs: &[(String, RankedList)],
) -> CliResult<String> {
    let enc = encoder(cfg);
    let encoded = enc.encode(instance, params.config.max_seq_len)?;
    let retain = Retain::Heads(heads.ids().into_iter().collect());
    let depth = cfg.depth_override.unwrap_or(heads.l_max);
    let trace = prefill(params, &encoded.tokens, depth, &retain)?;
    let baseline = prefill(params, &encoded.calibration, depth, &retain)?;
    let passages = passage_tokens(instance, &encoded, &trace, &baseline, heads)?;
    Ok(render_heatmap(instance, &passages, runs, cfg.visualize.top_m)?)
}

fn pick_query<'a>(instances: &'a [RankingInstance], cfg: &RunConfig) -> CliResult<&'a RankingInstance> {
    match &cfg.visualize.query_id {
        Some(q) => instances.iter().find(|i| &i.query_id == q).ok_or_else(|| {
            CliError::Config(format!("visualize.query_id {q} not in the corpus"))
        }),
        None => instances
            .iter()
            .find(|i| i.split == Split::Test)
            .or(instances.first())
            .ok_or_else(|| CliError::Config("empty corpus".into())),
    }
}

pub fn visualize_cmd(
    common: &Common,
    data: &CorpusArgs,
    ckpt: Option<&Path>,
    runs: &[(String, PathBuf)],
) -> CliResult<Manifest> {
    let (loaded, mut out) = start(common, "visualize")?;
    let cfg = &loaded.config;
    let instances = read_corpus(&mut out, data, cfg)?;
    let (heads, head_deps) = require_heads(&mut out, common, cfg)?;
    let (params, model_name) = model_or_init(&mut out, ckpt, cfg)?;
    check_model(&params, &heads)?;
    let instance = pick_query(&instances, cfg)?;
    let mut deps = vec![CONFIG_FILE.to_string(), "corpus".to_string(), model_name.to_string()];
    deps.extend(head_deps.iter().map(|s| s.to_string()));
    let mut named = Vec::new();
    if runs.is_empty() {
        let list = rerank_lists(&params, &heads, cfg, std::slice::from_ref(instance))?.remove(0);
        named.push((cfg.run_tag.clone(), list));
    }
    for (i, (name, path)) in runs.iter().enumerate() {
        let input = format!("run{i}:{name}");
        let lists = read_run(&mut out, &input, path)?;
        let list = lists
            .into_iter()
            .find(|l| l.query_id() == instance.query_id)
            .ok_or_else(|| CliError::Config(format!("{} has no {}", path.display(), instance.query_id)))?;
        list.check_permutation_of(instance)?;
        named.push((name.clone(), list));
        deps.push(input);
    }
    let html = heatmap(&params, &heads, cfg, instance, &named)?;
    let deps: Vec<&str> = deps.iter().map(String::as_str).collect();
    out.write(HEATMAP_FILE, html.as_bytes(), &deps)?;
    out.finish()
}

/// Every phase in order into one directory.
pub fn pipeline(common: &Common) -> CliResult<Manifest> {
    let (loaded, mut out) = start(common, "pipeline").phase("config")?;
    let cfg = &loaded.config;
    let enc = encoder(cfg);

    let instances = match (&cfg.data.corpus, &cfg.data.qrels) {
        (Some(_), Some(_)) => read_corpus(&mut out, &CorpusArgs::default(), cfg).phase("data")?,
        _ => {
            let instances = generate_synthetic(&cfg.data.synthetic).phase("data")?;
            out.write(CORPUS_FILE, format_corpus(&instances).as_bytes(), &[CONFIG_FILE]).phase("data")?;
            out.write(QRELS_FILE, format_qrels(&instances).as_bytes(), &[CONFIG_FILE]).phase("data")?;
            instances
        }
    };
    let corpus_dep = if out.manifest().artifact(CORPUS_FILE).is_some() { CORPUS_FILE } else { "corpus" };
    let corpus_id = headrank_core::model::checkpoint::sha256_hex(format_corpus(&instances).as_bytes());
    let (train_set, test_set) = split_instances(&instances);

    let initial = init_params(&cfg.model).phase("select-heads")?;
    out.write(INIT_CHECKPOINT_FILE, &checkpoint::encode(&initial), &[CONFIG_FILE]).phase("select-heads")?;
    let (table, initial_heads) = match read_heads(&mut out, common, cfg).phase("select-heads")? {
        Some(h) => (None, h),
        None => {
            let (t, h) = select_heads(&train_set, &initial, &enc, &cfg.selection, &corpus_id).phase("select-heads")?;
            (Some(t), h)
        }
    };
    let sel_deps = [CONFIG_FILE, corpus_dep, INIT_CHECKPOINT_FILE];
    if let Some(t) = &table {
        out.write("head_scores_initial.json", json(t).as_bytes(), &sel_deps).phase("select-heads")?;
    }
    out.write("heads_initial.json", initial_heads.to_json().as_bytes(), &sel_deps).phase("select-heads")?;
    check_model(&initial, &initial_heads).phase("select-heads")?;

    let outcome = train(&initial, &train_set, &initial_heads, &enc, &cfg.loss).phase("train")?;
    let train_deps = [CONFIG_FILE, corpus_dep, INIT_CHECKPOINT_FILE, "heads_initial.json"];
    out.write(TRAIN_LOG_FILE, format_log(&outcome.log).as_bytes(), &train_deps).phase("train")?;
    out.write(CHECKPOINT_FILE, &checkpoint::encode(&outcome.params), &train_deps).phase("train")?;

    let mut heads = initial_heads.clone();
    let mut heads_name = "heads_initial.json".to_string();
    for round in 1..=cfg.recalibration_rounds {
        let (t, h, overlap) = recalibrate(&outcome.params, &train_set, &enc, &cfg.selection, &corpus_id, &heads)
            .phase("recalibrate")?;
        let name = if round == cfg.recalibration_rounds { HEADS_FILE.to_string() } else { format!("heads_round{round}.json") };
        let deps = [CONFIG_FILE, corpus_dep, CHECKPOINT_FILE, heads_name.as_str()];
        out.write(&format!("head_scores_round{round}.json"), json(&t).as_bytes(), &deps).phase("recalibrate")?;
        out.write(&format!("overlap_round{round}.md"), overlap.to_table().as_bytes(), &deps).phase("recalibrate")?;
        out.write(&name, h.to_json().as_bytes(), &deps).phase("recalibrate")?;
        heads = h;
        heads_name = name;
    }

    let untrained = rerank_lists(&initial, &initial_heads, cfg, &test_set).phase("rerank")?;
    let trained = rerank_lists(&outcome.params, &heads, cfg, &test_set).phase("rerank")?;
    out.write("run_untrained.txt", format_run(&untrained, &format!("{}-untrained", cfg.run_tag)).as_bytes(),
        &[CONFIG_FILE, corpus_dep, INIT_CHECKPOINT_FILE, "heads_initial.json"]).phase("rerank")?;
    out.write(RUN_FILE, format_run(&trained, &cfg.run_tag).as_bytes(),
        &[CONFIG_FILE, corpus_dep, CHECKPOINT_FILE, heads_name.as_str()]).phase("rerank")?;

    let r_untrained = evaluate(&test_set, &untrained, &cfg.eval).phase("eval")?;
    let r_trained = evaluate(&test_set, &trained, &cfg.eval).phase("eval")?;
    out.write("metrics_untrained.json", r_untrained.to_json().as_bytes(), &[CONFIG_FILE, corpus_dep, "run_untrained.txt"]).phase("eval")?;
    out.write(METRICS_FILE, r_trained.to_json().as_bytes(), &[CONFIG_FILE, corpus_dep, RUN_FILE]).phase("eval")?;

    let table = diagnose_table(&[("untrained".into(), r_untrained), ("trained".into(), r_trained)]);
    out.write(DIAGNOSE_FILE, table.as_bytes(), &["metrics_untrained.json", METRICS_FILE]).phase("diagnose")?;

    let instance = pick_query(&test_set, cfg).phase("visualize")?;
    let pos = test_set.iter().position(|i| i.query_id == instance.query_id).expect("picked from test set");
    let runs = vec![("trained".to_string(), trained[pos].clone()), ("untrained".to_string(), untrained[pos].clone())];
    let html = heatmap(&outcome.params, &heads, cfg, instance, &runs).phase("visualize")?;
    out.write(HEATMAP_FILE, html.as_bytes(), &[CONFIG_FILE, corpus_dep, CHECKPOINT_FILE, heads_name.as_str(), RUN_FILE, "run_untrained.txt"]).phase("visualize")?;
    out.finish().phase("manifest")
}
