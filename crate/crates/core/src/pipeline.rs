//! The five phases run in memory: pair construction and head selection on the
//! training split, preference training, head recalibration, then reranking and
//! evaluation of the test split before and after training.

use crate::data::{RankingInstance, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalConfig, MetricReport};
use crate::model::TransformerParams;
use crate::rerank::{RankedList, RerankOptions, Reranker};
use crate::scoring::Encoder;
use crate::selection::{recalibrate, select_heads, HeadScoreTable, HeadSet, OverlapReport, SelectionConfig};
use crate::training::{train, LossConfig, TrainOutcome};

#[derive(Debug, Clone, Default)]
pub struct PipelineSettings {
    pub selection: SelectionConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    /// Head re-selection rounds after training.
    pub recalibration_rounds: usize,
    /// Inference depth; defaults to the final head set's `l_max`.
    pub depth_override: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Recalibration {
    pub table: HeadScoreTable,
    pub heads: HeadSet,
    pub overlap: OverlapReport,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub selection_table: HeadScoreTable,
    pub initial_heads: HeadSet,
    pub training: TrainOutcome,
    pub recalibrations: Vec<Recalibration>,
    /// Untrained model with the initial heads.
    pub untrained_lists: Vec<RankedList>,
    pub untrained_report: MetricReport,
    /// Trained model with the final heads.
    pub trained_lists: Vec<RankedList>,
    pub trained_report: MetricReport,
}

impl PipelineOutput {
    pub fn final_heads(&self) -> &HeadSet {
        self.recalibrations
            .last()
            .map(|r| &r.heads)
            .unwrap_or(&self.initial_heads)
    }
}

pub fn split_instances(instances: &[RankingInstance]) -> (Vec<RankingInstance>, Vec<RankingInstance>) {
    let train = instances.iter().filter(|i| i.split == Split::Train).cloned().collect();
    let test = instances.iter().filter(|i| i.split == Split::Test).cloned().collect();
    (train, test)
}

/// Reranks and evaluates `instances` with one model and head set.
pub fn rerank_and_evaluate(
    params: &TransformerParams,
    heads: &HeadSet,
    encoder: &Encoder,
    instances: &[RankingInstance],
    depth: Option<usize>,
    eval: &EvalConfig,
) -> Result<(Vec<RankedList>, MetricReport)> {
    let options = RerankOptions {
        depth,
        cache_baselines: true,
    };
    let lists = Reranker::new(params, heads, encoder, &options)?.rerank_all(instances)?;
    let report = evaluate(instances, &lists, eval)?;
    Ok((lists, report))
}

pub fn run_pipeline(
    instances: &[RankingInstance],
    initial: &TransformerParams,
    encoder: &Encoder,
    settings: &PipelineSettings,
    corpus_id: &str,
) -> Result<PipelineOutput> {
    let (train_set, test_set) = split_instances(instances);
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Invalid(format!(
            "pipeline needs train and test queries, got {} and {}",
            train_set.len(),
            test_set.len()
        )));
    }
    let (selection_table, initial_heads) =
        select_heads(&train_set, initial, encoder, &settings.selection, corpus_id)?;
    let training = train(initial, &train_set, &initial_heads, encoder, &settings.loss)?;

    let mut recalibrations: Vec<Recalibration> = Vec::with_capacity(settings.recalibration_rounds);
    for _ in 0..settings.recalibration_rounds {
        let previous = recalibrations.last().map(|r| &r.heads).unwrap_or(&initial_heads);
        let (table, heads, overlap) = recalibrate(
            &training.params,
            &train_set,
            encoder,
            &settings.selection,
            corpus_id,
            previous,
        )?;
        recalibrations.push(Recalibration { table, heads, overlap });
    }
    let final_heads = recalibrations.last().map(|r| &r.heads).unwrap_or(&initial_heads);

    let (untrained_lists, untrained_report) = rerank_and_evaluate(
        initial,
        &initial_heads,
        encoder,
        &test_set,
        settings.depth_override,
        &settings.eval,
    )?;
    let (trained_lists, trained_report) = rerank_and_evaluate(
        &training.params,
        final_heads,
        encoder,
        &test_set,
        settings.depth_override,
        &settings.eval,
    )?;
    Ok(PipelineOutput {
        selection_table,
        initial_heads,
        training,
        recalibrations,
        untrained_lists,
        untrained_report,
        trained_lists,
        trained_report,
    })
}
