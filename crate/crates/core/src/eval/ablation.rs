//! Relation-extractor ablations with shared upstream stages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::{macro_metrics, micro_metrics, DocTriples, MacroScope, MetricReport};
use crate::kg::AnnotatedDocument;
use crate::par::Execution;
use crate::pipeline::{
    apply_thresholds, calibrate_thresholds, DocumentTrace, GridSpec, Objective, Pipeline,
    Thresholds,
};
use crate::relation::{RelationExtractor, RelationMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: RelationMode,
    pub thresholds: Thresholds,
    pub micro: MetricReport,
    #[serde(rename = "macro")]
    pub macro_: MetricReport,
}

/// Predicted and gold triples per document.
pub fn score_traces(
    traces: &[DocumentTrace],
    gold: &[AnnotatedDocument],
    t: &Thresholds,
    pipeline: &Pipeline,
) -> Vec<DocTriples> {
    traces
        .iter()
        .zip(gold)
        .map(|(trace, doc)| DocTriples {
            predicted: apply_thresholds(trace, t, &pipeline.kb.relations).triple_set(),
            gold: doc.triples.iter().cloned().collect(),
        })
        .collect()
}

fn with_relations(
    pipeline: &Pipeline,
    extractor: &RelationExtractor,
    links: &[DocumentTrace],
    docs: &[AnnotatedDocument],
    exec: Execution,
) -> Result<Vec<DocumentTrace>> {
    let pairs: Vec<(&DocumentTrace, &AnnotatedDocument)> = links.iter().zip(docs).collect();
    exec.map(&pairs, |(trace, doc)| {
        let mut trace = (*trace).clone();
        pipeline.trace_relations(extractor, &doc.tokens, &mut trace)?;
        Ok(trace)
    })
    .into_iter()
    .collect()
}

/// Calibrates each mode's thresholds on `dev` and scores it on `test`.
/// Mention, generation and ranking run once; only the relation stage
/// changes between rows.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    pipeline: &Pipeline,
    extractors: &BTreeMap<RelationMode, &RelationExtractor>,
    modes: &[RelationMode],
    dev: &[AnnotatedDocument],
    test: &[AnnotatedDocument],
    grid: &GridSpec,
    beta: f64,
    exec: Execution,
) -> Result<Vec<AblationRow>> {
    for mode in modes {
        match extractors.get(mode) {
            None => {
                return Err(Error::Checkpoint(format!(
                    "no relation extractor for mode {mode}"
                )))
            }
            Some(x) if x.mode() != *mode => {
                return Err(Error::Checkpoint(format!(
                    "relation extractor for mode {mode} was trained as {}",
                    x.mode()
                )))
            }
            _ => {}
        }
    }
    let floor = grid
        .epsilon_m
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
        .min(1.0);
    let link = |docs: &[AnnotatedDocument]| -> Result<Vec<DocumentTrace>> {
        exec.map(docs, |d| pipeline.trace_links(&d.doc_id, &d.tokens, floor))
            .into_iter()
            .collect()
    };
    let dev_links = link(dev)?;
    let test_links = link(test)?;
    let dev_gold: Vec<_> = dev
        .iter()
        .map(|d| d.triples.iter().cloned().collect())
        .collect();
    let universe: Vec<String> = pipeline
        .kb
        .relations
        .records()
        .iter()
        .map(|r| r.id.clone())
        .collect();
    let mut rows = Vec::with_capacity(modes.len());
    for mode in modes {
        let extractor = extractors[mode];
        let dev_traces = with_relations(pipeline, extractor, &dev_links, dev, exec)?;
        let cal = calibrate_thresholds(
            &dev_traces,
            &dev_gold,
            &pipeline.kb.relations,
            beta,
            grid,
            Objective::Micro,
            exec,
        )?;
        let test_traces = with_relations(pipeline, extractor, &test_links, test, exec)?;
        let scored = score_traces(&test_traces, test, &cal.thresholds, pipeline);
        rows.push(AblationRow {
            mode: *mode,
            thresholds: cal.thresholds,
            micro: micro_metrics(&scored),
            macro_: macro_metrics(&scored, MacroScope::Supported, &universe),
        });
    }
    Ok(rows)
}
