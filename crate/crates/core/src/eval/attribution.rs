//! Blames each missed gold triple on the earliest stage that lost it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{AnnotatedDocument, RelationSet};
use crate::pipeline::{apply_thresholds, DocumentTrace, Thresholds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    MentionRecognition,
    CandidateGeneration,
    CandidateRanking,
    RelationExtraction,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::MentionRecognition,
        Stage::CandidateGeneration,
        Stage::CandidateRanking,
        Stage::RelationExtraction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::MentionRecognition => "mention_recognition",
            Stage::CandidateGeneration => "candidate_generation",
            Stage::CandidateRanking => "candidate_ranking",
            Stage::RelationExtraction => "relation_extraction",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorAttribution {
    pub counts: BTreeMap<Stage, usize>,
    /// Sum to 1 when `total > 0`, all zero otherwise.
    pub fractions: BTreeMap<Stage, f64>,
    /// Number of false-negative gold triples.
    pub total: usize,
}

/// How far an entity got: 0 no span above ε_m, 1 span but entity not
/// generated, 2 generated but not the accepted top-1, 3 linked.
fn entity_progress(
    trace: &DocumentTrace,
    doc: &AnnotatedDocument,
    entity: &str,
    t: &Thresholds,
) -> usize {
    doc.mentions
        .iter()
        .filter(|m| m.entity == entity)
        .map(|m| {
            let Some(span) = trace
                .spans
                .iter()
                .find(|s| s.start == m.start && s.end == m.end && s.s_m > t.epsilon_m)
            else {
                return 0;
            };
            if !span.candidates.iter().any(|c| c.entity == entity) {
                return 1;
            }
            match (span.top(), span.score()) {
                (Some((top, _)), Some(s)) if top == entity && s > t.epsilon_c => 3,
                _ => 2,
            }
        })
        .max()
        .unwrap_or(0)
}

pub fn attribute_errors(
    traces: &[DocumentTrace],
    gold: &[AnnotatedDocument],
    t: &Thresholds,
    relations: &RelationSet,
) -> Result<ErrorAttribution> {
    if traces.len() != gold.len() {
        return Err(Error::validation(format!(
            "{} traces but {} gold documents",
            traces.len(),
            gold.len()
        )));
    }
    let mut counts: BTreeMap<Stage, usize> = Stage::ALL.iter().map(|&s| (s, 0)).collect();
    for (trace, doc) in traces.iter().zip(gold) {
        let predicted = apply_thresholds(trace, t, relations).triple_set();
        for triple in doc.triples.iter().filter(|x| !predicted.contains(x)) {
            let reached = entity_progress(trace, doc, &triple.subject, t).min(entity_progress(
                trace,
                doc,
                &triple.object,
                t,
            ));
            *counts.get_mut(&Stage::ALL[reached]).unwrap() += 1;
        }
    }
    let total: usize = counts.values().sum();
    let fractions = counts
        .iter()
        .map(|(&s, &c)| {
            (
                s,
                if total == 0 {
                    0.0
                } else {
                    c as f64 / total as f64
                },
            )
        })
        .collect();
    Ok(ErrorAttribution {
        counts,
        fractions,
        total,
    })
}
