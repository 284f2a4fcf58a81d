//! Greedy inference over the four stages and threshold calibration.
//!
//! Inference is split into a threshold-free trace and a cheap thresholding
//! pass. The trace keeps every span above a floor probability with its
//! candidates, ranks and pairwise relation probabilities; [`apply_thresholds`]
//! then decides what to emit. Relation scores of a mention pair depend only on
//! the two mentions and their top candidates, so one trace serves every
//! threshold setting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::{f_beta, macro_average, ratio, Counts, MacroScope, TripleSet};
use crate::kg::{EntityId, EntityRecord, KnowledgeBase, RelationId, RelationSet, Triple};
use crate::mention::{select_mentions, MentionRecognizer};
use crate::nn::SequenceEncoder;
use crate::par::Execution;
use crate::ranker::CrossEncoder;
use crate::relation::RelationExtractor;
use crate::retrieval::{BiEncoder, Candidate, VectorIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub epsilon_m: f64,
    pub epsilon_c: f64,
    pub epsilon_r: f64,
    /// The F-beta objective the thresholds were calibrated for.
    pub beta: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            epsilon_m: 0.5,
            epsilon_c: 0.5,
            epsilon_r: 0.5,
            beta: 1.0,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epsilon_m", self.epsilon_m),
            ("epsilon_c", self.epsilon_c),
            ("epsilon_r", self.epsilon_r),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::validation(format!(
                "beta = {} must be positive",
                self.beta
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        for key in ["epsilon_m", "epsilon_c", "epsilon_r", "beta"] {
            if value.get(key).is_none() {
                return Err(Error::MissingKey(key.into()));
            }
        }
        let t: Thresholds = serde_json::from_value(value)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `s = (s_m + s_c) / 2`.
pub fn combined_candidate_score(s_m: f64, s_c: f64) -> f64 {
    (s_m + s_c) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanTrace {
    pub start: usize,
    pub end: usize,
    pub s_m: f64,
    /// Bi-encoder top-k, best first.
    pub candidates: Vec<Candidate>,
    /// Cross-encoder order: (entity, probability), best first.
    pub ranked: Vec<(EntityId, f64)>,
}

impl SpanTrace {
    pub fn top(&self) -> Option<(&str, f64)> {
        self.ranked.first().map(|(e, p)| (e.as_str(), *p))
    }

    /// Combined score of the best candidate.
    pub fn score(&self) -> Option<f64> {
        self.top()
            .map(|(_, p)| combined_candidate_score(self.s_m, p))
    }

    fn accepted(&self, t: &Thresholds) -> bool {
        self.s_m > t.epsilon_m && self.score().is_some_and(|s| s > t.epsilon_c)
    }
}

/// Relation probabilities for an ordered pair of spans, indexed like the relation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTrace {
    pub subject: usize,
    pub object: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DocumentTrace {
    pub doc_id: String,
    pub spans: Vec<SpanTrace>,
    pub pairs: Vec<PairTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedMention {
    pub start: usize,
    pub end: usize,
    pub entity: EntityId,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub doc_id: String,
    pub mentions: Vec<AcceptedMention>,
    /// Sorted by triple; each triple once, with its highest probability.
    pub triples: Vec<(Triple, f64)>,
}

impl ExtractionResult {
    pub fn triple_set(&self) -> TripleSet {
        self.triples.iter().map(|(t, _)| t.clone()).collect()
    }

    pub fn prediction(&self) -> Prediction {
        Prediction {
            doc_id: self.doc_id.clone(),
            triples: self
                .triples
                .iter()
                .map(|(t, p)| (t.subject.clone(), t.relation.clone(), t.object.clone(), *p))
                .collect(),
        }
    }
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub triples: Vec<(EntityId, RelationId, EntityId, f64)>,
}

impl Prediction {
    pub fn triple_set(&self) -> TripleSet {
        self.triples
            .iter()
            .map(|(s, r, o, _)| Triple::new(s.as_str(), r.as_str(), o.as_str()))
            .collect()
    }
}

/// Candidate triples of the accepted mentions with their best probability.
fn scored_triples(
    trace: &DocumentTrace,
    t: &Thresholds,
    relations: &RelationSet,
) -> BTreeMap<Triple, f64> {
    let accepted: Vec<bool> = trace.spans.iter().map(|s| s.accepted(t)).collect();
    let mut best: BTreeMap<Triple, f64> = BTreeMap::new();
    for pair in &trace.pairs {
        if !(accepted[pair.subject] && accepted[pair.object]) {
            continue;
        }
        let (Some((s, _)), Some((o, _))) = (
            trace.spans[pair.subject].top(),
            trace.spans[pair.object].top(),
        ) else {
            continue;
        };
        if s == o {
            continue;
        }
        for (r, &p) in pair.probabilities.iter().enumerate() {
            let Some(rel) = relations.id_of(r) else {
                continue;
            };
            let triple = Triple::new(s, rel, o);
            let e = best.entry(triple).or_insert(p);
            *e = e.max(p);
        }
    }
    best
}

/// Applies the three thresholds to a trace. Mentions whose candidate sets are
/// empty never pass.
pub fn apply_thresholds(
    trace: &DocumentTrace,
    t: &Thresholds,
    relations: &RelationSet,
) -> ExtractionResult {
    let mentions = trace
        .spans
        .iter()
        .filter(|s| s.accepted(t))
        .map(|s| AcceptedMention {
            start: s.start,
            end: s.end,
            entity: s.top().unwrap().0.to_string(),
            score: s.score().unwrap(),
        })
        .collect();
    let triples = scored_triples(trace, t, relations)
        .into_iter()
        .filter(|(_, p)| *p > t.epsilon_r)
        .collect();
    ExtractionResult {
        doc_id: trace.doc_id.clone(),
        mentions,
        triples,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Candidates per mention.
    pub top_k: usize,
    /// Most probable spans kept per document.
    pub max_mentions: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            top_k: 10,
            max_mentions: 32,
        }
    }
}

/// All stage models needed for inference.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub kb: &'a KnowledgeBase,
    pub mention: &'a MentionRecognizer,
    pub biencoder: &'a BiEncoder,
    pub index: &'a VectorIndex,
    pub ranker: &'a CrossEncoder,
    pub relation: &'a RelationExtractor,
    pub config: PipelineConfig,
    /// When set, every other relation scores 0.0.
    pub restricted: Option<&'a BTreeSet<RelationId>>,
}

impl Pipeline<'_> {
    /// Mention, generation and ranking stages for spans with `s_m > floor`.
    pub fn trace_links(
        &self,
        doc_id: &str,
        tokens: &[String],
        floor: f64,
    ) -> Result<DocumentTrace> {
        let mut trace = DocumentTrace {
            doc_id: doc_id.to_string(),
            ..Default::default()
        };
        if tokens.is_empty() {
            return Ok(trace);
        }
        let scores = self.mention.score_tokens(tokens)?;
        let mut selected = select_mentions(&scores, floor);
        selected.truncate(self.config.max_mentions);
        let spans: Vec<(usize, usize)> = selected.iter().map(|m| (m.start, m.end)).collect();
        let sets = self.biencoder.retrieve(
            self.index,
            tokens,
            &spans,
            self.config.top_k,
            Execution::Sequential,
        )?;
        for (m, set) in selected.iter().zip(sets) {
            if set.candidates.is_empty() {
                log::debug!(
                    "document {doc_id}: span ({}, {}) has no candidates, dropped",
                    m.start,
                    m.end
                );
            }
            let ranked = self
                .ranker
                .rank(&self.kb.entities, tokens, &set, Execution::Sequential)?
                .into_iter()
                .map(|r| (r.entity, r.cross_prob))
                .collect();
            trace.spans.push(SpanTrace {
                start: m.start,
                end: m.end,
                s_m: m.probability,
                candidates: set.candidates,
                ranked,
            });
        }
        Ok(trace)
    }

    /// Fills `trace.pairs` using `relation` on every ordered pair of linked spans.
    pub fn trace_relations(
        &self,
        relation: &RelationExtractor,
        tokens: &[String],
        trace: &mut DocumentTrace,
    ) -> Result<()> {
        let linked: Vec<usize> = (0..trace.spans.len())
            .filter(|&i| !trace.spans[i].ranked.is_empty())
            .collect();
        let mut links: Vec<((usize, usize), &EntityRecord)> = Vec::with_capacity(linked.len());
        for &i in &linked {
            let s = &trace.spans[i];
            let id = s.top().unwrap().0;
            let e = self
                .kb
                .entities
                .get(id)
                .ok_or_else(|| Error::validation(format!("entity `{id}` not in catalog")))?;
            links.push(((s.start, s.end), e));
        }
        let ranker = self.ranker.handle();
        let external: Option<&dyn SequenceEncoder> =
            relation.needs_external_encoder().then_some(&ranker as _);
        let scored =
            relation.score_mentions(self.kb, tokens, &links, external, Execution::Sequential)?;
        trace.pairs = scored
            .into_iter()
            .filter(|p| links[p.subject].1.id != links[p.object].1.id)
            .map(|p| {
                let mut probabilities = p.probabilities;
                if let Some(allowed) = self.restricted {
                    for (r, prob) in probabilities.iter_mut().enumerate() {
                        if !self
                            .kb
                            .relations
                            .id_of(r)
                            .is_some_and(|id| allowed.contains(id))
                        {
                            *prob = 0.0;
                        }
                    }
                }
                PairTrace {
                    subject: linked[p.subject],
                    object: linked[p.object],
                    probabilities,
                }
            })
            .collect();
        Ok(())
    }

    pub fn trace(&self, doc_id: &str, tokens: &[String], floor: f64) -> Result<DocumentTrace> {
        let mut trace = self.trace_links(doc_id, tokens, floor)?;
        self.trace_relations(self.relation, tokens, &mut trace)?;
        Ok(trace)
    }

    /// Traces many documents, one per worker.
    pub fn trace_all<D>(
        &self,
        docs: &[D],
        floor: f64,
        exec: Execution,
    ) -> Result<Vec<DocumentTrace>>
    where
        D: AsDocument + Sync,
    {
        exec.map(docs, |d| self.trace(d.doc_id(), d.tokens(), floor))
            .into_iter()
            .collect()
    }

    pub fn extract(
        &self,
        doc_id: &str,
        tokens: &[String],
        t: &Thresholds,
    ) -> Result<ExtractionResult> {
        let trace = self.trace(doc_id, tokens, t.epsilon_m)?;
        Ok(apply_thresholds(&trace, t, &self.kb.relations))
    }

    pub fn extract_all<D>(
        &self,
        docs: &[D],
        t: &Thresholds,
        exec: Execution,
    ) -> Result<Vec<ExtractionResult>>
    where
        D: AsDocument + Sync,
    {
        exec.map(docs, |d| self.extract(d.doc_id(), d.tokens(), t))
            .into_iter()
            .collect()
    }
}

/// Anything with an id and a token list.
pub trait AsDocument {
    fn doc_id(&self) -> &str;
    fn tokens(&self) -> &[String];
}

impl AsDocument for crate::kg::AnnotatedDocument {
    fn doc_id(&self) -> &str {
        &self.doc_id
    }

    fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Runs every stage on one document; see [`Pipeline::extract`].
pub fn extract_triples(
    pipeline: &Pipeline,
    doc_id: &str,
    tokens: &[String],
    t: &Thresholds,
) -> Result<ExtractionResult> {
    pipeline.extract(doc_id, tokens, t)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Micro,
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub epsilon_m: Vec<f64>,
    pub epsilon_c: Vec<f64>,
    pub epsilon_r: Vec<f64>,
    /// Coordinate-descent refinement around the grid optimum.
    pub refine: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        let g: Vec<f64> = (1..=19).map(|i| i as f64 * 0.05).collect();
        GridSpec {
            epsilon_m: g.clone(),
            epsilon_c: g.clone(),
            epsilon_r: g,
            refine: true,
        }
    }
}

impl GridSpec {
    pub fn single(t: &Thresholds) -> Self {
        GridSpec {
            epsilon_m: vec![t.epsilon_m],
            epsilon_c: vec![t.epsilon_c],
            epsilon_r: vec![t.epsilon_r],
            refine: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub thresholds: Thresholds,
    /// Objective value on the calibration set.
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precomputed view of a calibration set.
struct CalibrationSet<'a> {
    traces: &'a [DocumentTrace],
    gold: &'a [TripleSet],
    relations: &'a RelationSet,
    gold_per_relation: BTreeMap<&'a str, usize>,
    gold_total: usize,
    beta: f64,
    objective: Objective,
}

/// (probability, correct, relation) of every candidate triple.
type Scored = Vec<(f64, bool, RelationId)>;

impl CalibrationSet<'_> {
    fn candidates(&self, eps_m: f64, eps_c: f64) -> Scored {
        let t = Thresholds {
            epsilon_m: eps_m,
            epsilon_c: eps_c,
            epsilon_r: 0.0,
            beta: self.beta,
        };
        let mut out = Vec::new();
        for (trace, gold) in self.traces.iter().zip(self.gold) {
            for (triple, p) in scored_triples(trace, &t, self.relations) {
                let correct = gold.contains(&triple);
                out.push((p, correct, triple.relation));
            }
        }
        out
    }

    /// (objective, precision, recall) when emitting candidates above `eps_r`.
    fn evaluate(&self, scored: &Scored, eps_r: f64) -> (f64, f64, f64) {
        match self.objective {
            Objective::Micro => {
                let (mut tp, mut fp) = (0, 0);
                for (p, ok, _) in scored {
                    if *p > eps_r {
                        if *ok {
                            tp += 1;
                        } else {
                            fp += 1;
                        }
                    }
                }
                let p = ratio(tp, tp + fp);
                let r = ratio(tp, self.gold_total);
                (f_beta(p, r, self.beta), p, r)
            }
            Objective::Macro => {
                let mut counts: BTreeMap<RelationId, Counts> = self
                    .gold_per_relation
                    .iter()
                    .map(|(r, &n)| {
                        (
                            r.to_string(),
                            Counts {
                                tp: 0,
                                fp: 0,
                                fn_: n,
                            },
                        )
                    })
                    .collect();
                for (p, ok, r) in scored {
                    if *p > eps_r {
                        let c = counts.entry(r.clone()).or_default();
                        if *ok {
                            c.tp += 1;
                            c.fn_ -= 1;
                        } else {
                            c.fp += 1;
                        }
                    }
                }
                let included: Vec<&Counts> = counts.values().filter(|c| c.support() > 0).collect();
                let score = if included.is_empty() {
                    0.0
                } else {
                    included.iter().map(|c| c.f(self.beta)).sum::<f64>() / included.len() as f64
                };
                let (p, r, _, _) = macro_average(&counts, MacroScope::Supported);
                (score, p, r)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Point {
    eps: [f64; 3],
    score: f64,
    precision: f64,
    recall: f64,
}

impl Point {
    /// Higher objective wins; ties go to the lexicographically larger thresholds.
    fn beats(&self, other: &Point) -> bool {
        if self.score != other.score {
            return self.score > other.score;
        }
        for k in 0..3 {
            if self.eps[k] != other.eps[k] {
                return self.eps[k] > other.eps[k];
            }
        }
        false
    }
}

fn best_of(points: impl IntoIterator<Item = Point>) -> Option<Point> {
    points
        .into_iter()
        .fold(None, |acc: Option<Point>, p| match acc {
            Some(a) if !p.beats(&a) => Some(a),
            _ => Some(p),
        })
}

fn min_gap(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.windows(2).map(|w| w[1] - w[0]).min_by(f64::total_cmp)
}

/// Grid search over the three thresholds maximizing F-beta of the traced
/// documents against `gold`, optionally followed by coordinate descent.
pub fn calibrate_thresholds(
    traces: &[DocumentTrace],
    gold: &[TripleSet],
    relations: &RelationSet,
    beta: f64,
    grid: &GridSpec,
    objective: Objective,
    exec: Execution,
) -> Result<Calibration> {
    if grid.epsilon_m.is_empty() || grid.epsilon_c.is_empty() || grid.epsilon_r.is_empty() {
        return Err(Error::validation("calibration grid is empty"));
    }
    if traces.is_empty() {
        return Err(Error::validation("calibration set is empty"));
    }
    if traces.len() != gold.len() {
        return Err(Error::validation(format!(
            "{} traces but {} gold documents",
            traces.len(),
            gold.len()
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::validation(format!("beta = {beta} must be positive")));
    }
    let mut gold_per_relation: BTreeMap<&str, usize> = BTreeMap::new();
    for t in gold.iter().flatten() {
        *gold_per_relation.entry(t.relation.as_str()).or_default() += 1;
    }
    let set = CalibrationSet {
        traces,
        gold,
        relations,
        gold_total: gold.iter().map(BTreeSet::len).sum(),
        gold_per_relation,
        beta,
        objective,
    };
    let pairs: Vec<(f64, f64)> = grid
        .epsilon_m
        .iter()
        .flat_map(|&m| grid.epsilon_c.iter().map(move |&c| (m, c)))
        .collect();
    let best_per_pair = exec.map(&pairs, |&(m, c)| {
        let scored = set.candidates(m, c);
        best_of(grid.epsilon_r.iter().map(|&r| {
            let (score, precision, recall) = set.evaluate(&scored, r);
            Point {
                eps: [m, c, r],
                score,
                precision,
                recall,
            }
        }))
        .unwrap()
    });
    let mut best = best_of(best_per_pair).unwrap();

    if grid.refine {
        let axes = [&grid.epsilon_m, &grid.epsilon_c, &grid.epsilon_r];
        let steps: Vec<Option<f64>> = axes.iter().map(|a| min_gap(a).map(|g| g / 2.0)).collect();
        for _round in 0..4 {
            let before = best.eps;
            for axis in 0..3 {
                let Some(step) = steps[axis] else { continue };
                let trials: Vec<[f64; 3]> = (-5..=5)
                    .filter(|&k| k != 0)
                    .map(|k| {
                        let mut eps = best.eps;
                        eps[axis] = (eps[axis] + k as f64 * step / 5.0).clamp(0.0, 1.0);
                        eps
                    })
                    .collect();
                let points = exec.map(&trials, |eps| {
                    let scored = set.candidates(eps[0], eps[1]);
                    let (score, precision, recall) = set.evaluate(&scored, eps[2]);
                    Point {
                        eps: *eps,
                        score,
                        precision,
                        recall,
                    }
                });
                best = best_of(std::iter::once(best).chain(points)).unwrap();
            }
            if best.eps == before {
                break;
            }
        }
    }
    Ok(Calibration {
        thresholds: Thresholds {
            epsilon_m: best.eps[0],
            epsilon_c: best.eps[1],
            epsilon_r: best.eps[2],
            beta,
        },
        score: best.score,
        precision: best.precision,
        recall: best.recall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relations() -> RelationSet {
        RelationSet::new(vec![("A".into(), "a".into()), ("B".into(), "b".into())]).unwrap()
    }

    fn span(start: usize, s_m: f64, entity: &str, cross: f64) -> SpanTrace {
        SpanTrace {
            start,
            end: start,
            s_m,
            candidates: vec![Candidate {
                entity: entity.into(),
                bi_score: 0.5,
            }],
            ranked: vec![(entity.into(), cross)],
        }
    }

    fn two_mentions() -> DocumentTrace {
        DocumentTrace {
            doc_id: "d".into(),
            spans: vec![span(0, 0.9, "x", 0.7), span(2, 0.8, "y", 0.9)],
            pairs: vec![
                PairTrace {
                    subject: 0,
                    object: 1,
                    probabilities: vec![0.8, 0.3],
                },
                PairTrace {
                    subject: 1,
                    object: 0,
                    probabilities: vec![0.1, 0.6],
                },
            ],
        }
    }

    #[test]
    fn combined_score_is_the_mean() {
        assert_eq!(combined_candidate_score(1.0, 1.0), 1.0);
        assert!((combined_candidate_score(0.4, 0.8) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn hand_traced_stub() {
        let trace = DocumentTrace {
            doc_id: "d".into(),
            spans: vec![span(0, 0.9, "x", 0.7)],
            pairs: vec![],
        };
        let t = Thresholds {
            epsilon_m: 0.5,
            epsilon_c: 0.75,
            epsilon_r: 0.5,
            beta: 1.0,
        };
        let r = apply_thresholds(&trace, &t, &relations());
        assert_eq!(r.mentions.len(), 1);
        assert!((r.mentions[0].score - 0.8).abs() < 1e-12);
        assert!(r.triples.is_empty());
        let r = apply_thresholds(
            &trace,
            &Thresholds {
                epsilon_c: 0.85,
                ..t
            },
            &relations(),
        );
        assert!(r.mentions.is_empty());
    }

    #[test]
    fn thresholds_gate_triples() {
        let t = Thresholds {
            epsilon_m: 0.5,
            epsilon_c: 0.5,
            epsilon_r: 0.5,
            beta: 1.0,
        };
        let r = apply_thresholds(&two_mentions(), &t, &relations());
        let got: Vec<(Triple, f64)> = r.triples;
        assert_eq!(
            got,
            vec![
                (Triple::new("x", "A", "y"), 0.8),
                (Triple::new("y", "B", "x"), 0.6)
            ]
        );
        let none = apply_thresholds(
            &two_mentions(),
            &Thresholds {
                epsilon_r: 1.0,
                ..t
            },
            &relations(),
        );
        assert!(none.triples.is_empty());
        let one = apply_thresholds(
            &two_mentions(),
            &Thresholds {
                epsilon_m: 0.85,
                ..t
            },
            &relations(),
        );
        assert_eq!(one.mentions.len(), 1);
        assert!(one.triples.is_empty());
    }

    #[test]
    fn empty_candidate_sets_are_dropped() {
        let mut trace = two_mentions();
        trace.spans[1].candidates.clear();
        trace.spans[1].ranked.clear();
        let r = apply_thresholds(&trace, &Thresholds::default(), &relations());
        assert_eq!(r.mentions.len(), 1);
        assert!(r.triples.is_empty());
    }

    #[test]
    fn duplicate_triples_keep_max_probability() {
        let mut trace = two_mentions();
        trace.spans.push(span(4, 0.9, "y", 0.9));
        trace.pairs.push(PairTrace {
            subject: 0,
            object: 2,
            probabilities: vec![0.95, 0.0],
        });
        let r = apply_thresholds(&trace, &Thresholds::default(), &relations());
        assert_eq!(r.triples[0], (Triple::new("x", "A", "y"), 0.95));
        assert_eq!(r.triples.len(), 2);
    }

    #[test]
    fn thresholds_file_round_trip_and_missing_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        let t = Thresholds {
            epsilon_m: 0.3,
            epsilon_c: 0.4,
            epsilon_r: 0.55,
            beta: 2.0,
        };
        t.save(&p).unwrap();
        assert_eq!(Thresholds::load(&p).unwrap(), t);
        std::fs::write(&p, r#"{"epsilon_m": 0.1, "epsilon_c": 0.2, "beta": 1}"#).unwrap();
        match Thresholds::load(&p) {
            Err(Error::MissingKey(k)) => assert_eq!(k, "epsilon_r"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn calibration_grid_rules() {
        let traces = vec![two_mentions()];
        let gold = vec![TripleSet::from([Triple::new("x", "A", "y")])];
        let rel = relations();
        let empty = GridSpec {
            epsilon_r: vec![],
            ..GridSpec::default()
        };
        assert!(calibrate_thresholds(
            &traces,
            &gold,
            &rel,
            1.0,
            &empty,
            Objective::Micro,
            Execution::Sequential
        )
        .is_err());
        let p = Thresholds {
            epsilon_m: 0.2,
            epsilon_c: 0.3,
            epsilon_r: 0.9,
            beta: 1.0,
        };
        let c = calibrate_thresholds(
            &traces,
            &gold,
            &rel,
            1.0,
            &GridSpec::single(&p),
            Objective::Micro,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(c.thresholds, p);
        assert_eq!(c.score, 0.0);

        // x-A-y at 0.8 is right, y-B-x at 0.6 is wrong: best cut is in [0.6, 0.8),
        // and the tie-break picks the highest thresholds that keep it.
        let c = calibrate_thresholds(
            &traces,
            &gold,
            &rel,
            1.0,
            &GridSpec::default(),
            Objective::Micro,
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(c.score, 1.0);
        let t = c.thresholds;
        assert!(t.epsilon_r >= 0.6 && t.epsilon_r < 0.8, "{t:?}");
        assert!(t.epsilon_m < 0.8 && t.epsilon_c < 0.8, "{t:?}");
        let grid_only = calibrate_thresholds(
            &traces,
            &gold,
            &rel,
            1.0,
            &GridSpec {
                refine: false,
                ..GridSpec::default()
            },
            Objective::Micro,
            Execution::Sequential,
        )
        .unwrap();
        assert!((grid_only.thresholds.epsilon_r - 0.75).abs() < 1e-9);
        assert!((grid_only.thresholds.epsilon_m - 0.75).abs() < 1e-9);
        assert!((grid_only.thresholds.epsilon_c - 0.75).abs() < 1e-9);
    }

    #[test]
    fn all_zero_outputs_return_the_tie_break_point() {
        let mut trace = two_mentions();
        for p in &mut trace.pairs {
            p.probabilities = vec![0.0, 0.0];
        }
        let gold = vec![TripleSet::from([Triple::new("x", "A", "y")])];
        let grid = GridSpec {
            refine: false,
            ..GridSpec::default()
        };
        let c = calibrate_thresholds(
            &[trace],
            &gold,
            &relations(),
            1.0,
            &grid,
            Objective::Micro,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(c.score, 0.0);
        assert!((c.thresholds.epsilon_m - 0.95).abs() < 1e-12);
        assert!((c.thresholds.epsilon_r - 0.95).abs() < 1e-12);
    }

    #[test]
    fn macro_objective_runs() {
        let gold = vec![TripleSet::from([
            Triple::new("x", "A", "y"),
            Triple::new("y", "B", "x"),
        ])];
        let c = calibrate_thresholds(
            &[two_mentions()],
            &gold,
            &relations(),
            1.0,
            &GridSpec::default(),
            Objective::Macro,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(c.score, 1.0);
        assert!(c.thresholds.epsilon_r < 0.6);
    }
}
