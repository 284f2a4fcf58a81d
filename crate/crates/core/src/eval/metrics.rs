//! Exact-match triple metrics. Every 0/0 ratio is defined as 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::kg::{RelationId, Triple};

pub type TripleSet = BTreeSet<Triple>;

/// Predicted and gold triples of one document.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocTriples {
    pub predicted: TripleSet,
    pub gold: TripleSet,
}

impl DocTriples {
    pub fn new(
        predicted: impl IntoIterator<Item = Triple>,
        gold: impl IntoIterator<Item = Triple>,
    ) -> Self {
        DocTriples {
            predicted: predicted.into_iter().collect(),
            gold: gold.into_iter().collect(),
        }
    }
}

pub fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(1 + b^2) p r / (b^2 p + r)`, or 0 when the denominator vanishes.
pub fn f_beta(p: f64, r: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * p + r;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / den
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f(&self, beta: f64) -> f64 {
        f_beta(self.precision(), self.recall(), beta)
    }

    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn of(predicted: &TripleSet, gold: &TripleSet) -> Counts {
        let tp = predicted.intersection(gold).count();
        Counts {
            tp,
            fp: predicted.len() - tp,
            fn_: gold.len() - tp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Micro,
    Macro,
}

/// Which relations the macro average runs over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroScope {
    /// Relations with gold support > 0.
    #[default]
    Supported,
    /// Every relation of the given universe plus any that occur.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

impl From<Counts> for RelationScore {
    fn from(c: Counts) -> Self {
        RelationScore {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f(1.0),
            support: c.support(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub level: Level,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
    pub per_relation: BTreeMap<RelationId, RelationScore>,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?}: P {:.4} R {:.4} F1 {:.4} F2 {:.4}",
            self.level, self.precision, self.recall, self.f1, self.f2
        )
    }
}

/// Per-relation counts pooled over documents.
pub fn relation_counts<'a>(
    docs: impl IntoIterator<Item = &'a DocTriples>,
) -> BTreeMap<RelationId, Counts> {
    let mut out: BTreeMap<RelationId, Counts> = BTreeMap::new();
    for d in docs {
        for t in &d.predicted {
            let c = out.entry(t.relation.clone()).or_default();
            if d.gold.contains(t) {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        for t in d.gold.difference(&d.predicted) {
            out.entry(t.relation.clone()).or_default().fn_ += 1;
        }
    }
    out
}

pub fn micro_counts<'a>(docs: impl IntoIterator<Item = &'a DocTriples>) -> Counts {
    let mut total = Counts::default();
    for d in docs {
        total.add(Counts::of(&d.predicted, &d.gold));
    }
    total
}

fn per_relation_scores(
    counts: &BTreeMap<RelationId, Counts>,
) -> BTreeMap<RelationId, RelationScore> {
    counts
        .iter()
        .map(|(r, c)| (r.clone(), (*c).into()))
        .collect()
}

pub fn micro_metrics(docs: &[DocTriples]) -> MetricReport {
    let c = micro_counts(docs);
    MetricReport {
        level: Level::Micro,
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f(1.0),
        f2: c.f(2.0),
        per_relation: per_relation_scores(&relation_counts(docs)),
    }
}

/// Averages per-relation P, R, F1 and F2. `universe` only matters for
/// [`MacroScope::All`]; relations in it without support score 0 recall.
pub fn macro_metrics(
    docs: &[DocTriples],
    scope: MacroScope,
    universe: &[RelationId],
) -> MetricReport {
    let mut counts = relation_counts(docs);
    if scope == MacroScope::All {
        for r in universe {
            counts.entry(r.clone()).or_default();
        }
    }
    let (p, r, f1, f2) = macro_average(&counts, scope);
    MetricReport {
        level: Level::Macro,
        precision: p,
        recall: r,
        f1,
        f2,
        per_relation: per_relation_scores(&counts),
    }
}

/// Macro (P, R, F1, F2) from per-relation counts.
pub fn macro_average(
    counts: &BTreeMap<RelationId, Counts>,
    scope: MacroScope,
) -> (f64, f64, f64, f64) {
    let included: Vec<&Counts> = counts
        .values()
        .filter(|c| scope == MacroScope::All || c.support() > 0)
        .collect();
    if included.is_empty() {
        return (0.0, 0.0, 0.0, 0.0);
    }
    let n = included.len() as f64;
    let mean = |f: &dyn Fn(&Counts) -> f64| included.iter().map(|c| f(c)).sum::<f64>() / n;
    (
        mean(&|c| c.precision()),
        mean(&|c| c.recall()),
        mean(&|c| c.f(1.0)),
        mean(&|c| c.f(2.0)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str, r: &str, o: &str) -> Triple {
        Triple::new(s, r, o)
    }

    #[test]
    fn f_beta_values() {
        assert!((f_beta(0.5, 1.0, 1.0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((f_beta(0.5, 1.0, 2.0) - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(f_beta(0.0, 0.0, 1.0), 0.0);
        for x in [0.1, 0.37, 1.0] {
            for b in [0.5, 1.0, 2.0] {
                assert!((f_beta(x, x, b) - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn three_triple_instance() {
        let gold = [t("a", "A", "b"), t("c", "A", "d"), t("e", "B", "f")];
        let docs = vec![DocTriples::new(gold[..2].to_vec(), gold.to_vec())];
        let micro = micro_metrics(&docs);
        assert_eq!(micro.precision, 1.0);
        assert!((micro.recall - 2.0 / 3.0).abs() < 1e-12);
        let mac = macro_metrics(&docs, MacroScope::Supported, &[]);
        assert_eq!(mac.recall, 0.5);
        assert_eq!(mac.precision, 0.5);
        assert_eq!(mac.per_relation["B"].support, 1);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gold = vec![t("a", "A", "b"), t("a", "B", "c")];
        let docs = vec![DocTriples::new(gold.clone(), gold.clone())];
        for r in [
            micro_metrics(&docs),
            macro_metrics(&docs, MacroScope::Supported, &[]),
        ] {
            assert_eq!((r.precision, r.recall, r.f1, r.f2), (1.0, 1.0, 1.0, 1.0));
        }
        let docs = vec![DocTriples::new(vec![], gold)];
        let r = micro_metrics(&docs);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn macro_scope_all_adds_unsupported_relations() {
        let docs = vec![DocTriples::new(
            vec![t("a", "A", "b"), t("a", "C", "b")],
            vec![t("a", "A", "b")],
        )];
        let s = macro_metrics(&docs, MacroScope::Supported, &[]);
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.precision, 1.0);
        let all = macro_metrics(&docs, MacroScope::All, &["A".into(), "Z".into()]);
        assert!((all.recall - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(all.per_relation.len(), 3);
    }
}
