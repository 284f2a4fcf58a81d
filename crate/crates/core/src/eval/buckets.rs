//! Long-tail analysis: F1 per power-of-two training-frequency bucket.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::eval::metrics::{Counts, DocTriples};
use crate::kg::RelationId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationBucket {
    pub lower: usize,
    pub upper: usize,
    pub relations: BTreeSet<RelationId>,
    pub f1: f64,
}

/// `[2^b, 2^(b+1))` containing `count`, or `[0, 1)` for zero.
pub fn bucket_bounds(count: usize) -> (usize, usize) {
    if count == 0 {
        (0, 1)
    } else {
        let b = count.ilog2();
        (1 << b, 1 << (b + 1))
    }
}

/// Buckets the gold relations by training frequency and computes micro F1
/// over triples whose relation falls in each bucket. Relations predicted but
/// never gold are ignored.
pub fn bucket_f1(
    docs: &[DocTriples],
    frequencies: &BTreeMap<RelationId, usize>,
) -> Vec<RelationBucket> {
    let gold_relations: BTreeSet<&RelationId> = docs
        .iter()
        .flat_map(|d| d.gold.iter().map(|t| &t.relation))
        .collect();
    let mut bucket_of: BTreeMap<&RelationId, (usize, usize)> = BTreeMap::new();
    for r in gold_relations {
        let count = match frequencies.get(r) {
            Some(&c) => c,
            None => {
                log::warn!("relation `{r}` missing from the frequency map, bucketed as [0, 1)");
                0
            }
        };
        bucket_of.insert(r, bucket_bounds(count));
    }
    let mut buckets: BTreeMap<(usize, usize), (BTreeSet<RelationId>, Counts)> = BTreeMap::new();
    for (r, b) in &bucket_of {
        buckets.entry(*b).or_default().0.insert((*r).clone());
    }
    for d in docs {
        for t in &d.predicted {
            if let Some(b) = bucket_of.get(&t.relation) {
                let c = &mut buckets.get_mut(b).unwrap().1;
                if d.gold.contains(t) {
                    c.tp += 1;
                } else {
                    c.fp += 1;
                }
            }
        }
        for t in d.gold.difference(&d.predicted) {
            buckets.get_mut(&bucket_of[&t.relation]).unwrap().1.fn_ += 1;
        }
    }
    buckets
        .into_iter()
        .map(|((lower, upper), (relations, c))| RelationBucket {
            lower,
            upper,
            relations,
            f1: c.f(1.0),
        })
        .collect()
}

/// `lower,relations,f1` with a header row.
pub fn buckets_csv(buckets: &[RelationBucket]) -> String {
    let mut out = String::from("lower,relations,f1\n");
    for b in buckets {
        writeln!(out, "{},{},{:.6}", b.lower, b.relations.len(), b.f1).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triple;

    #[test]
    fn bounds() {
        assert_eq!(bucket_bounds(20), (16, 32));
        assert_eq!(bucket_bounds(1), (1, 2));
        assert_eq!(bucket_bounds(0), (0, 1));
        assert_eq!(bucket_bounds(1024), (1024, 2048));
    }

    #[test]
    fn partition_and_scores() {
        let t = |r: &str, i: usize| Triple::new(format!("s{i}"), r, "o");
        let docs = vec![
            DocTriples::new(
                vec![t("A", 0), t("B", 1)],
                vec![t("A", 0), t("B", 2), t("C", 3)],
            ),
            DocTriples::new(vec![t("Z", 4)], vec![t("A", 5)]),
        ];
        let freq = BTreeMap::from([("A".to_string(), 20), ("B".to_string(), 3)]);
        let buckets = bucket_f1(&docs, &freq);
        let lowers: Vec<usize> = buckets.iter().map(|b| b.lower).collect();
        assert_eq!(lowers, vec![0, 2, 16]);
        let all: BTreeSet<&RelationId> = buckets.iter().flat_map(|b| &b.relations).collect();
        assert_eq!(all.len(), 3);
        assert_eq!(buckets.iter().map(|b| b.relations.len()).sum::<usize>(), 3);
        // A: tp 1, fn 1 -> F1 2/3. B: tp 0 -> 0. C: missing -> [0,1).
        assert!((buckets[2].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(buckets[1].f1, 0.0);
        let csv = buckets_csv(&buckets);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("16,1,0.666667"));
    }
}
