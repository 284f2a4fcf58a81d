//! Cross-encoder re-ranking of retrieved candidates.
//!
//! A candidate's score is `h(b)` where `b` is the pooled joint encoding of
//! entity and mention. `b` is kept for relation scoring.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::kg::{AnnotatedDocument, EntityCatalog, EntityId};
use crate::nn::{
    sigmoid, Adam, Checkpoint, Encoder, EncoderConfig, ParamId, ParamSet, SequenceEncoder, Tape,
    Var,
};
use crate::par::Execution;
use crate::retrieval::{Candidate, CandidateSet, LinkExample};
use crate::text::{build_joint_rep, rename_mentions, RepConfig, TokenizedText, Vocabulary};
use crate::train::{self, LossTrace, TrainConfig};

pub const CHECKPOINT_KIND: &str = "crossencoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub entity: EntityId,
    pub bi_score: f64,
    pub cross_logit: f64,
    pub cross_prob: f64,
    #[serde(skip)]
    pub joint_embedding: Array1<f64>,
}

/// Linear score head on a pooled embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHead {
    pub weights: Array1<f64>,
    pub bias: f64,
}

/// Descending probability, ties by ascending entity id.
pub fn sort_ranked(ranked: &mut [RankedCandidate]) {
    ranked.sort_by(|a, b| {
        b.cross_prob
            .total_cmp(&a.cross_prob)
            .then_with(|| a.entity.cmp(&b.entity))
    });
}

/// Scores each candidate's joint representation and sorts the result.
pub fn rank_candidates(
    encoder: &dyn SequenceEncoder,
    head: &ScoreHead,
    inputs: &[(Candidate, TokenizedText)],
    exec: Execution,
) -> Vec<RankedCandidate> {
    if inputs.is_empty() {
        return Vec::new();
    }
    let texts: Vec<TokenizedText> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let b = encoder.encode_pooled_batch(&texts, exec);
    let mut out: Vec<RankedCandidate> = inputs
        .iter()
        .zip(b.rows())
        .map(|((c, _), row)| {
            let logit = row.dot(&head.weights) + head.bias;
            RankedCandidate {
                entity: c.entity.clone(),
                bi_score: c.bi_score,
                cross_logit: logit,
                cross_prob: sigmoid(logit),
                joint_embedding: row.to_owned(),
            }
        })
        .collect();
    sort_ranked(&mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossEncoderTrainConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Mined negatives per mention.
    pub negatives: usize,
    /// Probability per example and epoch of renaming the mention: each of its
    /// token ids is mapped to a random vocabulary id everywhere in the
    /// example, gold label and negatives included.
    pub name_substitution: f64,
}

impl Default for CrossEncoderTrainConfig {
    fn default() -> Self {
        CrossEncoderTrainConfig {
            train: TrainConfig::default(),
            negatives: 9,
            name_substitution: 0.0,
        }
    }
}

/// A mention with its gold entity first, then negatives, as joint inputs.
#[derive(Debug, Clone)]
pub struct RankExample {
    pub texts: Vec<TokenizedText>,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEncoderNet {
    pub encoder: Encoder,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl CrossEncoderNet {
    /// Sum over mentions of the mean BCE over their candidates.
    pub fn loss_graph(&self, tape: &mut Tape, examples: &[RankExample]) -> Option<Var> {
        let texts: Vec<&TokenizedText> = examples.iter().flat_map(|e| &e.texts).collect();
        if texts.is_empty() {
            return None;
        }
        let enc = self.encoder.forward(tape, &texts);
        let b = tape.gather(enc.hidden, enc.cls_rows());
        let w = tape.param(self.head_w);
        let bias = tape.param(self.head_b);
        let z = tape.linear(b, w, bias);
        let n = texts.len();
        let mut y = Vec::with_capacity(n);
        let mut wt = Vec::with_capacity(n);
        for e in examples {
            y.extend(&e.labels);
            wt.extend(std::iter::repeat_n(
                1.0 / e.labels.len() as f64,
                e.labels.len(),
            ));
        }
        let col = |v: Vec<f64>| Array2::from_shape_vec((n, 1), v).expect("column shape");
        Some(tape.bce(z, col(y), Some(col(wt))))
    }
}

#[derive(Debug, Clone)]
pub struct CrossEncoder {
    pub vocab: Vocabulary,
    pub params: ParamSet,
    pub net: CrossEncoderNet,
    pub rep: RepConfig,
}

impl CrossEncoder {
    pub fn new(vocab: Vocabulary, encoder: EncoderConfig, rep: RepConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            ..encoder
        };
        let encoder = Encoder::new(cfg, &mut params, "enc", &mut rng);
        let d = cfg.dim;
        let head_w = params.add_normal("head.w", (d, 1), 1.0 / (d as f64).sqrt(), &mut rng);
        let head_b = params.add_zeros("head.b", (1, 1));
        CrossEncoder {
            vocab,
            params,
            net: CrossEncoderNet {
                encoder,
                head_w,
                head_b,
            },
            rep,
        }
    }

    pub fn head(&self) -> ScoreHead {
        ScoreHead {
            weights: self.params.get(self.net.head_w).column(0).to_owned(),
            bias: self.params.get(self.net.head_b)[[0, 0]],
        }
    }

    pub fn handle(&self) -> impl SequenceEncoder + '_ {
        self.net.encoder.bind(&self.params)
    }

    pub fn joint_rep(
        &self,
        catalog: &EntityCatalog,
        entity: &str,
        tokens: &[String],
        span: (usize, usize),
    ) -> Result<TokenizedText> {
        let e = catalog
            .get(entity)
            .ok_or_else(|| Error::validation(format!("entity `{entity}` not in catalog")))?;
        build_joint_rep(&self.vocab, e, tokens, span, &self.rep)
    }

    /// Re-ranks a candidate set; never adds candidates.
    pub fn rank(
        &self,
        catalog: &EntityCatalog,
        tokens: &[String],
        set: &CandidateSet,
        exec: Execution,
    ) -> Result<Vec<RankedCandidate>> {
        let inputs = set
            .candidates
            .iter()
            .map(|c| {
                Ok((
                    c.clone(),
                    self.joint_rep(catalog, &c.entity, tokens, set.mention)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(rank_candidates(&self.handle(), &self.head(), &inputs, exec))
    }

    /// Gold entity plus up to `negatives` mined entities for one mention.
    pub fn example(
        &self,
        catalog: &EntityCatalog,
        doc: &AnnotatedDocument,
        link: &LinkExample,
        negatives: &[EntityId],
        limit: usize,
    ) -> Result<Option<RankExample>> {
        if !catalog.contains(&link.entity) {
            log::warn!(
                "document {}: gold entity `{}` not in catalog, skipped",
                doc.doc_id,
                link.entity
            );
            return Ok(None);
        }
        let mut texts = vec![self.joint_rep(catalog, &link.entity, &doc.tokens, link.span)?];
        let mut labels = vec![1.0];
        for n in negatives.iter().filter(|n| **n != link.entity).take(limit) {
            texts.push(self.joint_rep(catalog, n, &doc.tokens, link.span)?);
            labels.push(0.0);
        }
        Ok(Some(RankExample { texts, labels }))
    }

    pub fn loss(&self, examples: &[RankExample], exec: Execution) -> f64 {
        train::total_loss(&self.params, examples, exec, |t, c| {
            self.net.loss_graph(t, c)
        }) / examples.len().max(1) as f64
    }

    pub fn train_step(&mut self, opt: &mut Adam, batch: &[RankExample], exec: Execution) -> f64 {
        let net = &self.net;
        train::step(
            &mut self.params,
            opt,
            batch,
            batch.len() as f64,
            exec,
            |t, c| net.loss_graph(t, c),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            meta: json!({
                "encoder": self.net.encoder.config(),
                "vocab": self.vocab.tokens(),
                "rep": self.rep,
            }),
            params: self.params.clone(),
        }
        .save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let vocab = Vocabulary::from_tokens(ck.meta("vocab")?);
        let mut model = CrossEncoder::new(vocab, ck.meta("encoder")?, ck.meta("rep")?, 0);
        model.params.copy_from(&ck.params)?;
        Ok(model)
    }
}

/// BCE over the gold entity and its mined negatives, per mention.
/// `negatives[i]` belongs to `links[i]`.
pub fn train_crossencoder(
    model: &mut CrossEncoder,
    catalog: &EntityCatalog,
    docs: &[AnnotatedDocument],
    links: &[LinkExample],
    negatives: &[Vec<EntityId>],
    cfg: &CrossEncoderTrainConfig,
    exec: Execution,
) -> Result<LossTrace> {
    if links.len() != negatives.len() {
        return Err(Error::validation("one negative list per mention required"));
    }
    let mut examples = Vec::with_capacity(links.len());
    for (l, n) in links.iter().zip(negatives) {
        if let Some(x) = model.example(catalog, &docs[l.doc], l, n, cfg.negatives)? {
            examples.push(x);
        }
    }
    if examples.is_empty() {
        return Err(Error::validation("no linked mentions to train on"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut opt = Adam::new(cfg.train.adam(), model.params.len());
    let mut trace = LossTrace::default();
    for epoch in 0..cfg.train.epochs {
        let mut sum = 0.0;
        let batches = train::shuffled_batches(examples.len(), cfg.train.batch_size, &mut rng);
        for idx in &batches {
            let batch: Vec<RankExample> = idx
                .iter()
                .map(|&i| {
                    let mut x = examples[i].clone();
                    if rng.random_bool(cfg.name_substitution) {
                        rename_mentions(&mut x.texts, model.vocab.len(), &mut rng);
                    }
                    x
                })
                .collect();
            let l = model.train_step(&mut opt, &batch, exec);
            trace.steps.push(l);
            sum += l;
        }
        let mean = sum / batches.len() as f64;
        log::info!("crossencoder epoch {epoch}: loss {mean:.5}");
        trace.epochs.push(mean);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EntityRecord, GoldMention};
    use crate::nn::{AdamConfig, Gradients, TokenEmbeddings};
    use crate::retrieval::link_examples;
    use crate::text::Marker;

    /// Row 0 is `[id - 7, 0]` for the first label token id.
    struct LabelStub;

    impl SequenceEncoder for LabelStub {
        fn dim(&self) -> usize {
            2
        }

        fn encode_tokens(&self, text: &TokenizedText) -> TokenEmbeddings {
            let mut k = Array2::zeros((text.len(), 2));
            k[[0, 0]] = text.ids[1] as f64 - 7.0;
            TokenEmbeddings(k)
        }
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn catalog() -> EntityCatalog {
        let mk = |id: &str, label: &str| EntityRecord {
            id: id.into(),
            label: label.into(),
            description: format!("about {label}"),
            types: Default::default(),
        };
        EntityCatalog::new(vec![
            mk("Q1", "alice"),
            mk("Q2", "bob"),
            mk("Q3", "carol"),
            mk("Q4", "dave"),
        ])
        .unwrap()
    }

    fn model() -> CrossEncoder {
        let vocab = Vocabulary::build(["about", "alice", "bob", "carol", "dave", "met", "today"]);
        let cfg = EncoderConfig {
            layers: 1,
            ..EncoderConfig::new(vocab.len(), 8)
        };
        CrossEncoder::new(vocab, cfg, RepConfig::default(), 9)
    }

    fn docs() -> Vec<AnnotatedDocument> {
        vec![AnnotatedDocument {
            doc_id: "d0".into(),
            tokens: toks("alice met bob today"),
            mentions: vec![
                GoldMention {
                    start: 0,
                    end: 0,
                    entity: "Q1".into(),
                },
                GoldMention {
                    start: 2,
                    end: 2,
                    entity: "Q2".into(),
                },
            ],
            triples: vec![],
        }]
    }

    #[test]
    fn stub_logits_sort_and_sigmoid() {
        // vocab: specials 0..=6, then about=7 alice=8 bob=9 carol=10
        let v = Vocabulary::build(["about", "alice", "bob", "carol"]);
        assert_eq!(v.id("carol"), 10);
        let cat = catalog();
        let tokens = toks("alice met bob");
        let rep = |id: &str| {
            build_joint_rep(
                &v,
                cat.get(id).unwrap(),
                &tokens,
                (0, 0),
                &RepConfig::default(),
            )
            .unwrap()
        };
        assert_eq!(rep("Q1").ids[0], Marker::Cls.id());
        let head = ScoreHead {
            weights: Array1::from(vec![1.0, 0.0]),
            bias: -3.0,
        };
        let c = |e: &str| Candidate {
            entity: e.into(),
            bi_score: 0.5,
        };
        // alice: 1 - 3, carol: 3 - 3
        let inputs = vec![(c("Q1"), rep("Q1")), (c("Q3"), rep("Q3"))];
        let out = rank_candidates(&LabelStub, &head, &inputs, Execution::Sequential);
        assert_eq!(out[0].entity, "Q3");
        assert_eq!(out[0].cross_logit, 0.0);
        assert_eq!(out[1].cross_logit, -2.0);
        assert_eq!(out[1].cross_prob, sigmoid(-2.0));
        let rev: Vec<_> = inputs.iter().rev().cloned().collect();
        assert_eq!(
            rank_candidates(&LabelStub, &head, &rev, Execution::Sequential),
            out
        );
        assert!(rank_candidates(&LabelStub, &head, &[], Execution::Sequential).is_empty());
        assert_eq!(
            rank_candidates(&LabelStub, &head, &inputs[..1], Execution::Sequential).len(),
            1
        );
    }

    #[test]
    fn joint_embedding_is_the_pooled_joint_rep() {
        let m = model();
        let cat = catalog();
        let d = docs();
        let set = CandidateSet {
            mention: (0, 0),
            candidates: ["Q2", "Q1", "Q3"]
                .iter()
                .map(|e| Candidate {
                    entity: e.to_string(),
                    bi_score: 0.1,
                })
                .collect(),
        };
        let ranked = m
            .rank(&cat, &d[0].tokens, &set, Execution::Parallel)
            .unwrap();
        assert_eq!(ranked.len(), 3);
        assert!(ranked
            .windows(2)
            .all(|w| w[0].cross_prob >= w[1].cross_prob));
        for r in &ranked {
            let b = m
                .handle()
                .encode_pooled(&m.joint_rep(&cat, &r.entity, &d[0].tokens, (0, 0)).unwrap())
                .0;
            assert!((&b - &r.joint_embedding).iter().all(|x| x.abs() < 1e-12));
            assert!((r.cross_prob - sigmoid(r.cross_logit)).abs() < 1e-15);
        }
    }

    #[test]
    fn examples_put_gold_first_and_exclude_it_from_negatives() {
        let m = model();
        let cat = catalog();
        let d = docs();
        let links = link_examples(&d, &cat);
        let negs = vec!["Q1".to_string(), "Q3".to_string(), "Q4".to_string()];
        let x = m
            .example(&cat, &d[0], &links[0], &negs, 9)
            .unwrap()
            .unwrap();
        assert_eq!(x.labels, vec![1.0, 0.0, 0.0]);
        let x = m
            .example(&cat, &d[0], &links[0], &negs, 1)
            .unwrap()
            .unwrap();
        assert_eq!(x.labels.len(), 2);
        let missing = LinkExample {
            doc: 0,
            span: (0, 0),
            entity: "Q99".into(),
        };
        assert!(m
            .example(&cat, &d[0], &missing, &negs, 9)
            .unwrap()
            .is_none());
    }

    #[test]
    fn step_lowers_loss_and_head_gradient_checks() {
        let mut m = model();
        let cat = catalog();
        let d = docs();
        let links = link_examples(&d, &cat);
        let batch: Vec<RankExample> = links
            .iter()
            .map(|l| {
                m.example(&cat, &d[0], l, &["Q3".into(), "Q4".into()], 9)
                    .unwrap()
                    .unwrap()
            })
            .collect();

        let mut grads = Gradients::new(m.params.len());
        let mut tape = Tape::new(&m.params);
        let l = m.net.loss_graph(&mut tape, &batch).unwrap();
        tape.backward(l, &mut grads);
        drop(tape);
        let n = batch.len() as f64;
        for id in [m.net.head_w, m.net.head_b] {
            let g = grads.get(id).unwrap().clone();
            for r in 0..g.nrows() {
                let h = 1e-6;
                let orig = m.params.get(id)[[r, 0]];
                m.params.get_mut(id)[[r, 0]] = orig + h;
                let up = m.loss(&batch, Execution::Sequential) * n;
                m.params.get_mut(id)[[r, 0]] = orig - h;
                let down = m.loss(&batch, Execution::Sequential) * n;
                m.params.get_mut(id)[[r, 0]] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (fd - g[[r, 0]]).abs() / fd.abs().max(g[[r, 0]].abs()).max(1e-8);
                assert!(rel < 1e-4, "fd {fd} vs {}", g[[r, 0]]);
            }
        }

        let before = m.loss(&batch, Execution::Sequential);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            m.params.len(),
        );
        m.train_step(&mut opt, &batch, Execution::Sequential);
        assert!(m.loss(&batch, Execution::Sequential) < before);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let cat = catalog();
        let d = docs();
        let links = link_examples(&d, &cat);
        let negs = vec![vec!["Q3".to_string(), "Q4".to_string()]; links.len()];
        let cfg = CrossEncoderTrainConfig {
            train: TrainConfig {
                epochs: 2,
                batch_size: 1,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            ..CrossEncoderTrainConfig::default()
        };
        let mut a = model();
        let mut b = model();
        let ta =
            train_crossencoder(&mut a, &cat, &d, &links, &negs, &cfg, Execution::Parallel).unwrap();
        let tb = train_crossencoder(&mut b, &cat, &d, &links, &negs, &cfg, Execution::Sequential)
            .unwrap();
        assert_eq!(ta, tb);
        assert_eq!(ta.steps.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        a.save(&p).unwrap();
        assert_eq!(CrossEncoder::load(&p).unwrap().params, a.params);
    }
}
