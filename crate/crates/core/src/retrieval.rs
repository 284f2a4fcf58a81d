//! Bi-encoder candidate generation over an exact cosine vector index.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::kg::{AnnotatedDocument, EntityCatalog, EntityId};
use crate::nn::{
    Adam, Checkpoint, Encoder, EncoderConfig, ParamId, ParamSet, SequenceEncoder, Tape, Var,
};
use crate::par::Execution;
use crate::text::{build_entity_rep, build_mention_rep, RepConfig, TokenizedText, Vocabulary};
use crate::train::{self, LossTrace, TrainConfig};

pub const CHECKPOINT_KIND: &str = "biencoder";
const INDEX_MAGIC: &[u8; 8] = b"CIEINDX1";
const NORM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity: EntityId,
    pub bi_score: f64,
}

/// Retrieved candidates for one mention span, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub mention: (usize, usize),
    pub candidates: Vec<Candidate>,
}

pub fn cosine_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::validation(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu <= NORM_TOL || nv <= NORM_TOL {
        return Err(Error::validation("cosine similarity of a zero vector"));
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Exact cosine index: unit-normalized rows plus their entity ids.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    ids: Vec<EntityId>,
    matrix: Array2<f64>,
    lookup: HashMap<EntityId, usize>,
}

/// Descending score, then ascending id.
fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

impl VectorIndex {
    /// Normalizes each row of `embeddings`; row `i` belongs to `ids[i]`.
    pub fn build(ids: Vec<EntityId>, mut embeddings: Array2<f64>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::validation("cannot build an empty index"));
        }
        if ids.len() != embeddings.nrows() {
            return Err(Error::validation(format!(
                "{} ids for {} rows",
                ids.len(),
                embeddings.nrows()
            )));
        }
        for (i, mut row) in embeddings.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if n <= NORM_TOL {
                return Err(Error::validation(format!(
                    "zero embedding for `{}`",
                    ids[i]
                )));
            }
            row /= n;
        }
        let mut lookup = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if lookup.insert(id.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate id `{id}` in index")));
            }
        }
        Ok(VectorIndex {
            ids,
            matrix: embeddings,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn ids(&self) -> &[EntityId] {
        &self.ids
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.matrix.view()
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    /// The `k` most similar entities, exact.
    pub fn search(&self, query: ArrayView1<f64>, k: usize) -> Result<Vec<Candidate>> {
        if k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        if self.is_empty() {
            return Err(Error::validation("search on an empty index"));
        }
        if query.len() != self.dim() {
            return Err(Error::validation(format!(
                "query has dimension {}, index {}",
                query.len(),
                self.dim()
            )));
        }
        let n = query.dot(&query).sqrt();
        if n <= NORM_TOL {
            return Err(Error::validation("zero query vector"));
        }
        let scores = self.matrix.dot(&(&query / n));
        let mut order: Vec<usize> = (0..self.len()).collect();
        let cmp = |&a: &usize, &b: &usize| {
            rank_order((scores[a], &self.ids[a]), (scores[b], &self.ids[b]))
        };
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(order
            .into_iter()
            .map(|i| Candidate {
                entity: self.ids[i].clone(),
                bi_score: scores[i].clamp(-1.0, 1.0),
            })
            .collect())
    }

    pub fn search_batch(
        &self,
        queries: ArrayView2<f64>,
        k: usize,
        exec: Execution,
    ) -> Result<Vec<Vec<Candidate>>> {
        let rows: Vec<ArrayView1<f64>> = queries.rows().into_iter().collect();
        exec.map(&rows, |q| self.search(q.view(), k))
            .into_iter()
            .collect()
    }

    /// Header `(|V|, d)` as little-endian `u64`s, the row-major matrix as
    /// `f64`s, then each id as a `u32` byte length and UTF-8 bytes.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(INDEX_MAGIC).map_err(io)?;
        w.write_all(&(self.len() as u64).to_le_bytes())
            .map_err(io)?;
        w.write_all(&(self.dim() as u64).to_le_bytes())
            .map_err(io)?;
        for x in self.matrix.iter() {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
        for id in &self.ids {
            w.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(id.as_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not an index file",
                path.display()
            )));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io)?;
        let rows = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(io)?;
        let dim = u64::from_le_bytes(b8) as usize;
        let mut data = Vec::with_capacity(rows * dim);
        for _ in 0..rows * dim {
            r.read_exact(&mut b8).map_err(io)?;
            data.push(f64::from_le_bytes(b8));
        }
        let mut ids = Vec::with_capacity(rows);
        let mut b4 = [0u8; 4];
        for _ in 0..rows {
            r.read_exact(&mut b4).map_err(io)?;
            let mut buf = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut buf).map_err(io)?;
            ids.push(String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        let matrix = Array2::from_shape_vec((rows, dim), data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        // Rows are stored normalized, so rebuilding leaves them unchanged up to rounding.
        let mut index = VectorIndex::build(ids, matrix.clone())?;
        index.matrix = matrix;
        Ok(index)
    }
}

pub fn retrieve_candidates(
    index: &VectorIndex,
    mention: (usize, usize),
    query: ArrayView1<f64>,
    k: usize,
) -> Result<CandidateSet> {
    Ok(CandidateSet {
        mention,
        candidates: index.search(query, k)?,
    })
}

/// For each query, the `gamma` nearest entities without the gold one.
pub fn mine_hard_negatives(
    index: &VectorIndex,
    queries: ArrayView2<f64>,
    gold: &[EntityId],
    gamma: usize,
    exec: Execution,
) -> Result<Vec<Vec<EntityId>>> {
    if gamma == 0 {
        return Err(Error::validation("gamma must be at least 1"));
    }
    let hits = index.search_batch(queries, gamma, exec)?;
    Ok(hits
        .into_iter()
        .zip(gold)
        .map(|(c, g)| c.into_iter().map(|c| c.entity).filter(|e| e != g).collect())
        .collect())
}

/// A gold mention linked to a catalog entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkExample {
    pub doc: usize,
    pub span: (usize, usize),
    pub entity: EntityId,
}

/// Every gold mention whose entity is in the catalog.
pub fn link_examples(docs: &[AnnotatedDocument], catalog: &EntityCatalog) -> Vec<LinkExample> {
    let mut out = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        for m in &doc.mentions {
            if catalog.contains(&m.entity) {
                out.push(LinkExample {
                    doc: d,
                    span: (m.start, m.end),
                    entity: m.entity.clone(),
                });
            } else {
                log::warn!(
                    "document {}: entity `{}` not in catalog, skipped",
                    doc.doc_id,
                    m.entity
                );
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiEncoderTrainConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Epochs before hard negatives are mined.
    pub beta: usize,
    /// Nearest entities inspected per mention when mining.
    pub gamma: usize,
    /// Re-mine after every epoch from `beta` on, rather than once.
    pub remine_every_epoch: bool,
}

impl Default for BiEncoderTrainConfig {
    fn default() -> Self {
        BiEncoderTrainConfig {
            train: TrainConfig::default(),
            beta: 1,
            gamma: 10,
            remine_every_epoch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiEncoderNet {
    pub encoder: Encoder,
    pub tau: ParamId,
}

/// One training batch: mention representations, entity columns, and per
/// mention the columns it is scored against.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub mentions: Vec<TokenizedText>,
    pub entities: Vec<TokenizedText>,
    pub targets: Array2<f64>,
    pub mask: Array2<f64>,
}

impl BiEncoderNet {
    /// Mean BCE of `sigmoid(tau * cos)` per mention, summed over mentions.
    pub fn loss_graph(&self, tape: &mut Tape, batches: &[ContrastiveBatch]) -> Option<Var> {
        let mut total: Option<Var> = None;
        for b in batches {
            let texts: Vec<&TokenizedText> = b.mentions.iter().chain(&b.entities).collect();
            let enc = self.encoder.forward(tape, &texts);
            let cls = enc.cls_rows();
            let (nm, _) = b.targets.dim();
            let m = tape.gather(enc.hidden, cls[..nm].to_vec());
            let e = tape.gather(enc.hidden, cls[nm..].to_vec());
            let m = tape.normalize_rows(m);
            let e = tape.normalize_rows(e);
            let cos = tape.matmul_t(m, e);
            let tau = tape.param(self.tau);
            let z = tape.scale_by(cos, tau);
            let mut w = b.mask.clone();
            for mut row in w.rows_mut() {
                let s = row.sum();
                if s > 0.0 {
                    row /= s;
                }
            }
            let l = tape.bce(z, b.targets.clone(), Some(w));
            total = Some(match total {
                Some(t) => tape.add(t, l),
                None => l,
            });
        }
        total
    }
}

#[derive(Debug, Clone)]
pub struct BiEncoder {
    pub vocab: Vocabulary,
    pub params: ParamSet,
    pub net: BiEncoderNet,
    pub rep: RepConfig,
}

impl BiEncoder {
    pub fn new(vocab: Vocabulary, encoder: EncoderConfig, rep: RepConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            ..encoder
        };
        let encoder = Encoder::new(cfg, &mut params, "enc", &mut rng);
        let tau = params.add_const("tau", (1, 1), 10.0);
        BiEncoder {
            vocab,
            params,
            net: BiEncoderNet { encoder, tau },
            rep,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(self.net.tau)[[0, 0]]
    }

    fn handle(&self) -> impl SequenceEncoder + '_ {
        self.net.encoder.bind(&self.params)
    }

    pub fn mention_rep(&self, tokens: &[String], span: (usize, usize)) -> Result<TokenizedText> {
        build_mention_rep(&self.vocab, tokens, span, &self.rep)
    }

    /// Pooled embeddings of mention spans, one row each.
    pub fn embed_mentions(
        &self,
        mentions: &[(&[String], (usize, usize))],
        exec: Execution,
    ) -> Result<Array2<f64>> {
        let texts = mentions
            .iter()
            .map(|(t, s)| self.mention_rep(t, *s))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.handle().encode_pooled_batch(&texts, exec))
    }

    pub fn embed_mention(&self, tokens: &[String], span: (usize, usize)) -> Result<Array1<f64>> {
        Ok(self
            .handle()
            .encode_pooled(&self.mention_rep(tokens, span)?)
            .0)
    }

    /// Embeds every catalog entity into a fresh index.
    pub fn embed_all_entities(
        &self,
        catalog: &EntityCatalog,
        exec: Execution,
    ) -> Result<VectorIndex> {
        if catalog.is_empty() {
            return Err(Error::validation("cannot index an empty catalog"));
        }
        let texts: Vec<TokenizedText> = catalog
            .iter()
            .map(|e| build_entity_rep(&self.vocab, e, &self.rep))
            .collect();
        let m = self.handle().encode_pooled_batch(&texts, exec);
        VectorIndex::build(catalog.iter().map(|e| e.id.clone()).collect(), m)
    }

    /// Top-`k` candidates for each span of a document.
    pub fn retrieve(
        &self,
        index: &VectorIndex,
        tokens: &[String],
        spans: &[(usize, usize)],
        k: usize,
        exec: Execution,
    ) -> Result<Vec<CandidateSet>> {
        if spans.is_empty() {
            return Ok(Vec::new());
        }
        let q: Vec<(&[String], (usize, usize))> = spans.iter().map(|&s| (tokens, s)).collect();
        let m = self.embed_mentions(&q, exec)?;
        let hits = index.search_batch(m.view(), k, exec)?;
        Ok(spans
            .iter()
            .zip(hits)
            .map(|(&mention, candidates)| CandidateSet {
                mention,
                candidates,
            })
            .collect())
    }

    /// Hard negatives for training examples against the given index.
    pub fn mine(
        &self,
        index: &VectorIndex,
        docs: &[AnnotatedDocument],
        examples: &[LinkExample],
        gamma: usize,
        exec: Execution,
    ) -> Result<Vec<Vec<EntityId>>> {
        let q: Vec<(&[String], (usize, usize))> = examples
            .iter()
            .map(|x| (docs[x.doc].tokens.as_slice(), x.span))
            .collect();
        let m = self.embed_mentions(&q, exec)?;
        let gold: Vec<EntityId> = examples.iter().map(|x| x.entity.clone()).collect();
        mine_hard_negatives(index, m.view(), &gold, gamma, exec)
    }

    /// Assembles the in-batch plus hard-negative scoring problem.
    pub fn batch(
        &self,
        catalog: &EntityCatalog,
        docs: &[AnnotatedDocument],
        examples: &[&LinkExample],
        hard: Option<&[&Vec<EntityId>]>,
    ) -> Result<ContrastiveBatch> {
        let mut columns: BTreeMap<EntityId, usize> = BTreeMap::new();
        let mut order: Vec<EntityId> = Vec::new();
        let mut col = |id: &str, order: &mut Vec<EntityId>| -> usize {
            *columns.entry(id.to_string()).or_insert_with(|| {
                order.push(id.to_string());
                order.len() - 1
            })
        };
        let mut rows: Vec<Vec<usize>> = Vec::with_capacity(examples.len());
        let gold_cols: Vec<usize> = examples
            .iter()
            .map(|x| col(&x.entity, &mut order))
            .collect();
        for (i, _) in examples.iter().enumerate() {
            let mut r = gold_cols.clone();
            if let Some(h) = hard {
                for id in h[i].iter() {
                    r.push(col(id, &mut order));
                }
            }
            rows.push(r);
        }
        let n = examples.len();
        let c = order.len();
        let mut targets = Array2::zeros((n, c));
        let mut mask = Array2::zeros((n, c));
        for (i, r) in rows.iter().enumerate() {
            for &j in r {
                mask[[i, j]] = 1.0;
            }
            // Mentions of the same entity share one column.
            targets[[i, gold_cols[i]]] = 1.0;
        }
        let mentions = examples
            .iter()
            .map(|x| self.mention_rep(&docs[x.doc].tokens, x.span))
            .collect::<Result<Vec<_>>>()?;
        let entities = order
            .iter()
            .map(|id| {
                let e = catalog
                    .get(id)
                    .ok_or_else(|| Error::validation(format!("entity `{id}` not in catalog")))?;
                Ok(build_entity_rep(&self.vocab, e, &self.rep))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ContrastiveBatch {
            mentions,
            entities,
            targets,
            mask,
        })
    }

    pub fn loss(&self, batch: &ContrastiveBatch) -> f64 {
        let mut tape = Tape::new(&self.params);
        let l = self
            .net
            .loss_graph(&mut tape, std::slice::from_ref(batch))
            .expect("non-empty batch");
        tape.scalar(l) / batch.mentions.len().max(1) as f64
    }

    pub fn train_step(&mut self, opt: &mut Adam, batch: ContrastiveBatch) -> f64 {
        let n = batch.mentions.len() as f64;
        let net = &self.net;
        train::step(
            &mut self.params,
            opt,
            &[batch],
            n,
            Execution::Sequential,
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
        let mut model = BiEncoder::new(vocab, ck.meta("encoder")?, ck.meta("rep")?, 0);
        model.params.copy_from(&ck.params)?;
        Ok(model)
    }
}

/// In-batch negatives throughout; from epoch `beta` on, each mention is also
/// scored against its mined hard negatives.
pub fn train_biencoder(
    model: &mut BiEncoder,
    catalog: &EntityCatalog,
    docs: &[AnnotatedDocument],
    cfg: &BiEncoderTrainConfig,
    exec: Execution,
) -> Result<LossTrace> {
    if cfg.train.batch_size < 2 {
        return Err(Error::validation(
            "bi-encoder batch size must be at least 2",
        ));
    }
    let examples = link_examples(docs, catalog);
    if examples.is_empty() {
        return Err(Error::validation("no linked mentions to train on"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut opt = Adam::new(cfg.train.adam(), model.params.len());
    let mut trace = LossTrace::default();
    let mut hard: Option<Vec<Vec<EntityId>>> = None;
    for epoch in 0..cfg.train.epochs {
        let mut sum = 0.0;
        let batches = train::shuffled_batches(examples.len(), cfg.train.batch_size, &mut rng);
        for idx in &batches {
            let xs: Vec<&LinkExample> = idx.iter().map(|&i| &examples[i]).collect();
            let hs: Option<Vec<&Vec<EntityId>>> =
                hard.as_ref().map(|h| idx.iter().map(|&i| &h[i]).collect());
            let batch = model.batch(catalog, docs, &xs, hs.as_deref())?;
            let l = model.train_step(&mut opt, batch);
            trace.steps.push(l);
            sum += l;
        }
        let mean = sum / batches.len() as f64;
        log::info!(
            "biencoder epoch {epoch}: loss {mean:.5} tau {:.3}",
            model.temperature()
        );
        trace.epochs.push(mean);
        let due = epoch + 1 >= cfg.beta && (cfg.remine_every_epoch || hard.is_none());
        if due && epoch + 1 < cfg.train.epochs {
            let index = model.embed_all_entities(catalog, exec)?;
            hard = Some(model.mine(&index, docs, &examples, cfg.gamma, exec)?);
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EntityRecord, GoldMention};
    use crate::nn::{AdamConfig, Gradients};
    use ndarray::array;
    use rand::Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn catalog() -> EntityCatalog {
        let mk = |id: &str, label: &str, desc: &str| EntityRecord {
            id: id.into(),
            label: label.into(),
            description: desc.into(),
            types: Default::default(),
        };
        EntityCatalog::new(vec![
            mk("Q1", "alice", "a person"),
            mk("Q2", "bob", "another person"),
            mk("Q3", "paris", "a city"),
            mk("Q4", "rome", "old city"),
            mk("Q5", "acme", "a company"),
        ])
        .unwrap()
    }

    fn docs() -> Vec<AnnotatedDocument> {
        let mk = |s: &str, m: &[(usize, &str)]| AnnotatedDocument {
            doc_id: String::new(),
            tokens: toks(s),
            mentions: m
                .iter()
                .map(|&(i, e)| GoldMention {
                    start: i,
                    end: i,
                    entity: e.into(),
                })
                .collect(),
            triples: vec![],
        };
        vec![
            mk("alice lives in paris", &[(0, "Q1"), (3, "Q3")]),
            mk("bob works for acme", &[(0, "Q2"), (3, "Q5")]),
            mk("rome is old", &[(0, "Q4")]),
        ]
    }

    fn model() -> BiEncoder {
        let cat = catalog();
        let words: Vec<String> = cat
            .iter()
            .flat_map(|e| {
                format!("{} {}", e.label, e.description)
                    .split_whitespace()
                    .map(String::from)
                    .collect::<Vec<_>>()
            })
            .chain(docs().into_iter().flat_map(|d| d.tokens))
            .collect();
        let vocab = Vocabulary::build(words.iter().map(String::as_str));
        let cfg = EncoderConfig {
            layers: 1,
            ..EncoderConfig::new(vocab.len(), 8)
        };
        BiEncoder::new(vocab, cfg, RepConfig::default(), 5)
    }

    #[test]
    fn cosine_identities() {
        let v = array![0.3, -1.2, 2.0];
        assert!((cosine_similarity(v.view(), v.view()).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            cosine_similarity(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap(),
            0.0
        );
        let neg = -&v;
        assert!((cosine_similarity(v.view(), neg.view()).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_similarity(v.view(), array![0.0, 0.0, 0.0].view()).is_err());
    }

    #[test]
    fn orthogonal_index_and_ties() {
        let ids: Vec<String> = ["e1", "e2", "e3"].map(String::from).to_vec();
        let idx = VectorIndex::build(ids, Array2::eye(3) * 2.0).unwrap();
        let hits = idx.search(array![0.0, 1.0, 0.0].view(), 2).unwrap();
        assert_eq!(hits[0].entity, "e2");
        assert!((hits[0].bi_score - 1.0).abs() < 1e-12);
        let all = idx.search(array![1.0, 1.0, 0.0].view(), 10).unwrap();
        let order: Vec<&str> = all.iter().map(|c| c.entity.as_str()).collect();
        assert_eq!(order, ["e1", "e2", "e3"]);
        assert!(idx.search(array![1.0, 0.0, 0.0].view(), 0).is_err());
        assert!(VectorIndex::build(vec![], Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn index_persistence_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Array2::from_shape_fn((20, 4), |_| rng.random_range(-1.0..1.0));
        let ids: Vec<String> = (0..20).map(|i| format!("Q{i}")).collect();
        let idx = VectorIndex::build(ids, m).unwrap();
        for row in idx.matrix().rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.bin");
        idx.save(&p).unwrap();
        assert_eq!(VectorIndex::load(&p).unwrap(), idx);
    }

    #[test]
    fn entity_rows_match_single_encodes() {
        let b = model();
        let cat = catalog();
        let idx = b.embed_all_entities(&cat, Execution::Parallel).unwrap();
        assert_eq!(idx.len(), 5);
        let again = b.embed_all_entities(&cat, Execution::Sequential).unwrap();
        assert_eq!(idx, again);
        for e in cat.iter() {
            let v = b
                .handle()
                .encode_pooled(&build_entity_rep(&b.vocab, e, &b.rep))
                .0;
            let v = &v / v.dot(&v).sqrt();
            let row = idx.matrix().row(idx.row_of(&e.id).unwrap()).to_owned();
            assert!((&row - &v).iter().all(|x| x.abs() < 1e-9));
        }
        assert!(b
            .embed_all_entities(&EntityCatalog::new(vec![]).unwrap(), Execution::Sequential)
            .is_err());
    }

    #[test]
    fn mining_excludes_gold() {
        let ids: Vec<String> = (0..6).map(|i| format!("e{i}")).collect();
        let m = Array2::from_shape_fn(
            (6, 6),
            |(i, j)| if i == j { 1.0 } else { 0.1 * (i + j) as f64 },
        );
        let idx = VectorIndex::build(ids.clone(), m.clone()).unwrap();
        let q = m.slice(ndarray::s![0..1, ..]).to_owned();
        let top4: Vec<String> = idx
            .search(q.row(0), 4)
            .unwrap()
            .into_iter()
            .map(|c| c.entity)
            .collect();
        let inside =
            mine_hard_negatives(&idx, q.view(), &[top4[0].clone()], 4, Execution::Sequential)
                .unwrap();
        assert_eq!(inside[0].len(), 3);
        let outside_id = ids.iter().find(|i| !top4.contains(i)).unwrap().clone();
        let outside = mine_hard_negatives(
            &idx,
            q.view(),
            std::slice::from_ref(&outside_id),
            4,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(outside[0].len(), 4);
        assert!(!outside[0].contains(&outside_id));
    }

    #[test]
    fn batch_layout_and_training() {
        let mut b = model();
        let cat = catalog();
        let d = docs();
        let ex = link_examples(&d, &cat);
        let xs: Vec<&LinkExample> = ex.iter().take(4).collect();
        let batch = b.batch(&cat, &d, &xs, None).unwrap();
        assert_eq!(batch.targets.dim(), (4, 4));
        assert_eq!(batch.mask.sum(), 16.0);
        assert_eq!(batch.targets.sum(), 4.0);

        let hard = vec![vec!["Q4".to_string()]; 4];
        let hr: Vec<&Vec<EntityId>> = hard.iter().collect();
        let hb = b.batch(&cat, &d, &xs, Some(&hr)).unwrap();
        assert_eq!(hb.targets.ncols(), 5);
        assert_eq!(hb.mask.row(0).sum(), 5.0);

        let before = b.loss(&hb);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            b.params.len(),
        );
        let reported = b.train_step(&mut opt, hb.clone());
        assert!((reported - before).abs() < 1e-12);
        assert!(b.loss(&hb) < before);

        let cfg = BiEncoderTrainConfig {
            train: TrainConfig {
                batch_size: 1,
                ..TrainConfig::default()
            },
            ..BiEncoderTrainConfig::default()
        };
        assert!(train_biencoder(&mut b, &cat, &d, &cfg, Execution::Sequential).is_err());
    }

    #[test]
    fn temperature_gradient_matches_finite_differences() {
        let mut b = model();
        let cat = catalog();
        let d = docs();
        let ex = link_examples(&d, &cat);
        let xs: Vec<&LinkExample> = ex.iter().collect();
        let batch = b.batch(&cat, &d, &xs, None).unwrap();
        let mut grads = Gradients::new(b.params.len());
        let mut tape = Tape::new(&b.params);
        let l = b
            .net
            .loss_graph(&mut tape, std::slice::from_ref(&batch))
            .unwrap();
        tape.backward(l, &mut grads);
        let g = grads.get(b.net.tau).unwrap()[[0, 0]];
        let h = 1e-6;
        let n = batch.mentions.len() as f64;
        let tau = b.net.tau;
        b.params.get_mut(tau)[[0, 0]] += h;
        let up = b.loss(&batch) * n;
        b.params.get_mut(tau)[[0, 0]] -= 2.0 * h;
        let down = b.loss(&batch) * n;
        let fd = (up - down) / (2.0 * h);
        assert!((fd - g).abs() / fd.abs().max(1e-8) < 1e-4, "fd {fd} vs {g}");
    }

    #[test]
    fn short_training_run_and_checkpoint() {
        let mut b = model();
        let cat = catalog();
        let d = docs();
        let cfg = BiEncoderTrainConfig {
            train: TrainConfig {
                epochs: 3,
                batch_size: 2,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            gamma: 2,
            ..BiEncoderTrainConfig::default()
        };
        let t1 = train_biencoder(&mut b, &cat, &d, &cfg, Execution::Parallel).unwrap();
        assert_eq!(t1.epochs.len(), 3);
        let mut again = model();
        let t2 = train_biencoder(&mut again, &cat, &d, &cfg, Execution::Sequential).unwrap();
        assert_eq!(t1, t2);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.ckpt");
        b.save(&p).unwrap();
        let back = BiEncoder::load(&p).unwrap();
        assert_eq!(back.params, b.params);
        let idx = back
            .embed_all_entities(&cat, Execution::Sequential)
            .unwrap();
        let sets = back
            .retrieve(
                &idx,
                &d[0].tokens,
                &[(0, 0), (3, 3)],
                3,
                Execution::Sequential,
            )
            .unwrap();
        assert_eq!(sets.len(), 2);
        for s in &sets {
            assert_eq!(s.candidates.len(), 3);
            assert!(s
                .candidates
                .windows(2)
                .all(|w| w[0].bi_score >= w[1].bi_score));
        }
    }
}
