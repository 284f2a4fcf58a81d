//! Type-aware relation extraction over ordered pairs of linked mentions.
//!
//! For a subject `(m, c)` and object `(m', c')` with joint embeddings `b`, `b'`
//! and mean type vectors `t_c`, `t_c'`, the relation logits are
//!
//! ```text
//! k = h(t_c ++ t_c') + W_r (b + b') + <l_s(b), l_o(b')> 1
//! ```
//!
//! The free functions below evaluate this on plain arrays. [`RelationNet`]
//! builds the same computation on the autodiff tape for training.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::kg::{AnnotatedDocument, CoarseClass, EntityRecord, KnowledgeBase, RelationId};
use crate::nn::{
    sigmoid, Adam, Checkpoint, Encoder, EncoderConfig, ParamId, ParamSet, SequenceEncoder, Tape,
    Var,
};
use crate::par::Execution;
use crate::text::{build_joint_rep, rename_mentions, RepConfig, TokenizedText, Vocabulary};
use crate::train::{self, LossTrace, TrainConfig};

pub const CHECKPOINT_KIND: &str = "relation";

/// Which terms of the relation score are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationMode {
    Full,
    NoTypes,
    TypesOnly,
    Coarse,
    NoDesc,
}

impl RelationMode {
    pub const ALL: [RelationMode; 5] = [
        RelationMode::Full,
        RelationMode::NoTypes,
        RelationMode::NoDesc,
        RelationMode::TypesOnly,
        RelationMode::Coarse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationMode::Full => "full",
            RelationMode::NoTypes => "no_types",
            RelationMode::TypesOnly => "types_only",
            RelationMode::Coarse => "coarse",
            RelationMode::NoDesc => "no_desc",
        }
    }

    pub fn uses_types(self) -> bool {
        self != RelationMode::NoTypes
    }

    pub fn uses_context(self) -> bool {
        self != RelationMode::TypesOnly
    }
}

impl fmt::Display for RelationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RelationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown relation mode `{s}`")))
    }
}

/// One learnable vector per type key.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeEmbeddingTable {
    keys: Vec<String>,
    index: HashMap<String, usize>,
    pub table: Array2<f64>,
}

impl TypeEmbeddingTable {
    pub fn new(keys: Vec<String>, table: Array2<f64>) -> Result<Self> {
        if keys.len() != table.nrows() {
            return Err(Error::validation(format!(
                "{} type keys for {} rows",
                keys.len(),
                table.nrows()
            )));
        }
        let index = keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i))
            .collect();
        Ok(TypeEmbeddingTable { keys, index, table })
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn row_of(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }
}

/// `x W + b` with `W` stored as in x out.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearMap {
    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        LinearMap {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn identity(n: usize) -> Self {
        LinearMap {
            weight: Array2::eye(n),
            bias: Array1::zeros(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationScorerWeights {
    /// `|R| x d`
    pub w_r: Array2<f64>,
    pub l_s: LinearMap,
    pub l_o: LinearMap,
    /// `2 d_T -> |R|`
    pub h: LinearMap,
    pub types: TypeEmbeddingTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationLogits {
    pub subject: usize,
    pub object: usize,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// A linked mention as seen by the relation extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInput {
    pub mention: usize,
    /// Joint embedding `b_{m,c}`.
    pub embedding: Array1<f64>,
    /// Type keys of the candidate, already mapped for the mode.
    pub types: BTreeSet<String>,
}

/// Mean of the type vectors; zero for an empty set.
pub fn type_representation<'a>(
    types: impl IntoIterator<Item = &'a String>,
    table: &TypeEmbeddingTable,
) -> Result<Array1<f64>> {
    let mut sum = Array1::zeros(table.dim());
    let mut n = 0usize;
    for t in types {
        let r = table
            .row_of(t)
            .ok_or_else(|| Error::validation(format!("unknown type `{t}`")))?;
        sum += &table.table.row(r);
        n += 1;
    }
    if n > 0 {
        sum /= n as f64;
    }
    Ok(sum)
}

pub fn type_logits(t_c: ArrayView1<f64>, t_c2: ArrayView1<f64>, h: &LinearMap) -> Array1<f64> {
    let x = concatenate(Axis(0), &[t_c, t_c2]).expect("1-d concat");
    h.apply(x.view())
}

pub fn contextual_logits(
    b: ArrayView1<f64>,
    b2: ArrayView1<f64>,
    w_r: ArrayView2<f64>,
    l_s: &LinearMap,
    l_o: &LinearMap,
) -> Array1<f64> {
    let sum = &b + &b2;
    let bilinear = l_s.apply(b).dot(&l_o.apply(b2));
    w_r.dot(&sum) + bilinear
}

pub fn combined_logits(
    subject: &PairInput,
    object: &PairInput,
    w: &RelationScorerWeights,
    mode: RelationMode,
) -> Result<RelationLogits> {
    if subject.mention == object.mention {
        return Err(Error::validation(
            "subject and object must be different mentions",
        ));
    }
    let mut logits = Array1::zeros(w.w_r.nrows());
    if mode.uses_context() {
        logits += &contextual_logits(
            subject.embedding.view(),
            object.embedding.view(),
            w.w_r.view(),
            &w.l_s,
            &w.l_o,
        );
    }
    if mode.uses_types() {
        let ts = type_representation(&subject.types, &w.types)?;
        let to = type_representation(&object.types, &w.types)?;
        logits += &type_logits(ts.view(), to.view(), &w.h);
    }
    let logits = logits.to_vec();
    Ok(RelationLogits {
        subject: subject.mention,
        object: object.mention,
        probabilities: logits.iter().map(|&z| sigmoid(z)).collect(),
        logits,
    })
}

/// All `M (M - 1)` ordered pairs, subject-major.
pub fn score_all_pairs(
    mentions: &[PairInput],
    w: &RelationScorerWeights,
    mode: RelationMode,
) -> Result<Vec<RelationLogits>> {
    let mut out = Vec::with_capacity(mentions.len() * mentions.len().saturating_sub(1));
    for (i, s) in mentions.iter().enumerate() {
        for (j, o) in mentions.iter().enumerate() {
            if i != j {
                out.push(combined_logits(s, o, w, mode)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelationConfig {
    pub mode: RelationMode,
    /// Type embedding size.
    pub type_dim: usize,
    /// Output size of `l_s` and `l_o`; 0 means the encoder width.
    pub bilinear_dim: usize,
    /// Fine-tune a private copy of the encoder. When false the joint
    /// embeddings come from an external (ranker) encoder.
    pub finetune_encoder: bool,
    pub rep: RepConfig,
}

impl Default for RelationConfig {
    fn default() -> Self {
        RelationConfig {
            mode: RelationMode::Full,
            type_dim: 32,
            bilinear_dim: 0,
            finetune_encoder: true,
            rep: RepConfig::default(),
        }
    }
}

/// Parameter layout of the relation extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationNet {
    pub encoder: Option<Encoder>,
    pub w_r: ParamId,
    pub ls_w: ParamId,
    pub ls_b: ParamId,
    pub lo_w: ParamId,
    pub lo_b: ParamId,
    pub h_w: ParamId,
    pub h_b: ParamId,
    pub types: ParamId,
    pub mode: RelationMode,
}

/// Training input for one group of mentions (usually one document).
#[derive(Debug, Clone)]
pub struct RelationExample {
    /// Joint representations, encoded by the private encoder.
    pub texts: Vec<TokenizedText>,
    /// Precomputed joint embeddings when no private encoder exists.
    pub frozen: Option<Array2<f64>>,
    /// `M x |T|` averaging matrix: row `i` holds `1/|T_i|` on the types of mention `i`.
    pub type_weights: Array2<f64>,
    pub pairs: Vec<(usize, usize)>,
    /// `P x |R|`
    pub targets: Array2<f64>,
}

impl RelationExample {
    pub fn mentions(&self) -> usize {
        self.type_weights.nrows()
    }
}

impl RelationNet {
    /// Relation logits (`P x |R|`) for every listed pair of every example.
    pub fn logits_graph(&self, tape: &mut Tape, examples: &[RelationExample]) -> Option<Var> {
        let total_pairs: usize = examples.iter().map(|e| e.pairs.len()).sum();
        if total_pairs == 0 {
            return None;
        }
        let mut subj = Vec::with_capacity(total_pairs);
        let mut obj = Vec::with_capacity(total_pairs);
        let mut base = 0;
        for e in examples {
            for &(s, o) in &e.pairs {
                subj.push(base + s);
                obj.push(base + o);
            }
            base += e.mentions();
        }
        let n_rel = tape.params().get(self.w_r).nrows();
        let mut logits: Option<Var> = None;
        let mut add = |tape: &mut Tape, v: Var| {
            logits = Some(match logits {
                Some(l) => tape.add(l, v),
                None => v,
            });
        };

        if self.mode.uses_context() {
            let b = match &self.encoder {
                Some(enc) => {
                    let texts: Vec<&TokenizedText> =
                        examples.iter().flat_map(|e| &e.texts).collect();
                    let out = enc.forward(tape, &texts);
                    tape.gather(out.hidden, out.cls_rows())
                }
                None => {
                    let frozen: Vec<ArrayView2<f64>> = examples
                        .iter()
                        .map(|e| e.frozen.as_ref().expect("frozen embeddings").view())
                        .collect();
                    tape.constant(concatenate(Axis(0), &frozen).expect("same width"))
                }
            };
            // W_r (b + b') = W_r b + W_r b', computed once per mention.
            let w_r = tape.param(self.w_r);
            let u = tape.matmul_t(b, w_r);
            let us = tape.gather(u, subj.clone());
            let uo = tape.gather(u, obj.clone());
            let ctx = tape.add(us, uo);
            add(tape, ctx);
            let (lsw, lsb) = (tape.param(self.ls_w), tape.param(self.ls_b));
            let ls = tape.linear(b, lsw, lsb);
            let (low, lob) = (tape.param(self.lo_w), tape.param(self.lo_b));
            let lo = tape.linear(b, low, lob);
            let ls = tape.gather(ls, subj.clone());
            let lo = tape.gather(lo, obj.clone());
            let dot = tape.row_dot(ls, lo);
            let bil = tape.broadcast_cols(dot, n_rel);
            add(tape, bil);
        }
        if self.mode.uses_types() {
            let a: Vec<ArrayView2<f64>> = examples.iter().map(|e| e.type_weights.view()).collect();
            let a = tape.constant(concatenate(Axis(0), &a).expect("same type count"));
            let table = tape.param(self.types);
            let t = tape.matmul(a, table);
            let ts = tape.gather(t, subj);
            let to = tape.gather(t, obj);
            let x = tape.concat_cols(ts, to);
            let (hw, hb) = (tape.param(self.h_w), tape.param(self.h_b));
            let ty = tape.linear(x, hw, hb);
            add(tape, ty);
        }
        logits
    }

    /// BCE summed over pairs and relations.
    pub fn loss_graph(&self, tape: &mut Tape, examples: &[RelationExample]) -> Option<Var> {
        let z = self.logits_graph(tape, examples)?;
        let t: Vec<ArrayView2<f64>> = examples.iter().map(|e| e.targets.view()).collect();
        let targets = concatenate(Axis(0), &t).expect("same relation count");
        Some(tape.bce(z, targets, None))
    }
}

#[derive(Debug, Clone)]
pub struct RelationExtractor {
    pub vocab: Vocabulary,
    pub params: ParamSet,
    pub net: RelationNet,
    pub config: RelationConfig,
    pub relations: Vec<RelationId>,
    pub type_keys: Vec<String>,
    relation_index: HashMap<RelationId, usize>,
}

impl RelationExtractor {
    /// `encoder` sets the width `d`; with `finetune_encoder` it is also the
    /// architecture of the private encoder.
    pub fn new(
        vocab: Vocabulary,
        encoder: EncoderConfig,
        config: RelationConfig,
        relations: Vec<RelationId>,
        kb: &KnowledgeBase,
        seed: u64,
    ) -> Self {
        let type_keys: Vec<String> = match config.mode {
            RelationMode::Coarse => CoarseClass::ALL
                .iter()
                .map(|c| c.as_str().to_string())
                .collect(),
            _ => kb.types.types().to_vec(),
        };
        Self::with_type_keys(vocab, encoder, config, relations, type_keys, seed)
    }

    pub fn with_type_keys(
        vocab: Vocabulary,
        encoder: EncoderConfig,
        config: RelationConfig,
        relations: Vec<RelationId>,
        type_keys: Vec<String>,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let enc_cfg = EncoderConfig {
            vocab_size: vocab.len(),
            ..encoder
        };
        let enc = (config.finetune_encoder && config.mode.uses_context())
            .then(|| Encoder::new(enc_cfg, &mut params, "enc", &mut rng));
        let d = enc_cfg.dim;
        let dl = if config.bilinear_dim == 0 {
            d
        } else {
            config.bilinear_dim
        };
        let dt = config.type_dim;
        let nr = relations.len();
        let sd = 1.0 / (d as f64).sqrt();
        let w_r = params.add_normal("w_r", (nr, d), sd, &mut rng);
        let ls_w = params.add_normal("l_s.w", (d, dl), sd, &mut rng);
        let ls_b = params.add_zeros("l_s.b", (1, dl));
        let lo_w = params.add_normal("l_o.w", (d, dl), sd, &mut rng);
        let lo_b = params.add_zeros("l_o.b", (1, dl));
        let h_w = params.add_normal(
            "h.w",
            (2 * dt, nr),
            1.0 / (2.0 * dt as f64).sqrt(),
            &mut rng,
        );
        let h_b = params.add_const("h.b", (1, nr), -2.0);
        let types = params.add_normal("types", (type_keys.len(), dt), 1.0, &mut rng);
        let relation_index = relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i))
            .collect();
        RelationExtractor {
            vocab,
            params,
            net: RelationNet {
                encoder: enc,
                w_r,
                ls_w,
                ls_b,
                lo_w,
                lo_b,
                h_w,
                h_b,
                types,
                mode: config.mode,
            },
            config,
            relations,
            type_keys,
            relation_index,
        }
    }

    pub fn mode(&self) -> RelationMode {
        self.config.mode
    }

    /// Copies encoder weights from another model's parameters (same layout).
    pub fn init_encoder_from(&mut self, source: &ParamSet) -> usize {
        self.params.copy_prefix_from(source, "enc.", "enc.")
    }

    pub fn needs_external_encoder(&self) -> bool {
        self.mode().uses_context() && self.net.encoder.is_none()
    }

    fn rep(&self) -> RepConfig {
        RepConfig {
            include_description: self.mode() != RelationMode::NoDesc
                && self.config.rep.include_description,
            ..self.config.rep
        }
    }

    pub fn joint_rep(
        &self,
        entity: &EntityRecord,
        tokens: &[String],
        span: (usize, usize),
    ) -> Result<TokenizedText> {
        build_joint_rep(&self.vocab, entity, tokens, span, &self.rep())
    }

    /// Type keys of an entity under the current mode.
    pub fn type_keys_of(&self, kb: &KnowledgeBase, entity: &EntityRecord) -> BTreeSet<String> {
        match self.mode() {
            RelationMode::Coarse => kb
                .coarse_types_of(&EntityRecord {
                    types: kb.types.restrict(&entity.types),
                    ..entity.clone()
                })
                .into_iter()
                .map(|c| c.as_str().to_string())
                .collect(),
            _ => kb.types.restrict(&entity.types),
        }
    }

    fn type_weights(&self, keys: &[BTreeSet<String>]) -> Array2<f64> {
        let mut a = Array2::zeros((keys.len(), self.type_keys.len()));
        let index: HashMap<&str, usize> = self
            .type_keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.as_str(), i))
            .collect();
        for (i, ks) in keys.iter().enumerate() {
            let rows: Vec<usize> = ks
                .iter()
                .filter_map(|k| index.get(k.as_str()).copied())
                .collect();
            for &r in &rows {
                a[[i, r]] = 1.0 / rows.len() as f64;
            }
        }
        a
    }

    /// Plain weights for inference.
    pub fn weights(&self) -> RelationScorerWeights {
        let p = &self.params;
        let lin = |w: ParamId, b: ParamId| LinearMap {
            weight: p.get(w).clone(),
            bias: p.get(b).row(0).to_owned(),
        };
        RelationScorerWeights {
            w_r: p.get(self.net.w_r).clone(),
            l_s: lin(self.net.ls_w, self.net.ls_b),
            l_o: lin(self.net.lo_w, self.net.lo_b),
            h: lin(self.net.h_w, self.net.h_b),
            types: TypeEmbeddingTable::new(self.type_keys.clone(), p.get(self.net.types).clone())
                .expect("table matches keys"),
        }
    }

    fn embed(
        &self,
        texts: &[TokenizedText],
        external: Option<&dyn SequenceEncoder>,
        exec: Execution,
    ) -> Result<Array2<f64>> {
        let d = self.params.get(self.net.w_r).ncols();
        if !self.mode().uses_context() {
            return Ok(Array2::zeros((texts.len(), d)));
        }
        match (&self.net.encoder, external) {
            (Some(enc), _) => Ok(enc.bind(&self.params).encode_pooled_batch(texts, exec)),
            (None, Some(ext)) => Ok(ext.encode_pooled_batch(texts, exec)),
            (None, None) => Err(Error::validation(
                "relation extractor needs the ranker encoder",
            )),
        }
    }

    /// Scores every ordered pair of linked mentions `(span, entity)`.
    pub fn score_mentions(
        &self,
        kb: &KnowledgeBase,
        tokens: &[String],
        links: &[((usize, usize), &EntityRecord)],
        external: Option<&dyn SequenceEncoder>,
        exec: Execution,
    ) -> Result<Vec<RelationLogits>> {
        if links.len() < 2 {
            return Ok(Vec::new());
        }
        let texts = links
            .iter()
            .map(|(span, e)| self.joint_rep(e, tokens, *span))
            .collect::<Result<Vec<_>>>()?;
        let b = self.embed(&texts, external, exec)?;
        let inputs: Vec<PairInput> = links
            .iter()
            .enumerate()
            .map(|(i, (_, e))| PairInput {
                mention: i,
                embedding: b.row(i).to_owned(),
                types: self.type_keys_of(kb, e),
            })
            .collect();
        score_all_pairs(&inputs, &self.weights(), self.mode())
    }

    /// Gold-mention training input for one document: targets are 1 for each
    /// relation asserted between the two mentions' entities.
    pub fn example(
        &self,
        kb: &KnowledgeBase,
        doc: &AnnotatedDocument,
        entity_override: Option<&[String]>,
        external: Option<&dyn SequenceEncoder>,
    ) -> Result<Option<RelationExample>> {
        let mut links: Vec<((usize, usize), &EntityRecord)> = Vec::new();
        let mut gold_ids: Vec<&str> = Vec::new();
        for (i, m) in doc.mentions.iter().enumerate() {
            let id = entity_override.map_or(m.entity.as_str(), |o| o[i].as_str());
            match kb.entities.get(id) {
                Some(e) if kb.entities.contains(&m.entity) => {
                    links.push(((m.start, m.end), e));
                    gold_ids.push(&m.entity);
                }
                _ => log::warn!(
                    "document {}: entity `{id}` not in catalog, mention skipped",
                    doc.doc_id
                ),
            }
        }
        let mut asserted: HashMap<(&str, &str), Vec<usize>> = HashMap::new();
        for t in &doc.triples {
            let covered =
                gold_ids.contains(&t.subject.as_str()) && gold_ids.contains(&t.object.as_str());
            let Some(r) = self.relation_index.get(&t.relation) else {
                log::warn!(
                    "document {}: unknown relation `{}`, triple skipped",
                    doc.doc_id,
                    t.relation
                );
                continue;
            };
            if !covered {
                log::warn!(
                    "document {}: triple without gold mentions skipped",
                    doc.doc_id
                );
                continue;
            }
            asserted
                .entry((&t.subject, &t.object))
                .or_default()
                .push(*r);
        }
        let m = links.len();
        if m < 2 {
            return Ok(None);
        }
        let pairs: Vec<(usize, usize)> = (0..m)
            .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        let mut targets = Array2::zeros((pairs.len(), self.relations.len()));
        for (p, &(i, j)) in pairs.iter().enumerate() {
            if let Some(rs) = asserted.get(&(gold_ids[i], gold_ids[j])) {
                for &r in rs {
                    targets[[p, r]] = 1.0;
                }
            }
        }
        let texts = links
            .iter()
            .map(|(span, e)| self.joint_rep(e, &doc.tokens, *span))
            .collect::<Result<Vec<_>>>()?;
        let keys: Vec<BTreeSet<String>> = links
            .iter()
            .map(|(_, e)| self.type_keys_of(kb, e))
            .collect();
        let frozen = if self.needs_external_encoder() {
            Some(self.embed(&texts, external, Execution::Sequential)?)
        } else {
            None
        };
        Ok(Some(RelationExample {
            texts: if self.net.encoder.is_some() {
                texts
            } else {
                Vec::new()
            },
            frozen,
            type_weights: self.type_weights(&keys),
            pairs,
            targets,
        }))
    }

    /// Mean loss per pair.
    pub fn loss(&self, examples: &[RelationExample], exec: Execution) -> f64 {
        let pairs: usize = examples.iter().map(|e| e.pairs.len()).sum();
        train::total_loss(&self.params, examples, exec, |t, c| {
            self.net.loss_graph(t, c)
        }) / pairs.max(1) as f64
    }

    pub fn train_step(
        &mut self,
        opt: &mut Adam,
        batch: &[RelationExample],
        exec: Execution,
    ) -> f64 {
        let pairs: usize = batch.iter().map(|e| e.pairs.len()).sum();
        let net = &self.net;
        train::step(&mut self.params, opt, batch, pairs as f64, exec, |t, c| {
            net.loss_graph(t, c)
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let enc_cfg = self.encoder_config();
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            meta: json!({
                "encoder": enc_cfg,
                "config": self.config,
                "vocab": self.vocab.tokens(),
                "relations": self.relations,
                "type_keys": self.type_keys,
            }),
            params: self.params.clone(),
        }
        .save(path)
    }

    fn encoder_config(&self) -> EncoderConfig {
        match &self.net.encoder {
            Some(e) => *e.config(),
            None => EncoderConfig::new(self.vocab.len(), self.params.get(self.net.w_r).ncols()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let vocab = Vocabulary::from_tokens(ck.meta("vocab")?);
        let mut model = RelationExtractor::with_type_keys(
            vocab,
            ck.meta("encoder")?,
            ck.meta("config")?,
            ck.meta("relations")?,
            ck.meta("type_keys")?,
            0,
        );
        model.params.copy_from(&ck.params)?;
        Ok(model)
    }
}

/// Trains on gold mention pairs. `entity_override[d][i]`, when given,
/// replaces the gold entity of mention `i` in document `d` (for instance
/// with the ranker's prediction). `external` supplies joint embeddings when
/// the extractor has no private encoder. With probability
/// `name_substitution` an example's entity names are renamed for the step.
#[allow(clippy::too_many_arguments)]
pub fn train_relation_extractor(
    model: &mut RelationExtractor,
    kb: &KnowledgeBase,
    docs: &[AnnotatedDocument],
    entity_override: Option<&[Vec<String>]>,
    external: Option<&dyn SequenceEncoder>,
    cfg: &TrainConfig,
    name_substitution: f64,
    exec: Execution,
) -> Result<LossTrace> {
    let mut examples = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        let o = entity_override.map(|o| o[d].as_slice());
        if let Some(x) = model.example(kb, doc, o, external)? {
            examples.push(x);
        }
    }
    if examples.is_empty() {
        return Err(Error::validation("no document with two or more mentions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.adam(), model.params.len());
    let mut trace = LossTrace::default();
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let batches = train::shuffled_batches(examples.len(), cfg.batch_size, &mut rng);
        for idx in &batches {
            let batch: Vec<RelationExample> = idx
                .iter()
                .map(|&i| {
                    let mut x = examples[i].clone();
                    if !x.texts.is_empty() && rng.random_bool(name_substitution) {
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
        log::info!("relation[{}] epoch {epoch}: loss {mean:.5}", model.mode());
        trace.epochs.push(mean);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EntityCatalog, GoldMention, RelationSet, Triple, TypeVocabulary};
    use crate::nn::{AdamConfig, Gradients};
    use ndarray::array;
    use rand::Rng;

    fn keys(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn table2() -> TypeEmbeddingTable {
        TypeEmbeddingTable::new(
            vec!["t1".into(), "t2".into()],
            array![[1.0, 0.0], [0.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn type_means() {
        let t = table2();
        assert_eq!(
            type_representation(&keys(&["t1"]), &t).unwrap(),
            array![1.0, 0.0]
        );
        assert_eq!(
            type_representation(&keys(&["t1", "t2"]), &t).unwrap(),
            array![0.5, 0.5]
        );
        assert_eq!(
            type_representation(&keys(&[]), &t).unwrap(),
            array![0.0, 0.0]
        );
        assert!(type_representation(&keys(&["t9"]), &t).is_err());
    }

    #[test]
    fn contextual_hand_computed() {
        let w_r = array![[1.0, 0.0], [0.0, 1.0]];
        let id = LinearMap::identity(2);
        let g = contextual_logits(
            array![1.0, 0.0].view(),
            array![0.0, 1.0].view(),
            w_r.view(),
            &id,
            &id,
        );
        assert_eq!(g, array![1.0, 1.0]);
        let zero = Array2::zeros((3, 2));
        let g = contextual_logits(
            array![1.0, 2.0].view(),
            array![3.0, -1.0].view(),
            zero.view(),
            &id,
            &id,
        );
        assert!(g.iter().all(|&x| x == 1.0));
        let z = LinearMap::zeros(2, 2);
        let w = array![[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]];
        let g = contextual_logits(
            array![1.0, 2.0].view(),
            array![3.0, -1.0].view(),
            w.view(),
            &z,
            &z,
        );
        assert_eq!(g, w.dot(&array![4.0, 1.0]));
    }

    fn random_weights(rng: &mut ChaCha8Rng) -> RelationScorerWeights {
        let mut r = |s: (usize, usize)| Array2::from_shape_fn(s, |_| rng.random_range(-1.0..1.0));
        let lin = |w: Array2<f64>, b: Array2<f64>| LinearMap {
            weight: w,
            bias: b.row(0).to_owned(),
        };
        RelationScorerWeights {
            w_r: r((3, 4)),
            l_s: lin(r((4, 4)), r((1, 4))),
            l_o: lin(r((4, 4)), r((1, 4))),
            h: lin(r((4, 3)), r((1, 3))),
            types: TypeEmbeddingTable::new(vec!["a".into(), "b".into(), "c".into()], r((3, 2)))
                .unwrap(),
        }
    }

    fn inputs(rng: &mut ChaCha8Rng, m: usize) -> Vec<PairInput> {
        let ks = [
            keys(&["a"]),
            keys(&["b", "c"]),
            keys(&[]),
            keys(&["a", "c"]),
        ];
        (0..m)
            .map(|i| PairInput {
                mention: i,
                embedding: Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0)),
                types: ks[i % 4].clone(),
            })
            .collect()
    }

    #[test]
    fn modes_and_additivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_weights(&mut rng);
        let xs = inputs(&mut rng, 2);
        let (s, o) = (&xs[0], &xs[1]);
        let ctx = contextual_logits(
            s.embedding.view(),
            o.embedding.view(),
            w.w_r.view(),
            &w.l_s,
            &w.l_o,
        );
        let ts = type_representation(&s.types, &w.types).unwrap();
        let to = type_representation(&o.types, &w.types).unwrap();
        let ty = type_logits(ts.view(), to.view(), &w.h);
        let full = combined_logits(s, o, &w, RelationMode::Full).unwrap();
        for r in 0..3 {
            assert!((full.logits[r] - (ctx[r] + ty[r])).abs() < 1e-12);
            assert_eq!(full.probabilities[r], sigmoid(full.logits[r]));
        }
        assert_eq!(
            combined_logits(s, o, &w, RelationMode::NoTypes)
                .unwrap()
                .logits,
            ctx.to_vec()
        );
        assert_eq!(
            combined_logits(s, o, &w, RelationMode::TypesOnly)
                .unwrap()
                .logits,
            ty.to_vec()
        );
        assert!(combined_logits(s, s, &w, RelationMode::Full).is_err());

        let swapped = type_logits(to.view(), ts.view(), &w.h);
        assert!((&swapped - &ty).iter().any(|x| x.abs() > 1e-6));
        let zh = RelationScorerWeights {
            h: LinearMap::zeros(4, 3),
            ..w.clone()
        };
        assert!(type_logits(ts.view(), to.view(), &zh.h)
            .iter()
            .all(|&x| x == 0.0));
        assert_eq!(
            combined_logits(s, o, &zh, RelationMode::Full)
                .unwrap()
                .logits,
            combined_logits(s, o, &zh, RelationMode::NoTypes)
                .unwrap()
                .logits
        );

        // NO_TYPES ignores the table contents.
        let mut fuzzed = w.clone();
        fuzzed.types.table.mapv_inplace(|x| x * 7.0 - 3.0);
        assert_eq!(
            combined_logits(s, o, &w, RelationMode::NoTypes).unwrap(),
            combined_logits(s, o, &fuzzed, RelationMode::NoTypes).unwrap()
        );
    }

    #[test]
    fn pair_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_weights(&mut rng);
        for (m, want) in [(1, 0), (2, 2), (4, 12)] {
            let xs = inputs(&mut rng, m);
            let out = score_all_pairs(&xs, &w, RelationMode::Full).unwrap();
            assert_eq!(out.len(), want);
            assert!(out.iter().all(|r| r.subject != r.object));
        }
    }

    #[test]
    fn modes_parse() {
        for m in RelationMode::ALL {
            assert_eq!(m.as_str().parse::<RelationMode>().unwrap(), m);
        }
        assert!("bogus".parse::<RelationMode>().is_err());
    }

    pub(crate) fn toy_kb() -> KnowledgeBase {
        let mut coarse = HashMap::new();
        coarse.insert("person".to_string(), CoarseClass::Per);
        coarse.insert("athlete".to_string(), CoarseClass::Per);
        coarse.insert("place".to_string(), CoarseClass::Loc);
        let types = TypeVocabulary::new(
            vec!["person".into(), "athlete".into(), "place".into()],
            vec![("athlete".to_string(), "person".to_string())],
            coarse,
        )
        .unwrap();
        let mk = |id: &str, label: &str, t: &str| EntityRecord {
            id: id.into(),
            label: label.into(),
            description: "known".into(),
            types: keys(&[t]),
        };
        KnowledgeBase {
            entities: EntityCatalog::new(vec![
                mk("Q1", "alice", "athlete"),
                mk("Q2", "paris", "place"),
                mk("Q3", "bob", "person"),
            ])
            .unwrap(),
            relations: RelationSet::new(vec![
                ("P1".into(), "lives in".into()),
                ("P2".into(), "knows".into()),
            ])
            .unwrap(),
            types,
        }
    }

    fn toy_doc() -> AnnotatedDocument {
        let m = |start: usize, e: &str| GoldMention {
            start,
            end: start,
            entity: e.into(),
        };
        AnnotatedDocument {
            doc_id: "d".into(),
            tokens: "alice knows bob in paris"
                .split(' ')
                .map(String::from)
                .collect(),
            mentions: vec![m(0, "Q1"), m(2, "Q3"), m(4, "Q2")],
            triples: vec![
                Triple::new("Q1", "P2", "Q3"),
                Triple::new("Q1", "P1", "Q2"),
                Triple::new("Q9", "P1", "Q2"),
            ],
        }
    }

    fn toy_model(mode: RelationMode) -> RelationExtractor {
        let kb = toy_kb();
        let vocab = Vocabulary::build("alice knows bob in paris known".split(' '));
        let enc = EncoderConfig {
            layers: 1,
            ..EncoderConfig::new(vocab.len(), 8)
        };
        let cfg = RelationConfig {
            mode,
            type_dim: 4,
            ..RelationConfig::default()
        };
        RelationExtractor::new(vocab, enc, cfg, vec!["P1".into(), "P2".into()], &kb, 2)
    }

    #[test]
    fn targets_follow_gold_triples() {
        let kb = toy_kb();
        let m = toy_model(RelationMode::Full);
        let x = m.example(&kb, &toy_doc(), None, None).unwrap().unwrap();
        assert_eq!(x.pairs.len(), 6);
        assert_eq!(x.targets.sum(), 2.0);
        let p = x.pairs.iter().position(|&p| p == (0, 1)).unwrap();
        assert_eq!(x.targets.row(p).to_vec(), vec![0.0, 1.0]);
        let rev = x.pairs.iter().position(|&p| p == (1, 0)).unwrap();
        assert_eq!(x.targets.row(rev).sum(), 0.0);
        // athlete closes over person
        assert_eq!(x.type_weights.row(0).to_vec(), vec![0.5, 0.5, 0.0]);

        let c = toy_model(RelationMode::Coarse);
        assert_eq!(c.type_keys.len(), 4);
        assert_eq!(
            c.type_keys_of(&kb, kb.entities.get("Q1").unwrap()),
            keys(&["PER"])
        );
    }

    #[test]
    fn tape_route_matches_plain_route() {
        let kb = toy_kb();
        let doc = toy_doc();
        for mode in RelationMode::ALL {
            let m = toy_model(mode);
            let x = m.example(&kb, &doc, None, None).unwrap().unwrap();
            let mut tape = Tape::new(&m.params);
            let z = m
                .net
                .logits_graph(&mut tape, std::slice::from_ref(&x))
                .unwrap();
            let z = tape.value(z).to_owned();
            let links: Vec<((usize, usize), &EntityRecord)> = doc
                .mentions
                .iter()
                .map(|g| ((g.start, g.end), kb.entities.get(&g.entity).unwrap()))
                .collect();
            let plain = m
                .score_mentions(&kb, &doc.tokens, &links, None, Execution::Sequential)
                .unwrap();
            assert_eq!(plain.len(), x.pairs.len());
            for (p, r) in plain.iter().enumerate() {
                assert_eq!((r.subject, r.object), x.pairs[p]);
                for k in 0..2 {
                    assert!((r.logits[k] - z[[p, k]]).abs() < 1e-9, "{mode}");
                }
            }
        }
    }

    #[test]
    fn gradients_of_all_relation_weights() {
        let kb = toy_kb();
        let doc = toy_doc();
        let mut m = toy_model(RelationMode::Full);
        let x = vec![m.example(&kb, &doc, None, None).unwrap().unwrap()];
        let mut grads = Gradients::new(m.params.len());
        {
            let mut tape = Tape::new(&m.params);
            let l = m.net.loss_graph(&mut tape, &x).unwrap();
            tape.backward(l, &mut grads);
        }
        let n = x[0].pairs.len() as f64;
        let ids = [
            m.net.w_r,
            m.net.ls_w,
            m.net.ls_b,
            m.net.lo_w,
            m.net.lo_b,
            m.net.h_w,
            m.net.h_b,
            m.net.types,
        ];
        for id in ids {
            let g = grads.get(id).unwrap().clone();
            for ((r, c), &gv) in g.indexed_iter() {
                let h = 1e-6;
                let orig = m.params.get(id)[[r, c]];
                m.params.get_mut(id)[[r, c]] = orig + h;
                let up = m.loss(&x, Execution::Sequential) * n;
                m.params.get_mut(id)[[r, c]] = orig - h;
                let down = m.loss(&x, Execution::Sequential) * n;
                m.params.get_mut(id)[[r, c]] = orig;
                let fd = (up - down) / (2.0 * h);
                let scale = fd.abs().max(gv.abs());
                if scale < 1e-7 {
                    continue;
                }
                assert!(
                    (fd - gv).abs() / scale < 1e-4,
                    "{}[{r},{c}] fd {fd} vs {gv}",
                    m.params.name(id)
                );
            }
        }
    }

    #[test]
    fn training_lowers_loss_and_round_trips() {
        let kb = toy_kb();
        let doc = toy_doc();
        let mut m = toy_model(RelationMode::Full);
        let x = vec![m.example(&kb, &doc, None, None).unwrap().unwrap()];
        let before = m.loss(&x, Execution::Sequential);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            m.params.len(),
        );
        m.train_step(&mut opt, &x, Execution::Sequential);
        assert!(m.loss(&x, Execution::Sequential) < before);

        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 1,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let mut a = toy_model(RelationMode::Coarse);
        let t = train_relation_extractor(
            &mut a,
            &kb,
            std::slice::from_ref(&doc),
            None,
            None,
            &cfg,
            0.0,
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(t.epochs.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ckpt");
        a.save(&p).unwrap();
        let back = RelationExtractor::load(&p).unwrap();
        assert_eq!(back.params, a.params);
        assert_eq!(back.type_keys, a.type_keys);
        assert_eq!(back.mode(), RelationMode::Coarse);
    }

    #[test]
    fn frozen_encoder_route() {
        let kb = toy_kb();
        let doc = toy_doc();
        let vocab = Vocabulary::build("alice knows bob in paris known".split(' '));
        let enc_cfg = EncoderConfig {
            layers: 1,
            ..EncoderConfig::new(vocab.len(), 8)
        };
        let mut ext_params = ParamSet::new();
        let ext = Encoder::new(
            EncoderConfig {
                vocab_size: vocab.len(),
                ..enc_cfg
            },
            &mut ext_params,
            "enc",
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let handle = ext.bind(&ext_params);
        let cfg = RelationConfig {
            finetune_encoder: false,
            type_dim: 4,
            ..RelationConfig::default()
        };
        let m = RelationExtractor::new(vocab, enc_cfg, cfg, vec!["P1".into(), "P2".into()], &kb, 2);
        assert!(m.needs_external_encoder());
        assert!(m.example(&kb, &doc, None, None).is_err());
        let x = m.example(&kb, &doc, None, Some(&handle)).unwrap().unwrap();
        let mut tape = Tape::new(&m.params);
        let z = m
            .net
            .logits_graph(&mut tape, std::slice::from_ref(&x))
            .unwrap();
        let links: Vec<((usize, usize), &EntityRecord)> = doc
            .mentions
            .iter()
            .map(|g| ((g.start, g.end), kb.entities.get(&g.entity).unwrap()))
            .collect();
        let plain = m
            .score_mentions(
                &kb,
                &doc.tokens,
                &links,
                Some(&handle),
                Execution::Sequential,
            )
            .unwrap();
        assert!((plain[0].logits[0] - tape.value(z)[[0, 0]]).abs() < 1e-9);
    }
}
