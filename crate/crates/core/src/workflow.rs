//! Stage-by-stage training from a [`RunConfig`] and model persistence.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::kg::{AnnotatedDocument, KnowledgeBase, RelationId};
use crate::mention::{train_mention_recognizer, MentionRecognizer};
use crate::nn::SequenceEncoder;
use crate::par::Execution;
use crate::pipeline::{AsDocument, Pipeline, PipelineConfig, Thresholds};
use crate::ranker::{train_crossencoder, CrossEncoder};
use crate::relation::{train_relation_extractor, RelationExtractor, RelationMode};
use crate::retrieval::{link_examples, train_biencoder, BiEncoder, VectorIndex};
use crate::text::Vocabulary;
use crate::train::LossTrace;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const MENTION_FILE: &str = "mention.ckpt";
pub const BIENCODER_FILE: &str = "biencoder.ckpt";
pub const INDEX_FILE: &str = "index.bin";
pub const CROSSENCODER_FILE: &str = "crossencoder.ckpt";
pub const RELATION_FILE: &str = "relation.ckpt";

/// Checkpoint name of a relation extractor trained for an ablation row.
pub fn relation_file(mode: RelationMode, seed: u64) -> String {
    format!("relation-{mode}-seed{seed}.ckpt")
}

/// Tokens of entity labels, descriptions and training documents.
pub fn build_vocabulary(kb: &KnowledgeBase, docs: &[AnnotatedDocument]) -> Vocabulary {
    let entity_tokens = kb.entities.iter().flat_map(|e| {
        e.label
            .split_whitespace()
            .chain(e.description.split_whitespace())
    });
    let doc_tokens = docs
        .iter()
        .flat_map(|d| d.tokens.iter().map(String::as_str));
    Vocabulary::build(entity_tokens.chain(doc_tokens))
}

/// The recognizer only knows tokens of its training documents, so names
/// never seen in training read as `[UNK]`, the token word dropout trains.
pub fn train_mention_stage(
    cfg: &RunConfig,
    docs: &[AnnotatedDocument],
    exec: Execution,
) -> Result<(MentionRecognizer, LossTrace)> {
    let vocab = Vocabulary::build(
        docs.iter()
            .flat_map(|d| d.tokens.iter().map(String::as_str)),
    );
    let enc = cfg.mention.encoder.unwrap_or(cfg.encoder).build(&vocab);
    let mut model = MentionRecognizer::new(vocab, enc, cfg.mention.span_cap(), cfg.seed);
    let trace = train_mention_recognizer(&mut model, docs, &cfg.mention.train, exec)?;
    Ok((model, trace))
}

/// Trains the bi-encoder and embeds the whole catalog with it.
pub fn train_biencoder_stage(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    kb: &KnowledgeBase,
    docs: &[AnnotatedDocument],
    exec: Execution,
) -> Result<(BiEncoder, VectorIndex, LossTrace)> {
    let mut model = BiEncoder::new(
        vocab.clone(),
        cfg.encoder.build(vocab),
        cfg.representation,
        cfg.seed + 1,
    );
    let trace = train_biencoder(&mut model, &kb.entities, docs, &cfg.biencoder, exec)?;
    let index = model.embed_all_entities(&kb.entities, exec)?;
    Ok((model, index, trace))
}

/// Trains the ranker on negatives mined with the trained bi-encoder.
pub fn train_crossencoder_stage(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    kb: &KnowledgeBase,
    docs: &[AnnotatedDocument],
    biencoder: &BiEncoder,
    index: &VectorIndex,
    exec: Execution,
) -> Result<(CrossEncoder, LossTrace)> {
    let links = link_examples(docs, &kb.entities);
    let negatives = biencoder.mine(index, docs, &links, cfg.crossencoder.negatives + 1, exec)?;
    let mut model = CrossEncoder::new(
        vocab.clone(),
        cfg.encoder.build(vocab),
        cfg.representation,
        cfg.seed + 2,
    );
    let trace = train_crossencoder(
        &mut model,
        &kb.entities,
        docs,
        &links,
        &negatives,
        &cfg.crossencoder,
        exec,
    )?;
    Ok((model, trace))
}

/// Ranker top-1 over the bi-encoder's candidates for every gold mention.
pub fn predicted_entities(
    cfg: &RunConfig,
    kb: &KnowledgeBase,
    docs: &[AnnotatedDocument],
    biencoder: &BiEncoder,
    index: &VectorIndex,
    ranker: &CrossEncoder,
    exec: Execution,
) -> Result<Vec<Vec<String>>> {
    exec.map(docs, |doc| {
        let spans: Vec<(usize, usize)> = doc.mentions.iter().map(|m| (m.start, m.end)).collect();
        let sets = biencoder.retrieve(
            index,
            &doc.tokens,
            &spans,
            cfg.pipeline.top_k,
            Execution::Sequential,
        )?;
        doc.mentions
            .iter()
            .zip(sets)
            .map(|(m, set)| {
                let ranked = ranker.rank(&kb.entities, &doc.tokens, &set, Execution::Sequential)?;
                Ok(ranked
                    .first()
                    .map_or_else(|| m.entity.clone(), |r| r.entity.clone()))
            })
            .collect()
    })
    .into_iter()
    .collect()
}

/// Trains a relation extractor for `mode`. With a private encoder it starts
/// from the ranker's weights; otherwise the frozen ranker supplies the joint
/// embeddings.
#[allow(clippy::too_many_arguments)]
pub fn train_relation_stage(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    kb: &KnowledgeBase,
    docs: &[AnnotatedDocument],
    ranker: &CrossEncoder,
    predicted: Option<&[Vec<String>]>,
    mode: RelationMode,
    seed: u64,
    exec: Execution,
) -> Result<(RelationExtractor, LossTrace)> {
    let relations: Vec<RelationId> = kb
        .relations
        .records()
        .iter()
        .map(|r| r.id.clone())
        .collect();
    let mut model = RelationExtractor::new(
        vocab.clone(),
        cfg.encoder.build(vocab),
        cfg.relation_config(mode),
        relations,
        kb,
        seed,
    );
    if mode.uses_context() && cfg.relation.finetune_encoder {
        model.init_encoder_from(&ranker.params);
    }
    let handle = ranker.handle();
    let external: Option<&dyn SequenceEncoder> =
        model.needs_external_encoder().then_some(&handle as _);
    let train = crate::train::TrainConfig {
        seed: cfg.relation.train.seed + seed,
        ..cfg.relation.train
    };
    let trace = train_relation_extractor(
        &mut model,
        kb,
        docs,
        predicted,
        external,
        &train,
        cfg.relation.name_substitution,
        exec,
    )?;
    Ok((model, trace))
}

/// Extraction wall time per pass, in seconds per 1000 documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub documents: usize,
    pub runs: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over `runs`.
    pub std: f64,
}

impl fmt::Display for Throughput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2} s/1000 examples", self.mean, self.std)
    }
}

impl Throughput {
    pub fn from_runs(documents: usize, runs: Vec<f64>) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let std = (runs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Throughput {
            documents,
            runs,
            mean,
            std,
        }
    }
}

/// Runs full extraction over `docs` `runs` times.
pub fn measure_throughput<D: AsDocument + Sync>(
    pipeline: &Pipeline,
    docs: &[D],
    t: &Thresholds,
    runs: usize,
    exec: Execution,
) -> Result<Throughput> {
    if docs.is_empty() || runs == 0 {
        return Err(Error::validation(
            "throughput needs at least one document and one run",
        ));
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        std::hint::black_box(pipeline.extract_all(docs, t, exec)?);
        times.push(start.elapsed().as_secs_f64() * 1000.0 / docs.len() as f64);
    }
    Ok(Throughput::from_runs(docs.len(), times))
}

/// `dir/name`, or a checkpoint error naming the missing file.
pub fn checkpoint_path(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::Checkpoint(format!(
            "missing checkpoint {}",
            p.display()
        )))
    }
}

/// Everything inference needs.
pub struct Models {
    pub mention: MentionRecognizer,
    pub biencoder: BiEncoder,
    pub index: VectorIndex,
    pub ranker: CrossEncoder,
    pub relation: RelationExtractor,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingReport {
    pub mention: LossTrace,
    pub biencoder: LossTrace,
    pub crossencoder: LossTrace,
    pub relation: LossTrace,
}

impl Models {
    pub fn pipeline<'a>(&'a self, kb: &'a KnowledgeBase, config: PipelineConfig) -> Pipeline<'a> {
        Pipeline {
            kb,
            mention: &self.mention,
            biencoder: &self.biencoder,
            index: &self.index,
            ranker: &self.ranker,
            relation: &self.relation,
            config,
            restricted: None,
        }
    }

    /// Trains all four stages in order.
    pub fn train(
        cfg: &RunConfig,
        kb: &KnowledgeBase,
        docs: &[AnnotatedDocument],
        exec: Execution,
    ) -> Result<(Models, TrainingReport)> {
        let vocab = build_vocabulary(kb, docs);
        let (mention, m) = train_mention_stage(cfg, docs, exec)?;
        let (biencoder, index, b) = train_biencoder_stage(cfg, &vocab, kb, docs, exec)?;
        let (ranker, c) =
            train_crossencoder_stage(cfg, &vocab, kb, docs, &biencoder, &index, exec)?;
        let predicted = if cfg.relation.train_on_predicted {
            Some(predicted_entities(
                cfg, kb, docs, &biencoder, &index, &ranker, exec,
            )?)
        } else {
            None
        };
        let (relation, r) = train_relation_stage(
            cfg,
            &vocab,
            kb,
            docs,
            &ranker,
            predicted.as_deref(),
            cfg.relation.mode,
            cfg.seed,
            exec,
        )?;
        Ok((
            Models {
                mention,
                biencoder,
                index,
                ranker,
                relation,
            },
            TrainingReport {
                mention: m,
                biencoder: b,
                crossencoder: c,
                relation: r,
            },
        ))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.biencoder.vocab.save(dir.join(VOCAB_FILE))?;
        self.mention.save(dir.join(MENTION_FILE))?;
        self.biencoder.save(dir.join(BIENCODER_FILE))?;
        self.index.save(dir.join(INDEX_FILE))?;
        self.ranker.save(dir.join(CROSSENCODER_FILE))?;
        self.relation.save(dir.join(RELATION_FILE))
    }

    /// Loads every stage; a missing file is reported by name.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::load_with_relation(dir.as_ref(), RELATION_FILE)
    }

    pub fn load_with_relation(dir: &Path, relation_file: &str) -> Result<Self> {
        let need = |name: &str| checkpoint_path(dir, name);
        Ok(Models {
            mention: MentionRecognizer::load(need(MENTION_FILE)?)?,
            biencoder: BiEncoder::load(need(BIENCODER_FILE)?)?,
            index: VectorIndex::load(need(INDEX_FILE)?)?,
            ranker: CrossEncoder::load(need(CROSSENCODER_FILE)?)?,
            relation: RelationExtractor::load(need(relation_file)?)?,
        })
    }
}
