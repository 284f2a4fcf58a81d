//! Token-pair mention recognizer.
//!
//! Every span `(i, j)` with `i <= j` gets the logit `w . (k_i ++ k_j) + b`,
//! where `k_i` is the contextual embedding of token `i`.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::kg::AnnotatedDocument;
use crate::nn::{
    sigmoid, Adam, Checkpoint, Encoder, EncoderConfig, ParamId, ParamSet, SequenceEncoder, Tape,
    Var,
};
use crate::par::Execution;
use crate::text::{build_document_rep, TokenizedText, Vocabulary, UNK_ID};
use crate::train::{self, LossTrace, TrainConfig};

pub const CHECKPOINT_KIND: &str = "mention";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanScore {
    pub start: usize,
    pub end: usize,
    pub logit: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MentionCandidate {
    pub start: usize,
    pub end: usize,
    pub probability: f64,
}

/// Linear layer over the concatenation of two token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PairHead {
    pub weights: Array1<f64>,
    pub bias: f64,
}

/// Number of spans scored for `n` tokens under an optional length cap.
pub fn span_count(n: usize, max_span_len: Option<usize>) -> usize {
    match max_span_len {
        None => n * (n + 1) / 2,
        Some(l) => (0..n).map(|i| l.min(n - i)).sum(),
    }
}

fn spans(n: usize, max_span_len: Option<usize>) -> impl Iterator<Item = (usize, usize)> {
    let cap = max_span_len.unwrap_or(usize::MAX);
    (0..n).flat_map(move |i| (i..n).take_while(move |j| j - i < cap).map(move |j| (i, j)))
}

/// Scores all spans given the token embeddings `k` (`n x d`).
pub fn score_spans_from_embeddings(
    k: ArrayView2<f64>,
    head: &PairHead,
    max_span_len: Option<usize>,
) -> Result<Vec<SpanScore>> {
    let (n, d) = k.dim();
    if n == 0 {
        return Err(Error::validation(
            "cannot score spans of an empty token list",
        ));
    }
    if head.weights.len() != 2 * d {
        return Err(Error::validation(format!(
            "pair head expects {} inputs, embeddings give {}",
            head.weights.len(),
            2 * d
        )));
    }
    // The head is linear, so the start and end contributions separate.
    let left = k.dot(&head.weights.slice(ndarray::s![..d]));
    let right = k.dot(&head.weights.slice(ndarray::s![d..]));
    Ok(spans(n, max_span_len)
        .map(|(i, j)| {
            let logit = left[i] + right[j] + head.bias;
            SpanScore {
                start: i,
                end: j,
                logit,
                probability: sigmoid(logit),
            }
        })
        .collect())
}

/// Scores all spans of a document representation `[CLS] tokens [SEP]`.
pub fn score_spans(
    encoder: &dyn SequenceEncoder,
    head: &PairHead,
    doc: &TokenizedText,
    max_span_len: Option<usize>,
) -> Result<Vec<SpanScore>> {
    if doc.len() < 3 {
        return Err(Error::validation(
            "cannot score spans of an empty token list",
        ));
    }
    let k = encoder.encode_tokens(doc).0;
    let n = doc.len() - 2;
    score_spans_from_embeddings(k.slice(ndarray::s![1..=n, ..]), head, max_span_len)
}

/// Spans with probability strictly above `epsilon_m`, most probable first.
pub fn select_mentions(scores: &[SpanScore], epsilon_m: f64) -> Vec<MentionCandidate> {
    let mut out: Vec<MentionCandidate> = scores
        .iter()
        .filter(|s| s.probability > epsilon_m)
        .map(|s| MentionCandidate {
            start: s.start,
            end: s.end,
            probability: s.probability,
        })
        .collect();
    out.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then((a.start, a.end).cmp(&(b.start, b.end)))
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MentionTrainConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Documents up to this many tokens train on every span.
    pub full_span_limit: usize,
    /// Negatives sampled per gold span in longer documents.
    pub negative_ratio: usize,
    /// Probability of replacing each document token with `[UNK]`.
    pub word_dropout: f64,
}

impl Default for MentionTrainConfig {
    fn default() -> Self {
        MentionTrainConfig {
            train: TrainConfig::default(),
            full_span_limit: 64,
            negative_ratio: 10,
            word_dropout: 0.0,
        }
    }
}

/// One document prepared for training: its representation and labeled spans.
#[derive(Debug, Clone)]
pub struct SpanExample {
    pub text: TokenizedText,
    pub spans: Vec<(usize, usize)>,
    pub labels: Vec<f64>,
}

/// Parameter layout of the recognizer: encoder plus pair head.
#[derive(Debug, Clone, PartialEq)]
pub struct MentionNet {
    pub encoder: Encoder,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct MentionRecognizer {
    pub vocab: Vocabulary,
    pub params: ParamSet,
    pub net: MentionNet,
    pub max_span_len: Option<usize>,
}

impl MentionRecognizer {
    pub fn new(
        vocab: Vocabulary,
        encoder: EncoderConfig,
        max_span_len: Option<usize>,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            ..encoder
        };
        let encoder = Encoder::new(cfg, &mut params, "enc", &mut rng);
        let d = cfg.dim;
        let head_w = params.add_normal(
            "head.w",
            (2 * d, 1),
            1.0 / (2.0 * d as f64).sqrt(),
            &mut rng,
        );
        let head_b = params.add_const("head.b", (1, 1), -2.0);
        MentionRecognizer {
            vocab,
            params,
            net: MentionNet {
                encoder,
                head_w,
                head_b,
            },
            max_span_len,
        }
    }

    pub fn head(&self) -> PairHead {
        PairHead {
            weights: self.params.get(self.net.head_w).column(0).to_owned(),
            bias: self.params.get(self.net.head_b)[[0, 0]],
        }
    }

    pub fn score_tokens(&self, tokens: &[String]) -> Result<Vec<SpanScore>> {
        if tokens.is_empty() {
            return Err(Error::validation(
                "cannot score spans of an empty token list",
            ));
        }
        let rep = build_document_rep(&self.vocab, tokens);
        score_spans(
            &self.net.encoder.bind(&self.params),
            &self.head(),
            &rep,
            self.max_span_len,
        )
    }

    /// Builds the labeled span set of a document. Longer documents keep every
    /// gold span plus a random sample of negatives.
    pub fn example<R: Rng + ?Sized>(
        &self,
        doc: &AnnotatedDocument,
        cfg: &MentionTrainConfig,
        rng: &mut R,
    ) -> Option<SpanExample> {
        let n = doc.tokens.len();
        if n == 0 {
            log::warn!("document {} has no tokens, skipped", doc.doc_id);
            return None;
        }
        let gold: HashSet<(usize, usize)> = doc.mentions.iter().map(|m| (m.start, m.end)).collect();
        let all: Vec<(usize, usize)> = spans(n, self.max_span_len).collect();
        let chosen = if n <= cfg.full_span_limit {
            all
        } else {
            let mut pos: Vec<(usize, usize)> =
                all.iter().copied().filter(|s| gold.contains(s)).collect();
            let neg: Vec<(usize, usize)> = all.into_iter().filter(|s| !gold.contains(s)).collect();
            let want = (cfg.negative_ratio * pos.len().max(1)).min(neg.len());
            let mut picked: Vec<usize> = sample(rng, neg.len(), want).into_vec();
            picked.sort_unstable();
            pos.extend(picked.into_iter().map(|i| neg[i]));
            pos
        };
        let labels = chosen
            .iter()
            .map(|s| f64::from(u8::from(gold.contains(s))))
            .collect();
        let mut text = build_document_rep(&self.vocab, &doc.tokens);
        if cfg.word_dropout > 0.0 {
            for id in &mut text.ids[1..=n] {
                if rng.random_bool(cfg.word_dropout) {
                    *id = UNK_ID;
                }
            }
        }
        Some(SpanExample {
            text,
            spans: chosen,
            labels,
        })
    }

    /// Mean per-document loss.
    pub fn loss(&self, examples: &[SpanExample], exec: Execution) -> f64 {
        train::total_loss(&self.params, examples, exec, |t, c| {
            self.net.loss_graph(t, c)
        }) / examples.len().max(1) as f64
    }

    /// One optimizer step on a batch; returns the batch loss before the update.
    pub fn train_step(&mut self, opt: &mut Adam, batch: &[SpanExample], exec: Execution) -> f64 {
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
                "max_span_len": self.max_span_len,
            }),
            params: self.params.clone(),
        }
        .save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let vocab = Vocabulary::from_tokens(ck.meta("vocab")?);
        let mut model =
            MentionRecognizer::new(vocab, ck.meta("encoder")?, ck.meta("max_span_len")?, 0);
        model.params.copy_from(&ck.params)?;
        Ok(model)
    }
}

impl MentionNet {
    /// Sum over examples of the mean span BCE of each example.
    pub fn loss_graph(&self, tape: &mut Tape, examples: &[SpanExample]) -> Option<Var> {
        let examples: Vec<&SpanExample> = examples.iter().filter(|e| !e.spans.is_empty()).collect();
        if examples.is_empty() {
            return None;
        }
        let texts: Vec<&TokenizedText> = examples.iter().map(|e| &e.text).collect();
        let enc = self.encoder.forward(tape, &texts);
        let total: usize = examples.iter().map(|e| e.spans.len()).sum();
        let mut starts = Vec::with_capacity(total);
        let mut ends = Vec::with_capacity(total);
        let mut targets = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for (e, &off) in examples.iter().zip(&enc.offsets) {
            let w = 1.0 / e.spans.len() as f64;
            for (&(i, j), &y) in e.spans.iter().zip(&e.labels) {
                starts.push(off + 1 + i);
                ends.push(off + 1 + j);
                targets.push(y);
                weights.push(w);
            }
        }
        let ks = tape.gather(enc.hidden, starts);
        let ke = tape.gather(enc.hidden, ends);
        let x = tape.concat_cols(ks, ke);
        let w = tape.param(self.head_w);
        let b = tape.param(self.head_b);
        let z = tape.linear(x, w, b);
        let col = |v: Vec<f64>| Array2::from_shape_vec((total, 1), v).expect("column shape");
        Some(tape.bce(z, col(targets), Some(col(weights))))
    }
}

/// Trains on every span of every document (negatives subsampled in long
/// documents). Returns the loss trace.
pub fn train_mention_recognizer(
    model: &mut MentionRecognizer,
    docs: &[AnnotatedDocument],
    cfg: &MentionTrainConfig,
    exec: Execution,
) -> Result<LossTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut opt = Adam::new(cfg.train.adam(), model.params.len());
    let mut trace = LossTrace::default();
    for epoch in 0..cfg.train.epochs {
        let examples: Vec<SpanExample> = docs
            .iter()
            .filter_map(|d| model.example(d, cfg, &mut rng))
            .collect();
        if examples.is_empty() {
            return Err(Error::validation("no trainable documents"));
        }
        let mut sum = 0.0;
        let batches = train::shuffled_batches(examples.len(), cfg.train.batch_size, &mut rng);
        for idx in &batches {
            let batch: Vec<SpanExample> = idx.iter().map(|&i| examples[i].clone()).collect();
            let l = model.train_step(&mut opt, &batch, exec);
            trace.steps.push(l);
            sum += l;
        }
        let mean = sum / batches.len() as f64;
        log::info!("mention epoch {epoch}: loss {mean:.5}");
        trace.epochs.push(mean);
    }
    Ok(trace)
}
