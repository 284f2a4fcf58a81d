//! A small pre-norm transformer encoder and the encoder contract.
//!
//! Inputs are the token id, segment tag and segment-relative position of each
//! token (see [`crate::text`]). Pooling is the `[CLS]` row.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamSet};
use super::tape::{Tape, Var};
use crate::par::Execution;
use crate::text::{Segment, TokenizedText};

/// `n x d` contextual token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings(pub Array2<f64>);

/// `d`-dimensional pooled embedding (the `[CLS]` row).
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding(pub Array1<f64>);

/// Anything that maps a representation to one vector per token.
pub trait SequenceEncoder: Sync {
    fn dim(&self) -> usize;

    fn encode_tokens(&self, text: &TokenizedText) -> TokenEmbeddings;

    fn encode_pooled(&self, text: &TokenizedText) -> PooledEmbedding {
        PooledEmbedding(self.encode_tokens(text).0.row(0).to_owned())
    }

    /// Pooled embeddings for many inputs, one row each.
    fn encode_pooled_batch(&self, texts: &[TokenizedText], exec: Execution) -> Array2<f64> {
        let rows = exec.map(texts, |t| self.encode_pooled(t).0);
        stack_rows(&rows, self.dim())
    }
}

pub(crate) fn stack_rows(rows: &[Array1<f64>], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Positions at or beyond this value share the last position embedding.
    pub max_positions: usize,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize, dim: usize) -> Self {
        EncoderConfig {
            vocab_size,
            dim,
            layers: 2,
            heads: 4.min(dim.max(1)),
            ffn_dim: 2 * dim,
            max_positions: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter layout of a transformer encoder inside some [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    tok: ParamId,
    pos: ParamId,
    seg: ParamId,
    layers: Vec<LayerParams>,
    ln_g: ParamId,
    ln_b: ParamId,
}

/// Output of a batched forward pass: packed hidden states and row offsets.
pub struct EncodedBatch {
    pub hidden: Var,
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl EncodedBatch {
    /// Row of the `[CLS]` token of every sequence.
    pub fn cls_rows(&self) -> Vec<usize> {
        self.offsets.clone()
    }
}

impl Encoder {
    /// Registers freshly initialised encoder parameters under `prefix`.
    pub fn new<R: Rng + ?Sized>(
        cfg: EncoderConfig,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut R,
    ) -> Self {
        let d = cfg.dim;
        let name = |s: &str| format!("{prefix}.{s}");
        let tok = params.add_normal(name("tok_emb"), (cfg.vocab_size, d), 0.5, rng);
        let pos = params.add_normal(name("pos_emb"), (cfg.max_positions, d), 0.5, rng);
        let seg = params.add_normal(name("seg_emb"), (Segment::COUNT, d), 0.5, rng);
        let proj = 1.0 / (d as f64).sqrt();
        let out_scale = proj / (2.0 * cfg.layers as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = |s: &str| format!("{prefix}.l{l}.{s}");
                LayerParams {
                    ln1_g: params.add_const(n("ln1_g"), (1, d), 1.0),
                    ln1_b: params.add_zeros(n("ln1_b"), (1, d)),
                    wq: params.add_normal(n("wq"), (d, d), proj, rng),
                    wk: params.add_normal(n("wk"), (d, d), proj, rng),
                    wv: params.add_normal(n("wv"), (d, d), proj, rng),
                    wo: params.add_normal(n("wo"), (d, d), out_scale, rng),
                    bo: params.add_zeros(n("bo"), (1, d)),
                    ln2_g: params.add_const(n("ln2_g"), (1, d), 1.0),
                    ln2_b: params.add_zeros(n("ln2_b"), (1, d)),
                    w1: params.add_normal(n("w1"), (d, cfg.ffn_dim), proj, rng),
                    b1: params.add_zeros(n("b1"), (1, cfg.ffn_dim)),
                    w2: params.add_normal(
                        n("w2"),
                        (cfg.ffn_dim, d),
                        out_scale * (d as f64 / cfg.ffn_dim as f64).sqrt(),
                        rng,
                    ),
                    b2: params.add_zeros(n("b2"), (1, d)),
                }
            })
            .collect();
        let ln_g = params.add_const(name("ln_g"), (1, d), 1.0);
        let ln_b = params.add_zeros(name("ln_b"), (1, d));
        Encoder {
            cfg,
            tok,
            pos,
            seg,
            layers,
            ln_g,
            ln_b,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// Encodes a batch of sequences packed into one matrix.
    pub fn forward(&self, tape: &mut Tape, texts: &[&TokenizedText]) -> EncodedBatch {
        let total: usize = texts.iter().map(|t| t.len()).sum();
        let mut ids = Vec::with_capacity(total);
        let mut pos = Vec::with_capacity(total);
        let mut seg = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(texts.len());
        let mut lens = Vec::with_capacity(texts.len());
        let max_pos = self.cfg.max_positions - 1;
        let vocab = self.cfg.vocab_size;
        for t in texts {
            offsets.push(ids.len());
            lens.push(t.len());
            ids.extend(t.ids.iter().map(|&i| {
                let i = i as usize;
                if i < vocab {
                    i
                } else {
                    crate::text::UNK_ID as usize
                }
            }));
            pos.extend(t.positions.iter().map(|&p| (p as usize).min(max_pos)));
            seg.extend(t.segments.iter().map(|&s| s as usize));
        }
        let blocks: Vec<(usize, usize)> =
            offsets.iter().copied().zip(lens.iter().copied()).collect();

        let tok = tape.param(self.tok);
        let tok = tape.gather(tok, ids);
        let p = tape.param(self.pos);
        let p = tape.gather(p, pos);
        let s = tape.param(self.seg);
        let s = tape.gather(s, seg);
        let x = tape.add(tok, p);
        let mut x = tape.add(x, s);

        for l in &self.layers {
            let g = tape.param(l.ln1_g);
            let b = tape.param(l.ln1_b);
            let h = tape.layer_norm(x, g, b);
            let wq = tape.param(l.wq);
            let wk = tape.param(l.wk);
            let wv = tape.param(l.wv);
            let q = tape.matmul(h, wq);
            let k = tape.matmul(h, wk);
            let v = tape.matmul(h, wv);
            let a = tape.attention(q, k, v, blocks.clone(), self.cfg.heads);
            let wo = tape.param(l.wo);
            let bo = tape.param(l.bo);
            let a = tape.linear(a, wo, bo);
            x = tape.add(x, a);

            let g = tape.param(l.ln2_g);
            let b = tape.param(l.ln2_b);
            let h = tape.layer_norm(x, g, b);
            let w1 = tape.param(l.w1);
            let b1 = tape.param(l.b1);
            let h = tape.linear(h, w1, b1);
            let h = tape.relu(h);
            let w2 = tape.param(l.w2);
            let b2 = tape.param(l.b2);
            let h = tape.linear(h, w2, b2);
            x = tape.add(x, h);
        }
        let g = tape.param(self.ln_g);
        let b = tape.param(self.ln_b);
        let hidden = tape.layer_norm(x, g, b);
        EncodedBatch {
            hidden,
            offsets,
            lens,
        }
    }

    /// Forward pass returning pooled rows, without keeping the tape.
    pub fn pooled(&self, params: &ParamSet, texts: &[&TokenizedText]) -> Array2<f64> {
        let mut tape = Tape::new(params);
        let enc = self.forward(&mut tape, texts);
        let cls = tape.gather(enc.hidden, enc.cls_rows());
        tape.value(cls).to_owned()
    }

    pub fn bind<'a>(&'a self, params: &'a ParamSet) -> BoundEncoder<'a> {
        BoundEncoder {
            encoder: self,
            params,
        }
    }
}

/// An encoder layout together with the parameters it reads; implements
/// [`SequenceEncoder`].
#[derive(Clone, Copy)]
pub struct BoundEncoder<'a> {
    pub encoder: &'a Encoder,
    pub params: &'a ParamSet,
}

/// Sequences packed per forward pass in batched inference.
const INFERENCE_CHUNK: usize = 64;

impl SequenceEncoder for BoundEncoder<'_> {
    fn dim(&self) -> usize {
        self.encoder.dim()
    }

    fn encode_tokens(&self, text: &TokenizedText) -> TokenEmbeddings {
        let mut tape = Tape::new(self.params);
        let enc = self.encoder.forward(&mut tape, &[text]);
        TokenEmbeddings(tape.value(enc.hidden).to_owned())
    }

    fn encode_pooled_batch(&self, texts: &[TokenizedText], exec: Execution) -> Array2<f64> {
        let chunks: Vec<&[TokenizedText]> = texts.chunks(INFERENCE_CHUNK).collect();
        let parts = exec.map(&chunks, |chunk| {
            let refs: Vec<&TokenizedText> = chunk.iter().collect();
            self.encoder.pooled(self.params, &refs)
        });
        let mut out = Array2::zeros((texts.len(), self.dim()));
        let mut row = 0;
        for p in parts {
            let n = p.nrows();
            out.slice_mut(ndarray::s![row..row + n, ..]).assign(&p);
            row += n;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::EntityRecord;
    use crate::text::{build_entity_rep, build_mention_rep, RepConfig, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Vocabulary, ParamSet, Encoder) {
        let vocab = Vocabulary::build("a b c d e f Hawaii US state".split_whitespace());
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(
            EncoderConfig::new(vocab.len(), 16),
            &mut params,
            "enc",
            &mut rng,
        );
        (vocab, params, enc)
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn pooled_is_cls_row_and_shapes_match() {
        let (vocab, params, enc) = setup();
        let bound = enc.bind(&params);
        let t = build_mention_rep(&vocab, &toks("a b c d"), (1, 2), &RepConfig::default()).unwrap();
        let tokens = bound.encode_tokens(&t);
        assert_eq!(tokens.0.dim(), (t.len(), 16));
        assert!(tokens.0.iter().all(|v| v.is_finite()));
        let pooled = bound.encode_pooled(&t);
        assert_eq!(pooled.0, tokens.0.row(0).to_owned());
        assert_eq!(bound.encode_tokens(&t), tokens);
    }

    #[test]
    fn packed_batch_matches_single_sequences() {
        let (vocab, params, enc) = setup();
        let bound = enc.bind(&params);
        let e = EntityRecord {
            id: "Q1".into(),
            label: "Hawaii".into(),
            description: "US state".into(),
            types: Default::default(),
        };
        let texts = vec![
            build_mention_rep(&vocab, &toks("a b c d e f"), (2, 3), &RepConfig::default()).unwrap(),
            build_entity_rep(&vocab, &e, &RepConfig::default()),
            build_mention_rep(&vocab, &toks("f e"), (0, 0), &RepConfig::default()).unwrap(),
        ];
        let batch = bound.encode_pooled_batch(&texts, Execution::Sequential);
        for (i, t) in texts.iter().enumerate() {
            let single = bound.encode_pooled(t).0;
            for (a, b) in batch.row(i).iter().zip(single.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(
            batch,
            bound.encode_pooled_batch(&texts, Execution::Parallel)
        );
    }
}
