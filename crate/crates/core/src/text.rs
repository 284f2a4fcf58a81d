//! Vocabulary and the textual representation builders shared by all stages.
//!
//! Representations (markers in brackets):
//!
//! ```text
//! mention:  [CLS] {mention} [CTX_L] {context_left} [CTX_R] {context_right} [SEP]
//! entity:   [CLS] {label} [DESC] {desc} [SEP]
//! joint:    [CLS] {label} [DESC] {desc} [SEP] {mention} [CTX_L] {left} [CTX_R] {right} [SEP]
//! document: [CLS] {tokens} [SEP]
//! ```
//!
//! Every token carries a [`Segment`] tag and a segment-relative position:
//! context tokens count their distance to the mention, everything else counts
//! from the start of its segment. When a representation exceeds `max_len`,
//! the right context is cut first, then the left context (farthest tokens
//! first), then the description. Mention and label tokens are never dropped.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::EntityRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Marker {
    Cls,
    Sep,
    CtxL,
    CtxR,
    Desc,
}

impl Marker {
    pub const ALL: [Marker; 5] = [
        Marker::Cls,
        Marker::Sep,
        Marker::CtxL,
        Marker::CtxR,
        Marker::Desc,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Marker::Cls => "[CLS]",
            Marker::Sep => "[SEP]",
            Marker::CtxL => "[CTX_L]",
            Marker::CtxR => "[CTX_R]",
            Marker::Desc => "[DESC]",
        }
    }

    pub fn id(self) -> u32 {
        match self {
            Marker::Cls => CLS_ID,
            Marker::Sep => SEP_ID,
            Marker::CtxL => CTX_L_ID,
            Marker::CtxR => CTX_R_ID,
            Marker::Desc => DESC_ID,
        }
    }

    pub fn from_id(id: u32) -> Option<Marker> {
        Marker::ALL.into_iter().find(|m| m.id() == id)
    }
}

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const CTX_L_ID: u32 = 4;
pub const CTX_R_ID: u32 = 5;
pub const DESC_ID: u32 = 6;
pub const SPECIALS: [&str; 7] = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[CTX_L]", "[CTX_R]", "[DESC]",
];

/// Role of a token inside a representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Segment {
    Special = 0,
    Text = 1,
    Mention = 2,
    ContextLeft = 3,
    ContextRight = 4,
    Label = 5,
    Description = 6,
}

impl Segment {
    pub const COUNT: usize = 7;
}

/// Whitespace-token vocabulary with the special markers at fixed ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from a token stream; non-special tokens are sorted.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let uniq: BTreeSet<&str> = tokens
            .into_iter()
            .filter(|t| !SPECIALS.contains(t))
            .collect();
        let all = SPECIALS
            .iter()
            .copied()
            .chain(uniq)
            .map(str::to_string)
            .collect();
        Self::from_tokens(all)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or("[UNK]")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.tokens.join("\n")).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::validation(format!(
                "{}: vocabulary does not start with the special tokens",
                path.display()
            )));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// A representation ready for an encoder.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
    pub positions: Vec<u32>,
    pub special_positions: Vec<(Marker, usize)>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids of all tokens tagged with `segment`, in order.
    pub fn segment_ids(&self, segment: Segment) -> Vec<u32> {
        self.ids
            .iter()
            .zip(&self.segments)
            .filter(|(_, s)| **s == segment)
            .map(|(id, _)| *id)
            .collect()
    }

    /// Positions of every occurrence of `marker`.
    pub fn marker_positions(&self, marker: Marker) -> Vec<usize> {
        self.special_positions
            .iter()
            .filter(|(m, _)| *m == marker)
            .map(|(_, p)| *p)
            .collect()
    }
}

#[derive(Default)]
struct Builder {
    text: TokenizedText,
}

impl Builder {
    fn marker(&mut self, m: Marker) -> &mut Self {
        self.text.special_positions.push((m, self.text.ids.len()));
        self.text.ids.push(m.id());
        self.text.segments.push(Segment::Special);
        self.text.positions.push(0);
        self
    }

    fn run(&mut self, ids: &[u32], segment: Segment) -> &mut Self {
        let n = ids.len();
        for (i, &id) in ids.iter().enumerate() {
            let pos = match segment {
                Segment::ContextLeft => n - i,
                Segment::ContextRight => i + 1,
                _ => i,
            };
            self.text.ids.push(id);
            self.text.segments.push(segment);
            self.text.positions.push(pos as u32);
        }
        self
    }

    fn finish(self) -> TokenizedText {
        self.text
    }
}

/// Window and length limits for the representation builders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepConfig {
    /// Context tokens taken on each side of a mention.
    pub window: usize,
    /// Maximum representation length including markers.
    pub max_len: usize,
    /// When false, entity descriptions are left empty.
    pub include_description: bool,
}

impl Default for RepConfig {
    fn default() -> Self {
        RepConfig {
            window: 64,
            max_len: 128,
            include_description: true,
        }
    }
}

/// Splits of a mention in its document, after windowing.
struct MentionParts {
    mention: Vec<u32>,
    left: Vec<u32>,
    right: Vec<u32>,
}

fn mention_parts(
    vocab: &Vocabulary,
    tokens: &[String],
    span: (usize, usize),
    window: usize,
) -> Result<MentionParts> {
    let (start, end) = span;
    if start > end || end >= tokens.len() {
        return Err(Error::validation(format!(
            "span ({start}, {end}) invalid for {} tokens",
            tokens.len()
        )));
    }
    let left_start = start.saturating_sub(window);
    let right_end = (end + 1 + window).min(tokens.len());
    Ok(MentionParts {
        mention: vocab.encode(&tokens[start..=end]),
        left: vocab.encode(&tokens[left_start..start]),
        right: vocab.encode(&tokens[end + 1..right_end]),
    })
}

fn entity_parts(
    vocab: &Vocabulary,
    entity: &EntityRecord,
    cfg: &RepConfig,
) -> (Vec<u32>, Vec<u32>) {
    let label: Vec<&str> = entity.label.split_whitespace().collect();
    let desc: Vec<&str> = if cfg.include_description {
        entity.description.split_whitespace().collect()
    } else {
        Vec::new()
    };
    (vocab.encode(&label), vocab.encode(&desc))
}

/// Trims droppable segments in order: right context (right-most first), left
/// context (farthest first), description (right-most first).
fn truncate(
    fixed: usize,
    max_len: usize,
    right: &mut Vec<u32>,
    left: &mut Vec<u32>,
    desc: &mut Vec<u32>,
) {
    let total = fixed + right.len() + left.len() + desc.len();
    let mut excess = total.saturating_sub(max_len);
    let cut = excess.min(right.len());
    right.truncate(right.len() - cut);
    excess -= cut;
    let cut = excess.min(left.len());
    left.drain(..cut);
    excess -= cut;
    let cut = excess.min(desc.len());
    desc.truncate(desc.len() - cut);
}

/// `[CLS] {tokens} [SEP]`, used by the mention recognizer. Not truncated.
/// Maps every token id that occurs in a mention segment to a random
/// non-special id, consistently everywhere in `texts`.
pub fn rename_mentions<R: Rng + ?Sized>(
    texts: &mut [TokenizedText],
    vocab_len: usize,
    rng: &mut R,
) {
    let mut map: HashMap<u32, u32> = HashMap::new();
    for text in texts.iter() {
        for (&id, seg) in text.ids.iter().zip(&text.segments) {
            if *seg == Segment::Mention {
                map.entry(id)
                    .or_insert_with(|| rng.random_range(SPECIALS.len() as u32..vocab_len as u32));
            }
        }
    }
    for text in texts.iter_mut() {
        for (id, seg) in text.ids.iter_mut().zip(&text.segments) {
            if *seg != Segment::Special {
                if let Some(&to) = map.get(id) {
                    *id = to;
                }
            }
        }
    }
}

pub fn build_document_rep(vocab: &Vocabulary, tokens: &[String]) -> TokenizedText {
    let mut b = Builder::default();
    b.marker(Marker::Cls)
        .run(&vocab.encode(tokens), Segment::Text)
        .marker(Marker::Sep);
    b.finish()
}

pub fn build_mention_rep(
    vocab: &Vocabulary,
    tokens: &[String],
    span: (usize, usize),
    cfg: &RepConfig,
) -> Result<TokenizedText> {
    let MentionParts {
        mention,
        mut left,
        mut right,
    } = mention_parts(vocab, tokens, span, cfg.window)?;
    truncate(
        mention.len() + 4,
        cfg.max_len,
        &mut right,
        &mut left,
        &mut Vec::new(),
    );
    let mut b = Builder::default();
    b.marker(Marker::Cls)
        .run(&mention, Segment::Mention)
        .marker(Marker::CtxL)
        .run(&left, Segment::ContextLeft)
        .marker(Marker::CtxR)
        .run(&right, Segment::ContextRight)
        .marker(Marker::Sep);
    Ok(b.finish())
}

pub fn build_entity_rep(
    vocab: &Vocabulary,
    entity: &EntityRecord,
    cfg: &RepConfig,
) -> TokenizedText {
    let (label, mut desc) = entity_parts(vocab, entity, cfg);
    truncate(
        label.len() + 3,
        cfg.max_len,
        &mut Vec::new(),
        &mut Vec::new(),
        &mut desc,
    );
    let mut b = Builder::default();
    b.marker(Marker::Cls)
        .run(&label, Segment::Label)
        .marker(Marker::Desc)
        .run(&desc, Segment::Description)
        .marker(Marker::Sep);
    b.finish()
}

pub fn build_joint_rep(
    vocab: &Vocabulary,
    entity: &EntityRecord,
    tokens: &[String],
    span: (usize, usize),
    cfg: &RepConfig,
) -> Result<TokenizedText> {
    let (label, mut desc) = entity_parts(vocab, entity, cfg);
    let MentionParts {
        mention,
        mut left,
        mut right,
    } = mention_parts(vocab, tokens, span, cfg.window)?;
    truncate(
        label.len() + mention.len() + 6,
        cfg.max_len,
        &mut right,
        &mut left,
        &mut desc,
    );
    let mut b = Builder::default();
    b.marker(Marker::Cls)
        .run(&label, Segment::Label)
        .marker(Marker::Desc)
        .run(&desc, Segment::Description)
        .marker(Marker::Sep)
        .run(&mention, Segment::Mention)
        .marker(Marker::CtxL)
        .run(&left, Segment::ContextLeft)
        .marker(Marker::CtxR)
        .run(&right, Segment::ContextRight)
        .marker(Marker::Sep);
    Ok(b.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            "a b c d e f g Hawaii US state Honolulu born in was Obama Barack".split_whitespace(),
        )
    }

    fn render(v: &Vocabulary, t: &TokenizedText) -> String {
        t.ids
            .iter()
            .map(|&i| v.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn hawaii(desc: &str) -> EntityRecord {
        EntityRecord {
            id: "Q782".into(),
            label: "Hawaii".into(),
            description: desc.into(),
            types: BTreeSet::new(),
        }
    }

    fn cfg(window: usize) -> RepConfig {
        RepConfig {
            window,
            ..RepConfig::default()
        }
    }

    #[test]
    fn mention_template() {
        let v = vocab();
        let t = build_mention_rep(&v, &toks("a b c"), (1, 1), &cfg(1)).unwrap();
        assert_eq!(render(&v, &t), "[CLS] b [CTX_L] a [CTX_R] c [SEP]");

        let t = build_mention_rep(&v, &toks("a b c"), (0, 2), &cfg(5)).unwrap();
        assert_eq!(render(&v, &t), "[CLS] a b c [CTX_L] [CTX_R] [SEP]");

        let t = build_mention_rep(&v, &toks("a b c d e"), (2, 2), &cfg(0)).unwrap();
        assert_eq!(render(&v, &t), "[CLS] c [CTX_L] [CTX_R] [SEP]");
    }

    #[test]
    fn mention_rep_rejects_bad_spans() {
        let v = vocab();
        assert!(build_mention_rep(&v, &toks("a b"), (1, 0), &cfg(1)).is_err());
        assert!(build_mention_rep(&v, &toks("a b"), (0, 2), &cfg(1)).is_err());
    }

    #[test]
    fn entity_template() {
        let v = vocab();
        let c = RepConfig::default();
        let t = build_entity_rep(&v, &hawaii("US state"), &c);
        assert_eq!(render(&v, &t), "[CLS] Hawaii [DESC] US state [SEP]");
        let t = build_entity_rep(&v, &hawaii(""), &c);
        assert_eq!(render(&v, &t), "[CLS] Hawaii [DESC] [SEP]");
        assert_eq!(
            build_entity_rep(&v, &hawaii("US state"), &c),
            build_entity_rep(&v, &hawaii("US state"), &c)
        );
    }

    #[test]
    fn joint_template_and_marker_scan() {
        let v = vocab();
        let doc = toks("Barack Obama was born in Honolulu");
        let t = build_joint_rep(&v, &hawaii("US state"), &doc, (5, 5), &cfg(2)).unwrap();
        assert_eq!(
            render(&v, &t),
            "[CLS] Hawaii [DESC] US state [SEP] Honolulu [CTX_L] born in [CTX_R] [SEP]"
        );
        // independent scan over raw ids
        let scanned: Vec<(Marker, usize)> = t
            .ids
            .iter()
            .enumerate()
            .filter_map(|(p, &id)| Marker::from_id(id).map(|m| (m, p)))
            .collect();
        assert_eq!(scanned, t.special_positions);
        assert_eq!(t.ids[0], CLS_ID);
        assert_eq!(*t.ids.last().unwrap(), SEP_ID);

        let mut other = hawaii("US state");
        other.label = "Obama".into();
        let t2 = build_joint_rep(&v, &other, &doc, (5, 5), &cfg(2)).unwrap();
        assert_ne!(t, t2);
    }

    #[test]
    fn round_trip_through_segments() {
        let v = vocab();
        let doc = toks("a b c d e f g");
        let t = build_joint_rep(&v, &hawaii("US state"), &doc, (3, 4), &cfg(2)).unwrap();
        assert_eq!(t.segment_ids(Segment::Label), v.encode(&toks("Hawaii")));
        assert_eq!(
            t.segment_ids(Segment::Description),
            v.encode(&toks("US state"))
        );
        assert_eq!(t.segment_ids(Segment::Mention), v.encode(&toks("d e")));
        assert_eq!(t.segment_ids(Segment::ContextLeft), v.encode(&toks("b c")));
        assert_eq!(t.segment_ids(Segment::ContextRight), v.encode(&toks("f g")));
        // distance to mention
        let left_pos: Vec<u32> = t
            .positions
            .iter()
            .zip(&t.segments)
            .filter(|(_, s)| **s == Segment::ContextLeft)
            .map(|(p, _)| *p)
            .collect();
        assert_eq!(left_pos, vec![2, 1]);
    }

    #[test]
    fn truncation_protects_mention_and_label() {
        let v = vocab();
        let doc = toks("a b c d e f g");
        let c = RepConfig {
            window: 3,
            max_len: 12,
            include_description: true,
        };
        // untruncated length: 6 markers + 1 label + 2 desc + 1 mention + 3 + 3 = 16
        let t = build_joint_rep(&v, &hawaii("US state"), &doc, (3, 3), &c).unwrap();
        assert_eq!(t.len(), 12);
        assert!(t.segment_ids(Segment::ContextRight).is_empty());
        assert_eq!(t.segment_ids(Segment::ContextLeft), v.encode(&toks("b c")));
        assert_eq!(t.segment_ids(Segment::Mention), v.encode(&toks("d")));
        assert_eq!(t.segment_ids(Segment::Label), v.encode(&toks("Hawaii")));

        let tiny = RepConfig { max_len: 1, ..c };
        let t = build_joint_rep(&v, &hawaii("US state"), &doc, (3, 4), &tiny).unwrap();
        assert_eq!(t.segment_ids(Segment::Mention), v.encode(&toks("d e")));
        assert_eq!(t.segment_ids(Segment::Label), v.encode(&toks("Hawaii")));
        assert!(t.segment_ids(Segment::Description).is_empty());
    }

    #[test]
    fn vocabulary_round_trip() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        assert_eq!(v.id("zzz"), UNK_ID);
        assert_eq!(v.id("[CTX_R]"), CTX_R_ID);
    }
}
