//! Synthetic knowledge graph and annotated corpus.
//!
//! Relations come in pairs. A determined pair shares its surface templates and
//! differs only in the (subject type, object type) signature, so only types
//! can tell the two apart. Even-numbered determined pairs differ at the coarse
//! level, odd-numbered ones only at the fine level. A non-determined pair
//! shares a loose signature (any leaf of one coarse class for each slot) and
//! differs in its templates. Relation frequencies follow a power law over an
//! interleaved rank order.
//!
//! A fraction of each leaf type's entities is held out of the training split
//! and appears only in dev and test documents.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{
    relation_frequencies, write_dataset, AnnotatedDocument, CoarseClass, EntityCatalog, EntityId,
    EntityRecord, GoldMention, KnowledgeBase, RelationId, RelationSet, Triple, TypeId,
    TypeVocabulary,
};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const FREQUENCY_FILE: &str = "frequencies.json";
pub const META_FILE: &str = "synth_meta.json";

/// Root outside the type vocabulary; restriction drops it.
const TOP_TYPE: &str = "thing";
const ROOTS: [(&str, CoarseClass); 4] = [
    ("person", CoarseClass::Per),
    ("organization", CoarseClass::Org),
    ("location", CoarseClass::Loc),
    ("artifact", CoarseClass::Misc),
];

const CUE_WORDS: &[&str] = &[
    "was",
    "born",
    "in",
    "near",
    "works",
    "for",
    "leads",
    "owns",
    "founded",
    "by",
    "at",
    "from",
    "joined",
    "left",
    "visited",
    "built",
    "sold",
    "bought",
    "wrote",
    "about",
    "under",
    "over",
    "beside",
    "across",
    "with",
    "against",
    "supports",
    "opposes",
    "manages",
    "funds",
    "hosts",
    "moved",
    "to",
    "into",
    "toward",
    "lives",
    "studied",
    "teaches",
    "married",
    "met",
    "named",
    "after",
    "before",
    "since",
    "during",
    "became",
    "part",
    "of",
    "member",
    "heads",
    "serves",
    "advises",
    "trains",
    "follows",
    "rivals",
    "governs",
    "borders",
    "contains",
    "faces",
    "holds",
    "keeps",
    "guards",
    "drew",
    "painted",
    "designed",
    "invented",
    "found",
    "lost",
    "won",
    "earned",
    "gave",
    "took",
    "sent",
    "received",
    "praised",
    "blamed",
    "hired",
    "fired",
    "led",
    "carried",
    "shipped",
    "crossed",
    "entered",
    "reached",
    "ruled",
    "claimed",
    "shared",
    "traded",
    "signed",
    "approved",
    "rejected",
    "hosted",
    "attended",
    "judged",
    "coached",
    "recorded",
    "printed",
    "launched",
    "opened",
    "closed",
    "restored",
    "sponsored",
    "named",
    "inherited",
    "granted",
    "leased",
    "mapped",
    "surveyed",
    "measured",
    "charted",
    "guided",
    "escorted",
    "welcomed",
];

const DESC_ADJECTIVES: &[&str] = &[
    "quiet", "old", "bright", "distant", "small", "famous", "obscure", "early", "late", "modern",
    "ancient", "curious", "steady", "remote", "notable", "humble", "grand", "rare", "common",
    "lasting",
];

const DESC_NOUNS: &[&str] = &[
    "record",
    "story",
    "legacy",
    "figure",
    "name",
    "entry",
    "subject",
    "case",
    "reference",
    "mention",
    "topic",
    "source",
    "account",
    "note",
    "memory",
    "trace",
    "chapter",
    "episode",
    "detail",
    "item",
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_types: usize,
    /// Fraction of relations fully determined by their (subject type, object type).
    pub type_determinism: f64,
    pub templates_per_relation: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub power_law_exponent: f64,
    /// Fraction of each leaf type's entities kept out of the training split.
    pub held_out_fraction: f64,
    /// Probability that an entity gets an empty description.
    pub empty_description_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_entities: 500,
            n_relations: 12,
            n_types: 30,
            type_determinism: 0.5,
            templates_per_relation: 2,
            n_train: 5000,
            n_dev: 500,
            n_test: 500,
            power_law_exponent: 1.5,
            held_out_fraction: 0.5,
            empty_description_rate: 0.1,
            seed: 0,
        }
    }
}

/// Per-relation generation metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRelation {
    pub id: RelationId,
    pub determined: bool,
    /// Allowed subject leaf types.
    pub subject_types: Vec<TypeId>,
    /// Allowed object leaf types.
    pub object_types: Vec<TypeId>,
    pub templates: Vec<Vec<String>>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub kb: KnowledgeBase,
    pub train: Vec<AnnotatedDocument>,
    pub dev: Vec<AnnotatedDocument>,
    pub test: Vec<AnnotatedDocument>,
    pub frequencies: BTreeMap<RelationId, usize>,
    pub relations: Vec<SynthRelation>,
    pub held_out: BTreeSet<EntityId>,
    /// Leaf type of every entity.
    pub leaf_of: BTreeMap<EntityId, TypeId>,
}

#[derive(Serialize)]
struct Meta<'a> {
    spec: &'a SynthSpec,
    relations: &'a [SynthRelation],
    held_out: &'a BTreeSet<EntityId>,
}

impl SynthCorpus {
    /// Writes the knowledge-graph files, the three splits, the frequency map
    /// and generation metadata into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, spec: &SynthSpec) -> Result<()> {
        let dir = dir.as_ref();
        self.kb.write_dir(dir)?;
        write_dataset(dir.join(TRAIN_FILE), &self.train)?;
        write_dataset(dir.join(DEV_FILE), &self.dev)?;
        write_dataset(dir.join(TEST_FILE), &self.test)?;
        let freq = serde_json::to_string_pretty(&self.frequencies)?;
        std::fs::write(dir.join(FREQUENCY_FILE), freq)
            .map_err(|e| Error::io(dir.join(FREQUENCY_FILE), e))?;
        let meta = Meta {
            spec,
            relations: &self.relations,
            held_out: &self.held_out,
        };
        let meta = serde_json::to_string_pretty(&meta)?;
        std::fs::write(dir.join(META_FILE), meta).map_err(|e| Error::io(dir.join(META_FILE), e))
    }
}

impl SynthSpec {
    fn n_leaves(&self) -> usize {
        self.n_types.saturating_sub(ROOTS.len())
    }

    fn n_determined(&self) -> usize {
        (self.type_determinism * self.n_relations as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_entities", self.n_entities),
            ("n_relations", self.n_relations),
            ("n_types", self.n_types),
            ("templates_per_relation", self.templates_per_relation),
            ("n_train", self.n_train),
            ("n_dev", self.n_dev),
            ("n_test", self.n_test),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.type_determinism) {
            return Err(Error::validation("type_determinism must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return Err(Error::validation("held_out_fraction must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.empty_description_rate) {
            return Err(Error::validation(
                "empty_description_rate must lie in [0, 1]",
            ));
        }
        if !(self.power_law_exponent.is_finite() && self.power_law_exponent >= 0.0) {
            return Err(Error::validation(
                "power_law_exponent must be finite and non-negative",
            ));
        }
        let leaves = self.n_leaves();
        if leaves < ROOTS.len() {
            return Err(Error::validation(format!(
                "n_types = {} leaves no subtype for some of the {} root classes; need at least {}",
                self.n_types,
                ROOTS.len(),
                2 * ROOTS.len()
            )));
        }
        let per_leaf = if self.held_out_fraction > 0.0 { 2 } else { 1 };
        if self.n_entities < leaves * per_leaf {
            return Err(Error::validation(format!(
                "infeasible: {leaves} leaf types need at least {} entities, got {}",
                leaves * per_leaf,
                self.n_entities
            )));
        }
        // Fine-only pairs need two leaves under one root.
        if self.n_determined() >= 4 && leaves < 2 * ROOTS.len() {
            return Err(Error::validation(format!(
                "infeasible: fine-grained determined relations need n_types >= {}",
                3 * ROOTS.len()
            )));
        }
        Ok(())
    }
}

fn make_type_vocabulary(n_leaves: usize) -> (TypeVocabulary, Vec<Vec<TypeId>>) {
    let mut types: Vec<TypeId> = ROOTS.iter().map(|(r, _)| r.to_string()).collect();
    let mut edges = Vec::new();
    let mut coarse = HashMap::new();
    let mut leaves: Vec<Vec<TypeId>> = vec![Vec::new(); ROOTS.len()];
    for (r, c) in ROOTS {
        edges.push((r.to_string(), TOP_TYPE.to_string()));
        coarse.insert(r.to_string(), c);
    }
    for i in 0..n_leaves {
        let (root, class) = ROOTS[i % ROOTS.len()];
        let leaf = format!("{root}_{}", i / ROOTS.len());
        edges.push((leaf.clone(), root.to_string()));
        coarse.insert(leaf.clone(), class);
        leaves[i % ROOTS.len()].push(leaf.clone());
        types.push(leaf);
    }
    let vocab = TypeVocabulary::new(types, edges, coarse).expect("generated type ids are unique");
    (vocab, leaves)
}

fn syllable_tokens(rng: &mut ChaCha8Rng, n: usize, forbidden: &BTreeSet<&str>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let mut t = String::new();
        for _ in 0..syllables {
            t.push(*CONSONANTS.choose(rng).unwrap() as char);
            t.push(*VOWELS.choose(rng).unwrap() as char);
        }
        if rng.random_bool(0.3) {
            t.push(*CONSONANTS.choose(rng).unwrap() as char);
        }
        if !forbidden.contains(t.as_str()) && seen.insert(t.clone()) {
            out.push(t);
        }
    }
    out
}

fn make_entities(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    leaves: &[TypeId],
    types: &TypeVocabulary,
) -> (Vec<EntityRecord>, BTreeMap<EntityId, TypeId>) {
    let forbidden: BTreeSet<&str> = CUE_WORDS
        .iter()
        .chain(DESC_ADJECTIVES)
        .chain(DESC_NOUNS)
        .copied()
        .chain([".", "of"])
        .collect();
    let pool = syllable_tokens(rng, (spec.n_entities / 2).max(150), &forbidden);
    let mut labels = BTreeSet::new();
    let mut order: Vec<usize> = (0..spec.n_entities).collect();
    order.shuffle(rng);
    let mut entities = Vec::with_capacity(spec.n_entities);
    let mut leaf_of = BTreeMap::new();
    for i in 0..spec.n_entities {
        let label = loop {
            let n = if rng.random_bool(0.4) { 1 } else { 2 };
            let words: Vec<&str> = (0..n).map(|_| pool.choose(rng).unwrap().as_str()).collect();
            let label = words.join(" ");
            if labels.insert(label.clone()) {
                break label;
            }
        };
        let description = if rng.random_bool(spec.empty_description_rate) {
            String::new()
        } else {
            format!(
                "{} {} of {} {}",
                DESC_ADJECTIVES.choose(rng).unwrap(),
                DESC_NOUNS.choose(rng).unwrap(),
                DESC_ADJECTIVES.choose(rng).unwrap(),
                DESC_NOUNS.choose(rng).unwrap()
            )
        };
        let leaf = leaves[order[i] % leaves.len()].clone();
        let id = format!("Q{:04}", i + 1);
        let closed = types.restrict(&BTreeSet::from([leaf.clone()]));
        leaf_of.insert(id.clone(), leaf);
        entities.push(EntityRecord {
            id,
            label,
            description,
            types: closed,
        });
    }
    (entities, leaf_of)
}

struct CueSource<'a> {
    words: Vec<&'a str>,
    next: usize,
}

impl CueSource<'_> {
    fn take(&mut self) -> String {
        let base = self.words[self.next % self.words.len()];
        let round = self.next / self.words.len();
        self.next += 1;
        if round == 0 {
            base.to_string()
        } else {
            format!("{base}{round}")
        }
    }

    /// A template with `{S}` and `{O}` slots and at least two cue words
    /// between them.
    fn template(&mut self, rng: &mut ChaCha8Rng) -> Vec<String> {
        let inner = rng.random_range(2..=3);
        let mut between: Vec<String> = (0..inner).map(|_| self.take()).collect();
        let (first, second) = if rng.random_bool(0.25) {
            ("{O}", "{S}")
        } else {
            ("{S}", "{O}")
        };
        let mut t = Vec::new();
        if rng.random_bool(0.3) {
            t.push(self.take());
        }
        t.push(first.to_string());
        t.append(&mut between);
        t.push(second.to_string());
        t.push(".".to_string());
        t
    }
}

/// Subject types, object types and templates of one relation.
type Member = (Vec<TypeId>, Vec<TypeId>, Vec<Vec<String>>);

/// Pair structure before rank ordering.
struct Unit {
    determined: bool,
    members: Vec<Member>,
}

fn make_units(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    leaves: &[Vec<TypeId>],
    cues: &mut CueSource,
) -> Vec<Unit> {
    let n_det = spec.n_determined();
    let n_non = spec.n_relations - n_det;
    let classes = ROOTS.len();
    let mut cursor = vec![0usize; classes];
    let mut next_leaf = |c: usize| {
        let l = leaves[c][cursor[c] % leaves[c].len()].clone();
        cursor[c] += 1;
        l
    };

    let mut det = Vec::new();
    for p in 0..n_det.div_ceil(2) {
        let size = if 2 * p + 1 < n_det { 2 } else { 1 };
        let cs = p % classes;
        let co = (p + 1) % classes;
        let templates: Vec<Vec<String>> = (0..spec.templates_per_relation)
            .map(|_| cues.template(rng))
            .collect();
        let a = (vec![next_leaf(cs)], vec![next_leaf(co)]);
        let mut members = vec![(a.0, a.1, templates.clone())];
        if size == 2 {
            let b = if p % 2 == 0 {
                (vec![next_leaf((p + 2) % classes)], vec![next_leaf(co)])
            } else {
                (vec![next_leaf(cs)], vec![next_leaf(co)])
            };
            members.push((b.0, b.1, templates));
        }
        det.push(Unit {
            determined: true,
            members,
        });
    }

    let mut non = Vec::new();
    for q in 0..n_non.div_ceil(2) {
        let size = if 2 * q + 1 < n_non { 2 } else { 1 };
        let subject = leaves[(q + 1) % classes].clone();
        let object = leaves[(q + 3) % classes].clone();
        let members = (0..size)
            .map(|_| {
                let templates = (0..spec.templates_per_relation)
                    .map(|_| cues.template(rng))
                    .collect();
                (subject.clone(), object.clone(), templates)
            })
            .collect();
        non.push(Unit {
            determined: false,
            members,
        });
    }

    // Interleave determined and non-determined units by relative position.
    let mut keyed: Vec<(f64, usize, Unit)> = Vec::new();
    let nd = det.len().max(1) as f64;
    let nn = non.len().max(1) as f64;
    for (i, u) in det.into_iter().enumerate() {
        keyed.push(((i as f64 + 0.5) / nd, 0, u));
    }
    for (i, u) in non.into_iter().enumerate() {
        keyed.push(((i as f64 + 0.5) / nn, 1, u));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, u)| u).collect()
}

/// Rank order: in blocks of three units, all first members then all second members.
fn rank_relations(units: Vec<Unit>, exponent: f64) -> Vec<SynthRelation> {
    let mut ordered = Vec::new();
    let mut units = units.into_iter().peekable();
    while units.peek().is_some() {
        let block: Vec<Unit> = units.by_ref().take(3).collect();
        let mut seconds = Vec::new();
        for mut u in block {
            let det = u.determined;
            let mut rest = u.members.split_off(1);
            ordered.push((det, u.members.pop().unwrap()));
            if let Some(m) = rest.pop() {
                seconds.push((det, m));
            }
        }
        ordered.extend(seconds);
    }
    ordered
        .into_iter()
        .enumerate()
        .map(
            |(k, (determined, (subject_types, object_types, templates)))| SynthRelation {
                id: format!("P{:02}", k + 1),
                determined,
                subject_types,
                object_types,
                templates,
                weight: ((k + 1) as f64).powf(-exponent),
            },
        )
        .collect()
}

struct DocSampler<'a> {
    relations: &'a [SynthRelation],
    weights: WeightedIndex<f64>,
    labels: HashMap<&'a str, Vec<String>>,
    /// Leaf type to entity ids, one map for the training pool and one for all.
    train_pool: HashMap<&'a str, Vec<&'a str>>,
    full_pool: HashMap<&'a str, Vec<&'a str>>,
}

impl DocSampler<'_> {
    fn document(&self, rng: &mut ChaCha8Rng, doc_id: String, train: bool) -> AnnotatedDocument {
        let pool = if train {
            &self.train_pool
        } else {
            &self.full_pool
        };
        let sentences = rng.random_range(1..=3);
        let mut used: BTreeSet<&str> = BTreeSet::new();
        let mut tokens = Vec::new();
        let mut mentions = Vec::new();
        let mut triples = Vec::new();
        let mut attempts = 0;
        while triples.len() < sentences && attempts < 100 {
            attempts += 1;
            let rel = &self.relations[self.weights.sample(rng)];
            let pick = |rng: &mut ChaCha8Rng, leaves: &[TypeId], used: &BTreeSet<&str>| {
                let leaf = leaves.choose(rng)?;
                let free: Vec<&str> = pool
                    .get(leaf.as_str())?
                    .iter()
                    .copied()
                    .filter(|e| !used.contains(e))
                    .collect();
                free.choose(rng).copied()
            };
            let Some(s) = pick(rng, &rel.subject_types, &used) else {
                continue;
            };
            used.insert(s);
            let Some(o) = pick(rng, &rel.object_types, &used) else {
                used.remove(s);
                continue;
            };
            used.insert(o);
            let template = rel.templates.choose(rng).unwrap();
            for slot in template {
                let entity = match slot.as_str() {
                    "{S}" => s,
                    "{O}" => o,
                    w => {
                        tokens.push(w.to_string());
                        continue;
                    }
                };
                let label = &self.labels[entity];
                let start = tokens.len();
                tokens.extend(label.iter().cloned());
                mentions.push(GoldMention {
                    start,
                    end: tokens.len() - 1,
                    entity: entity.to_string(),
                });
            }
            triples.push(Triple::new(s, rel.id.as_str(), o));
        }
        AnnotatedDocument {
            doc_id,
            tokens,
            mentions,
            triples,
        }
    }
}

/// Generates a corpus. Deterministic in `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (types, leaves_by_class) = make_type_vocabulary(spec.n_leaves());
    let leaves: Vec<TypeId> = types.types()[ROOTS.len()..].to_vec();
    let (entities, leaf_of) = make_entities(spec, &mut rng, &leaves, &types);

    let mut by_leaf: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (e, l) in &leaf_of {
        by_leaf.entry(l.as_str()).or_default().push(e.as_str());
    }
    let mut held_out = BTreeSet::new();
    let mut train_pool: HashMap<&str, Vec<&str>> = HashMap::new();
    let mut full_pool: HashMap<&str, Vec<&str>> = HashMap::new();
    for (leaf, members) in &by_leaf {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        let hold = ((members.len() as f64 * spec.held_out_fraction).floor() as usize)
            .min(members.len() - 1);
        held_out.extend(members[..hold].iter().map(|e| e.to_string()));
        train_pool.insert(leaf, members[hold..].to_vec());
        full_pool.insert(leaf, members);
    }

    let mut cues = CueSource {
        words: {
            let mut w: Vec<&str> = CUE_WORDS
                .iter()
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            w.shuffle(&mut rng);
            w
        },
        next: 0,
    };
    let units = make_units(spec, &mut rng, &leaves_by_class, &mut cues);
    let relations = rank_relations(units, spec.power_law_exponent);
    let relation_set = RelationSet::new(
        relations
            .iter()
            .map(|r| (r.id.clone(), format!("relation {}", r.id)))
            .collect(),
    )?;
    let catalog = EntityCatalog::new(entities)?;
    let labels = catalog
        .iter()
        .map(|e| {
            (
                e.id.as_str(),
                e.label.split_whitespace().map(str::to_string).collect(),
            )
        })
        .collect();
    let sampler = DocSampler {
        relations: &relations,
        weights: WeightedIndex::new(relations.iter().map(|r| r.weight))
            .map_err(|e| Error::validation(format!("relation weights: {e}")))?,
        labels,
        train_pool,
        full_pool,
    };
    let mut split = |name: &str, n: usize, train: bool| -> Vec<AnnotatedDocument> {
        (0..n)
            .map(|i| sampler.document(&mut rng, format!("{name}-{i:05}"), train))
            .filter(|d| !d.triples.is_empty())
            .collect()
    };
    let train = split("train", spec.n_train, true);
    let dev = split("dev", spec.n_dev, false);
    let test = split("test", spec.n_test, false);
    let frequencies = relation_frequencies(&train);
    drop(sampler);
    Ok(SynthCorpus {
        kb: KnowledgeBase {
            entities: catalog,
            relations: relation_set,
            types,
        },
        train,
        dev,
        test,
        frequencies,
        relations,
        held_out,
        leaf_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            n_entities: 120,
            n_train: 300,
            n_dev: 50,
            n_test: 50,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let spec = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&spec).unwrap().write(a.path(), &spec).unwrap();
        generate(&spec).unwrap().write(b.path(), &spec).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert_eq!(names.len(), 10);
        for n in names {
            let x = std::fs::read(a.path().join(&n)).unwrap();
            let y = std::fs::read(b.path().join(&n)).unwrap();
            assert_eq!(x, y, "{n:?}");
        }
        let other = generate(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(other.train, generate(&small()).unwrap().train);
    }

    #[test]
    fn gold_triples_have_mentions_and_spans_match_labels() {
        let c = generate(&small()).unwrap();
        for d in c.train.iter().chain(&c.dev).chain(&c.test) {
            d.validate(Some(&c.kb.entities)).unwrap();
            assert!((1..=3).contains(&d.triples.len()));
            assert_eq!(d.mentions.len(), 2 * d.triples.len());
            for m in &d.mentions {
                let label = &c.kb.entities.get(&m.entity).unwrap().label;
                assert_eq!(&d.tokens[m.start..=m.end].join(" "), label);
            }
            let mentioned: BTreeSet<&str> = d.mentions.iter().map(|m| m.entity.as_str()).collect();
            for t in &d.triples {
                assert!(mentioned.contains(t.subject.as_str()));
                assert!(mentioned.contains(t.object.as_str()));
            }
            // No entity repeats, so no unlabeled pair can restate a fact.
            assert_eq!(mentioned.len(), d.mentions.len());
        }
    }

    #[test]
    fn determined_relations_have_one_signature() {
        let c = generate(&SynthSpec::default()).unwrap();
        let det: Vec<&SynthRelation> = c.relations.iter().filter(|r| r.determined).collect();
        assert_eq!(det.len(), 6);
        let mut signatures: BTreeMap<&str, BTreeSet<(&str, &str)>> = BTreeMap::new();
        for d in c.train.iter().chain(&c.test) {
            for t in &d.triples {
                signatures
                    .entry(t.relation.as_str())
                    .or_default()
                    .insert((&c.leaf_of[&t.subject], &c.leaf_of[&t.object]));
            }
        }
        for r in &det {
            assert_eq!(signatures[r.id.as_str()].len(), 1, "{}", r.id);
        }
        assert!(c
            .relations
            .iter()
            .filter(|r| !r.determined)
            .any(|r| signatures[r.id.as_str()].len() > 1));
    }

    #[test]
    fn determined_pairs_share_text_and_split_by_granularity() {
        let c = generate(&SynthSpec::default()).unwrap();
        let coarse = |t: &str| c.kb.types.coarse_type_of(t).unwrap();
        let det: Vec<&SynthRelation> = c.relations.iter().filter(|r| r.determined).collect();
        let mut coarse_split = 0;
        let mut fine_split = 0;
        for (i, a) in det.iter().enumerate() {
            for b in &det[i + 1..] {
                if a.templates != b.templates {
                    continue;
                }
                assert_ne!(
                    (&a.subject_types, &a.object_types),
                    (&b.subject_types, &b.object_types)
                );
                let ca = (coarse(&a.subject_types[0]), coarse(&a.object_types[0]));
                let cb = (coarse(&b.subject_types[0]), coarse(&b.object_types[0]));
                if ca == cb {
                    fine_split += 1;
                } else {
                    coarse_split += 1;
                }
            }
        }
        assert_eq!((coarse_split, fine_split), (2, 1));
        let templates: BTreeSet<_> = c.relations.iter().map(|r| &r.templates).collect();
        assert_eq!(templates.len(), 9);
    }

    #[test]
    fn held_out_entities_never_reach_training() {
        let c = generate(&small()).unwrap();
        assert!(!c.held_out.is_empty());
        for d in &c.train {
            for m in &d.mentions {
                assert!(!c.held_out.contains(&m.entity));
            }
        }
        let test_held = c
            .test
            .iter()
            .flat_map(|d| &d.mentions)
            .filter(|m| c.held_out.contains(&m.entity))
            .count();
        assert!(test_held > 0);
    }

    #[test]
    fn ten_relations_fill_several_buckets() {
        let c = generate(&SynthSpec {
            n_relations: 10,
            ..SynthSpec::default()
        })
        .unwrap();
        let buckets: BTreeSet<u32> = c.frequencies.values().map(|&f| f.ilog2()).collect();
        assert!(buckets.len() >= 2, "{buckets:?}");
        let max = c.frequencies.values().max().unwrap();
        assert_eq!(c.frequencies["P01"], *max);
    }

    #[test]
    fn types_are_restricted_to_the_vocabulary() {
        let c = generate(&small()).unwrap();
        assert!(!c.kb.types.contains(TOP_TYPE));
        for e in c.kb.entities.iter() {
            assert_eq!(e.types.len(), 2);
            assert!(e.types.iter().all(|t| c.kb.types.contains(t)));
        }
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path(), &small()).unwrap();
        let kb = KnowledgeBase::load_dir(dir.path()).unwrap();
        assert_eq!(kb.entities.entities(), c.kb.entities.entities());
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        for spec in [
            SynthSpec {
                n_entities: 0,
                ..small()
            },
            SynthSpec {
                n_types: 30,
                n_entities: 40,
                ..small()
            },
            SynthSpec {
                n_types: 6,
                ..small()
            },
            SynthSpec {
                type_determinism: 1.5,
                ..small()
            },
        ] {
            assert!(
                matches!(generate(&spec), Err(Error::Validation(_))),
                "{spec:?}"
            );
        }
        assert!(generate(&SynthSpec {
            n_types: 8,
            type_determinism: 0.0,
            ..small()
        })
        .is_ok());
    }
}
