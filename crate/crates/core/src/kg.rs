//! Knowledge-graph store: entity catalog, relation inventory, the restricted
//! fine-grained type vocabulary with supertype closure, and annotated corpora.
//!
//! File formats:
//!
//! | file                | format                                                   |
//! |---------------------|----------------------------------------------------------|
//! | `entities.jsonl`    | `{"id","label","description","types":[..]}` per line     |
//! | `relations.jsonl`   | `{"id","label"}` per line, line order is the dense index |
//! | `types.txt`         | one type id per line (the restricted vocabulary)         |
//! | `type_hierarchy.tsv`| `child<TAB>supertype` per line                           |
//! | `coarse_map.json`   | object type id -> `PER` / `ORG` / `LOC` / `MISC`         |
//! | datasets            | `{"tokens","mentions":[[s,e,id]],"triples":[[s,p,o]]}`   |

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = String;
pub type RelationId = String;
pub type TypeId = String;

pub const ENTITIES_FILE: &str = "entities.jsonl";
pub const RELATIONS_FILE: &str = "relations.jsonl";
pub const TYPES_FILE: &str = "types.txt";
pub const HIERARCHY_FILE: &str = "type_hierarchy.tsv";
pub const COARSE_FILE: &str = "coarse_map.json";

/// Four-way coarse entity class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CoarseClass {
    #[serde(rename = "PER")]
    Per,
    #[serde(rename = "ORG")]
    Org,
    #[serde(rename = "LOC")]
    Loc,
    #[serde(rename = "MISC")]
    Misc,
}

impl CoarseClass {
    pub const ALL: [CoarseClass; 4] = [
        CoarseClass::Per,
        CoarseClass::Org,
        CoarseClass::Loc,
        CoarseClass::Misc,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CoarseClass::Per => "PER",
            CoarseClass::Org => "ORG",
            CoarseClass::Loc => "LOC",
            CoarseClass::Misc => "MISC",
        }
    }
}

impl fmt::Display for CoarseClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A catalog entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: EntityId,
    pub label: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub types: BTreeSet<TypeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationRecord {
    pub id: RelationId,
    pub label: String,
    #[serde(skip)]
    pub index: usize,
}

/// A (subject, relation, object) fact. Serialized as a three-element array.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(String, String, String)", into = "(String, String, String)")]
pub struct Triple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

impl Triple {
    pub fn new(
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Triple {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }
}

impl From<(String, String, String)> for Triple {
    fn from((subject, relation, object): (String, String, String)) -> Self {
        Triple {
            subject,
            relation,
            object,
        }
    }
}

impl From<Triple> for (String, String, String) {
    fn from(t: Triple) -> Self {
        (t.subject, t.relation, t.object)
    }
}

/// A gold mention: inclusive token span and the entity it refers to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize, String)", into = "(usize, usize, String)")]
pub struct GoldMention {
    pub start: usize,
    pub end: usize,
    pub entity: EntityId,
}

impl From<(usize, usize, String)> for GoldMention {
    fn from((start, end, entity): (usize, usize, String)) -> Self {
        GoldMention { start, end, entity }
    }
}

impl From<GoldMention> for (usize, usize, String) {
    fn from(m: GoldMention) -> Self {
        (m.start, m.end, m.entity)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub doc_id: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub mentions: Vec<GoldMention>,
    #[serde(default)]
    pub triples: Vec<Triple>,
}

impl AnnotatedDocument {
    /// Checks span bounds and, if a catalog is given, referential integrity.
    pub fn validate(&self, catalog: Option<&EntityCatalog>) -> Result<()> {
        let n = self.tokens.len();
        for m in &self.mentions {
            if m.start > m.end || m.end >= n {
                return Err(Error::validation(format!(
                    "document {}: mention span ({}, {}) invalid for {} tokens",
                    self.doc_id, m.start, m.end, n
                )));
            }
        }
        if let Some(catalog) = catalog {
            let ids = self
                .mentions
                .iter()
                .map(|m| &m.entity)
                .chain(self.triples.iter().flat_map(|t| [&t.subject, &t.object]));
            for id in ids {
                if !catalog.contains(id) {
                    return Err(Error::validation(format!(
                        "document {}: entity `{id}` not in catalog",
                        self.doc_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The entity set V, indexed by id.
#[derive(Debug, Clone, Default)]
pub struct EntityCatalog {
    entities: Vec<EntityRecord>,
    by_id: HashMap<EntityId, usize>,
}

impl EntityCatalog {
    pub fn new(entities: Vec<EntityRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(entities.len());
        for (i, e) in entities.iter().enumerate() {
            if by_id.insert(e.id.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate entity id `{}`", e.id)));
            }
        }
        Ok(EntityCatalog { entities, by_id })
    }

    /// Reads a JSON-lines catalog. Types are kept as written.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let entities: Vec<EntityRecord> = read_jsonl(path)?;
        Self::new(entities)
    }

    /// Reads a catalog and replaces every type set by its restricted closure.
    pub fn load_restricted(path: impl AsRef<Path>, vocab: &TypeVocabulary) -> Result<Self> {
        let mut catalog = Self::load(path)?;
        for e in &mut catalog.entities {
            e.types = vocab.restrict(&e.types);
        }
        Ok(catalog)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EntityRecord> {
        self.by_id.get(id).map(|&i| &self.entities[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn entities(&self) -> &[EntityRecord] {
        &self.entities
    }

    pub fn iter(&self) -> impl Iterator<Item = &EntityRecord> {
        self.entities.iter()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path, &self.entities)
    }
}

/// The relation set R with its dense index.
#[derive(Debug, Clone, Default)]
pub struct RelationSet {
    relations: Vec<RelationRecord>,
    by_id: HashMap<RelationId, usize>,
}

impl RelationSet {
    pub fn new(records: Vec<(String, String)>) -> Result<Self> {
        let mut relations = Vec::with_capacity(records.len());
        let mut by_id = HashMap::with_capacity(records.len());
        for (index, (id, label)) in records.into_iter().enumerate() {
            if by_id.insert(id.clone(), index).is_some() {
                return Err(Error::validation(format!("duplicate relation id `{id}`")));
            }
            relations.push(RelationRecord { id, label, index });
        }
        Ok(RelationSet { relations, by_id })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let records: Vec<RelationRecord> = read_jsonl(path.as_ref())?;
        Self::new(records.into_iter().map(|r| (r.id, r.label)).collect())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path, &self.relations)
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn id_of(&self, index: usize) -> Option<&str> {
        self.relations.get(index).map(|r| r.id.as_str())
    }

    pub fn records(&self) -> &[RelationRecord] {
        &self.relations
    }
}

/// Restricted type vocabulary T with the supertype hierarchy and coarse map.
#[derive(Debug, Clone, Default)]
pub struct TypeVocabulary {
    types: Vec<TypeId>,
    index: HashMap<TypeId, usize>,
    supertypes: HashMap<TypeId, BTreeSet<TypeId>>,
    coarse: HashMap<TypeId, CoarseClass>,
}

impl TypeVocabulary {
    pub fn new(
        types: Vec<TypeId>,
        edges: impl IntoIterator<Item = (TypeId, TypeId)>,
        coarse: HashMap<TypeId, CoarseClass>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(types.len());
        for (i, t) in types.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate type id `{t}`")));
            }
        }
        let mut supertypes: HashMap<TypeId, BTreeSet<TypeId>> = HashMap::new();
        for (child, parent) in edges {
            supertypes.entry(child).or_default().insert(parent);
        }
        Ok(TypeVocabulary {
            types,
            index,
            supertypes,
            coarse,
        })
    }

    /// Loads `types.txt`, `type_hierarchy.tsv` and (optionally) `coarse_map.json`.
    pub fn load(
        vocab_path: impl AsRef<Path>,
        hierarchy_path: impl AsRef<Path>,
        coarse_path: Option<&Path>,
    ) -> Result<Self> {
        let vocab_path = vocab_path.as_ref();
        let types: Vec<TypeId> = read_lines(vocab_path)?
            .into_iter()
            .map(|(_, l)| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        let hierarchy_path = hierarchy_path.as_ref();
        let mut edges = Vec::new();
        for (lineno, line) in read_lines(hierarchy_path)? {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(c), Some(p), None) if !c.is_empty() && !p.is_empty() => {
                    edges.push((c.trim().to_string(), p.trim().to_string()))
                }
                _ => {
                    return Err(Error::Parse {
                        path: hierarchy_path.to_path_buf(),
                        line: lineno,
                        message: "expected `child<TAB>supertype`".into(),
                    })
                }
            }
        }
        let coarse = match coarse_path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: p.to_path_buf(),
                    line: e.line(),
                    message: e.to_string(),
                })?
            }
            None => HashMap::new(),
        };
        Self::new(types, edges, coarse)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut out = String::new();
        for t in &self.types {
            out.push_str(t);
            out.push('\n');
        }
        write_string(dir.join(TYPES_FILE), &out)?;
        let mut edges: Vec<(&TypeId, &TypeId)> = self
            .supertypes
            .iter()
            .flat_map(|(c, ps)| ps.iter().map(move |p| (c, p)))
            .collect();
        edges.sort();
        let mut out = String::new();
        for (c, p) in edges {
            out.push_str(&format!("{c}\t{p}\n"));
        }
        write_string(dir.join(HIERARCHY_FILE), &out)?;
        let coarse: BTreeMap<&TypeId, &CoarseClass> = self.coarse.iter().collect();
        write_string(
            dir.join(COARSE_FILE),
            &serde_json::to_string_pretty(&coarse)?,
        )?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn types(&self) -> &[TypeId] {
        &self.types
    }

    pub fn index_of(&self, t: &str) -> Option<usize> {
        self.index.get(t).copied()
    }

    pub fn contains(&self, t: &str) -> bool {
        self.index.contains_key(t)
    }

    pub fn direct_supertypes(&self, t: &str) -> impl Iterator<Item = &TypeId> {
        self.supertypes.get(t).into_iter().flatten()
    }

    /// Smallest superset of `types` closed under the supertype edges,
    /// intersected with the vocabulary. Every input must be in the vocabulary.
    pub fn closure(&self, types: &BTreeSet<TypeId>) -> Result<BTreeSet<TypeId>> {
        if let Some(t) = types.iter().find(|t| !self.contains(t)) {
            return Err(Error::validation(format!("unknown type `{t}`")));
        }
        Ok(self.restrict(types))
    }

    /// Closure over the full hierarchy, then intersection with the vocabulary.
    /// Inputs outside the vocabulary are allowed; only their supertypes may survive.
    pub fn restrict(&self, types: &BTreeSet<TypeId>) -> BTreeSet<TypeId> {
        let mut seen: BTreeSet<TypeId> = BTreeSet::new();
        let mut queue: VecDeque<&TypeId> = types.iter().collect();
        while let Some(t) = queue.pop_front() {
            if !seen.insert(t.clone()) {
                continue;
            }
            for p in self.direct_supertypes(t) {
                if !seen.contains(p) {
                    queue.push_back(p);
                }
            }
        }
        seen.retain(|t| self.contains(t));
        seen
    }

    /// Coarse class of a vocabulary type; unmapped types are `MISC`.
    pub fn coarse_type_of(&self, t: &str) -> Result<CoarseClass> {
        if !self.contains(t) {
            return Err(Error::validation(format!("unknown type `{t}`")));
        }
        Ok(self.coarse.get(t).copied().unwrap_or(CoarseClass::Misc))
    }

    pub fn coarse_map(&self) -> &HashMap<TypeId, CoarseClass> {
        &self.coarse
    }
}

/// G = (V, R, T): everything the pipeline needs from the knowledge graph.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    pub entities: EntityCatalog,
    pub relations: RelationSet,
    pub types: TypeVocabulary,
}

impl KnowledgeBase {
    /// Loads the standard file set from a directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let coarse = dir.join(COARSE_FILE);
        let types = TypeVocabulary::load(
            dir.join(TYPES_FILE),
            dir.join(HIERARCHY_FILE),
            coarse.exists().then_some(coarse.as_path()),
        )?;
        let entities = EntityCatalog::load_restricted(dir.join(ENTITIES_FILE), &types)?;
        let relations = RelationSet::load(dir.join(RELATIONS_FILE))?;
        Ok(KnowledgeBase {
            entities,
            relations,
            types,
        })
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.entities.write(dir.join(ENTITIES_FILE))?;
        self.relations.write(dir.join(RELATIONS_FILE))?;
        self.types.write(dir)
    }

    /// Coarse classes of an entity's types (deduplicated, ordered).
    pub fn coarse_types_of(&self, entity: &EntityRecord) -> BTreeSet<CoarseClass> {
        entity
            .types
            .iter()
            .filter_map(|t| self.types.coarse_type_of(t).ok())
            .collect()
    }
}

/// Reads a JSON-lines dataset, validating spans and entity references.
pub fn load_dataset(
    path: impl AsRef<Path>,
    catalog: Option<&EntityCatalog>,
) -> Result<Vec<AnnotatedDocument>> {
    let path = path.as_ref();
    let mut docs: Vec<AnnotatedDocument> = read_jsonl(path)?;
    for (i, doc) in docs.iter_mut().enumerate() {
        if doc.doc_id.is_empty() {
            doc.doc_id = i.to_string();
        }
        doc.validate(catalog)?;
    }
    Ok(docs)
}

pub fn write_dataset(path: impl AsRef<Path>, docs: &[AnnotatedDocument]) -> Result<()> {
    write_jsonl(path, docs)
}

/// Relation occurrence counts over a training split.
pub fn relation_frequencies(docs: &[AnnotatedDocument]) -> BTreeMap<RelationId, usize> {
    let mut freq = BTreeMap::new();
    for d in docs {
        for t in &d.triples {
            *freq.entry(t.relation.clone()).or_insert(0) += 1;
        }
    }
    freq
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        out.push((i + 1, line.map_err(|e| Error::io(path, e))?));
    }
    Ok(out)
}

/// Parses one JSON value per non-blank line; errors carry the 1-based line number.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (lineno, line) in read_lines(path)? {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_string(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&str]) -> BTreeSet<TypeId> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn vocab(types: &[&str], edges: &[(&str, &str)]) -> TypeVocabulary {
        TypeVocabulary::new(
            types.iter().map(|s| s.to_string()).collect(),
            edges.iter().map(|(a, b)| (a.to_string(), b.to_string())),
            HashMap::from([("human".to_string(), CoarseClass::Per)]),
        )
        .unwrap()
    }

    fn tmpfile(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn closure_of_empty_set_is_empty() {
        let v = vocab(&["A", "B"], &[("A", "B")]);
        assert!(v.closure(&set(&[])).unwrap().is_empty());
    }

    #[test]
    fn closure_follows_chains() {
        let v = vocab(&["A", "B", "C"], &[("A", "B"), ("B", "C")]);
        assert_eq!(v.closure(&set(&["A"])).unwrap(), set(&["A", "B", "C"]));
    }

    #[test]
    fn closure_terminates_on_cycles() {
        // fixed-point iteration by hand: {A} -> {A,B} -> {A,B} (stable)
        let v = vocab(&["A", "B"], &[("A", "B"), ("B", "A")]);
        assert_eq!(v.closure(&set(&["A"])).unwrap(), set(&["A", "B"]));
    }

    #[test]
    fn closure_rejects_unknown_types() {
        let v = vocab(&["A"], &[]);
        assert!(matches!(v.closure(&set(&["Z"])), Err(Error::Validation(_))));
    }

    #[test]
    fn restriction_drops_types_outside_vocab_but_keeps_their_supertypes() {
        let v = vocab(&["B", "C"], &[("A", "B"), ("B", "X"), ("X", "C")]);
        assert_eq!(v.restrict(&set(&["A"])), set(&["B", "C"]));
    }

    #[test]
    fn coarse_lookup() {
        let v = vocab(&["human", "city"], &[]);
        assert_eq!(v.coarse_type_of("human").unwrap(), CoarseClass::Per);
        assert_eq!(v.coarse_type_of("city").unwrap(), CoarseClass::Misc);
        assert_eq!(
            v.coarse_type_of("human").unwrap(),
            v.coarse_type_of("human").unwrap()
        );
        assert!(v.coarse_type_of("nope").is_err());
    }

    #[test]
    fn catalog_loading() {
        let f = tmpfile(
            r#"{"id":"Q1","label":"A","description":"x","types":[]}
{"id":"Q2","label":"B","description":"","types":["t"]}
{"id":"Q3","label":"C","types":[]}
"#,
        );
        let c = EntityCatalog::load(f.path()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.get("Q3").unwrap().description, "");

        let dup = tmpfile(
            r#"{"id":"Q1","label":"A","description":"","types":[]}
{"id":"Q1","label":"B","description":"","types":[]}
"#,
        );
        assert!(matches!(
            EntityCatalog::load(dup.path()),
            Err(Error::Validation(_))
        ));

        let empty = tmpfile("");
        assert!(EntityCatalog::load(empty.path()).unwrap().is_empty());

        let bad = tmpfile("{\"id\":\"Q1\",\"label\":\"A\"}\nnot json\n");
        match EntityCatalog::load(bad.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_validation() {
        let catalog = EntityCatalog::new(vec![EntityRecord {
            id: "Q1".into(),
            label: "a".into(),
            description: String::new(),
            types: BTreeSet::new(),
        }])
        .unwrap();
        let ok =
            tmpfile(r#"{"tokens":["a","b","c","d","e"],"mentions":[[2,4,"Q1"]],"triples":[]}"#);
        assert_eq!(load_dataset(ok.path(), Some(&catalog)).unwrap().len(), 1);

        let reversed =
            tmpfile(r#"{"tokens":["a","b","c","d","e"],"mentions":[[4,2,"Q1"]],"triples":[]}"#);
        assert!(load_dataset(reversed.path(), Some(&catalog)).is_err());

        let dangling =
            tmpfile(r#"{"tokens":["a","b"],"mentions":[[0,0,"Q1"]],"triples":[["Q1","P1","Q9"]]}"#);
        assert!(load_dataset(dangling.path(), Some(&catalog)).is_err());
    }

    #[test]
    fn relation_index_round_trips() {
        let rels = RelationSet::new(
            (0..7)
                .map(|i| (format!("P{i}"), format!("rel {i}")))
                .collect(),
        )
        .unwrap();
        for i in 0..rels.len() {
            assert_eq!(rels.index_of(rels.id_of(i).unwrap()), Some(i));
        }
    }

    #[test]
    fn triple_serializes_as_array() {
        let t = Triple::new("Q1", "P2", "Q3");
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"["Q1","P2","Q3"]"#);
        assert_eq!(serde_json::from_str::<Triple>(&s).unwrap(), t);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_vocab() -> impl Strategy<Value = TypeVocabulary> {
            proptest::collection::vec((0usize..8, 0usize..8), 0..20).prop_map(|edges| {
                let types: Vec<String> = (0..8).map(|i| format!("t{i}")).collect();
                TypeVocabulary::new(
                    types,
                    edges
                        .into_iter()
                        .map(|(a, b)| (format!("t{a}"), format!("t{b}"))),
                    HashMap::new(),
                )
                .unwrap()
            })
        }

        fn arb_subset() -> impl Strategy<Value = BTreeSet<String>> {
            proptest::collection::btree_set((0usize..8).prop_map(|i| format!("t{i}")), 0..5)
        }

        proptest! {
            #[test]
            fn closure_is_idempotent(v in arb_vocab(), s in arb_subset()) {
                let once = v.closure(&s).unwrap();
                prop_assert_eq!(v.closure(&once).unwrap(), once);
            }

            #[test]
            fn closure_is_monotone(v in arb_vocab(), a in arb_subset(), b in arb_subset()) {
                let union: BTreeSet<String> = a.union(&b).cloned().collect();
                let ca = v.closure(&a).unwrap();
                let cu = v.closure(&union).unwrap();
                prop_assert!(ca.is_subset(&cu));
            }
        }
    }
}
