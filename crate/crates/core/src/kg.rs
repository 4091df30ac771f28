//! Knowledge graph storage: vocabularies, triple list, adjacency indices and
//! train/valid/test partitions, loaded from tab-separated triple files.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{split} split references items missing from train: entities {entities:?}, relations {relations:?}")]
    UnseenInSplit {
        split: Split,
        entities: Vec<String>,
        relations: Vec<String>,
    },
    #[error("duplicate triple ({head}, {rel}, {tail}) in {split} split")]
    DuplicateTriple {
        split: Split,
        head: String,
        rel: String,
        tail: String,
    },
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("unknown relation {0}")]
    UnknownRelation(String),
    #[error("invalid labels file {path}: {message}")]
    Labels { path: PathBuf, message: String },
}

pub type Result<T, E = KgError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, rel: RelationId, tail: EntityId) -> Self {
        Self { head, rel, tail }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Bijective label <-> dense handle mapping in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::new();
        for l in labels {
            v.intern(l.as_ref());
        }
        v
    }

    /// Returns the handle for `label`, assigning the next free handle if unseen.
    pub fn intern(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), id);
        id
    }

    pub fn get(&self, label: &str) -> Option<u32> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: u32) -> Option<&str> {
        self.labels.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// An immutable, indexed knowledge graph.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    entities: Vocabulary,
    relations: Vocabulary,
    triples: Vec<Triple>,
    splits: Vec<Split>,
    out_index: Vec<Vec<(RelationId, EntityId)>>,
    rel_index: Vec<Vec<usize>>,
    display: HashMap<String, String>,
    warnings: Vec<String>,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities
            && self.relations == other.relations
            && self.triples == other.triples
            && self.splits == other.splits
    }
}

fn parse_line(path: &Path, lineno: usize, line: &str) -> Result<Option<[String; 3]>> {
    let line = line.trim_end_matches(['\r', '\n']);
    if line.trim().is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(KgError::Parse {
            path: path.to_owned(),
            line: lineno,
            message: format!("expected 3 tab-separated fields, found {}", fields.len()),
        });
    }
    let mut out: [String; 3] = Default::default();
    for (slot, f) in out.iter_mut().zip(&fields) {
        let f = f.trim();
        if f.is_empty() {
            return Err(KgError::Parse {
                path: path.to_owned(),
                line: lineno,
                message: "empty field".into(),
            });
        }
        *slot = f.to_owned();
    }
    Ok(Some(out))
}

fn read_triples(path: &Path) -> Result<Vec<(usize, [String; 3])>> {
    let text = fs::read_to_string(path).map_err(|source| KgError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(t) = parse_line(path, i + 1, line)? {
            out.push((i + 1, t));
        }
    }
    Ok(out)
}

/// Loads a graph from TSV files (`head<TAB>relation<TAB>tail`, `#` comments).
///
/// Vocabularies are built from the train split in first-appearance order;
/// valid/test may only reference items that occur in train.
pub fn load_kg(train: &Path, valid: Option<&Path>, test: Option<&Path>) -> Result<KnowledgeGraph> {
    let mut entities = Vocabulary::new();
    let mut relations = Vocabulary::new();
    let mut triples = Vec::new();

    for (_, [h, r, t]) in read_triples(train)? {
        let head = EntityId(entities.intern(&h));
        let rel = RelationId(relations.intern(&r));
        let tail = EntityId(entities.intern(&t));
        triples.push((Triple { head, rel, tail }, Split::Train));
    }

    for (split, path) in [(Split::Valid, valid), (Split::Test, test)] {
        let Some(path) = path else { continue };
        let rows = read_triples(path)?;
        let mut missing_e = BTreeSet::new();
        let mut missing_r = BTreeSet::new();
        for (_, [h, r, t]) in &rows {
            for e in [h, t] {
                if entities.get(e).is_none() {
                    missing_e.insert(e.clone());
                }
            }
            if relations.get(r).is_none() {
                missing_r.insert(r.clone());
            }
        }
        if !missing_e.is_empty() || !missing_r.is_empty() {
            return Err(KgError::UnseenInSplit {
                split,
                entities: missing_e.into_iter().collect(),
                relations: missing_r.into_iter().collect(),
            });
        }
        for (_, [h, r, t]) in rows {
            let triple = Triple {
                head: EntityId(entities.get(&h).unwrap()),
                rel: RelationId(relations.get(&r).unwrap()),
                tail: EntityId(entities.get(&t).unwrap()),
            };
            triples.push((triple, split));
        }
    }

    KnowledgeGraph::from_parts(entities, relations, triples)
}

/// Loads `train.tsv` plus optional `valid.tsv`, `test.tsv` and `labels.json` from a directory.
pub fn load_dir(dir: &Path) -> Result<KnowledgeGraph> {
    let opt = |name: &str| {
        let p = dir.join(name);
        p.exists().then_some(p)
    };
    let valid = opt("valid.tsv");
    let test = opt("test.tsv");
    let mut g = load_kg(&dir.join("train.tsv"), valid.as_deref(), test.as_deref())?;
    if let Some(labels) = opt("labels.json") {
        g.load_display_labels(&labels)?;
    }
    Ok(g)
}

impl KnowledgeGraph {
    /// Builds a graph from explicit vocabularies and split-tagged triples.
    ///
    /// Rejects handles outside the vocabularies and duplicates within a split.
    /// Duplicates across splits are kept and recorded as warnings.
    pub fn from_parts(
        entities: Vocabulary,
        relations: Vocabulary,
        tagged: Vec<(Triple, Split)>,
    ) -> Result<Self> {
        let mut seen: HashMap<Triple, Split> = HashMap::new();
        let mut warnings = Vec::new();
        let mut triples = Vec::with_capacity(tagged.len());
        let mut splits = Vec::with_capacity(tagged.len());
        for (t, split) in tagged {
            if entities.label(t.head.0).is_none() {
                return Err(KgError::UnknownEntity(t.head.0.to_string()));
            }
            if entities.label(t.tail.0).is_none() {
                return Err(KgError::UnknownEntity(t.tail.0.to_string()));
            }
            if relations.label(t.rel.0).is_none() {
                return Err(KgError::UnknownRelation(t.rel.0.to_string()));
            }
            let labels = || {
                (
                    entities.label(t.head.0).unwrap().to_owned(),
                    relations.label(t.rel.0).unwrap().to_owned(),
                    entities.label(t.tail.0).unwrap().to_owned(),
                )
            };
            match seen.get(&t) {
                Some(&prev) if prev == split => {
                    let (head, rel, tail) = labels();
                    return Err(KgError::DuplicateTriple {
                        split,
                        head,
                        rel,
                        tail,
                    });
                }
                Some(&prev) => {
                    let (h, r, tl) = labels();
                    let msg = format!("triple ({h}, {r}, {tl}) appears in both {prev} and {split}");
                    tracing::warn!("{msg}");
                    warnings.push(msg);
                }
                None => {
                    seen.insert(t, split);
                }
            }
            triples.push(t);
            splits.push(split);
        }
        let (out_index, rel_index) = build_indices(entities.len(), relations.len(), &triples);
        Ok(Self {
            entities,
            relations,
            triples,
            splits,
            out_index,
            rel_index,
            display: HashMap::new(),
            warnings,
        })
    }

    /// Train-only graph from labeled triples, mostly for fixtures.
    pub fn from_labeled<S: AsRef<str>>(rows: &[(S, S, S)]) -> Result<Self> {
        let mut entities = Vocabulary::new();
        let mut relations = Vocabulary::new();
        let tagged = rows
            .iter()
            .map(|(h, r, t)| {
                let head = EntityId(entities.intern(h.as_ref().trim()));
                let rel = RelationId(relations.intern(r.as_ref().trim()));
                let tail = EntityId(entities.intern(t.as_ref().trim()));
                (Triple { head, rel, tail }, Split::Train)
            })
            .collect();
        Self::from_parts(entities, relations, tagged)
    }

    /// Reads a JSON object mapping identifiers to display names.
    pub fn load_display_labels(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|source| KgError::Io {
            path: path.to_owned(),
            source,
        })?;
        let map: HashMap<String, String> =
            serde_json::from_str(&text).map_err(|e| KgError::Labels {
                path: path.to_owned(),
                message: e.to_string(),
            })?;
        self.display = map
            .into_iter()
            .map(|(k, v)| (k, v.trim().to_owned()))
            .filter(|(_, v)| !v.is_empty())
            .collect();
        Ok(())
    }

    pub fn set_display_labels(&mut self, labels: HashMap<String, String>) {
        self.display = labels;
    }

    pub fn entities(&self) -> &Vocabulary {
        &self.entities
    }

    pub fn relations(&self) -> &Vocabulary {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn split_of(&self, position: usize) -> Split {
        self.splits[position]
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn triples_in(&self, split: Split) -> impl Iterator<Item = Triple> + '_ {
        self.triples
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(t, _)| *t)
    }

    pub fn split_sizes(&self) -> SplitSizes {
        let mut sizes = SplitSizes::default();
        for s in &self.splits {
            match s {
                Split::Train => sizes.train += 1,
                Split::Valid => sizes.valid += 1,
                Split::Test => sizes.test += 1,
            }
        }
        sizes
    }

    pub fn entity_id(&self, label: &str) -> Result<EntityId> {
        self.entities
            .get(label)
            .map(EntityId)
            .ok_or_else(|| KgError::UnknownEntity(label.to_owned()))
    }

    pub fn relation_id(&self, label: &str) -> Result<RelationId> {
        self.relations
            .get(label)
            .map(RelationId)
            .ok_or_else(|| KgError::UnknownRelation(label.to_owned()))
    }

    pub fn entity_label(&self, e: EntityId) -> &str {
        self.entities.label(e.0).expect("entity handle out of range")
    }

    pub fn relation_label(&self, r: RelationId) -> &str {
        self.relations.label(r.0).expect("relation handle out of range")
    }

    /// Human-readable name from `labels.json`, falling back to the identifier.
    pub fn display_name(&self, e: EntityId) -> &str {
        let label = self.entity_label(e);
        self.display.get(label).map(String::as_str).unwrap_or(label)
    }

    /// Out-edges of `head` in (relation, tail) handle order, optionally
    /// restricted to a relation set.
    pub fn neighbors(
        &self,
        head: EntityId,
        allowed: Option<&HashSet<RelationId>>,
    ) -> Result<Vec<(RelationId, EntityId)>> {
        let edges = self
            .out_index
            .get(head.index())
            .ok_or_else(|| KgError::UnknownEntity(head.0.to_string()))?;
        Ok(match allowed {
            None => edges.clone(),
            Some(set) => edges.iter().copied().filter(|(r, _)| set.contains(r)).collect(),
        })
    }

    /// All triples with relation `rel`, in file order.
    pub fn triples_of_relation(&self, rel: RelationId) -> Result<Vec<Triple>> {
        let positions = self
            .rel_index
            .get(rel.index())
            .ok_or_else(|| KgError::UnknownRelation(rel.0.to_string()))?;
        Ok(positions.iter().map(|&p| self.triples[p]).collect())
    }

    /// Triples of `rel` restricted to one split, in file order.
    pub fn triples_of_relation_in(&self, rel: RelationId, split: Split) -> Result<Vec<Triple>> {
        let positions = self
            .rel_index
            .get(rel.index())
            .ok_or_else(|| KgError::UnknownRelation(rel.0.to_string()))?;
        Ok(positions
            .iter()
            .filter(|&&p| self.splits[p] == split)
            .map(|&p| self.triples[p])
            .collect())
    }

    /// True when the stored indices equal indices rebuilt from the triple list.
    pub fn indices_consistent(&self) -> bool {
        let (out, rel) = build_indices(self.entities.len(), self.relations.len(), &self.triples);
        out == self.out_index && rel == self.rel_index
    }

    pub fn out_index(&self) -> &[Vec<(RelationId, EntityId)>] {
        &self.out_index
    }

    pub fn rel_index(&self) -> &[Vec<usize>] {
        &self.rel_index
    }

    /// Writes `train.tsv` and, when non-empty, `valid.tsv` / `test.tsv` into `dir`.
    pub fn write_tsv(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for (split, name) in [
            (Split::Train, "train.tsv"),
            (Split::Valid, "valid.tsv"),
            (Split::Test, "test.tsv"),
        ] {
            let rows: Vec<Triple> = self.triples_in(split).collect();
            if split != Split::Train && rows.is_empty() {
                continue;
            }
            let mut f = std::io::BufWriter::new(fs::File::create(dir.join(name))?);
            for t in rows {
                writeln!(
                    f,
                    "{}\t{}\t{}",
                    self.entity_label(t.head),
                    self.relation_label(t.rel),
                    self.entity_label(t.tail)
                )?;
            }
            f.flush()?;
        }
        Ok(())
    }
}

fn build_indices(
    n_entities: usize,
    n_relations: usize,
    triples: &[Triple],
) -> (Vec<Vec<(RelationId, EntityId)>>, Vec<Vec<usize>>) {
    let mut out = vec![Vec::new(); n_entities];
    let mut rel = vec![Vec::new(); n_relations];
    for (pos, t) in triples.iter().enumerate() {
        out[t.head.index()].push((t.rel, t.tail));
        rel[t.rel.index()].push(pos);
    }
    for edges in &mut out {
        // stable: cross-split duplicates keep file order
        edges.sort();
    }
    (out, rel)
}
