//! Human-evaluation questionnaires: blinded image-ranking sessions, rating
//! storage backed by an append-only event log, and per-method aggregation.
//!
//! Method names never leave the server through annotator-facing views; each
//! item only exposes opaque slot ids whose order is shuffled per annotator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{derive_seed, hash64, sha256_hex};

/// Source name used for real reference images.
pub const REAL_SOURCE: &str = "real";
pub const MIN_SLOTS: usize = 2;
pub const MAX_SLOTS: usize = 4;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("unknown slot {0}")]
    UnknownSlot(String),
    #[error("invalid ranking: {0}")]
    InvalidRanking(String),
    #[error("invalid session request: {0}")]
    InvalidRequest(String),
    #[error("event log {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("event log {} line {line}: {message}", path.display())]
    Corrupt { path: PathBuf, line: usize, message: String },
}

impl AnnotationError {
    /// HTTP status for this error.
    pub fn status(&self) -> u16 {
        match self {
            Self::UnknownSession(_) | Self::UnknownItem(_) | Self::UnknownSlot(_) => 404,
            Self::InvalidRanking(_) | Self::InvalidRequest(_) => 422,
            Self::Io { .. } | Self::Corrupt { .. } => 500,
        }
    }
}

type Result<T> = std::result::Result<T, AnnotationError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Criterion {
    /// Image quality.
    IQ,
    /// Consistency with the entity.
    CIE,
    /// Consistency with the entity's KG context.
    CIKG,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::IQ, Criterion::CIE, Criterion::CIKG];

    /// Instructions shown to annotators.
    pub fn prompt(self) -> &'static str {
        match self {
            Criterion::IQ => "Rank the images by quality. Penalize repetitive object generation, missing limbs and excessive blurring.",
            Criterion::CIE => "Rank the images by how well they depict the entity, using its related neighbors as context.",
            Criterion::CIKG => "Rank the images by how well they reflect the entity's knowledge-graph facts listed above.",
        }
    }
}

/// One candidate image for an entity, held server-side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub id: String,
    pub source: String,
    pub image: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub entity: String,
    pub name: String,
    pub facts: Vec<String>,
    /// Canonical order (sorted by source); annotators see a shuffle.
    pub slots: Vec<Slot>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub dataset: String,
    pub seed: u64,
    pub sources: Vec<String>,
    pub items: Vec<Item>,
}

/// Everything known about one entity before sampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub entity: String,
    pub name: String,
    pub facts: Vec<String>,
    /// Image path per source.
    pub images: BTreeMap<String, PathBuf>,
}

fn slot_id(session: &str, entity: &str, source: &str) -> String {
    sha256_hex(format!("{session}\u{1f}{entity}\u{1f}{source}").as_bytes())[..12].to_owned()
}

/// Builds a session over `sample_size` entities sampled with `seed`.
/// Entities lacking an image for any source are dropped with a warning.
pub fn create_session(
    id: &str,
    dataset: &str,
    mut candidates: Vec<Candidate>,
    sources: &[String],
    sample_size: usize,
    seed: u64,
) -> Result<(Session, Vec<String>)> {
    let distinct: BTreeSet<&String> = sources.iter().collect();
    if distinct.len() != sources.len() {
        return Err(AnnotationError::InvalidRequest("duplicate sources".into()));
    }
    if !(MIN_SLOTS..=MAX_SLOTS).contains(&sources.len()) {
        return Err(AnnotationError::InvalidRequest(format!(
            "{} image sources given, need {MIN_SLOTS} to {MAX_SLOTS}",
            sources.len()
        )));
    }
    let mut warnings = Vec::new();
    candidates.sort_by(|a, b| a.entity.cmp(&b.entity));
    candidates.retain(|c| {
        let missing: Vec<&str> = sources
            .iter()
            .filter(|s| !c.images.contains_key(*s))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            warnings.push(format!("{} excluded: no image from {}", c.entity, missing.join(", ")));
        }
        missing.is_empty()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "session-sample", 0));
    candidates.shuffle(&mut rng);
    if candidates.len() < sample_size {
        warnings.push(format!(
            "only {} eligible entities for a sample of {sample_size}",
            candidates.len()
        ));
    }
    candidates.truncate(sample_size);
    let mut sorted_sources = sources.to_vec();
    sorted_sources.sort();
    let items = candidates
        .into_iter()
        .enumerate()
        .map(|(i, c)| Item {
            id: format!("{id}-{i}"),
            slots: sorted_sources
                .iter()
                .map(|s| Slot {
                    id: slot_id(id, &c.entity, s),
                    source: s.clone(),
                    image: c.images[s].clone(),
                })
                .collect(),
            entity: c.entity,
            name: c.name,
            facts: c.facts,
        })
        .collect();
    Ok((
        Session {
            id: id.to_owned(),
            dataset: dataset.to_owned(),
            seed,
            sources: sorted_sources,
            items,
        },
        warnings,
    ))
}

impl Session {
    pub fn item(&self, item_id: &str) -> Option<&Item> {
        self.items.iter().find(|i| i.id == item_id)
    }

    /// The slot order shown to `annotator`, as indices into `item.slots`.
    pub fn slot_order(&self, annotator: &str, item: &Item) -> Vec<usize> {
        let mut order: Vec<usize> = (0..item.slots.len()).collect();
        let h = hash64(&[annotator.as_bytes(), item.id.as_bytes()]);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "slot-order", h));
        order.shuffle(&mut rng);
        order
    }
}

/// Annotator-facing slot: no source information.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotView {
    pub slot: String,
    pub image_url: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionStatus {
    pub criterion: Criterion,
    pub prompt: String,
    /// The annotator's stored ranking, aligned with `slots`.
    pub ranking: Option<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemView {
    pub item: String,
    pub entity: String,
    pub name: String,
    pub facts: Vec<String>,
    pub slots: Vec<SlotView>,
    pub criteria: Vec<CriterionStatus>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemsView {
    pub session: String,
    pub annotator: String,
    pub items: Vec<ItemView>,
    pub remaining: BTreeMap<Criterion, usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub session: String,
    pub annotator: String,
    pub item: String,
    pub criterion: Criterion,
    /// Rank per slot in the order shown to this annotator; k is best.
    pub ranking: Vec<u32>,
}

pub fn check_permutation(ranking: &[u32], k: usize) -> Result<()> {
    if ranking.len() != k {
        return Err(AnnotationError::InvalidRanking(format!(
            "expected {k} ranks, got {}",
            ranking.len()
        )));
    }
    let seen: BTreeSet<u32> = ranking.iter().copied().collect();
    if seen.len() != k || seen.iter().any(|&r| r == 0 || r as usize > k) {
        return Err(AnnotationError::InvalidRanking(format!(
            "{ranking:?} is not a permutation of 1..{k}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionResults {
    pub session: String,
    /// Mean rank value per criterion and image source.
    pub means: BTreeMap<Criterion, BTreeMap<String, f64>>,
    pub n_ratings: BTreeMap<Criterion, usize>,
    /// Every stored ranking sums to k(k+1)/2.
    pub rank_sums_conserved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    SessionCreated { session: Session },
    RatingSubmitted { rating: Rating },
}

type RatingKey = (String, String, String, Criterion);

/// In-memory projection of the event log.
#[derive(Debug, Default)]
pub struct Store {
    sessions: BTreeMap<String, Session>,
    /// (session, annotator, item, criterion) -> rank per canonical slot.
    ratings: BTreeMap<RatingKey, Vec<u32>>,
    log: Option<(PathBuf, File)>,
}

impl Store {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Replays `path` (if present) and appends future events to it.
    pub fn open(path: &Path) -> Result<Self> {
        let io = |source| AnnotationError::Io {
            path: path.to_owned(),
            source,
        };
        let mut store = Self::default();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev: Event = serde_json::from_str(&line).map_err(|e| AnnotationError::Corrupt {
                    path: path.to_owned(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                store.apply(ev);
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        store.log = Some((path.to_owned(), file));
        Ok(store)
    }

    fn apply(&mut self, ev: Event) {
        match ev {
            Event::SessionCreated { session } => {
                self.sessions.insert(session.id.clone(), session);
            }
            Event::RatingSubmitted { rating } => {
                let canonical = self.canonical_ranking(&rating);
                self.ratings.insert(
                    (rating.session, rating.annotator, rating.item, rating.criterion),
                    canonical,
                );
            }
        }
    }

    fn append(&mut self, ev: &Event) -> Result<()> {
        if let Some((path, file)) = &mut self.log {
            let mut line = serde_json::to_string(ev).expect("event serializes");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.sync_data())
                .map_err(|source| AnnotationError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        Ok(())
    }

    /// Converts a ranking in annotator display order to canonical slot order.
    fn canonical_ranking(&self, r: &Rating) -> Vec<u32> {
        let session = &self.sessions[&r.session];
        let item = session.item(&r.item).expect("validated item");
        let order = session.slot_order(&r.annotator, item);
        let mut out = vec![0; order.len()];
        for (shown, &canon) in order.iter().enumerate() {
            out[canon] = r.ranking[shown];
        }
        out
    }

    pub fn next_session_id(&self) -> String {
        format!("s{}", self.sessions.len() + 1)
    }

    pub fn add_session(&mut self, session: Session) -> Result<()> {
        if self.sessions.contains_key(&session.id) {
            return Err(AnnotationError::InvalidRequest(format!("session {} exists", session.id)));
        }
        let ev = Event::SessionCreated { session };
        self.append(&ev)?;
        self.apply(ev);
        Ok(())
    }

    pub fn session(&self, id: &str) -> Result<&Session> {
        self.sessions
            .get(id)
            .ok_or_else(|| AnnotationError::UnknownSession(id.to_owned()))
    }

    /// Finds the session owning `item_id`.
    pub fn item(&self, item_id: &str) -> Result<(&Session, &Item)> {
        self.sessions
            .values()
            .find_map(|s| s.item(item_id).map(|i| (s, i)))
            .ok_or_else(|| AnnotationError::UnknownItem(item_id.to_owned()))
    }

    /// Image file for a slot of an item.
    pub fn slot_image(&self, item_id: &str, slot: &str) -> Result<&Path> {
        let (_, item) = self.item(item_id)?;
        item.slots
            .iter()
            .find(|s| s.id == slot)
            .map(|s| s.image.as_path())
            .ok_or_else(|| AnnotationError::UnknownSlot(slot.to_owned()))
    }

    /// Idempotent upsert keyed by (annotator, item, criterion).
    pub fn submit(&mut self, r: Rating) -> Result<()> {
        let session = self.session(&r.session)?;
        let item = session
            .item(&r.item)
            .ok_or_else(|| AnnotationError::UnknownItem(r.item.clone()))?;
        if r.annotator.trim().is_empty() {
            return Err(AnnotationError::InvalidRanking("empty annotator id".into()));
        }
        check_permutation(&r.ranking, item.slots.len())?;
        let ev = Event::RatingSubmitted { rating: r };
        self.append(&ev)?;
        self.apply(ev);
        Ok(())
    }

    pub fn items_view(&self, session_id: &str, annotator: &str) -> Result<ItemsView> {
        let session = self.session(session_id)?;
        let mut remaining: BTreeMap<Criterion, usize> = Criterion::ALL.iter().map(|c| (*c, 0)).collect();
        let items = session
            .items
            .iter()
            .map(|item| {
                let order = session.slot_order(annotator, item);
                let criteria = Criterion::ALL
                    .iter()
                    .map(|&c| {
                        let key = (session.id.clone(), annotator.to_owned(), item.id.clone(), c);
                        let ranking = self
                            .ratings
                            .get(&key)
                            .map(|canon| order.iter().map(|&i| canon[i]).collect::<Vec<u32>>());
                        if ranking.is_none() {
                            *remaining.get_mut(&c).expect("all criteria") += 1;
                        }
                        CriterionStatus {
                            criterion: c,
                            prompt: c.prompt().to_owned(),
                            ranking,
                        }
                    })
                    .collect();
                ItemView {
                    item: item.id.clone(),
                    entity: item.entity.clone(),
                    name: item.name.clone(),
                    facts: item.facts.clone(),
                    slots: order
                        .iter()
                        .map(|&i| SlotView {
                            slot: item.slots[i].id.clone(),
                            image_url: format!("/items/{}?slot={}", item.id, item.slots[i].id),
                        })
                        .collect(),
                    criteria,
                }
            })
            .collect();
        Ok(ItemsView {
            session: session.id.clone(),
            annotator: annotator.to_owned(),
            items,
            remaining,
        })
    }

    /// Per-source mean rank for each criterion over all annotators and items.
    pub fn aggregate(&self, session_id: &str) -> Result<SessionResults> {
        let session = self.session(session_id)?;
        let mut sums: BTreeMap<Criterion, BTreeMap<String, (u64, u64)>> = BTreeMap::new();
        let mut n_ratings: BTreeMap<Criterion, usize> = Criterion::ALL.iter().map(|c| (*c, 0)).collect();
        let mut conserved = true;
        for ((sid, _, item_id, c), ranks) in &self.ratings {
            if sid != session_id {
                continue;
            }
            let item = session.item(item_id).expect("stored ratings reference known items");
            let k = ranks.len() as u64;
            conserved &= ranks.iter().map(|&r| r as u64).sum::<u64>() == k * (k + 1) / 2;
            *n_ratings.get_mut(c).expect("all criteria") += 1;
            for (slot, &rank) in item.slots.iter().zip(ranks) {
                let e = sums.entry(*c).or_default().entry(slot.source.clone()).or_default();
                e.0 += rank as u64;
                e.1 += 1;
            }
        }
        let means = sums
            .into_iter()
            .map(|(c, by)| {
                let m = by
                    .into_iter()
                    .map(|(src, (s, n))| (src, s as f64 / n as f64))
                    .collect();
                (c, m)
            })
            .collect();
        Ok(SessionResults {
            session: session_id.to_owned(),
            means,
            n_ratings,
            rank_sums_conserved: conserved,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn candidates(n: usize, sources: &[&str]) -> Vec<Candidate> {
        (0..n)
            .map(|i| Candidate {
                entity: format!("e{i:02}"),
                name: format!("Entity {i}"),
                facts: vec![format!("fact {i}")],
                images: sources
                    .iter()
                    .map(|s| (s.to_string(), PathBuf::from(format!("{s}/{i}.png"))))
                    .collect(),
            })
            .collect()
    }

    fn srcs(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn sampling_is_seeded_and_sized() {
        let sources = srcs(&["real", "vsns", "name-only", "longest-token"]);
        let (a, w) = create_session("s1", "mini", candidates(60, &["real", "vsns", "name-only", "longest-token"]), &sources, 50, 7).unwrap();
        assert!(w.is_empty());
        assert_eq!(a.items.len(), 50);
        assert!(a.items.iter().all(|i| i.slots.len() == 4));
        let (b, _) = create_session("s1", "mini", candidates(60, &["real", "vsns", "name-only", "longest-token"]), &sources, 50, 7).unwrap();
        assert_eq!(a, b);
        let (c, _) = create_session("s1", "mini", candidates(60, &["real", "vsns", "name-only", "longest-token"]), &sources, 50, 8).unwrap();
        assert_ne!(a.items, c.items);
        let (empty, _) = create_session("s1", "mini", candidates(5, &["vsns", "name-only"]), &srcs(&["vsns", "name-only"]), 0, 1).unwrap();
        assert!(empty.items.is_empty());
    }

    #[test]
    fn missing_images_exclude_entities() {
        let mut c = candidates(3, &["vsns", "name-only", "longest-token"]);
        c[1].images.remove("longest-token");
        let (s, w) = create_session("s1", "db", c, &srcs(&["vsns", "name-only", "longest-token"]), 10, 0).unwrap();
        assert_eq!(s.items.len(), 2);
        assert!(w.iter().any(|x| x.contains("e01 excluded")));
        assert!(create_session("s1", "db", vec![], &srcs(&["vsns"]), 1, 0).is_err());
    }

    #[test]
    fn permutation_rules() {
        assert!(check_permutation(&[3, 1, 2], 3).is_ok());
        assert!(check_permutation(&[1, 1, 2], 3).is_err());
        assert!(check_permutation(&[0, 1, 2], 3).is_err());
        assert!(check_permutation(&[1, 2], 3).is_err());
    }

    #[test]
    fn upsert_overwrites_and_log_replays() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("events.jsonl");
        let sources = srcs(&["a", "b", "c"]);
        let (s, _) = create_session("s1", "t", candidates(2, &["a", "b", "c"]), &sources, 2, 3).unwrap();
        let item = s.items[0].id.clone();
        let mut store = Store::open(&log).unwrap();
        store.add_session(s).unwrap();
        let rating = |ranking: Vec<u32>| Rating {
            session: "s1".into(),
            annotator: "ann".into(),
            item: item.clone(),
            criterion: Criterion::IQ,
            ranking,
        };
        store.submit(rating(vec![1, 2, 3])).unwrap();
        store.submit(rating(vec![3, 2, 1])).unwrap();
        let err = store.submit(rating(vec![1, 1, 2])).unwrap_err();
        assert_eq!(err.status(), 422);
        let mut missing = rating(vec![1, 2, 3]);
        missing.item = "nope".into();
        assert_eq!(store.submit(missing).unwrap_err().status(), 404);
        let before = store.aggregate("s1").unwrap();
        assert_eq!(before.n_ratings[&Criterion::IQ], 1);
        let view = store.items_view("s1", "ann").unwrap();
        assert_eq!(view.items[0].criteria[0].ranking, Some(vec![3, 2, 1]));
        assert_eq!(view.remaining[&Criterion::IQ], 1);
        drop(store);
        let replayed = Store::open(&log).unwrap();
        assert_eq!(replayed.aggregate("s1").unwrap(), before);
    }

    #[test]
    fn views_hide_sources() {
        let sources = srcs(&["real", "vsns", "name-only", "longest-token"]);
        let (s, _) = create_session("s1", "t", candidates(3, &["real", "vsns", "name-only", "longest-token"]), &sources, 3, 1).unwrap();
        let mut store = Store::in_memory();
        store.add_session(s).unwrap();
        let json = serde_json::to_string(&store.items_view("s1", "x").unwrap()).unwrap();
        for src in &sources {
            assert!(!json.contains(src.as_str()), "{src} leaked");
        }
    }
}
