//! Structural neighbor selection.
//!
//! Within each (head, relation) group the neighbor representation
//! `φ(e_t, e_r)` is compared with the head embedding by cosine similarity and
//! every neighbor at or above the group mean is kept.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{compose, Composition, EmbedError, EmbeddingTable};
use crate::kg::{EntityId, KgError, KnowledgeGraph, RelationId};

#[derive(Debug, Error)]
pub enum SnsError {
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("embedding table covers {table} entities / {table_rel} relations, graph has {graph} / {graph_rel}")]
    Coverage {
        table: usize,
        table_rel: usize,
        graph: usize,
        graph_rel: usize,
    },
}

const NORM_EPS: f64 = 1e-12;

/// `e_(r,t) = φ(e_t, e_r)`.
pub fn neighbor_rep(e_r: &[f64], e_t: &[f64], op: Composition) -> Result<Vec<f64>, EmbedError> {
    compose(e_t, e_r, op)
}

/// Cosine similarity; 0 when either vector has (near-)zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let na = aa.sqrt();
    let nb = bb.sqrt();
    if na < NORM_EPS || nb < NORM_EPS {
        return 0.0;
    }
    ab / (na * nb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborScore {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
    pub rep: Vec<f64>,
    pub sim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationGroup {
    pub relation: RelationId,
    pub scores: Vec<NeighborScore>,
    pub group_mean: f64,
    /// Tails with `sim >= group_mean`, in (tail handle) order.
    pub selected: Vec<EntityId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedNeighbors {
    pub head: EntityId,
    pub groups: BTreeMap<RelationId, RelationGroup>,
}

impl SelectedNeighbors {
    pub fn empty(head: EntityId) -> Self {
        Self {
            head,
            groups: BTreeMap::new(),
        }
    }

    /// All selected (relation, tail) pairs in relation then tail order.
    pub fn selected_pairs(&self) -> Vec<(RelationId, EntityId)> {
        self.groups
            .values()
            .flat_map(|g| g.selected.iter().map(move |t| (g.relation, *t)))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.values().all(|g| g.selected.is_empty())
    }
}

/// Groups the head's allowed out-edges by relation and keeps, per group, the
/// neighbors whose similarity reaches the group mean.
pub fn select_neighbors(
    g: &KnowledgeGraph,
    emb: &EmbeddingTable,
    head: EntityId,
    allowed: &BTreeSet<RelationId>,
) -> Result<SelectedNeighbors, SnsError> {
    if emb.entity_vecs.rows() < g.num_entities() || emb.relation_vecs.rows() < g.num_relations() {
        return Err(SnsError::Coverage {
            table: emb.entity_vecs.rows(),
            table_rel: emb.relation_vecs.rows(),
            graph: g.num_entities(),
            graph_rel: g.num_relations(),
        });
    }
    let op = emb.config.composition;
    let mut edges = g.neighbors(head, None)?;
    let mut seen = HashSet::new();
    edges.retain(|e| allowed.contains(&e.0) && seen.insert(*e));

    let e_h = emb.entity(head);
    let mut groups: BTreeMap<RelationId, RelationGroup> = BTreeMap::new();
    for (rel, tail) in edges {
        let rep = neighbor_rep(emb.relation(rel), emb.entity(tail), op)?;
        let sim = cosine(e_h, &rep);
        groups
            .entry(rel)
            .or_insert_with(|| RelationGroup {
                relation: rel,
                scores: Vec::new(),
                group_mean: 0.0,
                selected: Vec::new(),
            })
            .scores
            .push(NeighborScore {
                head,
                rel,
                tail,
                rep,
                sim,
            });
    }
    for group in groups.values_mut() {
        let n = group.scores.len() as f64;
        let max = group.scores.iter().map(|s| s.sim).fold(f64::NEG_INFINITY, f64::max);
        // rounding in the sum can push the mean of equal values above them
        group.group_mean = (group.scores.iter().map(|s| s.sim).sum::<f64>() / n).min(max);
        group.selected = group
            .scores
            .iter()
            .filter(|s| s.sim >= group.group_mean)
            .map(|s| s.tail)
            .collect();
    }
    Ok(SelectedNeighbors { head, groups })
}

/// Runs [`select_neighbors`] for every target entity, in the given order.
pub fn select_all(
    g: &KnowledgeGraph,
    emb: &EmbeddingTable,
    targets: &[EntityId],
    allowed: &BTreeSet<RelationId>,
) -> Result<Vec<SelectedNeighbors>, SnsError> {
    targets
        .par_iter()
        .map(|&h| select_neighbors(g, emb, h, allowed))
        .collect()
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborSimRow {
    pub tail: String,
    pub sim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub relation: String,
    pub neighbors: Vec<NeighborSimRow>,
    pub mean: f64,
    pub selected: Vec<String>,
}

/// One line of `selected_neighbors.jsonl`; similarities rounded to 6 decimals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub entity: String,
    pub groups: Vec<GroupRow>,
}

impl SelectionRow {
    pub fn from_selection(g: &KnowledgeGraph, s: &SelectedNeighbors) -> Self {
        Self {
            entity: g.entity_label(s.head).to_owned(),
            groups: s
                .groups
                .values()
                .map(|grp| GroupRow {
                    relation: g.relation_label(grp.relation).to_owned(),
                    neighbors: grp
                        .scores
                        .iter()
                        .map(|n| NeighborSimRow {
                            tail: g.entity_label(n.tail).to_owned(),
                            sim: round6(n.sim),
                        })
                        .collect(),
                    mean: round6(grp.group_mean),
                    selected: grp.selected.iter().map(|t| g.entity_label(*t).to_owned()).collect(),
                })
                .collect(),
        }
    }

    /// Selected (relation label, tail label) pairs.
    pub fn selected_pairs(&self) -> Vec<(String, String)> {
        self.groups
            .iter()
            .flat_map(|grp| grp.selected.iter().map(move |t| (grp.relation.clone(), t.clone())))
            .collect()
    }
}
