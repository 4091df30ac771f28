//! Link-prediction harness: TransE with optional additive image fusion, and
//! raw/filtered ranking evaluation.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::Matrix;
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Split, Triple, Vocabulary};
use crate::util;

#[derive(Debug, Error)]
pub enum KgcError {
    #[error("invalid kgc config: {0}")]
    Config(String),
    #[error("test split is empty")]
    EmptyTest,
    #[error("training split is empty")]
    EmptyTrain,
    #[error("image feature for {entity} has dimension {got}, expected {expected}")]
    FeatureDim { entity: String, got: usize, expected: usize },
    #[error("feature file {path}: {message}")]
    FeatureFile { path: String, message: String },
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    #[default]
    None,
    ImageAdd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgcConfig {
    pub dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Corrupted triples per positive, drawn fresh each epoch.
    pub negatives: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub fusion: Fusion,
}

impl Default for KgcConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            margin: 1.0,
            learning_rate: 0.01,
            epochs: 200,
            negatives: 2,
            batch_size: 128,
            seed: 0,
            fusion: Fusion::None,
        }
    }
}

impl KgcConfig {
    pub fn validate(&self) -> Result<(), KgcError> {
        if self.dim == 0 {
            return Err(KgcError::Config("dim must be positive".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(KgcError::Config("margin must be > 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(KgcError::Config("learning_rate must be > 0".into()));
        }
        if self.negatives == 0 || self.batch_size == 0 {
            return Err(KgcError::Config("negatives and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-entity image feature vectors; entities without an image have `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    dim: usize,
    rows: Vec<Option<Vec<f64>>>,
}

impl ImageFeatures {
    pub fn new(dim: usize, n_entities: usize) -> Self {
        Self {
            dim,
            rows: vec![None; n_entities],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn set(&mut self, e: EntityId, v: Vec<f64>, label: &str) -> Result<(), KgcError> {
        if v.len() != self.dim {
            return Err(KgcError::FeatureDim {
                entity: label.to_owned(),
                got: v.len(),
                expected: self.dim,
            });
        }
        self.rows[e.index()] = Some(v);
        Ok(())
    }

    pub fn get(&self, e: EntityId) -> Option<&[f64]> {
        self.rows.get(e.index()).and_then(|r| r.as_deref())
    }

    pub fn count(&self) -> usize {
        self.rows.iter().filter(|r| r.is_some()).count()
    }
}

/// One line of a feature file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub entity: String,
    pub vector: Vec<f64>,
}

/// Reads a JSONL feature file (`{"entity": …, "vector": […]}` per line).
/// Labels not in the graph are ignored.
pub fn load_features(path: &Path, g: &KnowledgeGraph) -> Result<ImageFeatures, KgcError> {
    let err = |message: String| KgcError::FeatureFile {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: FeatureRow = serde_json::from_str(line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        rows.push(row);
    }
    let dim = rows.first().map_or(0, |r| r.vector.len());
    let mut out = ImageFeatures::new(dim, g.num_entities());
    for row in rows {
        if let Ok(e) = g.entity_id(&row.entity) {
            out.set(e, row.vector, &row.entity)?;
        }
    }
    Ok(out)
}

/// `struct + W·img`, or `struct` when there is no image.
pub fn fuse_image(structural: &[f64], image: Option<&[f64]>, projection: &Matrix) -> Vec<f64> {
    let mut out = structural.to_vec();
    if let Some(img) = image {
        projection.matvec_add(img, &mut out);
    }
    out
}

/// Anything that can score a triple; higher is more plausible.
pub trait TripleScorer: Sync {
    fn num_entities(&self) -> usize;
    fn score(&self, head: EntityId, rel: RelationId, tail: EntityId) -> f64;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransE {
    pub entity: Matrix,
    pub relation: Matrix,
    /// `dim × feature_dim`; present only with image fusion.
    pub projection: Option<Matrix>,
    pub features: Option<ImageFeatures>,
}

impl TransE {
    /// Entity representation used for scoring.
    pub fn representation(&self, e: EntityId) -> Vec<f64> {
        match (&self.projection, &self.features) {
            (Some(w), Some(f)) => fuse_image(self.entity.row(e.index()), f.get(e), w),
            _ => self.entity.row(e.index()).to_vec(),
        }
    }

    fn representations(&self) -> Vec<Vec<f64>> {
        (0..self.entity.rows()).map(|i| self.representation(EntityId(i as u32))).collect()
    }

    /// Same structural embeddings with fusion switched off.
    pub fn structure_only(&self) -> Self {
        Self {
            entity: self.entity.clone(),
            relation: self.relation.clone(),
            projection: None,
            features: None,
        }
    }
}

fn translation_distance(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    h.iter()
        .zip(r)
        .zip(t)
        .map(|((h, r), t)| (h + r - t) * (h + r - t))
        .sum::<f64>()
        .sqrt()
}

impl TripleScorer for TransE {
    fn num_entities(&self) -> usize {
        self.entity.rows()
    }

    fn score(&self, head: EntityId, rel: RelationId, tail: EntityId) -> f64 {
        -translation_distance(&self.representation(head), self.relation.row(rel.index()), &self.representation(tail))
    }
}

/// Scores with entity representations computed once.
struct Precomputed<'a> {
    reps: Vec<Vec<f64>>,
    relation: &'a Matrix,
}

impl TripleScorer for Precomputed<'_> {
    fn num_entities(&self) -> usize {
        self.reps.len()
    }

    fn score(&self, head: EntityId, rel: RelationId, tail: EntityId) -> f64 {
        -translation_distance(&self.reps[head.index()], self.relation.row(rel.index()), &self.reps[tail.index()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorruptedPair {
    pub positive: Triple,
    pub negative: Triple,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransEGrad {
    pub entity: Matrix,
    pub relation: Matrix,
    pub projection: Option<Matrix>,
}

/// Summed margin ranking loss `Σ max(0, γ + d(pos) − d(neg))` and its gradient.
pub fn loss_and_grad(model: &TransE, pairs: &[CorruptedPair], margin: f64) -> (f64, TransEGrad) {
    let mut grad = TransEGrad {
        entity: Matrix::zeros(model.entity.rows(), model.entity.cols()),
        relation: Matrix::zeros(model.relation.rows(), model.relation.cols()),
        projection: model.projection.as_ref().map(|w| Matrix::zeros(w.rows(), w.cols())),
    };
    let dim = model.entity.cols();
    let mut loss = 0.0;
    let push = |grad: &mut TransEGrad, e: EntityId, g: &[f64]| {
        for (a, b) in grad.entity.row_mut(e.index()).iter_mut().zip(g) {
            *a += b;
        }
        if let (Some(gw), Some(f)) = (grad.projection.as_mut(), model.features.as_ref()) {
            if let Some(img) = f.get(e) {
                gw.add_outer(g, img);
            }
        }
    };
    for pair in pairs {
        let side = |t: &Triple| {
            let h = model.representation(t.head);
            let tt = model.representation(t.tail);
            let r = model.relation.row(t.rel.index());
            let v: Vec<f64> = (0..dim).map(|i| h[i] + r[i] - tt[i]).collect();
            let d = util::l2_norm(&v);
            let unit: Vec<f64> = if d < 1e-12 { vec![0.0; dim] } else { v.iter().map(|x| x / d).collect() };
            (d, unit)
        };
        let (dp, up) = side(&pair.positive);
        let (dn, un) = side(&pair.negative);
        let l = margin + dp - dn;
        if l <= 0.0 {
            continue;
        }
        loss += l;
        let neg_un: Vec<f64> = un.iter().map(|x| -x).collect();
        let neg_up: Vec<f64> = up.iter().map(|x| -x).collect();
        push(&mut grad, pair.positive.head, &up);
        push(&mut grad, pair.positive.tail, &neg_up);
        push(&mut grad, pair.negative.head, &neg_un);
        push(&mut grad, pair.negative.tail, &un);
        for (a, p) in grad.relation.row_mut(pair.positive.rel.index()).iter_mut().zip(&up) {
            *a += p;
        }
        for (a, n) in grad.relation.row_mut(pair.negative.rel.index()).iter_mut().zip(&neg_un) {
            *a += n;
        }
    }
    (loss, grad)
}

fn renormalize_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let n = util::l2_norm(row);
        if n > 1.0 {
            for x in row {
                *x /= n;
            }
        }
    }
}

/// Replaces the head or the tail with a random other entity, avoiding known
/// training triples when possible.
fn corrupt(t: &Triple, n_entities: usize, known: &HashSet<Triple>, rng: &mut ChaCha8Rng) -> Triple {
    let mut candidate = *t;
    for _ in 0..10 {
        let e = EntityId(rng.random_range(0..n_entities as u32));
        candidate = if rng.random_bool(0.5) {
            Triple::new(e, t.rel, t.tail)
        } else {
            Triple::new(t.head, t.rel, e)
        };
        if candidate != *t && !known.contains(&candidate) {
            break;
        }
    }
    candidate
}

#[derive(Clone, Debug)]
pub struct TrainedKgc {
    pub model: TransE,
    pub loss_history: Vec<f64>,
}

/// Mini-batch SGD on the training split. Deterministic given `cfg.seed`.
pub fn train_transe(
    g: &KnowledgeGraph,
    cfg: &KgcConfig,
    features: Option<&ImageFeatures>,
) -> Result<TrainedKgc, KgcError> {
    cfg.validate()?;
    let train: Vec<Triple> = {
        let mut v: Vec<Triple> = g.triples_in(Split::Train).collect();
        v.sort();
        v.dedup();
        v
    };
    if train.is_empty() {
        return Err(KgcError::EmptyTrain);
    }
    let known: HashSet<Triple> = train.iter().copied().collect();
    let n = g.num_entities();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 6.0 / (cfg.dim as f64).sqrt();
    let mut entity = Matrix::uniform(n, cfg.dim, scale, &mut rng);
    let mut relation = Matrix::uniform(g.num_relations(), cfg.dim, scale, &mut rng);
    for i in 0..relation.rows() {
        let row = relation.row_mut(i);
        let norm = util::l2_norm(row);
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    renormalize_rows(&mut entity);
    let (projection, features) = match (cfg.fusion, features) {
        (Fusion::ImageAdd, Some(f)) if f.count() > 0 => (Some(Matrix::zeros(cfg.dim, f.dim())), Some(f.clone())),
        _ => (None, None),
    };
    let mut model = TransE {
        entity,
        relation,
        projection,
        features,
    };

    let mut order = train.clone();
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let pairs: Vec<CorruptedPair> = batch
                .iter()
                .flat_map(|t| std::iter::repeat_n(*t, cfg.negatives))
                .map(|t| CorruptedPair {
                    positive: t,
                    negative: corrupt(&t, n, &known, &mut rng),
                })
                .collect();
            let (loss, grad) = loss_and_grad(&model, &pairs, cfg.margin);
            epoch_loss += loss;
            model.entity.axpy(-cfg.learning_rate, &grad.entity);
            model.relation.axpy(-cfg.learning_rate, &grad.relation);
            if let (Some(w), Some(gw)) = (model.projection.as_mut(), grad.projection.as_ref()) {
                w.axpy(-cfg.learning_rate, gw);
            }
            renormalize_rows(&mut model.entity);
        }
        if !epoch_loss.is_finite() {
            return Err(KgcError::Diverged(epoch));
        }
        loss_history.push(epoch_loss / (train.len() * cfg.negatives) as f64);
    }
    Ok(TrainedKgc { model, loss_history })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Raw,
    Filtered,
}

pub const HITS_AT: [u32; 3] = [1, 3, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub setting: Setting,
    pub mrr: f64,
    pub hits_at: BTreeMap<u32, f64>,
    pub n_queries: usize,
}

impl RankReport {
    pub fn from_ranks(setting: Setting, ranks: &[f64]) -> Self {
        let n = ranks.len();
        let mut mrr = 0.0;
        for r in ranks {
            mrr += 1.0 / r;
        }
        let hits_at = HITS_AT
            .iter()
            .map(|&k| (k, ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / n as f64))
            .collect();
        Self {
            setting,
            mrr: mrr / n as f64,
            hits_at,
            n_queries: n,
        }
    }

    pub fn hits(&self, k: u32) -> f64 {
        self.hits_at.get(&k).copied().unwrap_or(0.0)
    }

    pub fn hits_monotone(&self) -> bool {
        self.hits(1) <= self.hits(3) && self.hits(3) <= self.hits(10) && self.hits(10) <= 1.0
    }
}

/// A head query `(?, r, t)` or a tail query `(h, r, ?)` for one test triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Query {
    Head(Triple),
    Tail(Triple),
}

/// Mean-rank-among-ties rank of the true answer: `1 + #better + #ties / 2`.
pub fn rank_query(
    scorer: &dyn TripleScorer,
    query: Query,
    setting: Setting,
    known: &HashSet<Triple>,
) -> f64 {
    let (truth, candidate): (Triple, Box<dyn Fn(EntityId) -> Triple>) = match query {
        Query::Tail(t) => (t, Box::new(move |e| Triple::new(t.head, t.rel, e))),
        Query::Head(t) => (t, Box::new(move |e| Triple::new(e, t.rel, t.tail))),
    };
    let target = scorer.score(truth.head, truth.rel, truth.tail);
    let mut better = 0usize;
    let mut ties = 0usize;
    for i in 0..scorer.num_entities() {
        let c = candidate(EntityId(i as u32));
        if c == truth || (setting == Setting::Filtered && known.contains(&c)) {
            continue;
        }
        let s = scorer.score(c.head, c.rel, c.tail);
        if s > target {
            better += 1;
        } else if s == target {
            ties += 1;
        }
    }
    1.0 + better as f64 + ties as f64 / 2.0
}

fn test_queries(g: &KnowledgeGraph) -> Result<Vec<Query>, KgcError> {
    let test: Vec<Triple> = g.triples_in(Split::Test).collect();
    if test.is_empty() {
        return Err(KgcError::EmptyTest);
    }
    Ok(test.iter().flat_map(|t| [Query::Tail(*t), Query::Head(*t)]).collect())
}

/// Ranks of every head and tail query over the test split.
pub fn query_ranks(g: &KnowledgeGraph, scorer: &dyn TripleScorer, setting: Setting) -> Result<Vec<f64>, KgcError> {
    let queries = test_queries(g)?;
    let known: HashSet<Triple> = g.triples().iter().copied().collect();
    Ok(queries.par_iter().map(|q| rank_query(scorer, *q, setting, &known)).collect())
}

pub fn evaluate(g: &KnowledgeGraph, scorer: &dyn TripleScorer, setting: Setting) -> Result<RankReport, KgcError> {
    Ok(RankReport::from_ranks(setting, &query_ranks(g, scorer, setting)?))
}

/// Evaluates a TransE model with entity representations computed once.
pub fn evaluate_model(g: &KnowledgeGraph, model: &TransE, setting: Setting) -> Result<RankReport, KgcError> {
    let pre = Precomputed {
        reps: model.representations(),
        relation: &model.relation,
    };
    evaluate(g, &pre, setting)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReports {
    pub raw: RankReport,
    pub filtered: RankReport,
    pub final_loss: Option<f64>,
}

/// Contents of `kgc_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgcReport {
    pub config: KgcConfig,
    pub structure_only: ModelReports,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_add: Option<ModelReports>,
    pub entities_with_images: usize,
    pub features_source: String,
}

fn reports(g: &KnowledgeGraph, trained: &TrainedKgc) -> Result<ModelReports, KgcError> {
    Ok(ModelReports {
        raw: evaluate_model(g, &trained.model, Setting::Raw)?,
        filtered: evaluate_model(g, &trained.model, Setting::Filtered)?,
        final_loss: trained.loss_history.last().copied(),
    })
}

/// Trains and evaluates the structure-only model and, when features are
/// given, the image-fused model with the same seed.
pub fn run_kgc(
    g: &KnowledgeGraph,
    cfg: &KgcConfig,
    features: Option<&ImageFeatures>,
    features_source: &str,
) -> Result<KgcReport, KgcError> {
    test_queries(g)?;
    let base = train_transe(
        g,
        &KgcConfig {
            fusion: Fusion::None,
            ..cfg.clone()
        },
        None,
    )?;
    let image_add = match features {
        Some(f) if f.count() > 0 => {
            let fused = train_transe(
                g,
                &KgcConfig {
                    fusion: Fusion::ImageAdd,
                    ..cfg.clone()
                },
                Some(f),
            )?;
            Some(reports(g, &fused)?)
        }
        _ => None,
    };
    Ok(KgcReport {
        config: cfg.clone(),
        structure_only: reports(g, &base)?,
        image_add,
        entities_with_images: features.map_or(0, ImageFeatures::count),
        features_source: features_source.to_owned(),
    })
}

/// A graph of `clusters × per_cluster` entities where relation `r` maps
/// cluster `c` to cluster `c + r + 1` (when that cluster exists). Returns the
/// graph and each entity's cluster. Entities are named `c<cluster>_<member>`;
/// every `test_every`-th triple goes to the test split.
pub fn clustered_kg(
    clusters: usize,
    per_cluster: usize,
    relations: usize,
    edges_per_entity: usize,
    test_every: usize,
    seed: u64,
) -> (KnowledgeGraph, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities: Vec<String> = (0..clusters)
        .flat_map(|c| (0..per_cluster).map(move |m| format!("c{c}_{m}")))
        .collect();
    let rel_names: Vec<String> = (0..relations).map(|r| format!("rel{r}")).collect();
    let mut seen = HashSet::new();
    let mut parts = Vec::new();
    for c in 0..clusters {
        let reachable = relations.min(clusters - 1 - c);
        if reachable == 0 {
            continue;
        }
        for m in 0..per_cluster {
            for _ in 0..edges_per_entity {
                let r = rng.random_range(0..reachable);
                let h = c * per_cluster + m;
                let t = (c + r + 1) * per_cluster + rng.random_range(0..per_cluster);
                if !seen.insert((h, r, t)) {
                    continue;
                }
                let split = if (parts.len() + 1) % test_every == 0 { Split::Test } else { Split::Train };
                parts.push((Triple::new(EntityId(h as u32), RelationId(r as u32), EntityId(t as u32)), split));
            }
        }
    }
    let g = KnowledgeGraph::from_parts(Vocabulary::from_labels(&entities), Vocabulary::from_labels(&rel_names), parts)
        .expect("generated graph is consistent");
    let cluster_of = (0..clusters * per_cluster).map(|i| i / per_cluster).collect();
    (g, cluster_of)
}
