//! Relation visualizability scoring.
//!
//! For each relation a handful of triples is sampled, verbalized, rendered by
//! the text-to-image backend and scored by the reward backend. A sample counts
//! as positive when its reward is strictly above zero; the relation's score is
//! the positive fraction and it is kept when that fraction exceeds `mu`.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{ImageGenerator, RewardModel};
use crate::kg::{KgError, KnowledgeGraph, RelationId, Split, Triple};
use crate::prompts::naturalize_relation;
use crate::util::{derive_seed, hash64};

pub const DEFAULT_SAMPLES_PER_RELATION: usize = 10;
pub const DEFAULT_MU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VnsConfig {
    pub samples_per_relation: usize,
    pub mu: f64,
    /// Sample from every split instead of train only.
    pub all_splits: bool,
    pub image_width: u32,
    pub image_height: u32,
}

impl Default for VnsConfig {
    fn default() -> Self {
        Self {
            samples_per_relation: DEFAULT_SAMPLES_PER_RELATION,
            mu: DEFAULT_MU,
            all_splits: false,
            image_width: 64,
            image_height: 64,
        }
    }
}

/// Which triples of a relation are eligible for sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleScope {
    Train,
    All,
}

/// Up to `k` distinct triples of `rel`, uniform without replacement, returned
/// in file order. Deterministic in `(seed, rel)`.
pub fn sample_triples(
    g: &KnowledgeGraph,
    rel: RelationId,
    k: usize,
    seed: u64,
    scope: SampleScope,
) -> Result<Vec<Triple>, KgError> {
    let pool = match scope {
        SampleScope::Train => g.triples_of_relation_in(rel, Split::Train)?,
        SampleScope::All => {
            let all = g.triples_of_relation(rel)?;
            let mut seen = BTreeSet::new();
            all.into_iter().filter(|t| seen.insert(*t)).collect()
        }
    };
    if pool.len() <= k {
        return Ok(pool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "vns-sample", rel.0 as u64));
    let mut idx = rand::seq::index::sample(&mut rng, pool.len(), k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pool[i]).collect())
}

/// `"<head> <relation words> <tail>."` using display names.
pub fn verbalize(t: &Triple, g: &KnowledgeGraph) -> String {
    format!(
        "{} {} {}.",
        g.display_name(t.head),
        naturalize_relation(g.relation_label(t.rel)),
        g.display_name(t.tail)
    )
}

/// Sign rule: 1 for a strictly positive reward, 0 otherwise (zero included).
pub fn reward_to_score(reward: f64) -> u8 {
    u8::from(reward > 0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualizationSample {
    pub triple: Triple,
    pub text: String,
    pub image_sha256: String,
    pub reward: f64,
    pub r_score: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedSample {
    pub triple: Triple,
    pub text: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationVisScore {
    pub relation: RelationId,
    pub label: String,
    pub samples: Vec<VisualizationSample>,
    pub failed: Vec<FailedSample>,
    pub r_vis: f64,
    pub mu: f64,
    pub visualizable: bool,
    /// Set when every sample failed.
    pub error: Option<String>,
}

impl RelationVisScore {
    pub fn positives(&self) -> usize {
        self.samples.iter().map(|s| s.r_score as usize).sum()
    }

    /// Recomputes the aggregate from samples and threshold.
    pub fn from_samples(
        relation: RelationId,
        label: String,
        samples: Vec<VisualizationSample>,
        failed: Vec<FailedSample>,
        mu: f64,
    ) -> Self {
        let error = (samples.is_empty() && !failed.is_empty()).then(|| {
            format!("all {} samples failed; last error: {}", failed.len(), failed[failed.len() - 1].error)
        });
        let positives: usize = samples.iter().map(|s| s.r_score as usize).sum();
        let r_vis = if samples.is_empty() {
            0.0
        } else {
            positives as f64 / samples.len() as f64
        };
        Self {
            relation,
            label,
            visualizable: error.is_none() && !samples.is_empty() && r_vis > mu,
            samples,
            failed,
            r_vis,
            mu,
            error,
        }
    }

    /// Same samples judged against another threshold.
    pub fn with_mu(&self, mu: f64) -> Self {
        Self::from_samples(self.relation, self.label.clone(), self.samples.clone(), self.failed.clone(), mu)
    }
}

/// Scores one relation. Samples that fail after the backend's retries are
/// dropped from both numerator and denominator.
pub fn score_relation(
    g: &KnowledgeGraph,
    rel: RelationId,
    t2i: &dyn ImageGenerator,
    reward: &dyn RewardModel,
    cfg: &VnsConfig,
    seed: u64,
) -> Result<RelationVisScore, KgError> {
    let scope = if cfg.all_splits { SampleScope::All } else { SampleScope::Train };
    let triples = sample_triples(g, rel, cfg.samples_per_relation, seed, scope)?;
    let outcomes: Vec<Result<VisualizationSample, FailedSample>> = triples
        .par_iter()
        .map(|t| {
            let text = verbalize(t, g);
            let image_seed = derive_seed(seed, "vns-image", hash64(&[text.as_bytes()]));
            let result = t2i
                .generate(&text, image_seed, cfg.image_width, cfg.image_height)
                .and_then(|img| reward.score(&text, &img).map(|r| (img, r)));
            match result {
                Ok((img, r)) => {
                    if r == 0.0 {
                        tracing::info!(text = %text, "reward exactly zero, counted as not visualizable");
                    }
                    Ok(VisualizationSample {
                        triple: *t,
                        text,
                        image_sha256: img.sha256,
                        reward: r,
                        r_score: reward_to_score(r),
                    })
                }
                Err(e) => {
                    tracing::warn!(text = %text, error = %e, "visualization sample failed");
                    Err(FailedSample {
                        triple: *t,
                        text,
                        error: e.to_string(),
                    })
                }
            }
        })
        .collect();
    let mut samples = Vec::new();
    let mut failed = Vec::new();
    for o in outcomes {
        match o {
            Ok(s) => samples.push(s),
            Err(f) => failed.push(f),
        }
    }
    Ok(RelationVisScore::from_samples(
        rel,
        g.relation_label(rel).to_owned(),
        samples,
        failed,
        cfg.mu,
    ))
}

/// Scores every relation of the graph, in handle order.
pub fn score_all(
    g: &KnowledgeGraph,
    t2i: &dyn ImageGenerator,
    reward: &dyn RewardModel,
    cfg: &VnsConfig,
    seed: u64,
) -> Result<Vec<RelationVisScore>, KgError> {
    (0..g.num_relations() as u32)
        .into_par_iter()
        .map(|r| score_relation(g, RelationId(r), t2i, reward, cfg, seed))
        .collect()
}

/// Relations whose score is strictly above their threshold.
pub fn filter_relations(scores: &[RelationVisScore]) -> BTreeSet<RelationId> {
    scores
        .iter()
        .filter(|s| s.error.is_none() && !s.samples.is_empty() && s.r_vis > s.mu)
        .map(|s| s.relation)
        .collect()
}

/// One row of `relation_scores.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationScoreRow {
    pub relation: String,
    pub r_vis: f64,
    pub n_samples: usize,
    pub n_failed: usize,
    pub visualizable: bool,
    pub mu: f64,
}

pub fn report_rows(scores: &[RelationVisScore]) -> Vec<RelationScoreRow> {
    scores
        .iter()
        .map(|s| RelationScoreRow {
            relation: s.label.clone(),
            r_vis: s.r_vis,
            n_samples: s.samples.len(),
            n_failed: s.failed.len(),
            visualizable: s.visualizable,
            mu: s.mu,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendError, BackendResult, ImageArtifact, MockImageGenerator};
    use crate::kg::EntityId;
    use std::collections::HashMap;

    fn chain_graph(n: usize) -> KnowledgeGraph {
        let rows: Vec<(String, String, String)> = (0..n)
            .map(|i| (format!("e{i}"), "linksTo".to_string(), format!("e{}", i + 1)))
            .collect();
        KnowledgeGraph::from_labeled(&rows).unwrap()
    }

    #[test]
    fn undersized_relation_uses_all_triples() {
        let g = chain_graph(3);
        let s = sample_triples(&g, RelationId(0), 10, 1, SampleScope::Train).unwrap();
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn sampling_is_distinct_and_replayable() {
        let g = chain_graph(100);
        let a = sample_triples(&g, RelationId(0), 10, 42, SampleScope::Train).unwrap();
        let b = sample_triples(&g, RelationId(0), 10, 42, SampleScope::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        let set: BTreeSet<_> = a.iter().collect();
        assert_eq!(set.len(), 10);
        let c = sample_triples(&g, RelationId(0), 10, 43, SampleScope::Train).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn verbalization() {
        let g = KnowledgeGraph::from_labeled(&[
            ("Dary Holm", "starredIn", "The Man Without Nerves"),
            ("Bob", "won", "Prize"),
            ("Ann", "birth_place", "Oslo"),
        ])
        .unwrap();
        let t = g.triples();
        assert_eq!(verbalize(&t[0], &g), "Dary Holm starred in The Man Without Nerves.");
        assert_eq!(verbalize(&t[1], &g), "Bob won Prize.");
        assert_eq!(verbalize(&t[2], &g), "Ann birth place Oslo.");
    }

    #[test]
    fn sign_rule() {
        assert_eq!(reward_to_score(0.3), 1);
        assert_eq!(reward_to_score(-0.3), 0);
        assert_eq!(reward_to_score(0.0), 0);
    }

    /// Reward backend returning a scripted value per text.
    struct Scripted(HashMap<String, f64>);
    impl RewardModel for Scripted {
        fn score(&self, text: &str, _: &ImageArtifact) -> BackendResult<f64> {
            self.0.get(text).copied().ok_or(BackendError::Timeout)
        }
    }

    fn scripted(g: &KnowledgeGraph, rewards: &[f64]) -> Scripted {
        Scripted(
            g.triples()
                .iter()
                .zip(rewards)
                .map(|(t, r)| (verbalize(t, g), *r))
                .collect(),
        )
    }

    #[test]
    fn half_positive_is_not_visualizable() {
        let g = chain_graph(10);
        let rewards: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 0.7 } else { -0.4 }).collect();
        let s = score_relation(
            &g,
            RelationId(0),
            &MockImageGenerator::new(0),
            &scripted(&g, &rewards),
            &VnsConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(s.r_vis, 0.5);
        assert!(!s.visualizable);
        let all = score_relation(
            &g,
            RelationId(0),
            &MockImageGenerator::new(0),
            &scripted(&g, &[1.0; 10]),
            &VnsConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(all.r_vis, 1.0);
        assert!(all.visualizable);
    }

    #[test]
    fn failed_samples_shrink_the_denominator() {
        let g = chain_graph(4);
        // last triple has no scripted reward -> backend error
        let rewards = [0.5, 0.5, -0.5];
        let s = score_relation(
            &g,
            RelationId(0),
            &MockImageGenerator::new(0),
            &scripted(&g, &rewards),
            &VnsConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(s.samples.len(), 3);
        assert_eq!(s.failed.len(), 1);
        assert!((s.r_vis - 2.0 / 3.0).abs() < 1e-15);
        assert!(s.visualizable);
    }

    #[test]
    fn all_failed_marks_error() {
        let g = chain_graph(2);
        let s = score_relation(
            &g,
            RelationId(0),
            &MockImageGenerator::new(0),
            &Scripted(HashMap::new()),
            &VnsConfig::default(),
            0,
        )
        .unwrap();
        assert!(s.error.is_some());
        assert!(!s.visualizable);
        assert!(filter_relations(&[s]).is_empty());
    }

    fn fake(rel: u32, r_vis_pos: usize, mu: f64) -> RelationVisScore {
        let samples = (0..10)
            .map(|i| VisualizationSample {
                triple: Triple::new(EntityId(0), RelationId(rel), EntityId(1)),
                text: String::new(),
                image_sha256: String::new(),
                reward: if i < r_vis_pos { 1.0 } else { -1.0 },
                r_score: u8::from(i < r_vis_pos),
            })
            .collect();
        RelationVisScore::from_samples(RelationId(rel), format!("r{rel}"), samples, vec![], mu)
    }

    #[test]
    fn strict_threshold_filter() {
        let scores = vec![fake(0, 8, 0.5), fake(1, 5, 0.5), fake(2, 2, 0.5)];
        assert_eq!(filter_relations(&scores), [RelationId(0)].into_iter().collect());
        let all_one = vec![fake(0, 10, 0.5), fake(1, 10, 0.5)];
        assert_eq!(filter_relations(&all_one).len(), 2);
        let unattainable: Vec<_> = all_one.iter().map(|s| s.with_mu(1.1)).collect();
        assert!(filter_relations(&unattainable).is_empty());
    }
}
