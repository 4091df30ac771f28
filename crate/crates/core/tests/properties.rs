use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::PathBuf;

use proptest::prelude::*;

use kg2mmkg_core::annotation::{self, Candidate, Criterion, Rating, Store};
use kg2mmkg_core::embed::{Composition, EmbeddingTable, EncoderConfig, Matrix};
use kg2mmkg_core::evalmetrics::{fid, FeatureSet};
use kg2mmkg_core::kg::{EntityId, KnowledgeGraph, RelationId, Split, Triple, Vocabulary};
use kg2mmkg_core::mmkgc::{evaluate, Setting, TripleScorer};
use kg2mmkg_core::sns::select_neighbors;
use kg2mmkg_core::vns::{filter_relations, RelationVisScore, VisualizationSample};

fn graph(n: usize, m: usize, edges: &[(usize, usize, usize)]) -> KnowledgeGraph {
    let mut seen = HashSet::new();
    let parts = edges
        .iter()
        .map(|&(h, r, t)| Triple::new(EntityId((h % n) as u32), RelationId((r % m) as u32), EntityId((t % n) as u32)))
        .filter(|t| seen.insert(*t))
        .map(|t| (t, Split::Train))
        .collect();
    KnowledgeGraph::from_parts(
        Vocabulary::from_labels((0..n).map(|i| format!("e{i}"))),
        Vocabulary::from_labels((0..m).map(|i| format!("r{i}"))),
        parts,
    )
    .unwrap()
}

fn table(n: usize, m: usize, dim: usize, values: &[f64], op: Composition) -> EmbeddingTable {
    let take = |rows: usize, offset: usize| {
        Matrix::from_flat(rows, dim, (0..rows * dim).map(|i| values[(offset + i) % values.len()]).collect()).unwrap()
    };
    EmbeddingTable::from_matrices(
        take(n, 0),
        take(m, n * dim),
        EncoderConfig {
            dim,
            composition: op,
            ..Default::default()
        },
    )
}

fn sns_case() -> impl Strategy<Value = (usize, usize, usize, Vec<(usize, usize, usize)>, Vec<f64>, bool)> {
    (2usize..30, 1usize..5, 1usize..6).prop_flat_map(|(n, m, dim)| {
        (
            Just(n),
            Just(m),
            Just(dim),
            prop::collection::vec((0..n, 0..m, 0..n), 1..80),
            prop::collection::vec(-1.0f64..1.0, 16..64),
            any::<bool>(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sns_groups_are_consistent((n, m, dim, edges, values, sub) in sns_case()) {
        let g = graph(n, m, &edges);
        let op = if sub { Composition::Sub } else { Composition::Mult };
        let emb = table(n, m, dim, &values, op);
        let allowed: BTreeSet<RelationId> = (0..m as u32).map(RelationId).collect();
        for h in 0..n as u32 {
            let s = select_neighbors(&g, &emb, EntityId(h), &allowed).unwrap();
            for grp in s.groups.values() {
                prop_assert!(!grp.scores.is_empty());
                prop_assert!(!grp.selected.is_empty());
                let sims: Vec<f64> = grp.scores.iter().map(|x| x.sim).collect();
                let lo = sims.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo <= grp.group_mean && grp.group_mean <= hi);
                prop_assert!(sims.iter().all(|s| (-1.0 - 1e-12..=1.0 + 1e-12).contains(s)));
                let best = grp.scores.iter().find(|x| x.sim == hi).unwrap().tail;
                prop_assert!(grp.selected.contains(&best));
                let tails: HashSet<_> = grp.scores.iter().map(|x| x.tail).collect();
                prop_assert_eq!(tails.len(), grp.scores.len());
            }
        }
    }

    #[test]
    fn sns_respects_the_allowed_set((n, m, dim, edges, values, _) in sns_case(), mask in any::<u8>()) {
        let g = graph(n, m, &edges);
        let emb = table(n, m, dim, &values, Composition::Mult);
        let allowed: BTreeSet<RelationId> = (0..m as u32).filter(|r| mask & (1 << r) != 0).map(RelationId).collect();
        let all: BTreeSet<RelationId> = (0..m as u32).map(RelationId).collect();
        for h in 0..n as u32 {
            let part = select_neighbors(&g, &emb, EntityId(h), &allowed).unwrap();
            let full = select_neighbors(&g, &emb, EntityId(h), &all).unwrap();
            prop_assert!(part.groups.keys().all(|r| allowed.contains(r)));
            for (r, grp) in &part.groups {
                prop_assert_eq!(grp, &full.groups[r]);
            }
        }
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative(
        a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..12),
        b in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..12),
    ) {
        let (fa, fb) = (FeatureSet::new(&a, "a").unwrap(), FeatureSet::new(&b, "b").unwrap());
        let ab = fid(&fa, &fb).unwrap();
        let ba = fid(&fb, &fa).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab.abs()));
        prop_assert!(fid(&fa, &fa).unwrap() < 1e-6);
    }

    #[test]
    fn fid_of_shifted_sets_is_the_squared_shift(
        a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 2..10),
        shift in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
        let d = fid(&FeatureSet::new(&a, "a").unwrap(), &FeatureSet::new(&b, "b").unwrap()).unwrap();
        let expected: f64 = shift.iter().map(|s| s * s).sum();
        prop_assert!((d - expected).abs() < 1e-6, "{} vs {}", d, expected);
    }

    #[test]
    fn raising_mu_shrinks_the_visualizable_set(
        fractions in prop::collection::vec((0usize..=10, 1usize..=10), 1..8),
        mus in prop::collection::vec(0.0f64..1.0, 2..6),
    ) {
        let scores: Vec<RelationVisScore> = fractions
            .iter()
            .enumerate()
            .map(|(i, &(pos, n))| {
                let pos = pos.min(n);
                let samples = (0..n)
                    .map(|j| VisualizationSample {
                        triple: Triple::new(EntityId(0), RelationId(i as u32), EntityId(j as u32)),
                        text: String::new(),
                        image_sha256: String::new(),
                        reward: if j < pos { 1.0 } else { -1.0 },
                        r_score: u8::from(j < pos),
                    })
                    .collect();
                RelationVisScore::from_samples(RelationId(i as u32), format!("r{i}"), samples, vec![], 0.5)
            })
            .collect();
        let mut mus = mus;
        mus.sort_by(f64::total_cmp);
        let sets: Vec<BTreeSet<RelationId>> = mus
            .iter()
            .map(|&mu| filter_relations(&scores.iter().map(|s| s.with_mu(mu)).collect::<Vec<_>>()))
            .collect();
        for w in sets.windows(2) {
            prop_assert!(w[1].is_subset(&w[0]));
        }
    }

    #[test]
    fn hits_are_monotone_on_random_scorers(
        edges in prop::collection::vec((0usize..6, 0usize..2, 0usize..6), 4..20),
        scores in prop::collection::vec(-2i8..3, 72),
    ) {
        let g = {
            let base = graph(6, 2, &edges);
            let tagged = base.triples().iter().enumerate().map(|(i, t)| (*t, if i % 3 == 0 { Split::Test } else { Split::Train })).collect();
            KnowledgeGraph::from_parts(base.entities().clone(), base.relations().clone(), tagged).unwrap()
        };
        prop_assume!(g.triples_in(Split::Test).count() > 0);
        let scorer = TableScorer(scores);
        for setting in [Setting::Raw, Setting::Filtered] {
            let r = evaluate(&g, &scorer, setting).unwrap();
            prop_assert!(r.hits_monotone());
            prop_assert!(r.mrr > 0.0 && r.mrr <= 1.0);
        }
        let raw = evaluate(&g, &scorer, Setting::Raw).unwrap();
        let filtered = evaluate(&g, &scorer, Setting::Filtered).unwrap();
        prop_assert!(filtered.mrr >= raw.mrr);
    }

    #[test]
    fn aggregation_ignores_submission_order(order in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle(), perms in prop::collection::vec(0usize..6, 12)) {
        const PERMS: [[u32; 3]; 6] = [[1, 2, 3], [1, 3, 2], [2, 1, 3], [2, 3, 1], [3, 1, 2], [3, 2, 1]];
        let sources: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let candidates = (0..2)
            .map(|i| Candidate {
                entity: format!("e{i}"),
                name: format!("e{i}"),
                facts: vec![],
                images: sources.iter().map(|s| (s.clone(), PathBuf::from(s))).collect(),
            })
            .collect();
        let (session, _) = annotation::create_session("s1", "t", candidates, &sources, 2, 0).unwrap();
        let items: Vec<String> = session.items.iter().map(|i| i.id.clone()).collect();
        let ratings: Vec<Rating> = (0..12)
            .map(|i| Rating {
                session: "s1".into(),
                annotator: format!("a{}", i % 2),
                item: items[(i / 2) % 2].clone(),
                criterion: Criterion::ALL[i / 4],
                ranking: PERMS[perms[i]].to_vec(),
            })
            .collect();
        let run = |idx: &[usize]| {
            let mut store = Store::in_memory();
            store.add_session(session.clone()).unwrap();
            for &i in idx {
                store.submit(ratings[i].clone()).unwrap();
            }
            store.aggregate("s1").unwrap()
        };
        let natural = run(&(0..12).collect::<Vec<_>>());
        prop_assert!(natural.rank_sums_conserved);
        prop_assert_eq!(run(&order), natural.clone());
        for by_source in natural.means.values() {
            let total: f64 = by_source.values().sum();
            prop_assert!((total - 6.0).abs() < 1e-12);
        }
    }
}

struct TableScorer(Vec<i8>);

impl TripleScorer for TableScorer {
    fn num_entities(&self) -> usize {
        6
    }

    fn score(&self, h: EntityId, r: RelationId, t: EntityId) -> f64 {
        self.0[(h.index() * 2 + r.index()) * 6 + t.index()] as f64
    }
}

#[test]
fn duplicate_edges_across_splits_count_once() {
    let parts = vec![
        (Triple::new(EntityId(0), RelationId(0), EntityId(1)), Split::Train),
        (Triple::new(EntityId(0), RelationId(0), EntityId(2)), Split::Train),
        (Triple::new(EntityId(0), RelationId(0), EntityId(1)), Split::Test),
    ];
    let g = KnowledgeGraph::from_parts(
        Vocabulary::from_labels(["h", "a", "b"]),
        Vocabulary::from_labels(["r"]),
        parts,
    )
    .unwrap();
    let emb = table(3, 1, 2, &[1.0, 0.0, 1.0, 0.1, 0.0, 1.0, 1.0, 1.0], Composition::Mult);
    let s = select_neighbors(&g, &emb, EntityId(0), &BTreeSet::from([RelationId(0)])).unwrap();
    let grp = &s.groups[&RelationId(0)];
    assert_eq!(grp.scores.len(), 2);
    let counts: HashMap<EntityId, usize> = grp.scores.iter().fold(HashMap::new(), |mut m, x| {
        *m.entry(x.tail).or_default() += 1;
        m
    });
    assert!(counts.values().all(|&c| c == 1));
}
