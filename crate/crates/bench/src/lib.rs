//! Seeded fixtures shared by the benchmarks.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kg2mmkg_core::embed::{EmbeddingTable, EncoderConfig, Matrix};
use kg2mmkg_core::kg::{EntityId, KnowledgeGraph, RelationId, Split, Triple, Vocabulary};

/// `n` entities, `m` relations and about `edges` distinct triples, one in ten
/// held out for testing.
pub fn random_graph(n: usize, m: usize, edges: usize, seed: u64) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut parts = Vec::with_capacity(edges);
    for _ in 0..edges {
        let t = Triple::new(
            EntityId(rng.random_range(0..n) as u32),
            RelationId(rng.random_range(0..m) as u32),
            EntityId(rng.random_range(0..n) as u32),
        );
        if seen.insert(t) {
            let split = if parts.len() % 10 == 9 { Split::Test } else { Split::Train };
            parts.push((t, split));
        }
    }
    KnowledgeGraph::from_parts(
        Vocabulary::from_labels((0..n).map(|i| format!("e{i}"))),
        Vocabulary::from_labels((0..m).map(|i| format!("r{i}"))),
        parts,
    )
    .expect("generated graph is consistent")
}

pub fn random_rows(rows: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Random embeddings covering every entity and relation of `g`.
pub fn random_table(g: &KnowledgeGraph, dim: usize, seed: u64) -> EmbeddingTable {
    let ent = Matrix::from_rows(&random_rows(g.num_entities(), dim, seed)).expect("rows");
    let rel = Matrix::from_rows(&random_rows(g.num_relations(), dim, seed + 1)).expect("rows");
    EmbeddingTable::from_matrices(
        ent,
        rel,
        EncoderConfig {
            dim,
            ..Default::default()
        },
    )
}
