//! CompGCN-style relational graph encoder with a DistMult decoder.
//!
//! Each layer sums direction-typed messages into every node:
//!
//! ```text
//! h_v' = f( W_orig Σ_{(u,r,v)} φ(h_u, h_r)
//!         + W_inv  Σ_{(v,r,u)} φ(h_u, h_{r⁻¹})
//!         + W_self φ(h_v, h_loop) )
//! h_r' = W_rel h_r
//! ```
//!
//! Inverse relations and the self-loop relation are synthesized here, so the
//! relation table holds `2·|R| + 1` rows: originals, inverses, then the loop.
//! Training is full-batch gradient descent on binary cross-entropy with
//! gradients computed by hand; message sums run in a fixed edge order so
//! results are bit-reproducible.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::KnowledgeGraph;
use crate::util;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: {0} vs {1}")]
    Shape(usize, usize),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("graph has no triples")]
    EmptyGraph,
    #[error("non-finite loss at epoch {epoch} (learning rate {learning_rate} is likely too high)")]
    NonFiniteLoss { epoch: usize, learning_rate: f64 },
    #[error("embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    #[default]
    Mult,
    Sub,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub composition: Composition,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 1,
            composition: Composition::Mult,
            activation: Activation::Tanh,
            learning_rate: 0.05,
            epochs: 200,
            negatives_per_positive: 4,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim == 0 {
            return Err(EmbedError::Config("dim must be >= 1".into()));
        }
        if !(1..=2).contains(&self.layers) {
            return Err(EmbedError::Config("layers must be 1 or 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(EmbedError::Config("learning_rate must be > 0".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(EmbedError::Config("negatives_per_positive must be >= 1".into()));
        }
        Ok(())
    }
}

/// `φ(entity, relation)`: elementwise product (`mult`) or difference (`sub`).
pub fn compose(entity: &[f64], relation: &[f64], op: Composition) -> Result<Vec<f64>, EmbedError> {
    if entity.len() != relation.len() {
        return Err(EmbedError::Shape(entity.len(), relation.len()));
    }
    Ok(match op {
        Composition::Mult => entity.iter().zip(relation).map(|(a, r)| a * r).collect(),
        Composition::Sub => entity.iter().zip(relation).map(|(a, r)| a - r).collect(),
    })
}

fn compose_add_into(out: &mut [f64], entity: &[f64], relation: &[f64], op: Composition) {
    match op {
        Composition::Mult => {
            for ((o, a), r) in out.iter_mut().zip(entity).zip(relation) {
                *o += a * r;
            }
        }
        Composition::Sub => {
            for ((o, a), r) in out.iter_mut().zip(entity).zip(relation) {
                *o += a - r;
            }
        }
    }
}

/// Backpropagates `d_out` through `φ(entity, relation)`.
fn compose_backward(
    d_out: &[f64],
    entity: &[f64],
    relation: &[f64],
    op: Composition,
    d_entity: &mut [f64],
    d_relation: &mut [f64],
) {
    match op {
        Composition::Mult => {
            for i in 0..d_out.len() {
                d_entity[i] += d_out[i] * relation[i];
                d_relation[i] += d_out[i] * entity[i];
            }
        }
        Composition::Sub => {
            for i in 0..d_out.len() {
                d_entity[i] += d_out[i];
                d_relation[i] -= d_out[i];
            }
        }
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, EmbedError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(EmbedError::Shape(cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, EmbedError> {
        if data.len() != rows * cols {
            return Err(EmbedError::Shape(rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `out += self · x`
    pub(crate) fn matvec_add(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o += util::dot(self.row(i), x);
        }
    }

    /// `out += selfᵀ · y`
    pub(crate) fn tmatvec_add(&self, y: &[f64], out: &mut [f64]) {
        for (i, &yi) in y.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += w * yi;
            }
        }
    }

    /// `self += a · bᵀ`
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        for (i, &ai) in a.iter().enumerate() {
            for (m, bj) in self.row_mut(i).iter_mut().zip(b) {
                *m += ai * bj;
            }
        }
    }

    pub(crate) fn axpy(&mut self, alpha: f64, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub w_orig: Matrix,
    pub w_inv: Matrix,
    pub w_self: Matrix,
    pub w_rel: Matrix,
}

impl LayerWeights {
    pub fn identity(dim: usize) -> Self {
        Self {
            w_orig: Matrix::identity(dim),
            w_inv: Matrix::identity(dim),
            w_self: Matrix::identity(dim),
            w_rel: Matrix::identity(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            w_orig: Matrix::zeros(dim, dim),
            w_inv: Matrix::zeros(dim, dim),
            w_self: Matrix::zeros(dim, dim),
            w_rel: Matrix::zeros(dim, dim),
        }
    }

    fn matrices_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w_orig, &mut self.w_inv, &mut self.w_self, &mut self.w_rel]
    }

    fn matrices(&self) -> [&Matrix; 4] {
        [&self.w_orig, &self.w_inv, &self.w_self, &self.w_rel]
    }
}

/// Trainable parameters. `relation` holds `2·|R| + 1` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub entity: Matrix,
    pub relation: Matrix,
    pub layers: Vec<LayerWeights>,
}

impl EncoderParams {
    fn zeros_like(other: &Self) -> Self {
        Self {
            entity: Matrix::zeros(other.entity.rows, other.entity.cols),
            relation: Matrix::zeros(other.relation.rows, other.relation.cols),
            layers: other.layers.iter().map(|l| LayerWeights::zeros(l.w_orig.rows)).collect(),
        }
    }

    /// Every scalar parameter, in a fixed order.
    pub fn scalars_mut(&mut self) -> Vec<&mut f64> {
        let mut out: Vec<&mut f64> = Vec::new();
        out.extend(self.entity.data.iter_mut());
        out.extend(self.relation.data.iter_mut());
        for l in &mut self.layers {
            for m in l.matrices_mut() {
                out.extend(m.data.iter_mut());
            }
        }
        out
    }

    pub fn scalars(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.entity.data);
        out.extend_from_slice(&self.relation.data);
        for l in &self.layers {
            for m in l.matrices() {
                out.extend_from_slice(&m.data);
            }
        }
        out
    }

    pub(crate) fn axpy(&mut self, alpha: f64, other: &Self) {
        self.entity.axpy(alpha, &other.entity);
        self.relation.axpy(alpha, &other.relation);
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (ma, mb) in a.matrices_mut().into_iter().zip(b.matrices()) {
                ma.axpy(alpha, mb);
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.entity.is_finite()
            && self.relation.is_finite()
            && self.layers.iter().all(|l| l.matrices().iter().all(|m| m.is_finite()))
    }
}

struct LayerCache {
    s_orig: Matrix,
    s_inv: Matrix,
    s_self: Matrix,
    out_h: Matrix,
}

/// Encoder outputs: node states and the full `2·|R| + 1` relation table.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub entity: Matrix,
    pub relation: Matrix,
}

/// One training example for the decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub head: u32,
    pub rel: u32,
    pub tail: u32,
    pub label: f64,
}

/// Message-passing structure derived from a graph.
pub struct Encoder {
    cfg: EncoderConfig,
    n_entities: usize,
    n_relations: usize,
    /// Distinct triples as (head, rel, tail), sorted.
    triples: Vec<(u32, u32, u32)>,
    /// Original-direction edges sorted by (target, rel, source).
    orig_edges: Vec<(u32, u32, u32)>,
}

impl Encoder {
    pub fn new(g: &KnowledgeGraph, cfg: &EncoderConfig) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let triples: BTreeSet<(u32, u32, u32)> = g
            .triples()
            .iter()
            .map(|t| (t.head.0, t.rel.0, t.tail.0))
            .collect();
        let triples: Vec<_> = triples.into_iter().collect();
        let mut orig_edges: Vec<_> = triples.iter().map(|&(h, r, t)| (t, r, h)).collect();
        orig_edges.sort_unstable();
        Ok(Self {
            cfg: cfg.clone(),
            n_entities: g.num_entities(),
            n_relations: g.num_relations(),
            triples,
            orig_edges,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn loop_row(&self) -> usize {
        2 * self.n_relations
    }

    /// Seeded initialization: embeddings from uniform(−0.1, 0.1), weight
    /// matrices as identity plus uniform(−0.1, 0.1) noise.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> EncoderParams {
        let d = self.cfg.dim;
        let entity = Matrix::uniform(self.n_entities, d, 1.0, rng);
        let relation = Matrix::uniform(2 * self.n_relations + 1, d, 1.0, rng);
        let layers = (0..self.cfg.layers)
            .map(|_| {
                let mut lw = LayerWeights::identity(d);
                for m in lw.matrices_mut() {
                    let noise = Matrix::uniform(d, d, 0.1, rng);
                    m.axpy(1.0, &noise);
                }
                lw
            })
            .collect();
        EncoderParams {
            entity,
            relation,
            layers,
        }
    }

    fn check_shapes(&self, p: &EncoderParams) -> Result<(), EmbedError> {
        let d = self.cfg.dim;
        if p.entity.rows != self.n_entities || p.entity.cols != d {
            return Err(EmbedError::Shape(self.n_entities * d, p.entity.rows * p.entity.cols));
        }
        let nr = 2 * self.n_relations + 1;
        if p.relation.rows != nr || p.relation.cols != d {
            return Err(EmbedError::Shape(nr * d, p.relation.rows * p.relation.cols));
        }
        if p.layers.len() != self.cfg.layers {
            return Err(EmbedError::Shape(self.cfg.layers, p.layers.len()));
        }
        for l in &p.layers {
            for m in l.matrices() {
                if m.rows != d || m.cols != d {
                    return Err(EmbedError::Shape(d * d, m.rows * m.cols));
                }
            }
        }
        Ok(())
    }

    fn layer_forward(&self, lw: &LayerWeights, h: &Matrix, r: &Matrix) -> (LayerCache, Matrix) {
        let d = self.cfg.dim;
        let n = self.n_entities;
        let op = self.cfg.composition;
        let mut s_orig = Matrix::zeros(n, d);
        let mut s_inv = Matrix::zeros(n, d);
        let mut s_self = Matrix::zeros(n, d);
        for &(t, rel, src) in &self.orig_edges {
            compose_add_into(s_orig.row_mut(t as usize), h.row(src as usize), r.row(rel as usize), op);
        }
        for &(src_h, rel, t) in &self.triples {
            let inv = rel as usize + self.n_relations;
            compose_add_into(s_inv.row_mut(src_h as usize), h.row(t as usize), r.row(inv), op);
        }
        let loop_rel = r.row(self.loop_row());
        for v in 0..n {
            compose_add_into(s_self.row_mut(v), h.row(v), loop_rel, op);
        }
        let mut out_h = Matrix::zeros(n, d);
        for v in 0..n {
            let out = out_h.row_mut(v);
            lw.w_orig.matvec_add(s_orig.row(v), out);
            lw.w_inv.matvec_add(s_inv.row(v), out);
            lw.w_self.matvec_add(s_self.row(v), out);
            for x in out.iter_mut() {
                *x = self.cfg.activation.apply(*x);
            }
        }
        let mut out_r = Matrix::zeros(r.rows, d);
        for k in 0..r.rows {
            lw.w_rel.matvec_add(r.row(k), out_r.row_mut(k));
        }
        (
            LayerCache {
                s_orig,
                s_inv,
                s_self,
                out_h,
            },
            out_r,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        lw: &LayerWeights,
        cache: &LayerCache,
        h_in: &Matrix,
        r_in: &Matrix,
        d_out_h: &Matrix,
        d_out_r: &Matrix,
        grads: &mut LayerWeights,
    ) -> (Matrix, Matrix) {
        let d = self.cfg.dim;
        let n = self.n_entities;
        let op = self.cfg.composition;
        let mut d_s_orig = Matrix::zeros(n, d);
        let mut d_s_inv = Matrix::zeros(n, d);
        let mut d_s_self = Matrix::zeros(n, d);
        let mut d_pre = vec![0.0; d];
        for v in 0..n {
            for ((dp, g), y) in d_pre.iter_mut().zip(d_out_h.row(v)).zip(cache.out_h.row(v)) {
                *dp = g * self.cfg.activation.derivative_from_output(*y);
            }
            grads.w_orig.add_outer(&d_pre, cache.s_orig.row(v));
            grads.w_inv.add_outer(&d_pre, cache.s_inv.row(v));
            grads.w_self.add_outer(&d_pre, cache.s_self.row(v));
            lw.w_orig.tmatvec_add(&d_pre, d_s_orig.row_mut(v));
            lw.w_inv.tmatvec_add(&d_pre, d_s_inv.row_mut(v));
            lw.w_self.tmatvec_add(&d_pre, d_s_self.row_mut(v));
        }

        let mut d_h = Matrix::zeros(n, d);
        let mut d_r = Matrix::zeros(r_in.rows, d);
        for k in 0..r_in.rows {
            grads.w_rel.add_outer(d_out_r.row(k), r_in.row(k));
            lw.w_rel.tmatvec_add(d_out_r.row(k), d_r.row_mut(k));
        }

        let mut tmp_h = vec![0.0; d];
        let mut tmp_r = vec![0.0; d];
        let mut scatter = |d_h: &mut Matrix, d_r: &mut Matrix, dc: &[f64], src: usize, rel: usize| {
            tmp_h.iter_mut().for_each(|x| *x = 0.0);
            tmp_r.iter_mut().for_each(|x| *x = 0.0);
            compose_backward(dc, h_in.row(src), r_in.row(rel), op, &mut tmp_h, &mut tmp_r);
            for (a, b) in d_h.row_mut(src).iter_mut().zip(&tmp_h) {
                *a += b;
            }
            for (a, b) in d_r.row_mut(rel).iter_mut().zip(&tmp_r) {
                *a += b;
            }
        };
        for &(t, rel, src) in &self.orig_edges {
            scatter(&mut d_h, &mut d_r, d_s_orig.row(t as usize), src as usize, rel as usize);
        }
        for &(h, rel, t) in &self.triples {
            let inv = rel as usize + self.n_relations;
            scatter(&mut d_h, &mut d_r, d_s_inv.row(h as usize), t as usize, inv);
        }
        let loop_row = self.loop_row();
        for v in 0..n {
            scatter(&mut d_h, &mut d_r, d_s_self.row(v), v, loop_row);
        }
        (d_h, d_r)
    }

    fn forward_cached(&self, p: &EncoderParams) -> (Vec<(LayerCache, Matrix)>, EncoderOutput) {
        let mut caches = Vec::with_capacity(p.layers.len());
        let mut h = p.entity.clone();
        let mut r = p.relation.clone();
        for lw in &p.layers {
            let (cache, out_r) = self.layer_forward(lw, &h, &r);
            let out_h = cache.out_h.clone();
            caches.push((cache, out_r.clone()));
            h = out_h;
            r = out_r;
        }
        (caches, EncoderOutput { entity: h, relation: r })
    }

    /// Runs all layers.
    pub fn forward(&self, p: &EncoderParams) -> Result<EncoderOutput, EmbedError> {
        self.check_shapes(p)?;
        Ok(self.forward_cached(p).1)
    }

    /// Observed triples (label 1) followed, per triple, by uniformly
    /// tail-corrupted negatives (label 0).
    pub fn sample_training_set(&self, rng: &mut ChaCha8Rng) -> Vec<Sample> {
        let mut out = Vec::with_capacity(self.triples.len() * (1 + self.cfg.negatives_per_positive));
        for &(h, r, t) in &self.triples {
            out.push(Sample {
                head: h,
                rel: r,
                tail: t,
                label: 1.0,
            });
        }
        for &(h, r, _) in &self.triples {
            for _ in 0..self.cfg.negatives_per_positive {
                let tail = rng.random_range(0..self.n_entities as u32);
                out.push(Sample {
                    head: h,
                    rel: r,
                    tail,
                    label: 0.0,
                });
            }
        }
        out
    }

    /// Mean binary cross-entropy of DistMult scores on encoder outputs.
    pub fn loss(&self, p: &EncoderParams, samples: &[Sample]) -> f64 {
        let out = self.forward_cached(p).1;
        bce_loss(&out, samples, None)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, p: &EncoderParams, samples: &[Sample]) -> (f64, EncoderParams) {
        let (caches, out) = self.forward_cached(p);
        let d = self.cfg.dim;
        let mut d_h = Matrix::zeros(self.n_entities, d);
        let mut d_r = Matrix::zeros(out.relation.rows, d);
        let loss = bce_loss(&out, samples, Some((&mut d_h, &mut d_r)));

        let mut grads = EncoderParams::zeros_like(p);
        for li in (0..p.layers.len()).rev() {
            let (h_in, r_in) = if li == 0 {
                (&p.entity, &p.relation)
            } else {
                (&caches[li - 1].0.out_h, &caches[li - 1].1)
            };
            let (dh, dr) = self.layer_backward(
                &p.layers[li],
                &caches[li].0,
                h_in,
                r_in,
                &d_h,
                &d_r,
                &mut grads.layers[li],
            );
            d_h = dh;
            d_r = dr;
        }
        grads.entity = d_h;
        grads.relation = d_r;
        (loss, grads)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn distmult(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    h.iter().zip(r).zip(t).map(|((a, b), c)| a * b * c).sum()
}

fn bce_loss(out: &EncoderOutput, samples: &[Sample], grads: Option<(&mut Matrix, &mut Matrix)>) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let k = samples.len() as f64;
    let mut total = 0.0;
    let mut grads = grads;
    for s in samples {
        let h = out.entity.row(s.head as usize);
        let r = out.relation.row(s.rel as usize);
        let t = out.entity.row(s.tail as usize);
        let score = distmult(h, r, t);
        total += softplus(score) - s.label * score;
        if let Some((d_h, d_r)) = grads.as_mut() {
            let g = (sigmoid(score) - s.label) / k;
            let dim = h.len();
            for i in 0..dim {
                let (hi, ri, ti) = (h[i], r[i], t[i]);
                d_h.row_mut(s.head as usize)[i] += g * ri * ti;
                d_h.row_mut(s.tail as usize)[i] += g * ri * hi;
                d_r.row_mut(s.rel as usize)[i] += g * hi * ti;
            }
        }
    }
    total / k
}

/// Runs the encoder forward pass with explicit parameters.
pub fn encode(
    g: &KnowledgeGraph,
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<EncoderOutput, EmbedError> {
    Encoder::new(g, cfg)?.forward(params)
}

/// Trained entity and relation vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub entity_vecs: Matrix,
    pub relation_vecs: Matrix,
    pub config: EncoderConfig,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
}

impl EmbeddingTable {
    /// Wraps precomputed matrices (no training metadata).
    pub fn from_matrices(entity_vecs: Matrix, relation_vecs: Matrix, config: EncoderConfig) -> Self {
        Self {
            entity_vecs,
            relation_vecs,
            config,
            initial_loss: 0.0,
            final_loss: 0.0,
            loss_history: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.entity_vecs.cols()
    }

    pub fn entity(&self, e: crate::kg::EntityId) -> &[f64] {
        self.entity_vecs.row(e.index())
    }

    pub fn relation(&self, r: crate::kg::RelationId) -> &[f64] {
        self.relation_vecs.row(r.index())
    }

    pub fn is_finite(&self) -> bool {
        self.entity_vecs.is_finite() && self.relation_vecs.is_finite()
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let file = EmbeddingFile {
            header: EmbeddingHeader {
                format: EMBEDDING_FORMAT.into(),
                dim: self.dim(),
                n_entities: self.entity_vecs.rows(),
                n_relations: self.relation_vecs.rows(),
                seed: self.config.seed,
                config_hash: util::json_hash(&self.config),
            },
            config: self.config.clone(),
            initial_loss: self.initial_loss,
            final_loss: self.final_loss,
            loss_history: self.loss_history.clone(),
            entity_vecs: self.entity_vecs.as_slice().to_vec(),
            relation_vecs: self.relation_vecs.as_slice().to_vec(),
        };
        let bytes = serde_json::to_vec(&file).map_err(|e| EmbedError::Format(e.to_string()))?;
        util::atomic_write(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let bytes = fs::read(path)?;
        let file: EmbeddingFile =
            serde_json::from_slice(&bytes).map_err(|e| EmbedError::Format(e.to_string()))?;
        let h = &file.header;
        if h.format != EMBEDDING_FORMAT {
            return Err(EmbedError::Format(format!("unsupported format {}", h.format)));
        }
        if h.config_hash != util::json_hash(&file.config) {
            return Err(EmbedError::Format("config hash mismatch".into()));
        }
        Ok(Self {
            entity_vecs: Matrix::from_flat(h.n_entities, h.dim, file.entity_vecs)?,
            relation_vecs: Matrix::from_flat(h.n_relations, h.dim, file.relation_vecs)?,
            config: file.config,
            initial_loss: file.initial_loss,
            final_loss: file.final_loss,
            loss_history: file.loss_history,
        })
    }
}

const EMBEDDING_FORMAT: &str = "kg2mmkg-embeddings/1";

#[derive(Serialize, Deserialize)]
struct EmbeddingHeader {
    format: String,
    dim: usize,
    n_entities: usize,
    n_relations: usize,
    seed: u64,
    config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingFile {
    header: EmbeddingHeader,
    config: EncoderConfig,
    initial_loss: f64,
    final_loss: f64,
    loss_history: Vec<f64>,
    entity_vecs: Vec<f64>,
    relation_vecs: Vec<f64>,
}

/// Trains the encoder with full-batch gradient descent.
///
/// The negative set is drawn once from the seed, so the objective is a fixed
/// function of the parameters and `loss_history[i]` is the loss after `i + 1`
/// updates.
pub fn train(g: &KnowledgeGraph, cfg: &EncoderConfig) -> Result<EmbeddingTable, EmbedError> {
    if g.triples().is_empty() {
        return Err(EmbedError::EmptyGraph);
    }
    let enc = Encoder::new(g, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = enc.init_params(&mut rng);
    let samples = enc.sample_training_set(&mut rng);

    let (mut loss, mut grad) = enc.loss_and_grad(&params, &samples);
    if !loss.is_finite() {
        return Err(EmbedError::NonFiniteLoss {
            epoch: 0,
            learning_rate: cfg.learning_rate,
        });
    }
    let initial_loss = loss;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        params.axpy(-cfg.learning_rate, &grad);
        (loss, grad) = enc.loss_and_grad(&params, &samples);
        if !loss.is_finite() || !params.is_finite() {
            return Err(EmbedError::NonFiniteLoss {
                epoch,
                learning_rate: cfg.learning_rate,
            });
        }
        history.push(loss);
        if epoch % 50 == 0 {
            tracing::debug!(epoch, loss, "encoder training");
        }
    }

    let out = enc.forward(&params)?;
    let m = g.num_relations();
    let relation_vecs = Matrix::from_flat(m, cfg.dim, out.relation.as_slice()[..m * cfg.dim].to_vec())?;
    Ok(EmbeddingTable {
        entity_vecs: out.entity,
        relation_vecs,
        config: cfg.clone(),
        initial_loss,
        final_loss: loss,
        loss_history: history,
    })
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares analytic gradients of the training loss against central finite
/// differences at the seeded initial parameters. Returns the maximum
/// relative error over all parameters.
pub fn grad_check(g: &KnowledgeGraph, cfg: &EncoderConfig, epsilon: f64) -> Result<f64, EmbedError> {
    let enc = Encoder::new(g, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = enc.init_params(&mut rng);
    let samples = enc.sample_training_set(&mut rng);
    Ok(grad_check_at(&enc, &params, &samples, epsilon))
}

/// Finite-difference check at explicit parameters.
pub fn grad_check_at(enc: &Encoder, params: &EncoderParams, samples: &[Sample], epsilon: f64) -> f64 {
    let (_, grads) = enc.loss_and_grad(params, samples);
    let analytic = grads.scalars();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let orig = *probe.scalars_mut()[i];
        *probe.scalars_mut()[i] = orig + epsilon;
        let plus = enc.loss(&probe, samples);
        *probe.scalars_mut()[i] = orig - epsilon;
        let minus = enc.loss(&probe, samples);
        *probe.scalars_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(*a, numeric));
    }
    worst
}
