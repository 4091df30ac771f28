//! Deterministic stand-ins for the model services.
//!
//! The mock text-to-image model paints a 4×4 grid of colour cells whose values
//! are driven by the prompt's words, plus per-pixel noise keyed by the full
//! prompt and seed. The mock embedder reads the cell means back and projects
//! them, and embeds text through the same word-to-cell mapping, so prompts
//! sharing words yield similar images and text/image embeddings are aligned.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use image::{ImageEncoder, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    decode_png, BackendError, BackendResult, Embedder, ImageArtifact, ImageGenerator, LanguageModel,
    RewardModel,
};
use crate::prompts;
use crate::util::hash64;

const GRID: usize = 4;
const CELL_FEATURES: usize = GRID * GRID * 3;
const AMPLITUDE: f64 = 110.0;
const NOISE: i32 = 6;

#[derive(Debug, Default)]
struct FaultGate {
    fail_after: Option<u64>,
    served: AtomicU64,
}

impl FaultGate {
    fn check(&self) -> BackendResult<()> {
        if let Some(limit) = self.fail_after {
            if self.served.fetch_add(1, Ordering::SeqCst) >= limit {
                return Err(BackendError::Server {
                    status: 503,
                    error: "unavailable".into(),
                    detail: "injected mock failure".into(),
                });
            }
        }
        Ok(())
    }
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Per-cell colour targets in (−1, 1) for a text.
fn cell_targets(text: &str) -> [f64; CELL_FEATURES] {
    let mut acc = [0.0; CELL_FEATURES];
    let mut n = 0usize;
    for tok in tokens(text) {
        let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[b"token", tok.as_bytes()]));
        for a in acc.iter_mut() {
            *a += rng.random_range(-1.0..1.0);
        }
        n += 1;
    }
    if n > 0 {
        let scale = 1.0 / (n as f64).sqrt();
        for a in acc.iter_mut() {
            *a = (*a * scale * 1.5).tanh();
        }
    }
    acc
}

fn cell_of(x: u32, y: u32, width: u32, height: u32) -> usize {
    let cx = (x as usize * GRID) / width as usize;
    let cy = (y as usize * GRID) / height as usize;
    cy * GRID + cx
}

pub struct MockImageGenerator {
    seed: u64,
    gate: FaultGate,
    latency: Duration,
}

impl MockImageGenerator {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            gate: FaultGate::default(),
            latency: Duration::ZERO,
        }
    }

    pub fn with_fail_after(mut self, fail_after: Option<u64>) -> Self {
        self.gate.fail_after = fail_after;
        self
    }

    /// Sleeps this long before each generation.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Renders the PNG bytes without fault injection.
    pub fn render(&self, prompt: &str, seed: u64, width: u32, height: u32) -> Vec<u8> {
        let targets = cell_targets(prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[
            b"image",
            prompt.as_bytes(),
            &seed.to_le_bytes(),
            &self.seed.to_le_bytes(),
        ]));
        let mut img = RgbImage::new(width, height);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let cell = cell_of(x, y, width, height);
            for c in 0..3 {
                let base = 128.0 + AMPLITUDE * targets[cell * 3 + c];
                let noisy = base.round() as i32 + rng.random_range(-NOISE..=NOISE);
                px[c] = noisy.clamp(0, 255) as u8;
            }
        }
        let mut bytes = Vec::new();
        image::codecs::png::PngEncoder::new(&mut bytes)
            .write_image(img.as_raw(), width, height, image::ExtendedColorType::Rgb8)
            .expect("in-memory PNG encoding");
        bytes
    }
}

impl ImageGenerator for MockImageGenerator {
    fn generate(&self, prompt: &str, seed: u64, width: u32, height: u32) -> BackendResult<ImageArtifact> {
        self.gate.check()?;
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        if width == 0 || height == 0 {
            return Err(BackendError::InvalidRequest("image size must be positive".into()));
        }
        ImageArtifact::from_png(self.render(prompt, seed, width, height), seed, prompt)
    }

    fn model_info(&self) -> String {
        format!("mock-t2i(seed={})", self.seed)
    }
}

pub struct MockRewardModel {
    seed: u64,
    positive_rate: f64,
    gate: FaultGate,
}

impl MockRewardModel {
    pub fn new(seed: u64, positive_rate: f64) -> Self {
        Self {
            seed,
            positive_rate,
            gate: FaultGate::default(),
        }
    }

    pub fn with_fail_after(mut self, fail_after: Option<u64>) -> Self {
        self.gate.fail_after = fail_after;
        self
    }

    /// Score as a pure function of the text.
    pub fn score_text(&self, text: &str) -> f64 {
        let h = hash64(&[b"reward", &self.seed.to_le_bytes(), text.as_bytes()]);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        let m = hash64(&[b"magnitude", &h.to_le_bytes()]);
        let magnitude = 0.05 + (m >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.positive_rate {
            magnitude
        } else {
            -magnitude
        }
    }
}

impl RewardModel for MockRewardModel {
    fn score(&self, text: &str, _image: &ImageArtifact) -> BackendResult<f64> {
        self.gate.check()?;
        Ok(self.score_text(text))
    }
}

pub struct MockEmbedder {
    dim: usize,
    /// dim × (CELL_FEATURES + 1) projection, row-major; last column is a bias.
    projection: Vec<f64>,
    gate: FaultGate,
}

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[b"embed", &seed.to_le_bytes()]));
        let projection = (0..dim * (CELL_FEATURES + 1))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Self {
            dim,
            projection,
            gate: FaultGate::default(),
        }
    }

    pub fn with_fail_after(mut self, fail_after: Option<u64>) -> Self {
        self.gate.fail_after = fail_after;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn project(&self, features: &[f64; CELL_FEATURES]) -> Vec<f64> {
        let cols = CELL_FEATURES + 1;
        (0..self.dim)
            .map(|i| {
                let row = &self.projection[i * cols..(i + 1) * cols];
                row[..CELL_FEATURES]
                    .iter()
                    .zip(features)
                    .map(|(w, f)| w * f)
                    .sum::<f64>()
                    + row[CELL_FEATURES] * 0.25
            })
            .collect()
    }
}

impl Embedder for MockEmbedder {
    fn embed_image_raw(&self, png: &[u8]) -> BackendResult<Vec<f64>> {
        self.gate.check()?;
        let img = decode_png(png)?;
        let (w, h) = img.dimensions();
        let mut sums = [0.0; CELL_FEATURES];
        let mut counts = [0usize; GRID * GRID];
        for (x, y, px) in img.enumerate_pixels() {
            let cell = cell_of(x, y, w, h);
            counts[cell] += 1;
            for c in 0..3 {
                sums[cell * 3 + c] += px[c] as f64;
            }
        }
        let mut features = [0.0; CELL_FEATURES];
        for (i, f) in features.iter_mut().enumerate() {
            let n = counts[i / 3];
            if n > 0 {
                *f = (sums[i] / n as f64 - 128.0) / AMPLITUDE;
            }
        }
        Ok(self.project(&features))
    }

    fn embed_text_raw(&self, text: &str) -> BackendResult<Vec<f64>> {
        self.gate.check()?;
        Ok(self.project(&cell_targets(text)))
    }
}

/// Echoes a canned description assembled from the instruction's entity and facts.
#[derive(Default)]
pub struct MockLanguageModel {
    gate: FaultGate,
}

impl MockLanguageModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fail_after(mut self, fail_after: Option<u64>) -> Self {
        self.gate.fail_after = fail_after;
        self
    }
}

impl LanguageModel for MockLanguageModel {
    fn complete(&self, instruction: &str) -> BackendResult<String> {
        self.gate.check()?;
        let (label, facts) = prompts::parse_instruction(instruction)
            .ok_or_else(|| BackendError::Server {
                status: 400,
                error: "bad_instruction".into(),
                detail: "no entity line".into(),
            })?;
        let body = if facts.is_empty() {
            format!("A realistic photograph of {label}.")
        } else {
            format!("A realistic photograph of {label}, {}.", facts.join(", "))
        };
        Ok(format!("\"{body}\"\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::dot;

    #[test]
    fn same_prompt_and_seed_give_identical_images() {
        let g = MockImageGenerator::new(1);
        let a = g.generate("a red fox", 5, 32, 32).unwrap();
        let b = g.generate("a red fox", 5, 32, 32).unwrap();
        assert_eq!(a.sha256, b.sha256);
        assert!(a.verify());
        let c = g.generate("a red fox", 6, 32, 32).unwrap();
        assert_ne!(a.sha256, c.sha256);
    }

    #[test]
    fn one_character_edits_change_the_hash() {
        let g = MockImageGenerator::new(0);
        let mut collisions = 0;
        for i in 0..1000 {
            let p1 = format!("entity number {i} standing in a field");
            let p2 = format!("entity number {i} standing in a fielf");
            let a = g.generate(&p1, 0, 8, 8).unwrap();
            let b = g.generate(&p2, 0, 8, 8).unwrap();
            if a.sha256 == b.sha256 {
                collisions += 1;
            }
        }
        assert_eq!(collisions, 0);
    }

    #[test]
    fn requested_size_is_honoured() {
        let a = MockImageGenerator::new(0).generate("castle", 1, 512, 512).unwrap();
        assert_eq!((a.width, a.height), (512, 512));
    }

    #[test]
    fn reward_sign_follows_positive_rate() {
        let img = MockImageGenerator::new(0).generate("x", 0, 4, 4).unwrap();
        let all = MockRewardModel::new(3, 1.0);
        let none = MockRewardModel::new(3, 0.0);
        for i in 0..200 {
            let t = format!("text {i}");
            assert!(all.score(&t, &img).unwrap() > 0.0);
            assert!(none.score(&t, &img).unwrap() < 0.0);
        }
        let half = MockRewardModel::new(3, 0.5);
        let pos = (0..10_000)
            .filter(|i| half.score_text(&format!("sample text {i}")) > 0.0)
            .count();
        let frac = pos as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let e = MockEmbedder::new(0, 64);
        let img = MockImageGenerator::new(0).generate("a blue lake", 0, 16, 16).unwrap();
        let u = e.embed_image(&img.bytes).unwrap();
        let v = e.embed_image(&img.bytes).unwrap();
        assert_eq!(u.len(), 64);
        assert!((dot(&u, &u).sqrt() - 1.0).abs() < 1e-6);
        assert_eq!(u, v);
        assert!((dot(&u, &v) - 1.0).abs() < 1e-12);
        let t = e.embed_text("a blue lake").unwrap();
        assert!((dot(&t, &t).sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shared_words_make_images_closer() {
        let g = MockImageGenerator::new(0);
        let e = MockEmbedder::new(0, 64);
        let emb = |p: &str| e.embed_image(&g.generate(p, 0, 32, 32).unwrap().bytes).unwrap();
        let base = emb("Dary Holm starred in The Man Without Nerves");
        let near = emb("Dary Holm starred in The Man Without Nerves, a silent film");
        let far = emb("volcanic island chain in the pacific ocean");
        assert!(dot(&base, &near) > dot(&base, &far));
        let text = e.embed_text("Dary Holm starred in The Man Without Nerves").unwrap();
        assert!(dot(&text, &base) > 0.9);
    }

    #[test]
    fn fault_gate_fails_after_limit() {
        let g = MockImageGenerator::new(0).with_fail_after(Some(2));
        assert!(g.generate("a", 0, 4, 4).is_ok());
        assert!(g.generate("a", 0, 4, 4).is_ok());
        let err = g.generate("a", 0, 4, 4).unwrap_err();
        assert!(err.is_retryable());
    }

    #[test]
    fn mock_llm_echo_contains_label() {
        let instr = prompts::build_instruction("Julian Glover", &["starred in Tramps".to_string()], 60);
        let reply = MockLanguageModel::new().complete(&instr).unwrap();
        assert!(reply.contains("Julian Glover"));
        assert!(reply.contains("starred in Tramps"));
    }
}
