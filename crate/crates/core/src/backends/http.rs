use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendResult, Embedder, ImageArtifact, ImageGenerator, LanguageModel, RewardModel};

/// Blocking JSON-over-HTTP client for a model sidecar.
///
/// Retries and concurrency limits are applied by [`super::Guarded`].
pub struct HttpBackend {
    base_url: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    seed: u64,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct GenerateResponse {
    image_b64: String,
    #[serde(default)]
    model_info: serde_json::Value,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    text: &'a str,
    image_b64: String,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

#[derive(Serialize)]
#[serde(untagged)]
enum EmbedRequest<'a> {
    Image { image_b64: String },
    Text { text: &'a str },
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
    dim: usize,
}

#[derive(Serialize)]
struct CompleteRequest<'a> {
    instruction: &'a str,
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: String,
}

#[derive(Deserialize, Default)]
struct ErrorBody {
    #[serde(default)]
    error: String,
    #[serde(default)]
    detail: String,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> BackendResult<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            client,
        })
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> BackendResult<Resp> {
        let url = format!("{}{}", self.base_url, path);
        let resp = self.client.post(&url).json(body).send().map_err(map_reqwest)?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(map_reqwest)?;
        if !status.is_success() {
            let err: ErrorBody = serde_json::from_slice(&bytes).unwrap_or_default();
            return Err(BackendError::Server {
                status: status.as_u16(),
                error: err.error,
                detail: err.detail,
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| BackendError::Protocol(format!("{path}: {e}")))
    }

    fn embed(&self, req: EmbedRequest<'_>) -> BackendResult<Vec<f64>> {
        let resp: EmbedResponse = self.post("/embed", &req)?;
        if resp.vector.len() != resp.dim {
            return Err(BackendError::Protocol(format!(
                "embedding length {} != reported dim {}",
                resp.vector.len(),
                resp.dim
            )));
        }
        Ok(resp.vector)
    }
}

fn map_reqwest(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Transport(e.to_string())
    }
}

impl ImageGenerator for HttpBackend {
    fn generate(&self, prompt: &str, seed: u64, width: u32, height: u32) -> BackendResult<ImageArtifact> {
        let resp: GenerateResponse = self.post(
            "/generate",
            &GenerateRequest {
                prompt,
                seed,
                width,
                height,
            },
        )?;
        let bytes = B64
            .decode(resp.image_b64.as_bytes())
            .map_err(|e| BackendError::Protocol(format!("image_b64: {e}")))?;
        let art = ImageArtifact::from_png(bytes, seed, prompt)?;
        if (art.width, art.height) != (width, height) {
            return Err(BackendError::Protocol(format!(
                "requested {width}x{height}, got {}x{}",
                art.width, art.height
            )));
        }
        tracing::trace!(model_info = %resp.model_info, "generated image");
        Ok(art)
    }

    fn model_info(&self) -> String {
        format!("http({})", self.base_url)
    }
}

impl RewardModel for HttpBackend {
    fn score(&self, text: &str, image: &ImageArtifact) -> BackendResult<f64> {
        let resp: ScoreResponse = self.post(
            "/score",
            &ScoreRequest {
                text,
                image_b64: B64.encode(&image.bytes),
            },
        )?;
        if !resp.score.is_finite() {
            return Err(BackendError::Protocol("non-finite score".into()));
        }
        Ok(resp.score)
    }
}

impl Embedder for HttpBackend {
    fn embed_image_raw(&self, png: &[u8]) -> BackendResult<Vec<f64>> {
        self.embed(EmbedRequest::Image {
            image_b64: B64.encode(png),
        })
    }

    fn embed_text_raw(&self, text: &str) -> BackendResult<Vec<f64>> {
        self.embed(EmbedRequest::Text { text })
    }
}

impl LanguageModel for HttpBackend {
    fn complete(&self, instruction: &str) -> BackendResult<String> {
        let resp: CompleteResponse = self.post("/complete", &CompleteRequest { instruction })?;
        Ok(resp.text)
    }
}
