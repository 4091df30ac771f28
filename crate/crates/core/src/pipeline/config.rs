use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::{BackendEndpoint, EndpointMode};
use crate::embed::EncoderConfig;
use crate::mmkgc::KgcConfig;
use crate::prompts::DEFAULT_WORD_CAP;
use crate::util;
use crate::vns::VnsConfig;

use super::PipelineError;

/// Environment variables that switch a service to HTTP at the given URL.
pub const ENV_OVERRIDES: [(&str, Service); 4] = [
    ("KG2MMKG_T2I_URL", Service::T2i),
    ("KG2MMKG_REWARD_URL", Service::Reward),
    ("KG2MMKG_EMBED_URL", Service::Embed),
    ("KG2MMKG_LLM_URL", Service::Llm),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Service {
    T2i,
    Reward,
    Embed,
    Llm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Visualizable + structural neighbor selection.
    Vsns,
    /// Entity name only.
    NameOnly,
    /// Longest-token neighbor per relation.
    LongestToken,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Vsns, Method::NameOnly, Method::LongestToken];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vsns => "vsns",
            Method::NameOnly => "name-only",
            Method::LongestToken => "longest-token",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CachePolicy {
    #[default]
    Use,
    Refresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory with train.tsv and optional valid.tsv, test.tsv, labels.json.
    pub dir: PathBuf,
    /// Optional directory of real reference images, one subdirectory per entity.
    #[serde(default)]
    pub reals: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub cache: CachePolicy,
    /// Restrict targets to entities with at least one out-edge.
    pub heads_only: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cache: CachePolicy::Use,
            heads_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub word_cap: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            word_cap: DEFAULT_WORD_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    pub width: u32,
    pub height: u32,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Methods to generate and compare; `vsns` is always included.
    pub methods: Vec<Method>,
    pub paired_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            paired_only: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    #[serde(default)]
    pub t2i: BackendEndpoint,
    #[serde(default)]
    pub reward: BackendEndpoint,
    #[serde(default)]
    pub embed: BackendEndpoint,
    #[serde(default)]
    pub llm: BackendEndpoint,
}

impl BackendsConfig {
    pub fn endpoint_mut(&mut self, s: Service) -> &mut BackendEndpoint {
        match s {
            Service::T2i => &mut self.t2i,
            Service::Reward => &mut self.reward,
            Service::Embed => &mut self.embed,
            Service::Llm => &mut self.llm,
        }
    }
}

/// Settings that decide what a backend computes, for cache keys. Timeouts,
/// retry and fault-injection settings are excluded.
#[derive(Serialize)]
pub(crate) struct EndpointIdentity<'a> {
    kind: EndpointMode,
    url: Option<&'a str>,
    seed: u64,
    positive_rate: f64,
    dim: usize,
}

pub(crate) fn identity(ep: &BackendEndpoint) -> EndpointIdentity<'_> {
    let mock = ep.kind == EndpointMode::Mock;
    EndpointIdentity {
        kind: ep.kind,
        url: if mock { None } else { ep.url.as_deref() },
        seed: if mock { ep.seed } else { 0 },
        positive_rate: if mock { ep.positive_rate } else { 0.0 },
        dim: if mock { ep.dim } else { 0 },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub vns: VnsConfig,
    #[serde(default)]
    pub prompts: PromptConfig,
    #[serde(default)]
    pub images: ImageConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub kgc: KgcConfig,
    #[serde(default)]
    pub backends: BackendsConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Parses a config file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.dir);
        if let Some(r) = self.dataset.reals.as_mut() {
            fix(r);
        }
        fix(&mut self.output.dir);
    }

    /// Applies `KG2MMKG_*_URL` overrides from the given lookup.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (var, service) in ENV_OVERRIDES {
            if let Some(url) = lookup(var).filter(|u| !u.trim().is_empty()) {
                let ep = self.backends.endpoint_mut(service);
                ep.kind = EndpointMode::Http;
                ep.url = Some(url);
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg_err = |m: String| PipelineError::Config(m);
        self.encoder.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.kgc.validate().map_err(|e| cfg_err(e.to_string()))?;
        if self.vns.samples_per_relation == 0 {
            return Err(cfg_err("vns.samples_per_relation must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.vns.mu) {
            return Err(cfg_err("vns.mu must be in [0, 1]".into()));
        }
        if self.vns.image_width == 0 || self.vns.image_height == 0 {
            return Err(cfg_err("vns image size must be positive".into()));
        }
        if self.images.width == 0 || self.images.height == 0 {
            return Err(cfg_err("images.width and images.height must be positive".into()));
        }
        if self.prompts.word_cap == 0 {
            return Err(cfg_err("prompts.word_cap must be >= 1".into()));
        }
        for (name, ep) in [
            ("backends.t2i", &self.backends.t2i),
            ("backends.reward", &self.backends.reward),
            ("backends.embed", &self.backends.embed),
            ("backends.llm", &self.backends.llm),
        ] {
            ep.validate(name).map_err(cfg_err)?;
        }
        for (name, ep) in [
            ("backends.t2i", &self.backends.t2i),
            ("backends.reward", &self.backends.reward),
            ("backends.embed", &self.backends.embed),
        ] {
            if ep.kind == EndpointMode::None {
                return Err(cfg_err(format!("{name}: kind \"none\" is only allowed for the llm")));
            }
        }
        if !self.dataset.dir.join("train.tsv").is_file() {
            return Err(cfg_err(format!(
                "dataset.dir {} has no train.tsv",
                self.dataset.dir.display()
            )));
        }
        if let Some(r) = &self.dataset.reals {
            if !r.is_dir() {
                return Err(cfg_err(format!("dataset.reals {} is not a directory", r.display())));
            }
        }
        Ok(())
    }

    /// Methods to run, `vsns` first, without duplicates.
    pub fn methods(&self) -> Vec<Method> {
        let mut out = vec![Method::Vsns];
        for m in &self.eval.methods {
            if !out.contains(m) {
                out.push(*m);
            }
        }
        out
    }

    /// Encoder settings with the run seed applied.
    pub fn effective_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            seed: util::derive_seed(self.run.seed, "encoder", 0),
            ..self.encoder.clone()
        }
    }

    pub fn effective_kgc(&self) -> KgcConfig {
        KgcConfig {
            seed: util::derive_seed(self.run.seed, "kgc", 0),
            ..self.kgc.clone()
        }
    }

    /// Hash of everything that determines results: output location,
    /// dataset/reals paths and backend operational settings (timeouts,
    /// retries, fault injection) are left out, so relocated or resumed runs
    /// hash identically.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        c.dataset.dir = PathBuf::new();
        c.dataset.reals = c.dataset.reals.map(|_| PathBuf::new());
        let mut v = serde_json::to_value(&c).expect("config serializes");
        v["backends"] = serde_json::json!({
            "t2i": identity(&self.backends.t2i),
            "reward": identity(&self.backends.reward),
            "embed": identity(&self.backends.embed),
            "llm": identity(&self.backends.llm),
        });
        util::json_hash(&v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = PipelineConfig::from_toml("[dataset]\ndir = \"data\"\n").unwrap();
        assert_eq!(cfg.vns.mu, 0.5);
        assert_eq!(cfg.vns.samples_per_relation, 10);
        assert_eq!(cfg.prompts.word_cap, 60);
        assert_eq!(cfg.methods(), Method::ALL.to_vec());
        assert_eq!(cfg.backends.llm.kind, EndpointMode::Mock);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("[dataset]\ndir = \"d\"\n[vns]\nmuu = 0.3\n").is_err());
    }

    #[test]
    fn env_override_switches_to_http() {
        let mut cfg = PipelineConfig::from_toml("[dataset]\ndir = \"d\"\n").unwrap();
        cfg.apply_env(|k| (k == "KG2MMKG_T2I_URL").then(|| "http://localhost:9".to_string()));
        assert_eq!(cfg.backends.t2i.kind, EndpointMode::Http);
        assert_eq!(cfg.backends.t2i.url.as_deref(), Some("http://localhost:9"));
        assert_eq!(cfg.backends.reward.kind, EndpointMode::Mock);
    }

    #[test]
    fn hash_ignores_locations() {
        let mut a = PipelineConfig::from_toml("[dataset]\ndir = \"d\"\n").unwrap();
        let mut b = a.clone();
        a.resolve_paths(Path::new("/tmp/x"));
        b.resolve_paths(Path::new("/tmp/y"));
        assert_eq!(a.hash(), b.hash());
        b.backends.t2i.fail_after = Some(3);
        b.backends.t2i.latency_ms = 20;
        assert_eq!(a.hash(), b.hash());
        b.run.seed = 9;
        assert_ne!(a.hash(), b.hash());
    }
}
