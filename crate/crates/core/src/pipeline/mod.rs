//! The KG → multi-modal KG pipeline: stages, caching and output layout.
//!
//! Every stage reads its inputs from the output directory, writes its
//! artifacts atomically and records a content-hash cache key under
//! `cache/<stage>.key`. A stage whose key and outputs are unchanged is
//! skipped without touching any backend.

pub mod compare;
pub mod config;
pub mod manifest;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::OpenOptions;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backends::{BackendSet, ImageArtifact};
use crate::embed::{self, EmbedError, EmbeddingTable};
use crate::kg::{self, EntityId, KgError, KnowledgeGraph, SplitSizes};
use crate::mmkgc::{self, FeatureRow, ImageFeatures, KgcError};
use crate::prompts::{self, PromptRecord};
use crate::sns::{self, SelectionRow, SnsError};
use crate::util::{self, atomic_write, derive_seed, hash64, sha256_hex};
use crate::vns::{self, RelationScoreRow, RelationVisScore};

pub use compare::{compare_methods, longest_token_selection, pair_entities, ComparisonReport, RealImages};
pub use config::{CachePolicy, Method, PipelineConfig};
pub use manifest::{ImageEntry, Manifest, ManifestHeader, ManifestRecord, NeighborEntry, Sim};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} needs {} from stage {required}; run `kg2mmkg {required}` first (or `kg2mmkg all`)", path.display())]
    UpstreamMissing {
        stage: Stage,
        required: Stage,
        path: PathBuf,
    },
    #[error("backend failure: {0}")]
    Backend(String),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Sns(#[from] SnsError),
    #[error(transparent)]
    Kgc(#[from] KgcError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed artifact: {0}")]
    Artifact(String),
}

impl PipelineError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_owned(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 missing upstream, 4 backend, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::UpstreamMissing { .. } => 3,
            Self::Backend(_) => 4,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Load,
    TrainEmbed,
    ScoreRelations,
    SelectNeighbors,
    GenPrompts,
    GenImages,
    Eval,
    Kgc,
    All,
}

impl Stage {
    /// Stages in execution order, excluding `all`.
    pub const SEQUENCE: [Stage; 8] = [
        Stage::Load,
        Stage::TrainEmbed,
        Stage::ScoreRelations,
        Stage::SelectNeighbors,
        Stage::GenPrompts,
        Stage::GenImages,
        Stage::Eval,
        Stage::Kgc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::TrainEmbed => "train-embed",
            Stage::ScoreRelations => "score-relations",
            Stage::SelectNeighbors => "select-neighbors",
            Stage::GenPrompts => "gen-prompts",
            Stage::GenImages => "gen-images",
            Stage::Eval => "eval",
            Stage::Kgc => "kgc",
            Stage::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::SEQUENCE
            .iter()
            .chain([Stage::All].iter())
            .find(|st| st.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub paired_only: bool,
    pub heads_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub cached: bool,
    pub seconds: f64,
}

/// File-system safe, collision-free directory/file stem for an entity.
pub fn entity_slug(label: &str) -> String {
    let clean: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .take(48)
        .collect();
    format!("{clean}-{}", &sha256_hex(label.as_bytes())[..8])
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    atomic_write(path, text.as_bytes()).map_err(|e| PipelineError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Artifact(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("row serializes"));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes()).map_err(|e| PipelineError::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| PipelineError::Artifact(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Summary written by the load stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub dataset_hash: String,
    pub entities: usize,
    pub relations: usize,
    pub splits: SplitSizes,
    pub warnings: Vec<String>,
}

/// Contents of `relation_scores.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationScores {
    pub rows: Vec<RelationScoreRow>,
    pub visualizable: Vec<String>,
    pub details: Vec<RelationVisScore>,
}

/// One line of `methods/<method>/selections.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSelection {
    pub entity: String,
    pub neighbors: Vec<NeighborEntry>,
}

/// One line of `methods/<method>/prompts.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptLine {
    pub entity: String,
    pub record: PromptRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum ProgressLine {
    Header { key: String },
    Done { entity: String, image: ImageEntry },
}

/// Where every artifact lives under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn graph_summary(&self) -> PathBuf {
        self.root.join("graph_summary.json")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.json")
    }
    pub fn relation_scores(&self) -> PathBuf {
        self.root.join("relation_scores.json")
    }
    pub fn selected_neighbors(&self) -> PathBuf {
        self.root.join("selected_neighbors.jsonl")
    }
    pub fn method_dir(&self, m: Method) -> PathBuf {
        self.root.join("methods").join(m.name())
    }
    pub fn selections(&self, m: Method) -> PathBuf {
        self.method_dir(m).join("selections.jsonl")
    }
    pub fn prompts(&self, m: Method) -> PathBuf {
        self.method_dir(m).join("prompts.jsonl")
    }
    pub fn images_dir(&self, m: Method) -> PathBuf {
        self.method_dir(m).join("images")
    }
    pub fn progress(&self, m: Method) -> PathBuf {
        self.images_dir(m).join("progress.jsonl")
    }
    /// The VSNS manifest is the pipeline's main product and sits at the root.
    pub fn manifest(&self, m: Method) -> PathBuf {
        match m {
            Method::Vsns => self.root.join("manifest.jsonl"),
            _ => self.method_dir(m).join("manifest.jsonl"),
        }
    }
    pub fn metrics_report(&self) -> PathBuf {
        self.root.join("metrics_report.json")
    }
    pub fn features(&self) -> PathBuf {
        self.root.join("features.jsonl")
    }
    pub fn kgc_report(&self) -> PathBuf {
        self.root.join("kgc_report.json")
    }
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
    pub fn cache_key(&self, s: Stage) -> PathBuf {
        self.root.join("cache").join(format!("{}.key", s.name()))
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    layout: Layout,
    backends: BackendSet,
    paired_only: bool,
    config_hash: String,
}

impl Pipeline {
    /// Applies the options, validates the configuration and connects backends.
    pub fn new(mut cfg: PipelineConfig, opts: &RunOptions) -> Result<Self> {
        if let Some(seed) = opts.seed {
            cfg.run.seed = seed;
        }
        cfg.run.heads_only |= opts.heads_only;
        cfg.eval.paired_only |= opts.paired_only;
        cfg.validate()?;
        let b = &cfg.backends;
        let backends = BackendSet::from_endpoints(&b.t2i, &b.reward, &b.embed, &b.llm)
            .map_err(|e| PipelineError::Config(format!("backend setup: {e}")))?;
        Ok(Self::with_backends(cfg, backends))
    }

    /// Uses the given backends instead of the configured ones. The config
    /// must already be validated.
    pub fn with_backends(cfg: PipelineConfig, backends: BackendSet) -> Self {
        Self {
            layout: Layout {
                root: cfg.output.dir.clone(),
            },
            paired_only: cfg.eval.paired_only,
            config_hash: cfg.hash(),
            backends,
            cfg,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn backends(&self) -> &BackendSet {
        &self.backends
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Runs one stage, or every stage in order for [`Stage::All`].
    pub fn run(&self, stage: Stage) -> Result<Vec<StageOutcome>> {
        let stages: Vec<Stage> = if stage == Stage::All {
            Stage::SEQUENCE.to_vec()
        } else {
            vec![stage]
        };
        let mut out = Vec::new();
        for s in stages {
            let start = Instant::now();
            tracing::info!(stage = s.name(), "stage start");
            let cached = self.run_one(s)?;
            let seconds = start.elapsed().as_secs_f64();
            if !cached {
                self.record_timing(s, seconds)?;
            }
            tracing::info!(stage = s.name(), cached, seconds, "stage done");
            out.push(StageOutcome {
                stage: s,
                cached,
                seconds,
            });
        }
        Ok(out)
    }

    fn run_one(&self, s: Stage) -> Result<bool> {
        std::fs::create_dir_all(self.layout.root.join("cache")).map_err(|e| PipelineError::io(&self.layout.root, e))?;
        match s {
            Stage::Load => self.stage_load(),
            Stage::TrainEmbed => self.stage_train_embed(),
            Stage::ScoreRelations => self.stage_score_relations(),
            Stage::SelectNeighbors => self.stage_select_neighbors(),
            Stage::GenPrompts => self.stage_gen_prompts(),
            Stage::GenImages => self.stage_gen_images(),
            Stage::Eval => self.stage_eval(),
            Stage::Kgc => self.stage_kgc(),
            Stage::All => unreachable!("expanded by run"),
        }
    }

    fn record_timing(&self, s: Stage, seconds: f64) -> Result<()> {
        let path = self.layout.timings();
        let mut t: BTreeMap<String, f64> = if path.exists() { read_json(&path)? } else { BTreeMap::new() };
        t.insert(s.name().to_owned(), seconds);
        write_json(&path, &t)
    }

    fn require(&self, stage: Stage, required: Stage, path: &Path) -> Result<()> {
        if path.is_file() {
            Ok(())
        } else {
            Err(PipelineError::UpstreamMissing {
                stage,
                required,
                path: path.to_owned(),
            })
        }
    }

    fn is_cached(&self, s: Stage, key: &str, outputs: &[PathBuf]) -> bool {
        self.cfg.run.cache == CachePolicy::Use
            && std::fs::read_to_string(self.layout.cache_key(s)).is_ok_and(|k| k.trim() == key)
            && outputs.iter().all(|p| p.is_file())
    }

    fn mark(&self, s: Stage, key: &str) -> Result<()> {
        let p = self.layout.cache_key(s);
        atomic_write(&p, format!("{key}\n").as_bytes()).map_err(|e| PipelineError::io(&p, e))
    }

    fn graph(&self) -> Result<KnowledgeGraph> {
        Ok(kg::load_dir(&self.cfg.dataset.dir)?)
    }

    fn dataset_hash(&self) -> Result<String> {
        let mut parts = BTreeMap::new();
        for name in ["train.tsv", "valid.tsv", "test.tsv", "labels.json"] {
            let p = self.cfg.dataset.dir.join(name);
            if p.is_file() {
                parts.insert(name, file_hash(&p)?);
            }
        }
        Ok(util::json_hash(&parts))
    }

    /// Entities that receive an image, in label order.
    pub fn targets(&self, g: &KnowledgeGraph) -> Vec<EntityId> {
        let mut ids: Vec<EntityId> = (0..g.num_entities() as u32)
            .map(EntityId)
            .filter(|e| !self.cfg.run.heads_only || !g.out_index()[e.index()].is_empty())
            .collect();
        ids.sort_by(|a, b| g.entity_label(*a).cmp(g.entity_label(*b)));
        ids
    }

    fn stage_load(&self) -> Result<bool> {
        let key = self.dataset_hash()?;
        let out = self.layout.graph_summary();
        if self.is_cached(Stage::Load, &key, &[out.clone()]) {
            return Ok(true);
        }
        let g = self.graph()?;
        for w in g.warnings() {
            tracing::warn!("{w}");
        }
        write_json(
            &out,
            &GraphSummary {
                dataset_hash: key.clone(),
                entities: g.num_entities(),
                relations: g.num_relations(),
                splits: g.split_sizes(),
                warnings: g.warnings().to_vec(),
            },
        )?;
        self.mark(Stage::Load, &key)?;
        Ok(false)
    }

    fn stage_train_embed(&self) -> Result<bool> {
        let summary = self.layout.graph_summary();
        self.require(Stage::TrainEmbed, Stage::Load, &summary)?;
        let enc = self.cfg.effective_encoder();
        let key = util::json_hash(&json!({ "graph": file_hash(&summary)?, "encoder": enc }));
        let out = self.layout.embeddings();
        if self.is_cached(Stage::TrainEmbed, &key, &[out.clone()]) {
            return Ok(true);
        }
        let g = self.graph()?;
        let table = embed::train(&g, &enc)?;
        tracing::info!(
            initial = table.initial_loss,
            final_loss = table.final_loss,
            "encoder trained"
        );
        table.save(&out)?;
        self.mark(Stage::TrainEmbed, &key)?;
        Ok(false)
    }

    fn stage_score_relations(&self) -> Result<bool> {
        let summary = self.layout.graph_summary();
        self.require(Stage::ScoreRelations, Stage::Load, &summary)?;
        let key = util::json_hash(&json!({
            "graph": file_hash(&summary)?,
            "vns": self.cfg.vns,
            "seed": self.cfg.run.seed,
            "t2i": config::identity(&self.cfg.backends.t2i),
            "reward": config::identity(&self.cfg.backends.reward),
        }));
        let out = self.layout.relation_scores();
        if self.is_cached(Stage::ScoreRelations, &key, &[out.clone()]) {
            return Ok(true);
        }
        let g = self.graph()?;
        let seed = derive_seed(self.cfg.run.seed, "vns", 0);
        let scores = vns::score_all(
            &g,
            self.backends.t2i.as_ref(),
            self.backends.reward.as_ref(),
            &self.cfg.vns,
            seed,
        )?;
        let broken: Vec<String> = scores
            .iter()
            .filter_map(|s| s.error.as_ref().map(|e| format!("{}: {e}", s.label)))
            .collect();
        if !broken.is_empty() {
            return Err(PipelineError::Backend(format!(
                "relation scoring failed for {} relation(s): {}",
                broken.len(),
                broken.join("; ")
            )));
        }
        let visualizable = vns::filter_relations(&scores)
            .into_iter()
            .map(|r| g.relation_label(r).to_owned())
            .collect();
        write_json(
            &out,
            &RelationScores {
                rows: vns::report_rows(&scores),
                visualizable,
                details: scores,
            },
        )?;
        self.mark(Stage::ScoreRelations, &key)?;
        Ok(false)
    }

    fn stage_select_neighbors(&self) -> Result<bool> {
        let emb_path = self.layout.embeddings();
        let scores_path = self.layout.relation_scores();
        self.require(Stage::SelectNeighbors, Stage::TrainEmbed, &emb_path)?;
        self.require(Stage::SelectNeighbors, Stage::ScoreRelations, &scores_path)?;
        let methods = self.cfg.methods();
        let key = util::json_hash(&json!({
            "graph": file_hash(&self.layout.graph_summary())?,
            "embeddings": file_hash(&emb_path)?,
            "scores": file_hash(&scores_path)?,
            "heads_only": self.cfg.run.heads_only,
            "methods": methods,
        }));
        let mut outputs: Vec<PathBuf> = methods.iter().map(|m| self.layout.selections(*m)).collect();
        outputs.push(self.layout.selected_neighbors());
        if self.is_cached(Stage::SelectNeighbors, &key, &outputs) {
            return Ok(true);
        }
        let g = self.graph()?;
        let table = EmbeddingTable::load(&emb_path)?;
        let scores: RelationScores = read_json(&scores_path)?;
        let allowed: BTreeSet<_> = scores
            .visualizable
            .iter()
            .map(|l| g.relation_id(l))
            .collect::<std::result::Result<_, _>>()?;
        let targets = self.targets(&g);

        let chosen = sns::select_all(&g, &table, &targets, &allowed)?;
        let detail: Vec<SelectionRow> = chosen.iter().map(|s| SelectionRow::from_selection(&g, s)).collect();
        write_jsonl(&self.layout.selected_neighbors(), &detail)?;

        for m in methods {
            let rows: Vec<MethodSelection> = match m {
                Method::Vsns => chosen
                    .iter()
                    .map(|s| MethodSelection {
                        entity: g.entity_label(s.head).to_owned(),
                        neighbors: s
                            .groups
                            .values()
                            .flat_map(|grp| grp.scores.iter().filter(|n| grp.selected.contains(&n.tail)))
                            .map(|n| NeighborEntry {
                                relation: g.relation_label(n.rel).to_owned(),
                                tail: g.entity_label(n.tail).to_owned(),
                                sim: Some(Sim::from(n.sim)),
                            })
                            .collect(),
                    })
                    .collect(),
                Method::NameOnly => targets
                    .iter()
                    .map(|e| MethodSelection {
                        entity: g.entity_label(*e).to_owned(),
                        neighbors: vec![],
                    })
                    .collect(),
                Method::LongestToken => targets
                    .iter()
                    .map(|e| {
                        Ok(MethodSelection {
                            entity: g.entity_label(*e).to_owned(),
                            neighbors: longest_token_selection(&g, *e)?
                                .into_iter()
                                .map(|(r, t)| NeighborEntry {
                                    relation: g.relation_label(r).to_owned(),
                                    tail: g.entity_label(t).to_owned(),
                                    sim: None,
                                })
                                .collect(),
                        })
                    })
                    .collect::<Result<_>>()?,
            };
            let p = self.layout.selections(m);
            std::fs::create_dir_all(self.layout.method_dir(m)).map_err(|e| PipelineError::io(&p, e))?;
            write_jsonl(&p, &rows)?;
        }
        self.mark(Stage::SelectNeighbors, &key)?;
        Ok(false)
    }

    fn stage_gen_prompts(&self) -> Result<bool> {
        let methods = self.cfg.methods();
        let mut inputs = BTreeMap::new();
        for m in &methods {
            let p = self.layout.selections(*m);
            self.require(Stage::GenPrompts, Stage::SelectNeighbors, &p)?;
            inputs.insert(m.name(), file_hash(&p)?);
        }
        let key = util::json_hash(&json!({
            "selections": inputs,
            "prompts": self.cfg.prompts,
            "instruction": prompts::INSTRUCTION_VERSION,
            "llm": config::identity(&self.cfg.backends.llm),
        }));
        let outputs: Vec<PathBuf> = methods.iter().map(|m| self.layout.prompts(*m)).collect();
        if self.is_cached(Stage::GenPrompts, &key, &outputs) {
            return Ok(true);
        }
        let g = self.graph()?;
        let llm = self.backends.llm.as_deref();
        for m in methods {
            let selections: Vec<MethodSelection> = read_jsonl(&self.layout.selections(m))?;
            let lines = selections
                .par_iter()
                .map(|s| {
                    let e = g.entity_id(&s.entity)?;
                    let facts = s
                        .neighbors
                        .iter()
                        .map(|n| Ok(prompts::verbalize_fact(&n.relation, g.display_name(g.entity_id(&n.tail)?))))
                        .collect::<Result<Vec<_>>>()?;
                    let record = prompts::gen_prompt(e, g.display_name(e), facts, llm, self.cfg.prompts.word_cap);
                    Ok(PromptLine {
                        entity: s.entity.clone(),
                        record,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let downgraded = lines.iter().filter(|l| l.record.downgraded.is_some()).count();
            if downgraded > 0 {
                tracing::warn!(method = m.name(), downgraded, "prompts fell back to the template");
            }
            write_jsonl(&self.layout.prompts(m), &lines)?;
        }
        self.mark(Stage::GenPrompts, &key)?;
        Ok(false)
    }

    fn image_seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.run.seed, "entity-image", hash64(&[label.as_bytes()]))
    }

    fn stage_gen_images(&self) -> Result<bool> {
        let methods = self.cfg.methods();
        let mut keys = BTreeMap::new();
        for m in &methods {
            let p = self.layout.prompts(*m);
            self.require(Stage::GenImages, Stage::GenPrompts, &p)?;
            keys.insert(
                *m,
                util::json_hash(&json!({
                    "prompts": file_hash(&p)?,
                    "images": self.cfg.images,
                    "seed": self.cfg.run.seed,
                    "t2i": config::identity(&self.cfg.backends.t2i),
                    "selections": file_hash(&self.layout.selections(*m))?,
                })),
            );
        }
        let key = util::json_hash(&json!({ "methods": keys, "config": self.config_hash }));
        let outputs: Vec<PathBuf> = methods.iter().map(|m| self.layout.manifest(*m)).collect();
        if self.is_cached(Stage::GenImages, &key, &outputs) {
            return Ok(true);
        }
        let mut failures = Vec::new();
        let mut finished = Vec::new();
        for m in &methods {
            match self.generate_method_images(*m, &keys[m])? {
                Ok(records) => finished.push((*m, records)),
                Err(f) => failures.extend(f),
            }
        }
        if !failures.is_empty() {
            return Err(PipelineError::Backend(format!(
                "{} image(s) failed; completed images are kept, rerun gen-images to resume. First failure: {}",
                failures.len(),
                failures[0]
            )));
        }
        let mut timings: BTreeMap<String, f64> = if self.layout.timings().exists() {
            read_json(&self.layout.timings())?
        } else {
            BTreeMap::new()
        };
        timings.retain(|k, _| Stage::SEQUENCE[..5].iter().any(|s| s.name() == k));
        for (m, records) in finished {
            let header = ManifestHeader {
                format: manifest::MANIFEST_FORMAT.to_owned(),
                method: m.name().to_owned(),
                config_hash: self.config_hash.clone(),
                tool_version: TOOL_VERSION.to_owned(),
                instruction_version: prompts::INSTRUCTION_VERSION.to_owned(),
                n_records: records.len(),
                stage_timings: timings.clone(),
            };
            Manifest::new(header, records).write(&self.layout.manifest(m))?;
        }
        self.mark(Stage::GenImages, &key)?;
        Ok(false)
    }

    /// Reads the progress log, keeping entries whose image still verifies.
    fn resume_state(&self, m: Method, key: &str) -> Result<HashMap<String, ImageEntry>> {
        let path = self.layout.progress(m);
        let mut done = HashMap::new();
        if !path.is_file() {
            return Ok(done);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        let mut lines = text.lines();
        match lines.next().and_then(|l| serde_json::from_str::<ProgressLine>(l).ok()) {
            Some(ProgressLine::Header { key: k }) if k == key => {}
            _ => return Ok(done),
        }
        for l in lines {
            // a line cut short by a crash is simply redone
            let Ok(ProgressLine::Done { entity, image }) = serde_json::from_str::<ProgressLine>(l) else {
                continue;
            };
            let p = self.layout.root.join(&image.path);
            if std::fs::read(&p).is_ok_and(|b| sha256_hex(&b) == image.sha256) {
                done.insert(entity, image);
            }
        }
        Ok(done)
    }

    /// Generates missing images for one method. The outer error is fatal; the
    /// inner one lists per-entity backend failures.
    fn generate_method_images(
        &self,
        m: Method,
        key: &str,
    ) -> Result<std::result::Result<Vec<ManifestRecord>, Vec<String>>> {
        let lines: Vec<PromptLine> = read_jsonl(&self.layout.prompts(m))?;
        let selections: HashMap<String, MethodSelection> = read_jsonl::<MethodSelection>(&self.layout.selections(m))?
            .into_iter()
            .map(|s| (s.entity.clone(), s))
            .collect();
        let dir = self.layout.images_dir(m);
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let done = self.resume_state(m, key)?;
        let progress_path = self.layout.progress(m);
        if done.is_empty() {
            let header = serde_json::to_string(&ProgressLine::Header { key: key.to_owned() }).expect("serializes");
            atomic_write(&progress_path, format!("{header}\n").as_bytes())
                .map_err(|e| PipelineError::io(&progress_path, e))?;
        } else {
            tracing::info!(method = m.name(), resumed = done.len(), "resuming image generation");
        }
        let writer = Mutex::new(
            OpenOptions::new()
                .append(true)
                .open(&progress_path)
                .map_err(|e| PipelineError::io(&progress_path, e))?,
        );
        let (w, h) = (self.cfg.images.width, self.cfg.images.height);
        let backend = self.backends.t2i.model_info();
        let outcomes: Vec<std::result::Result<ManifestRecord, String>> = lines
            .par_iter()
            .map(|line| {
                let seed = self.image_seed(&line.entity);
                let image = match done.get(&line.entity) {
                    Some(img) => img.clone(),
                    None => {
                        let art: ImageArtifact = self
                            .backends
                            .t2i
                            .generate(&line.record.prompt, seed, w, h)
                            .map_err(|e| format!("{}: {e}", line.entity))?;
                        let rel = format!("methods/{}/images/{}.png", m.name(), entity_slug(&line.entity));
                        let p = self.layout.root.join(&rel);
                        atomic_write(&p, &art.bytes).map_err(|e| format!("{}: {e}", p.display()))?;
                        let entry = ImageEntry {
                            path: rel,
                            sha256: art.sha256.clone(),
                            width: art.width,
                            height: art.height,
                        };
                        let row = serde_json::to_string(&ProgressLine::Done {
                            entity: line.entity.clone(),
                            image: entry.clone(),
                        })
                        .expect("serializes");
                        let mut f = writer.lock().expect("progress writer");
                        writeln!(f, "{row}")
                            .and_then(|_| f.flush())
                            .map_err(|e| format!("{}: {e}", progress_path.display()))?;
                        entry
                    }
                };
                Ok(ManifestRecord {
                    entity: line.entity.clone(),
                    name: line.record.label.clone(),
                    neighbors: selections
                        .get(&line.entity)
                        .map(|s| s.neighbors.clone())
                        .unwrap_or_default(),
                    prompt: line.record.prompt.clone(),
                    prompt_source: line.record.source,
                    image,
                    backend: backend.clone(),
                    seed,
                })
            })
            .collect();
        let mut records = Vec::new();
        let mut failures = Vec::new();
        for o in outcomes {
            match o {
                Ok(r) => records.push(r),
                Err(e) => failures.push(e),
            }
        }
        Ok(if failures.is_empty() { Ok(records) } else { Err(failures) })
    }

    fn stage_eval(&self) -> Result<bool> {
        let methods = self.cfg.methods();
        let mut inputs = BTreeMap::new();
        for m in &methods {
            let p = self.layout.manifest(*m);
            self.require(Stage::Eval, Stage::GenImages, &p)?;
            inputs.insert(m.name(), file_hash(&p)?);
        }
        let reals_listing = match &self.cfg.dataset.reals {
            Some(dir) => Some(listing_hash(dir)?),
            None => None,
        };
        let key = util::json_hash(&json!({
            "manifests": inputs,
            "reals": reals_listing,
            "embed": config::identity(&self.cfg.backends.embed),
            "paired_only": self.paired_only,
        }));
        let out = self.layout.metrics_report();
        if self.is_cached(Stage::Eval, &key, &[out.clone()]) {
            return Ok(true);
        }
        let manifests = methods
            .iter()
            .map(|m| Ok((m.name().to_owned(), Manifest::read(&self.layout.manifest(*m))?)))
            .collect::<Result<Vec<_>>>()?;
        let reals = match &self.cfg.dataset.reals {
            Some(dir) => {
                let labels: Vec<String> = manifests[0].1.records.iter().map(|r| r.entity.clone()).collect();
                RealImages::load(dir, &labels)?
            }
            None => RealImages::default(),
        };
        let report = compare_methods(
            &manifests,
            &self.layout.root,
            &reals,
            self.backends.embed.as_ref(),
            self.paired_only,
        );
        write_json(&out, &report)?;
        self.mark(Stage::Eval, &key)?;
        Ok(false)
    }

    fn stage_kgc(&self) -> Result<bool> {
        let manifest_path = self.layout.manifest(Method::Vsns);
        self.require(Stage::Kgc, Stage::GenImages, &manifest_path)?;
        let kgc_cfg = self.cfg.effective_kgc();
        let key = util::json_hash(&json!({
            "manifest": file_hash(&manifest_path)?,
            "graph": file_hash(&self.layout.graph_summary())?,
            "kgc": kgc_cfg,
            "embed": config::identity(&self.cfg.backends.embed),
        }));
        let outputs = [self.layout.features(), self.layout.kgc_report()];
        if self.is_cached(Stage::Kgc, &key, &outputs) {
            return Ok(true);
        }
        let g = self.graph()?;
        let manifest = Manifest::read(&manifest_path)?;
        let rows = manifest
            .records
            .par_iter()
            .map(|r| {
                let p = self.layout.root.join(&r.image.path);
                let bytes = std::fs::read(&p).map_err(|e| PipelineError::io(&p, e))?;
                let vector = self
                    .backends
                    .embed
                    .embed_image(&bytes)
                    .map_err(|e| PipelineError::Backend(format!("embedding {}: {e}", r.entity)))?;
                Ok(FeatureRow {
                    entity: r.entity.clone(),
                    vector,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_jsonl(&self.layout.features(), &rows)?;
        let dim = rows.first().map_or(0, |r| r.vector.len());
        let mut features = ImageFeatures::new(dim, g.num_entities());
        for r in rows {
            let e = g.entity_id(&r.entity)?;
            features.set(e, r.vector, &r.entity)?;
        }
        let report = mmkgc::run_kgc(&g, &kgc_cfg, Some(&features), "features.jsonl")?;
        write_json(&self.layout.kgc_report(), &report)?;
        self.mark(Stage::Kgc, &key)?;
        Ok(false)
    }
}

/// Questionnaire candidates from the manifests of `methods` under `layout`,
/// plus the first real image per entity when `reals` is given. Context facts
/// come from the VSNS selection when available.
pub fn annotation_candidates(
    layout: &Layout,
    methods: &[Method],
    reals: Option<&Path>,
) -> Result<Vec<crate::annotation::Candidate>> {
    let mut out: BTreeMap<String, crate::annotation::Candidate> = BTreeMap::new();
    let mut ordered = methods.to_vec();
    ordered.sort_by_key(|m| *m != Method::Vsns);
    for m in ordered {
        let manifest = Manifest::read(&layout.manifest(m))?;
        for r in manifest.records {
            let c = out.entry(r.entity.clone()).or_insert_with(|| crate::annotation::Candidate {
                entity: r.entity.clone(),
                name: r.name.clone(),
                facts: r
                    .neighbors
                    .iter()
                    .map(|n| prompts::verbalize_fact(&n.relation, &n.tail))
                    .collect(),
                images: BTreeMap::new(),
            });
            c.images.insert(m.name().to_owned(), layout.root.join(&r.image.path));
        }
    }
    if let Some(dir) = reals {
        for c in out.values_mut() {
            let sub = dir.join(entity_slug(&c.entity));
            let Ok(rd) = std::fs::read_dir(&sub) else { continue };
            let mut pngs: Vec<PathBuf> = rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            pngs.sort();
            if let Some(first) = pngs.into_iter().next() {
                c.images.insert(crate::annotation::REAL_SOURCE.to_owned(), first);
            }
        }
    }
    Ok(out.into_values().collect())
}

/// Hash of every file name and content under a directory tree.
fn listing_hash(dir: &Path) -> Result<String> {
    let mut entries = BTreeMap::new();
    let mut stack = vec![dir.to_owned()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| PipelineError::io(&d, e))? {
            let p = e.map_err(|e| PipelineError::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().into_owned();
                entries.insert(rel, file_hash(&p)?);
            }
        }
    }
    Ok(util::json_hash(&entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::SEQUENCE.iter().chain([Stage::All].iter()) {
            assert_eq!(s.name().parse::<Stage>().unwrap(), *s);
        }
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn slugs_are_distinct_and_safe() {
        let a = entity_slug("Dary Holm");
        let b = entity_slug("dary holm");
        assert_ne!(a, b);
        assert!(a.starts_with("dary_holm-"));
        assert!(entity_slug("a/../b").chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Config("x".into()).exit_code(), 2);
        assert_eq!(
            PipelineError::UpstreamMissing {
                stage: Stage::Eval,
                required: Stage::GenImages,
                path: PathBuf::from("m"),
            }
            .exit_code(),
            3
        );
        assert_eq!(PipelineError::Backend("x".into()).exit_code(), 4);
        assert_eq!(PipelineError::Artifact("x".into()).exit_code(), 1);
    }
}
