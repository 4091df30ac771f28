//! Baseline neighbor strategies and the cross-method image comparison.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Embedder, ImageArtifact};
use crate::evalmetrics::{self, Aggregates, EntityMetric, MetricReport, SkippedEntity};
use crate::kg::{EntityId, KgError, KnowledgeGraph, RelationId};

use super::manifest::{Manifest, ManifestRecord};
use super::{entity_slug, PipelineError};

pub const LONGEST_TOKEN_RULE: &str =
    "most whitespace-separated tokens in the display name, then most characters, then smallest label";

pub fn token_count(name: &str) -> usize {
    name.split_whitespace().count()
}

/// The longest-token baseline: one neighbor per relation of `head`.
pub fn longest_token_selection(g: &KnowledgeGraph, head: EntityId) -> Result<Vec<(RelationId, EntityId)>, KgError> {
    let mut best: BTreeMap<RelationId, EntityId> = BTreeMap::new();
    for (r, t) in g.neighbors(head, None)? {
        let better = match best.get(&r) {
            None => true,
            Some(&cur) => {
                let key = |e: EntityId| {
                    let name = g.display_name(e);
                    (token_count(name), name.chars().count())
                };
                let (a, b) = (key(t), key(cur));
                a > b || (a == b && g.entity_label(t) < g.entity_label(cur))
            }
        };
        if better {
            best.insert(r, t);
        }
    }
    Ok(best.into_iter().collect())
}

/// Entities present in both manifests, split by whether the two methods
/// selected the same neighbors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pairing {
    pub shared: Vec<String>,
    pub differing: Vec<String>,
    pub only_left: usize,
    pub only_right: usize,
}

pub fn pair_entities(left: &[ManifestRecord], right: &[ManifestRecord]) -> Pairing {
    let r: HashMap<&str, &ManifestRecord> = right.iter().map(|x| (x.entity.as_str(), x)).collect();
    let mut p = Pairing::default();
    for a in left {
        match r.get(a.entity.as_str()) {
            Some(b) => {
                p.shared.push(a.entity.clone());
                if a.selection() != b.selection() {
                    p.differing.push(a.entity.clone());
                }
            }
            None => p.only_left += 1,
        }
    }
    p.only_right = right.len() - p.shared.len();
    p.shared.sort();
    p.differing.sort();
    p
}

/// Up to three real reference images per entity, read from
/// `<dir>/<entity slug>/*.png` in file-name order.
#[derive(Clone, Debug, Default)]
pub struct RealImages {
    pub by_entity: BTreeMap<String, Vec<ImageArtifact>>,
    pub warnings: Vec<String>,
}

pub const MAX_REALS: usize = 3;

impl RealImages {
    pub fn load(dir: &Path, labels: &[String]) -> Result<Self, PipelineError> {
        let mut out = Self::default();
        for label in labels {
            let sub = dir.join(entity_slug(label));
            if !sub.is_dir() {
                continue;
            }
            let mut files: Vec<_> = std::fs::read_dir(&sub)
                .map_err(|e| PipelineError::io(&sub, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            let mut images = Vec::new();
            for f in files.into_iter().take(MAX_REALS) {
                let bytes = std::fs::read(&f).map_err(|e| PipelineError::io(&f, e))?;
                match ImageArtifact::from_png(bytes, 0, "") {
                    Ok(a) => images.push(a),
                    Err(e) => out.warnings.push(format!("{label}: skipping {}: {e}", f.display())),
                }
            }
            if !images.is_empty() {
                out.by_entity.insert(label.clone(), images);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub reference: String,
    pub baseline: String,
    pub n_shared: usize,
    pub n_identical: usize,
    pub paired_only: bool,
    /// Entities compared: both methods have metrics for them.
    pub entities: Vec<String>,
    pub reference_metrics: Aggregates,
    pub baseline_metrics: Aggregates,
}

/// Contents of `metrics_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub paired_only: bool,
    pub longest_token_rule: String,
    pub warnings: Vec<String>,
    pub methods: Vec<MetricReport>,
    pub pairs: Vec<PairComparison>,
}

/// Embeds each distinct image once.
struct FeatureCache<'a> {
    embedder: &'a dyn Embedder,
    seen: Mutex<HashMap<String, Vec<f64>>>,
}

impl FeatureCache<'_> {
    fn raw(&self, img: &ImageArtifact) -> Result<Vec<f64>, evalmetrics::MetricsError> {
        if let Some(v) = self.seen.lock().expect("feature cache").get(&img.sha256) {
            return Ok(v.clone());
        }
        let v = self.embedder.embed_image_raw(&img.bytes)?;
        self.seen.lock().expect("feature cache").insert(img.sha256.clone(), v.clone());
        Ok(v)
    }
}

fn method_report(
    name: &str,
    manifest: &Manifest,
    root: &Path,
    reals: &RealImages,
    features: &FeatureCache<'_>,
) -> MetricReport {
    let outcomes: Vec<Result<EntityMetric, SkippedEntity>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let skip = |reason: String| SkippedEntity {
                entity: r.entity.clone(),
                reason,
            };
            let Some(real) = reals.by_entity.get(&r.entity) else {
                return Err(skip("no real images".into()));
            };
            let path = root.join(&r.image.path);
            let bytes = std::fs::read(&path).map_err(|e| skip(format!("{}: {e}", path.display())))?;
            let generated = ImageArtifact::from_png(bytes, r.seed, &r.prompt).map_err(|e| skip(e.to_string()))?;
            let g = features.raw(&generated).map_err(|e| skip(e.to_string()))?;
            let rs = real
                .iter()
                .map(|x| features.raw(x))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| skip(e.to_string()))?;
            let best = evalmetrics::best_of_features(&g, &rs).map_err(|e| skip(e.to_string()))?;
            Ok(EntityMetric {
                entity: r.entity.clone(),
                fid_min: best.fid_min,
                clip_max: best.clip_max,
                n_reals: rs.len(),
            })
        })
        .collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Ok(m) => rows.push(m),
            Err(s) => {
                tracing::warn!(method = name, entity = %s.entity, reason = %s.reason, "entity skipped in evaluation");
                skipped.push(s);
            }
        }
    }
    MetricReport::new(name, rows, skipped)
}

fn aggregate_over(report: &MetricReport, entities: &BTreeSet<&str>) -> Aggregates {
    let rows: Vec<EntityMetric> = report
        .rows
        .iter()
        .filter(|r| entities.contains(r.entity.as_str()))
        .cloned()
        .collect();
    MetricReport::new(&report.method, rows, vec![]).aggregates
}

/// Scores every method against the real images, then compares the first
/// (reference) method with each other one on their shared entities, or only
/// on entities whose selections differ when `paired_only` is set.
pub fn compare_methods(
    manifests: &[(String, Manifest)],
    root: &Path,
    reals: &RealImages,
    embedder: &dyn Embedder,
    paired_only: bool,
) -> ComparisonReport {
    let features = FeatureCache {
        embedder,
        seen: Mutex::new(HashMap::new()),
    };
    let mut warnings = reals.warnings.clone();
    let reports: Vec<MetricReport> = manifests
        .iter()
        .map(|(name, m)| method_report(name, m, root, reals, &features))
        .collect();
    let mut pairs = Vec::new();
    if let Some(((ref_name, ref_manifest), ref_report)) = manifests.first().zip(reports.first()) {
        for ((name, m), report) in manifests.iter().zip(&reports).skip(1) {
            let pairing = pair_entities(&ref_manifest.records, &m.records);
            if pairing.only_left + pairing.only_right > 0 {
                warnings.push(format!(
                    "{ref_name} and {name} cover different entities; comparing the {} shared ones",
                    pairing.shared.len()
                ));
            }
            let candidates = if paired_only { &pairing.differing } else { &pairing.shared };
            let scored = |r: &MetricReport| -> BTreeSet<String> { r.rows.iter().map(|x| x.entity.clone()).collect() };
            let (a, b) = (scored(ref_report), scored(report));
            let entities: Vec<String> = candidates
                .iter()
                .filter(|e| a.contains(*e) && b.contains(*e))
                .cloned()
                .collect();
            let set: BTreeSet<&str> = entities.iter().map(String::as_str).collect();
            pairs.push(PairComparison {
                reference: ref_name.clone(),
                baseline: name.clone(),
                n_shared: pairing.shared.len(),
                n_identical: pairing.shared.len() - pairing.differing.len(),
                paired_only,
                reference_metrics: aggregate_over(ref_report, &set),
                baseline_metrics: aggregate_over(report, &set),
                entities,
            });
        }
    }
    ComparisonReport {
        paired_only,
        longest_token_rule: LONGEST_TOKEN_RULE.to_owned(),
        warnings,
        methods: reports,
        pairs,
    }
}
