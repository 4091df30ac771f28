use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::prompts::PromptSource;
use crate::util;

use super::PipelineError;

pub const MANIFEST_FORMAT: &str = "kg2mmkg-manifest/1";

/// First line of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub method: String,
    pub config_hash: String,
    pub tool_version: String,
    pub instruction_version: String,
    pub n_records: usize,
    /// Wall-clock seconds per completed stage; the only run-dependent field.
    pub stage_timings: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeighborEntry {
    pub relation: String,
    pub tail: String,
    /// Cosine similarity, for methods that compute one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<Sim>,
}

/// A similarity rounded to 6 decimals, stored as an integer of millionths so
/// that entries stay `Eq` and serialize identically across runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "f64", from = "f64")]
pub struct Sim(i64);

impl From<f64> for Sim {
    fn from(x: f64) -> Self {
        Sim((x * 1e6).round() as i64)
    }
}

impl From<Sim> for f64 {
    fn from(s: Sim) -> f64 {
        s.0 as f64 / 1e6
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub width: u32,
    pub height: u32,
}

/// One entity of the multi-modal graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub entity: String,
    pub name: String,
    pub neighbors: Vec<NeighborEntry>,
    pub prompt: String,
    pub prompt_source: PromptSource,
    pub image: ImageEntry,
    pub backend: String,
    pub seed: u64,
}

impl ManifestRecord {
    /// The selected (relation, tail) pairs, ignoring similarities.
    pub fn selection(&self) -> Vec<(&str, &str)> {
        let mut v: Vec<(&str, &str)> = self
            .neighbors
            .iter()
            .map(|n| (n.relation.as_str(), n.tail.as_str()))
            .collect();
        v.sort_unstable();
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Records are sorted by entity label.
    pub fn new(header: ManifestHeader, mut records: Vec<ManifestRecord>) -> Self {
        records.sort_by(|a, b| a.entity.cmp(&b.entity));
        Self { header, records }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        util::atomic_write(path, self.to_jsonl().as_bytes()).map_err(|e| PipelineError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut lines = text.lines();
        let bad = |m: String| PipelineError::Artifact(format!("{}: {m}", path.display()));
        let header: ManifestHeader = serde_json::from_str(lines.next().ok_or_else(|| bad("empty manifest".into()))?)
            .map_err(|e| bad(format!("header: {e}")))?;
        let records = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(format!("record {}: {e}", i + 1))))
            .collect::<Result<Vec<ManifestRecord>, _>>()?;
        if records.len() != header.n_records {
            return Err(bad(format!(
                "header announces {} records, found {}",
                header.n_records,
                records.len()
            )));
        }
        Ok(Self { header, records })
    }

    /// Problems found when re-hashing every referenced image under `root`.
    pub fn verify_images(&self, root: &Path) -> Vec<String> {
        let mut problems = Vec::new();
        for r in &self.records {
            let p = root.join(&r.image.path);
            match std::fs::read(&p) {
                Ok(bytes) if util::sha256_hex(&bytes) == r.image.sha256 => {}
                Ok(_) => problems.push(format!("{}: hash mismatch for {}", r.entity, p.display())),
                Err(e) => problems.push(format!("{}: {}: {e}", r.entity, p.display())),
            }
        }
        problems
    }
}

/// Manifest text with the header's timings removed, for run-to-run comparison.
pub fn without_timings(jsonl: &str) -> String {
    let mut lines = jsonl.lines();
    let Some(first) = lines.next() else {
        return String::new();
    };
    let mut header: serde_json::Value = serde_json::from_str(first).unwrap_or(serde_json::Value::Null);
    if let Some(obj) = header.as_object_mut() {
        obj.remove("stage_timings");
    }
    let mut out = header.to_string();
    out.push('\n');
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(entity: &str) -> ManifestRecord {
        ManifestRecord {
            entity: entity.into(),
            name: entity.into(),
            neighbors: vec![NeighborEntry {
                relation: "r".into(),
                tail: "t".into(),
                sim: Some(Sim::from(0.123456789)),
            }],
            prompt: "A photo of x".into(),
            prompt_source: PromptSource::Template,
            image: ImageEntry {
                path: format!("images/{entity}.png"),
                sha256: "00".into(),
                width: 8,
                height: 8,
            },
            backend: "mock".into(),
            seed: 1,
        }
    }

    #[test]
    fn round_trip_sorted() {
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            method: "vsns".into(),
            config_hash: "h".into(),
            tool_version: "0".into(),
            instruction_version: "v".into(),
            n_records: 2,
            stage_timings: BTreeMap::from([("load".to_string(), 0.5)]),
        };
        let m = Manifest::new(header, vec![record("b"), record("a")]);
        assert_eq!(m.records[0].entity, "a");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.jsonl");
        m.write(&p).unwrap();
        let back = Manifest::read(&p).unwrap();
        assert_eq!(back, m);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"sim\":0.123457"));
        assert!(!without_timings(&text).contains("stage_timings"));
        assert_eq!(back.verify_images(dir.path()).len(), 2);
    }
}
