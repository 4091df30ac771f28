use std::path::{Path, PathBuf};

use kg2mmkg_core::kg;
use kg2mmkg_core::pipeline::manifest::without_timings;
use kg2mmkg_core::pipeline::{Manifest, Method, Pipeline, PipelineConfig, PipelineError, RunOptions, Stage};

fn mini_kg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mini-kg")
}

fn config(out: &Path) -> PipelineConfig {
    let text = format!(
        r#"
[dataset]
dir = "{}"

[output]
dir = "{}"

[encoder]
epochs = 40

[images]
width = 32
height = 32

[kgc]
dim = 8
epochs = 10
"#,
        mini_kg().display(),
        out.display()
    );
    PipelineConfig::from_toml(&text).unwrap()
}

fn pipeline(cfg: &PipelineConfig) -> Pipeline {
    Pipeline::new(cfg.clone(), &RunOptions::default()).unwrap()
}

fn run_through(p: &Pipeline, last: Stage) {
    for s in Stage::SEQUENCE {
        p.run(s).unwrap();
        if s == last {
            break;
        }
    }
}

fn manifest_text(out: &Path, m: &str) -> String {
    let p = if m == "vsns" {
        out.join("manifest.jsonl")
    } else {
        out.join("methods").join(m).join("manifest.jsonl")
    };
    without_timings(&std::fs::read_to_string(p).unwrap())
}

#[test]
fn downstream_stage_without_upstream_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = pipeline(&config(dir.path())).run(Stage::SelectNeighbors).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(err.to_string().contains("train-embed"), "{err}");
}

#[test]
fn bad_configs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.dataset.dir = dir.path().join("nowhere");
    let err = Pipeline::new(cfg, &RunOptions::default()).err().unwrap();
    assert_eq!(err.exit_code(), 2);
    let mut cfg = config(dir.path());
    cfg.vns.mu = 1.5;
    assert!(matches!(Pipeline::new(cfg, &RunOptions::default()), Err(PipelineError::Config(_))));
    assert!(PipelineConfig::from_toml("[dataset]\ndir = 3\n").is_err());
}

#[test]
fn rerun_is_cached_and_calls_no_backend() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let first = pipeline(&cfg);
    let outcomes = first.run(Stage::All).unwrap();
    assert!(outcomes.iter().all(|o| !o.cached));
    assert!(first.backends().total_calls() > 0);
    let before = manifest_text(dir.path(), "vsns");

    let second = pipeline(&cfg);
    let outcomes = second.run(Stage::All).unwrap();
    assert_eq!(outcomes.len(), 8);
    assert!(outcomes.iter().all(|o| o.cached));
    assert_eq!(second.backends().total_calls(), 0);
    assert_eq!(manifest_text(dir.path(), "vsns"), before);

    let m = Manifest::read(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(m.records.len(), 50);
    assert!(m.verify_images(dir.path()).is_empty());
    for name in ["graph_summary.json", "embeddings.json", "relation_scores.json", "metrics_report.json", "kgc_report.json", "features.jsonl"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }

    let mut changed = cfg.clone();
    changed.run.seed = 1;
    let third = pipeline(&changed);
    let outcomes = third.run(Stage::All).unwrap();
    assert!(outcomes[0].cached, "dataset unchanged");
    assert!(!outcomes[1].cached, "encoder seed changed");
    assert_ne!(manifest_text(dir.path(), "vsns"), before);
}

#[test]
fn interrupted_generation_resumes_to_the_same_manifests() {
    let reference = tempfile::tempdir().unwrap();
    run_through(&pipeline(&config(reference.path())), Stage::GenImages);

    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    run_through(&pipeline(&cfg), Stage::GenPrompts);
    let mut faulty = cfg.clone();
    faulty.backends.t2i.fail_after = Some(20);
    faulty.backends.t2i.max_retries = 0;
    let err = pipeline(&faulty).run(Stage::GenImages).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
    let progress = std::fs::read_to_string(dir.path().join("methods/vsns/images/progress.jsonl")).unwrap();
    assert_eq!(progress.lines().count(), 21, "header plus twenty finished images");
    assert!(!dir.path().join("manifest.jsonl").exists());

    let resumed = pipeline(&cfg);
    resumed.run(Stage::GenImages).unwrap();
    let t2i_calls = resumed
        .backends()
        .calls_by_service()
        .into_iter()
        .find(|(n, _)| *n == "t2i")
        .unwrap()
        .1;
    assert_eq!(t2i_calls, 3 * 50 - 20);
    for m in Method::ALL {
        assert_eq!(manifest_text(dir.path(), m.name()), manifest_text(reference.path(), m.name()), "{}", m.name());
    }
}

#[test]
fn heads_only_restricts_targets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let p = Pipeline::new(
        cfg,
        &RunOptions {
            heads_only: true,
            ..Default::default()
        },
    )
    .unwrap();
    run_through(&p, Stage::GenImages);
    let g = kg::load_dir(&mini_kg()).unwrap();
    let heads = g.out_index().iter().filter(|e| !e.is_empty()).count();
    let m = Manifest::read(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(m.records.len(), heads);
    assert!(heads < 50);
}
