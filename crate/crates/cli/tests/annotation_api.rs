use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use kg2mmkg_cli::server::{router, AppState, Sources};
use kg2mmkg_core::annotation::{Criterion, Store};
use kg2mmkg_core::backends::{ImageGenerator, MockImageGenerator};
use kg2mmkg_core::pipeline::manifest::{ImageEntry, ManifestHeader, NeighborEntry, MANIFEST_FORMAT};
use kg2mmkg_core::pipeline::{entity_slug, Layout, Manifest, ManifestRecord, Method};
use kg2mmkg_core::prompts::PromptSource;
use kg2mmkg_core::util::atomic_write;

const SOURCES: [&str; 4] = ["vsns", "name-only", "longest-token", "real"];
const ENTITIES: [&str; 2] = ["film:night_express", "person:dary_holm"];

/// Rank each annotator gives to each source, in `SOURCES` order; 4 is best.
const PREFERENCES: [[u32; 4]; 3] = [[4, 2, 3, 1], [3, 1, 4, 2], [4, 1, 2, 3]];

/// Writes one manifest per method plus real images and returns the image
/// bytes of every (entity, source).
fn fixture(root: &Path, reals: &Path) -> HashMap<Vec<u8>, (String, String)> {
    let t2i = MockImageGenerator::new(9);
    let mut by_bytes = HashMap::new();
    for m in Method::ALL {
        let mut records = Vec::new();
        for e in ENTITIES {
            let rel = format!("methods/{}/images/{}.png", m.name(), entity_slug(e));
            let img = t2i.generate(&format!("{} {e}", m.name()), 0, 8, 8).unwrap();
            atomic_write(&root.join(&rel), &img.bytes).unwrap();
            by_bytes.insert(img.bytes.clone(), (e.to_owned(), m.name().to_owned()));
            records.push(ManifestRecord {
                entity: e.into(),
                name: e.into(),
                neighbors: vec![NeighborEntry {
                    relation: "hasGenre".into(),
                    tail: "Drama".into(),
                    sim: None,
                }],
                prompt: String::new(),
                prompt_source: PromptSource::Template,
                image: ImageEntry {
                    path: rel,
                    sha256: img.sha256,
                    width: 8,
                    height: 8,
                },
                backend: "mock".into(),
                seed: 0,
            });
        }
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            method: m.name().into(),
            config_hash: String::new(),
            tool_version: String::new(),
            instruction_version: String::new(),
            n_records: records.len(),
            stage_timings: BTreeMap::new(),
        };
        let layout = Layout { root: root.to_owned() };
        Manifest::new(header, records).write(&layout.manifest(m)).unwrap();
    }
    for e in ENTITIES {
        let img = t2i.generate(&format!("real {e}"), 0, 8, 8).unwrap();
        atomic_write(&reals.join(entity_slug(e)).join("0.png"), &img.bytes).unwrap();
        by_bytes.insert(img.bytes, (e.to_owned(), "real".to_owned()));
    }
    by_bytes
}

fn serve(state: AppState) -> String {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        tokio::runtime::Builder::new_multi_thread()
            .worker_threads(1)
            .enable_all()
            .build()
            .unwrap()
            .block_on(async move {
                let l = tokio::net::TcpListener::from_std(listener).unwrap();
                axum::serve(l, router(state, None)).await.unwrap();
            });
    });
    format!("http://{addr}")
}

/// Every string anywhere in a JSON value.
fn strings(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::String(s) => out.push(s.clone()),
        Value::Array(a) => a.iter().for_each(|x| strings(x, out)),
        Value::Object(o) => o.iter().for_each(|(k, x)| {
            out.push(k.clone());
            strings(x, out)
        }),
        _ => {}
    }
}

#[test]
fn three_annotators_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("out");
    let reals = dir.path().join("reals");
    let by_bytes = fixture(&root, &reals);
    let log = dir.path().join("annotations.jsonl");
    let sources = Sources {
        layout: Layout { root: root.clone() },
        methods: Method::ALL.to_vec(),
        reals: Some(reals),
    };
    let base = serve(AppState::new(Store::open(&log).unwrap(), sources));
    let http = Client::new();

    let created: Value = http
        .post(format!("{base}/sessions"))
        .json(&json!({"dataset": "mini", "sample_size": 2, "seed": 3, "include_real": true}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(created["n_items"], 2);
    assert_eq!(created["slots_per_item"], 4);
    let session = created["session"].as_str().unwrap().to_owned();

    let mut orders = Vec::new();
    for (a, prefs) in PREFERENCES.iter().enumerate() {
        let annotator = format!("ann{a}");
        let view: Value = http
            .get(format!("{base}/sessions/{session}/items?annotator={annotator}"))
            .send()
            .unwrap()
            .json()
            .unwrap();
        let mut texts = Vec::new();
        strings(&view, &mut texts);
        for s in SOURCES {
            assert!(!texts.iter().any(|t| t == s), "source name {s} leaked to annotator");
        }
        assert!(!texts.iter().any(|t| t == "source"));

        for item in view["items"].as_array().unwrap() {
            let item_id = item["item"].as_str().unwrap();
            let mut display_sources = Vec::new();
            for slot in item["slots"].as_array().unwrap() {
                let bytes = http
                    .get(format!("{base}{}", slot["image_url"].as_str().unwrap()))
                    .send()
                    .unwrap()
                    .bytes()
                    .unwrap();
                let (entity, source) = &by_bytes[bytes.as_ref()];
                assert_eq!(entity, item["entity"].as_str().unwrap());
                display_sources.push(source.clone());
            }
            orders.push(display_sources.clone());
            for c in Criterion::ALL {
                let ranking: Vec<u32> = display_sources
                    .iter()
                    .map(|s| {
                        let r = prefs[SOURCES.iter().position(|x| x == s).unwrap()];
                        if c == Criterion::CIKG { 5 - r } else { r }
                    })
                    .collect();
                let st = http
                    .post(format!("{base}/ratings"))
                    .json(&json!({"session": session, "annotator": annotator, "item": item_id, "criterion": c, "ranking": ranking}))
                    .send()
                    .unwrap()
                    .status();
                assert_eq!(st, StatusCode::OK);
            }
        }

        let after: Value = http
            .get(format!("{base}/sessions/{session}/items?annotator={annotator}"))
            .send()
            .unwrap()
            .json()
            .unwrap();
        assert_eq!(after["remaining"], json!({"IQ": 0, "CIE": 0, "CIKG": 0}));
        assert_eq!(after["items"][0]["slots"], view["items"][0]["slots"], "display order is stable");
    }
    assert!(orders.windows(2).any(|w| w[0] != w[1]), "annotators see different slot orders");

    let results: Value = http
        .get(format!("{base}/sessions/{session}/results"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(results["rank_sums_conserved"], true);
    let hand_iq = [11.0 / 3.0, 4.0 / 3.0, 3.0, 2.0];
    let hand_cikg = [4.0 / 3.0, 11.0 / 3.0, 2.0, 3.0];
    for (c, hand) in [("IQ", hand_iq), ("CIE", hand_iq), ("CIKG", hand_cikg)] {
        assert_eq!(results["n_ratings"][c], 6);
        for (s, want) in SOURCES.iter().zip(hand) {
            let got = results["means"][c][s].as_f64().unwrap();
            assert!((got - want).abs() < 1e-9, "{c} {s}: {got} vs {want}");
        }
    }

    // a restarted service replays the log to the same state
    let replayed = Store::open(&log).unwrap().aggregate(&session).unwrap();
    assert_eq!(serde_json::to_value(&replayed).unwrap(), results);
}

#[test]
fn bad_requests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("out");
    let reals = dir.path().join("reals");
    fixture(&root, &reals);
    let sources = Sources {
        layout: Layout { root },
        methods: Method::ALL.to_vec(),
        reals: None,
    };
    let base = serve(AppState::new(Store::in_memory(), sources));
    let http = Client::new();

    let st = http
        .post(format!("{base}/sessions"))
        .json(&json!({"sample_size": 1, "include_real": true}))
        .send()
        .unwrap()
        .status();
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY, "no reals configured");

    let created: Value = http
        .post(format!("{base}/sessions"))
        .json(&json!({"sample_size": 1}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(created["slots_per_item"], 3);
    let session = created["session"].as_str().unwrap();
    let view: Value = http
        .get(format!("{base}/sessions/{session}/items?annotator=x"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    let item = view["items"][0]["item"].as_str().unwrap();

    let rate = |ranking: Value, item: &str, session: &str| {
        http.post(format!("{base}/ratings"))
            .json(&json!({"session": session, "annotator": "x", "item": item, "criterion": "IQ", "ranking": ranking}))
            .send()
            .unwrap()
            .status()
    };
    assert_eq!(rate(json!([1, 1, 3]), item, session), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(rate(json!([1, 2]), item, session), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(rate(json!([1, 2, 4]), item, session), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(rate(json!([1, 2, 3]), "nope", session), StatusCode::NOT_FOUND);
    assert_eq!(rate(json!([1, 2, 3]), item, "nope"), StatusCode::NOT_FOUND);
    assert_eq!(rate(json!([3, 1, 2]), item, session), StatusCode::OK);

    let get = |path: String| http.get(format!("{base}{path}")).send().unwrap().status();
    assert_eq!(get(format!("/sessions/nope/items?annotator=x")), StatusCode::NOT_FOUND);
    assert_eq!(get(format!("/sessions/nope/results")), StatusCode::NOT_FOUND);
    assert_eq!(get(format!("/items/{item}?slot=zzz")), StatusCode::NOT_FOUND);
}
