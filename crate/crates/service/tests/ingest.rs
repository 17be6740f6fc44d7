mod common;

use std::io::Write;

use proptest::prelude::*;
use vsearch::synthetic::{click_logs, ClickLogConfig};
use vsearch_service::ingest::{assemble, ingest, read_items, IngestConfig, IngestPaths, Inventory};
use vsearch_service::ServiceError;

use common::*;

fn inventory(seed: u64, items: usize, dim: usize) -> Inventory {
    let inv = small_inventory(seed, items, dim);
    let (logs, _) = click_logs(&inv, &ClickLogConfig { seed, records: 200, ..Default::default() }).unwrap();
    assemble(inv.items.clone(), scores_map(&inv), logs, Vec::new(), &IngestConfig::default()).unwrap()
}

fn item_lines(inv: &Inventory) -> Vec<String> {
    let mut buf = Vec::new();
    inv.write_items(&mut buf).unwrap();
    String::from_utf8(buf).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn one_malformed_line_in_ten_thousand_is_skipped_and_reported() {
    let inv = inventory(1, 10_000, 8);
    let mut lines = item_lines(&inv);
    lines[4321] = r#"{"id": 4321, "category": 3, "vec": [0.1, "#.to_string();
    let (items, rejects) = read_items("items.jsonl", lines.join("\n").as_bytes(), &IngestConfig::default()).unwrap();
    assert_eq!(items.len(), 9_999);
    assert_eq!(rejects.len(), 1);
    assert_eq!(rejects[0].line, 4322);
    assert_eq!(rejects[0].file, "items.jsonl");
    assert!(rejects[0].to_string().starts_with("items.jsonl:4322: "));
    assert!(items.iter().all(|it| it.id != inv.items[4321].id));
}

#[test]
fn too_many_rejects_refuse_the_file() {
    let inv = inventory(2, 1_000, 8);
    let mut lines = item_lines(&inv);
    // 10 of 1000 is exactly the default 1% and still accepted
    for l in lines.iter_mut().take(10) {
        *l = "garbage".into();
    }
    let cfg = IngestConfig::default();
    let (items, rejects) = read_items("a", lines.join("\n").as_bytes(), &cfg).unwrap();
    assert_eq!((items.len(), rejects.len()), (990, 10));

    lines[10] = "garbage".into();
    match read_items("a", lines.join("\n").as_bytes(), &cfg) {
        Err(ServiceError::Ingest { rejected, lines, rejects, .. }) => {
            assert_eq!((rejected, lines), (11, 1000));
            assert_eq!(rejects.iter().map(|r| r.line).collect::<Vec<_>>(), (1..=11).collect::<Vec<_>>());
        }
        other => panic!("expected an ingest error, got {other:?}"),
    }
}

#[test]
fn export_then_ingest_reproduces_checksums() {
    let inv = inventory(3, 800, 16);
    let dir = tempfile::tempdir().unwrap();
    let (paths, first) = inv.export(&dir.path().join("a")).unwrap();
    let again = ingest(&paths, &IngestConfig::default()).unwrap();
    assert_eq!(again.items, inv.items);
    assert_eq!(again.model_scores, inv.model_scores);
    assert_eq!(again.click_logs, inv.click_logs);
    let (_, second) = again.export(&dir.path().join("b")).unwrap();
    assert_eq!(first, second);
    for name in ["items.jsonl", "model_scores.jsonl", "click_logs.jsonl"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(name)).unwrap(),
            std::fs::read(dir.path().join("b").join(name)).unwrap()
        );
    }
}

#[test]
fn empty_files_give_an_empty_inventory() {
    let dir = tempfile::tempdir().unwrap();
    let paths = IngestPaths {
        items: dir.path().join("items.jsonl"),
        model_scores: Some(dir.path().join("scores.jsonl")),
        click_logs: Some(dir.path().join("logs.jsonl")),
    };
    for p in [&paths.items, paths.model_scores.as_ref().unwrap(), paths.click_logs.as_ref().unwrap()] {
        std::fs::File::create(p).unwrap().write_all(b"\n\n").unwrap();
    }
    let inv = ingest(&paths, &IngestConfig::default()).unwrap();
    assert!(inv.items.is_empty() && inv.model_scores.is_empty() && inv.click_logs.is_empty());
    assert!(inv.rejects.is_empty());
}

#[test]
fn references_to_unknown_items_are_rejected() {
    let inv = inventory(4, 300, 8);
    let dir = tempfile::tempdir().unwrap();
    let (paths, _) = inv.export(dir.path()).unwrap();
    let scores = paths.model_scores.as_ref().unwrap();
    let mut text = std::fs::read_to_string(scores).unwrap();
    text.push_str(&format!("{{\"id\": 999999, \"scores\": {:?}}}\n", vec![0.0f32; 14]));
    std::fs::write(scores, text).unwrap();
    let got = ingest(&paths, &IngestConfig { max_reject_fraction: 0.5, ..Default::default() }).unwrap();
    assert_eq!(got.rejects.len(), 1);
    assert_eq!(got.rejects[0].line, 301);
    assert!(got.rejects[0].message.contains("999999"));
    assert_eq!(got.model_scores, inv.model_scores);
}

#[test]
fn dedup_drops_exact_copies_and_their_references() {
    let inv = inventory(5, 400, 16);
    let mut items = inv.items.clone();
    let mut copy = items[17].clone();
    copy.id = 1_000_000;
    items.push(copy);
    let mut scores = inv.model_scores.clone();
    scores.insert(1_000_000, vec![1.0; 14]);
    let cfg = IngestConfig { dedup_hamming: Some(0), ..Default::default() };
    let got = assemble(items, scores, inv.click_logs.clone(), Vec::new(), &cfg).unwrap();
    assert!(got.duplicates_removed.contains(&1_000_000));
    assert!(!got.model_scores.contains_key(&1_000_000));
    assert!(got.items.iter().all(|it| it.id != 1_000_000));
    assert!(got.items.windows(2).all(|w| w[0].id < w[1].id));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_corrupted_line_is_reported_with_its_number(
        bad in proptest::collection::btree_set(0usize..200, 0..=2),
    ) {
        let inv = inventory(6, 200, 4);
        let mut lines = item_lines(&inv);
        for &i in &bad {
            lines[i] = "{".into();
        }
        let (items, rejects) = read_items("f", lines.join("\n").as_bytes(), &IngestConfig::default()).unwrap();
        prop_assert_eq!(items.len(), 200 - bad.len());
        prop_assert_eq!(rejects.iter().map(|r| r.line - 1).collect::<Vec<_>>(), bad.into_iter().collect::<Vec<_>>());
    }
}
