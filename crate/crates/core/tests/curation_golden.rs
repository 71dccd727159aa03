mod common;

use std::fs;
use std::path::Path;

use common::scenes::{scenes, Constructed, DENIED};
use selfrecon::curation::{curate_instance, CurationConfig, CurationReport, Verdict, MANIFEST_FILE, REPORT_FILE};
use selfrecon::shell::run_from_args;
use serde_json::{json, Value};

const SCENES: usize = 60;
const GOLDEN: &str = "tests/data/golden_curation_manifest.jsonl";

fn golden_rows(built: &[Constructed]) -> Vec<Value> {
    built
        .iter()
        .flat_map(|c| {
            c.record.instances.iter().zip(&c.expected).map(|((meta, _), v)| {
                let mut row = json!({ "scene": c.record.id, "instance": meta.id });
                row.as_object_mut().unwrap().extend(serde_json::to_value(v).unwrap().as_object().unwrap().clone());
                row
            })
        })
        .collect()
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn verdict_fields(row: &Value) -> Value {
    json!({
        "scene": row["scene"],
        "instance": row["instance"],
        "verdict": row["verdict"],
        "reason": row.get("reason").cloned().unwrap_or(Value::Null),
    })
}

fn curate(input: &Path, output: &Path, extra: &[&str]) -> i32 {
    let mut args =
        vec!["selfrecon", "curate", "--input", input.to_str().unwrap(), "--output", output.to_str().unwrap()];
    args.extend_from_slice(extra);
    run_from_args(args)
}

#[test]
fn golden_file_matches_construction() {
    let built = scenes(SCENES);
    let expected: String = golden_rows(&built).iter().map(|r| r.to_string() + "\n").collect();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN);
    if std::env::var_os("SELFRECON_BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, &expected).unwrap();
    }
    assert_eq!(fs::read_to_string(&path).unwrap(), expected, "rerun with SELFRECON_BLESS=1 after changing the scenes");
}

#[test]
fn every_constructed_instance_gets_its_verdict() {
    let cfg = CurationConfig::default();
    let deny = vec![DENIED.to_string()];
    let mut wrong = Vec::new();
    for c in scenes(SCENES) {
        for (i, want) in c.expected.iter().enumerate() {
            let got = curate_instance(&c.record, i, &deny, &cfg);
            if got.verdict != *want {
                wrong.push(format!(
                    "{} {}: want {want:?}, got {:?} ({:?})",
                    c.record.id, i, got.verdict, got.diagnostics
                ));
            }
        }
    }
    assert!(wrong.is_empty(), "{}", wrong.join("\n"));
}

#[test]
fn cli_manifest_equals_golden_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("scenes");
    for c in scenes(SCENES) {
        c.record.save(&input.join(&c.record.id)).unwrap();
    }
    let out = tmp.path().join("curated");
    assert_eq!(curate(&input, &out, &["--deny", DENIED]), 0);

    let got: Vec<Value> = read_jsonl(&out.join(MANIFEST_FILE)).iter().map(verdict_fields).collect();
    let golden: Vec<Value> =
        read_jsonl(&Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN)).iter().map(verdict_fields).collect();
    assert_eq!(got.len(), golden.len());
    let mismatches: Vec<String> =
        got.iter().zip(&golden).filter(|(g, w)| g != w).map(|(g, w)| format!("got {g}, want {w}")).collect();
    assert!(mismatches.is_empty(), "{}", mismatches.join("\n"));

    // nothing the construction says to drop is kept
    let false_keeps = got.iter().zip(&golden).filter(|(g, w)| g["verdict"] == "keep" && w["verdict"] != "keep").count();
    assert_eq!(false_keeps, 0);

    let report: CurationReport = serde_json::from_str(&fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
    let kept = golden.iter().filter(|r| r["verdict"] == "keep").count();
    assert_eq!(report.kept, kept);
    assert_eq!(report.input_count, golden.len());
    let kept_dirs = fs::read_dir(out.join("kept")).unwrap().count();
    assert_eq!(kept_dirs, kept);
}

#[test]
fn denylist_flag_controls_category_drops() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("scenes");
    let built = scenes(20);
    for c in &built {
        c.record.save(&input.join(&c.record.id)).unwrap();
    }
    let denied = built
        .iter()
        .flat_map(|c| &c.expected)
        .filter(|v| **v == Verdict::Drop(selfrecon::curation::DropReason::Category))
        .count();
    assert!(denied > 0);

    let read_report = |dir: &Path| -> CurationReport {
        serde_json::from_str(&fs::read_to_string(dir.join(REPORT_FILE)).unwrap()).unwrap()
    };
    let with = tmp.path().join("with");
    let without = tmp.path().join("without");
    assert_eq!(curate(&input, &with, &["--deny", DENIED]), 0);
    assert_eq!(curate(&input, &without, &[]), 0);
    let (with, without) = (read_report(&with), read_report(&without));
    assert_eq!(with.dropped.get("category").copied().unwrap_or(0), denied);
    assert_eq!(without.dropped.get("category"), None);
    assert_eq!(without.kept, with.kept + denied);
}

#[test]
fn empty_input_gives_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("empty");
    fs::create_dir_all(&input).unwrap();
    let out = tmp.path().join("out");
    assert_eq!(curate(&input, &out, &[]), 0);
    assert!(read_jsonl(&out.join(MANIFEST_FILE)).is_empty());
}

#[test]
fn missing_input_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(curate(&tmp.path().join("nope"), &tmp.path().join("out"), &[]), 2);
}
