//! End-to-end tests of every subcommand through the real binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_softeval"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn write_jsonl(path: &Path, records: &[serde_json::Value]) {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

fn sample(id: &str, task: &str, source: &str, answer_first: bool) -> serde_json::Value {
    let (a, b) = (format!("alpha {id}"), format!("beta {id}"));
    serde_json::json!({
        "id": id,
        "task": task,
        "source": source,
        "image_ref": null,
        "question": format!("Question {id}?"),
        "candidates": if answer_first { [a, b] } else { [b, a] },
        "answer_index": 0,
    })
}

fn write_benchmark(dir: &Path, n: usize) -> PathBuf {
    let samples: Vec<serde_json::Value> = (0..n)
        .map(|i| sample(&format!("s{i:03}"), "general_vqa", "unit", i % 2 == 0))
        .collect();
    write_jsonl(&dir.join("unit.jsonl"), &samples);
    let manifest = serde_json::json!({
        "name": "cli-bench",
        "entries": [{"source": "unit", "task": "general_vqa", "sample_count": n, "file": "unit.jsonl"}],
        "declared_total": n,
    });
    let path = dir.join("manifest.json");
    fs::write(&path, manifest.to_string()).unwrap();
    path
}

#[test]
fn validate_pass_and_fail_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_benchmark(dir.path(), 4);
    let ok = run(&["validate", "manifest.json"], dir.path());
    assert!(ok.status.success(), "{ok:?}");
    assert!(stdout(&ok).contains("PASS"));

    let bad = serde_json::json!({
        "name": "cli-bench",
        "entries": [{"source": "unit", "task": "general_vqa", "sample_count": 9, "file": "unit.jsonl"}],
        "declared_total": 9,
    });
    fs::write(dir.path().join("bad.json"), bad.to_string()).unwrap();
    let fail = run(&["validate", "bad.json"], dir.path());
    assert_eq!(fail.status.code(), Some(4), "{fail:?}");
    assert!(stdout(&fail).contains("FAIL"));
}

#[test]
fn evaluate_report_reliability_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    write_benchmark(dir.path(), 12);
    let config = serde_json::json!({
        "manifest": "manifest.json",
        "provider": {"kind": "mock-uniform", "vocab_size": 1000},
        "metrics": ["sds", "acc_logits", "ppl"],
        "seed": 3,
        "batch_size": 5,
        "output_dir": "out",
        "worker_count": 2,
    });
    fs::write(dir.path().join("run.json"), config.to_string()).unwrap();

    let eval = run(&["evaluate", "run.json"], dir.path());
    assert!(eval.status.success(), "{eval:?}");
    let by_source = fs::read_to_string(dir.path().join("out/reports/by_source.tsv")).unwrap();
    assert!(
        by_source.contains("sds\tperception\tgeneral_vqa\tunit\t0.5\t12"),
        "{by_source}"
    );

    // report is idempotent
    let r1 = run(&["report", "out", "--group-by", "ability"], dir.path());
    let r2 = run(&["report", "out", "--group-by", "ability"], dir.path());
    assert!(r1.status.success());
    assert_eq!(stdout(&r1), stdout(&r2));
    assert!(stdout(&r1).contains("sds\tperception\t-\t-\t0.5\t12"));

    let rel = run(
        &[
            "reliability",
            "out",
            "--sizes",
            "4,12",
            "--resamples",
            "6",
            "--seed",
            "9",
        ],
        dir.path(),
    );
    assert!(rel.status.success(), "{rel:?}");
    let text = stdout(&rel);
    assert!(text.contains("size\tsds\tresample_std"));
    assert!(text.lines().count() >= 3);

    // display rounding: exp(ln 1000) noise collapses to 1000 with --round
    let rounded = run(&["report", "out", "--round"], dir.path());
    assert!(rounded.status.success());
    assert!(
        stdout(&rounded).contains("ppl\tperception\tgeneral_vqa\tunit\t1000\t12"),
        "{}",
        stdout(&rounded)
    );
}

#[test]
fn evaluate_config_error_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write_benchmark(dir.path(), 3);
    // table provider with no NLLs cannot serve acc_ppl
    let entries: Vec<serde_json::Value> = (0..3)
        .flat_map(|i| {
            (0..2).map(move |j| {
                serde_json::json!({
                    "sample_id": format!("s{i:03}"),
                    "candidate_index": j,
                    "tokens": ["t"],
                    "logits": [0.5],
                })
            })
        })
        .collect();
    fs::write(
        dir.path().join("table.json"),
        serde_json::json!({"entries": entries}).to_string(),
    )
    .unwrap();
    let config = serde_json::json!({
        "manifest": "manifest.json",
        "provider": {"kind": "table", "path": "table.json"},
        "metrics": ["acc_ppl"],
        "output_dir": "out",
    });
    fs::write(dir.path().join("run.json"), config.to_string()).unwrap();
    let eval = run(&["evaluate", "run.json"], dir.path());
    assert_eq!(eval.status.code(), Some(2), "{eval:?}");
    assert!(!dir.path().join("out/results.jsonl").exists());
}

#[test]
fn evaluate_partial_failure_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    write_benchmark(dir.path(), 3);
    // table provider covering only two of three samples
    let entries: Vec<serde_json::Value> = (0..3)
        .filter(|i| *i != 1)
        .flat_map(|i| {
            (0..2).map(move |j| {
                serde_json::json!({
                    "sample_id": format!("s{i:03}"),
                    "candidate_index": j,
                    "tokens": ["t"],
                    "logits": [if j == 0 { 1.0 } else { 0.0 }],
                })
            })
        })
        .collect();
    fs::write(
        dir.path().join("table.json"),
        serde_json::json!({"entries": entries}).to_string(),
    )
    .unwrap();
    let config = serde_json::json!({
        "manifest": "manifest.json",
        "provider": {"kind": "table", "path": "table.json"},
        "metrics": ["sds"],
        "output_dir": "out",
    });
    fs::write(dir.path().join("run.json"), config.to_string()).unwrap();
    let eval = run(&["evaluate", "run.json"], dir.path());
    assert_eq!(eval.status.code(), Some(3), "{eval:?}");
    let report = run(&["report", "out"], dir.path());
    assert!(stdout(&report).contains("\t2\t"), "{}", stdout(&report));
}

#[test]
fn reformat_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<serde_json::Value> = (0..10)
        .map(|i| {
            serde_json::json!({
                "id": format!("q{i}"),
                "question": format!("Count the items in figure {i}"),
                "answer": format!("{}.{}", i + 1, i % 10),
            })
        })
        .collect();
    write_jsonl(&dir.path().join("math.jsonl"), &rows);
    let source = serde_json::json!({
        "source": "MathVista",
        "task": "mathematical_reasoning",
        "raw_kind": "free_form_numeric",
        "data": "math.jsonl",
        "output": "out/math.unified.jsonl",
    });
    fs::write(dir.path().join("source.json"), source.to_string()).unwrap();
    let policy = serde_json::json!({"target_candidate_count": 2, "seed": 99});
    fs::write(dir.path().join("policy.json"), policy.to_string()).unwrap();

    let first = run(&["reformat", "source.json", "policy.json"], dir.path());
    assert!(first.status.success(), "{first:?}");
    let bytes_first = fs::read(dir.path().join("out/math.unified.jsonl")).unwrap();
    let second = run(&["reformat", "source.json", "policy.json"], dir.path());
    assert!(second.status.success(), "{second:?}");
    let bytes_second = fs::read(dir.path().join("out/math.unified.jsonl")).unwrap();
    assert_eq!(bytes_first, bytes_second);

    // every line is a valid two-candidate sample
    let text = String::from_utf8(bytes_first).unwrap();
    assert_eq!(text.lines().count(), 10);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["candidates"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn reformat_partial_failure_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        serde_json::json!({"id": "ok", "question": "How many?", "answer": "4"}),
        serde_json::json!({"id": "bad", "question": "How many?", "answer": "four"}),
    ];
    write_jsonl(&dir.path().join("math.jsonl"), &rows);
    let source = serde_json::json!({
        "source": "MathVista",
        "task": "mathematical_reasoning",
        "raw_kind": "free_form_numeric",
        "data": "math.jsonl",
        "output": "out.jsonl",
    });
    fs::write(dir.path().join("source.json"), source.to_string()).unwrap();
    fs::write(dir.path().join("policy.json"), "{}").unwrap();
    let out = run(&["reformat", "source.json", "policy.json"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{out:?}");
    let text = fs::read_to_string(dir.path().join("out.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1);
}

#[test]
fn reformat_wiki_titles_build_pools() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<serde_json::Value> = (0..10)
        .map(|i| {
            serde_json::json!({
                "id": format!("w{i}"),
                "title": format!("Species number {i}"),
                "image_ref": format!("img/{i}.jpg"),
            })
        })
        .collect();
    write_jsonl(&dir.path().join("wiki.jsonl"), &rows);
    let source = serde_json::json!({
        "source": "Wiki-Plant",
        "task": "natural_concept_identification",
        "raw_kind": "wiki_title",
        "data": "wiki.jsonl",
        "output": "wiki.unified.jsonl",
        "fields": {"image": "image_ref"},
    });
    fs::write(dir.path().join("source.json"), source.to_string()).unwrap();
    fs::write(dir.path().join("policy.json"), r#"{"seed": 5}"#).unwrap();
    let out = run(&["reformat", "source.json", "policy.json"], dir.path());
    assert!(out.status.success(), "{out:?}");

    let text = fs::read_to_string(dir.path().join("wiki.unified.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 10);
    for (i, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["question"], "The image shows");
        let candidates = v["candidates"].as_array().unwrap();
        assert_eq!(candidates.len(), 2);
        let answer = format!("Species number {i}");
        let answer_index = v["answer_index"].as_u64().unwrap() as usize;
        assert_eq!(candidates[answer_index], answer.as_str());
        // distractor comes from the same-category pool
        let distractor = candidates[1 - answer_index].as_str().unwrap();
        assert!(distractor.starts_with("Species number"));
        assert_ne!(distractor, answer);
    }
}

#[test]
fn correlate_outputs_per_label_r() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("pre.tsv"),
        "step\tlabel\tscore\n100\tperception\t0.50\n200\tperception\t0.60\n300\tperception\t0.70\n100\treasoning\t0.50\n200\treasoning\t0.52\n300\treasoning\t0.49\n",
    )
    .unwrap();
    fs::write(
        dir.path().join("post.tsv"),
        "step\tlabel\tscore\n100\tperception\t0.30\n200\tperception\t0.50\n300\tperception\t0.70\n100\treasoning\t0.60\n200\treasoning\t0.55\n300\treasoning\t0.62\n",
    )
    .unwrap();
    let out = run(&["correlate", "pre.tsv", "post.tsv"], dir.path());
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.starts_with("label\tn\tpearson_r\n"), "{text}");
    assert!(
        text.contains("perception\t3\t1\n") || text.contains("perception\t3\t0.9999"),
        "{text}"
    );
    assert!(text.contains("reasoning\t3\t"), "{text}");
}

#[test]
fn correlate_constant_label_is_partial() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("pre.tsv"),
        "step\tlabel\tscore\n1\tflat\t0.5\n2\tflat\t0.5\n1\tok\t0.1\n2\tok\t0.2\n",
    )
    .unwrap();
    fs::write(
        dir.path().join("post.tsv"),
        "step\tlabel\tscore\n1\tflat\t0.3\n2\tflat\t0.6\n1\tok\t0.4\n2\tok\t0.9\n",
    )
    .unwrap();
    let out = run(&["correlate", "pre.tsv", "post.tsv"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{out:?}");
    assert!(stdout(&out).contains("ok\t2\t1"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("flat"));
}

#[test]
fn series_builds_step_matrix() {
    let dir = tempfile::tempdir().unwrap();
    write_benchmark(dir.path(), 6);
    for step in [100u64, 200] {
        let config = serde_json::json!({
            "manifest": "manifest.json",
            "provider": {"kind": "mock-hash", "seed": step, "vocab_size": 100},
            "metrics": ["sds"],
            "output_dir": format!("runs/step-{step}"),
            "checkpoint_step": step,
        });
        let name = format!("run{step}.json");
        fs::write(dir.path().join(&name), config.to_string()).unwrap();
        let eval = run(&["evaluate", &name], dir.path());
        assert!(eval.status.success(), "{eval:?}");
    }
    let out = run(&["series", "runs", "--metric", "sds"], dir.path());
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.starts_with("step\tgeneral_vqa\n"), "{text}");
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("100\t"));
    assert!(lines[2].starts_with("200\t"));
}
