use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use g2p_core::checkpoint::Checkpoint;
use g2p_core::synthetic::SyntheticLanguage;
use g2p_core::{LanguageTag, Lexicon};
use serde_json::{json, Value};
use tempfile::TempDir;

fn g2p(args: &[&str]) -> Output {
    g2p_with_stdin(args, "")
}

fn g2p_with_stdin(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_g2p"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary runs");
    child
        .stdin
        .take()
        .unwrap()
        .write_all(stdin.as_bytes())
        .unwrap();
    child.wait_with_output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tag(t: &str) -> LanguageTag {
    LanguageTag::new(t).unwrap()
}

fn write_lexicon(path: &Path, lex: &Lexicon) {
    fs::write(path, lex.to_tsv()).unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Ingests and splits two synthetic languages of `sizes` words with the low-resource split.
fn prepared_splits(dir: &Path, sizes: [usize; 2]) -> PathBuf {
    let a = SyntheticLanguage::transparent(tag("syn-a")).lexicon(sizes[0], 1);
    let b = SyntheticLanguage::conflicting(tag("syn-b")).lexicon(sizes[1], 2);
    write_lexicon(&dir.join("a.tsv"), &a);
    write_lexicon(&dir.join("b.tsv"), &b);
    let lex = dir.join("lex");
    let splits = dir.join("splits");
    let a_in = format!("syn-a:gen:{}", s(&dir.join("a.tsv")));
    let b_in = format!("syn-b:gen:{}", s(&dir.join("b.tsv")));
    ok(&g2p(&["ingest", "--input", &a_in, "--input", &b_in, "--out", s(&lex)]));
    ok(&g2p(&[
        "partition",
        "--lexicons",
        s(&lex),
        "--out",
        s(&splits),
        "--low-resource",
        "--min-entries",
        "300",
        "--seed",
        "3",
    ]));
    splits
}

fn write_config(dir: &Path, name: &str, train: Value) -> PathBuf {
    let mut train_cfg = json!({
        "learning_rate": 1e-3,
        "effective_batch_size": 32,
        "micro_batch_size": 16,
        "epochs": 2,
        "seed": 11
    });
    for (k, v) in train.as_object().unwrap() {
        train_cfg[k] = v.clone();
    }
    let cfg = json!({
        "model": {
            "d_model": 32, "n_heads": 2, "d_ff": 64,
            "n_encoder_layers": 1, "n_decoder_layers": 1,
            "max_src_len": 48, "max_tgt_len": 48, "dropout": 0.1
        },
        "train": train_cfg,
        "decode": { "beam_size": 2, "max_len": 24 }
    });
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn ingest_merges_sources_and_is_idempotent() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let words = SyntheticLanguage::transparent(tag("syn-a")).lexicon(400, 5);
    let entries = words.entries();
    let first = Lexicon::from_pairs(
        tag("syn-a"),
        entries[..300].iter().map(|e| (e.word.clone(), e.pronunciations[0].clone())),
    )
    .unwrap();
    let second = Lexicon::from_pairs(
        tag("syn-a"),
        entries[200..].iter().map(|e| (e.word.clone(), format!("{}ə", e.pronunciations[0]))),
    )
    .unwrap();
    write_lexicon(&d.join("one.tsv"), &first);
    write_lexicon(&d.join("two.tsv"), &second);
    let one = format!("syn-a:one:{}", s(&d.join("one.tsv")));
    let two = format!("syn-a:two:{}", s(&d.join("two.tsv")));
    let out = d.join("lex");
    let args = ["ingest", "--input", &one, "--input", &two, "--priority", "two,one", "--out", s(&out)];
    ok(&g2p(&args));

    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["languages"][0]["entries"], 400);
    assert_eq!(manifest["languages"][0]["pairs"], 500);
    let tsv = fs::read_to_string(out.join("syn-a.tsv")).unwrap();
    let overlap = &entries[250];
    let lines: Vec<&str> = tsv.lines().filter(|l| l.starts_with(&format!("{}\t", overlap.word))).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].ends_with('ə'), "priority source first: {lines:?}");

    let before = (fs::read(out.join("manifest.json")).unwrap(), tsv.clone());
    ok(&g2p(&args));
    assert_eq!(fs::read(out.join("manifest.json")).unwrap(), before.0);
    assert_eq!(fs::read_to_string(out.join("syn-a.tsv")).unwrap(), before.1);

    // The canonical file is a fixed point of ingestion.
    let again = d.join("again");
    let own = format!("syn-a:canon:{}", s(&out.join("syn-a.tsv")));
    ok(&g2p(&["ingest", "--input", &own, "--out", s(&again)]));
    assert_eq!(fs::read_to_string(again.join("syn-a.tsv")).unwrap(), tsv);
}

#[test]
fn ingest_rejects_empty_and_malformed_input() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let empty = g2p(&["ingest", "--out", s(&d.join("x"))]);
    assert!(!empty.status.success());
    assert!(!d.join("x/manifest.json").exists());
    assert!(g2p_core::commands::ingest(&[], &[], &d.join("y")).is_err());

    let bad = d.join("bad.tsv");
    fs::write(&bad, "a\tb\nc\td\nno tab here\ne\tf\ng\th\n").unwrap();
    let input = format!("syn-a:x:{}", s(&bad));
    let out = g2p(&["ingest", "--input", &input, "--out", s(&d.join("z"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.tsv"));
}

#[test]
fn partition_applies_the_entry_threshold_and_seed() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let big = SyntheticLanguage::transparent(tag("syn-a")).lexicon(3001, 1);
    let small = SyntheticLanguage::variant(tag("syn-d")).lexicon(2999, 2);
    write_lexicon(&d.join("a.tsv"), &big);
    write_lexicon(&d.join("d.tsv"), &small);
    let lex = d.join("lex");
    let a_in = format!("syn-a:gen:{}", s(&d.join("a.tsv")));
    let d_in = format!("syn-d:gen:{}", s(&d.join("d.tsv")));
    ok(&g2p(&["ingest", "--input", &a_in, "--input", &d_in, "--out", s(&lex)]));

    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["partition", "--lexicons", s(&lex), "--out", s(out), "--seed", "9"];
        args.extend_from_slice(extra);
        ok(&g2p(&args));
        read_json(&out.join("splits.json"))
    };
    let m = run(&d.join("std"), &[]);
    assert_eq!(m["spec"]["seed"], 9);
    assert_eq!(m["min_entries"], 3000);
    assert_eq!(m["languages"].as_array().unwrap().len(), 1);
    assert_eq!(m["languages"][0]["language"], "syn-a");
    assert_eq!(
        (&m["languages"][0]["train"], &m["languages"][0]["dev"], &m["languages"][0]["test"]),
        (
            &json!({"file": "syn-a/train.tsv", "words": 2451}),
            &json!({"file": "syn-a/dev.tsv", "words": 50}),
            &json!({"file": "syn-a/test.tsv", "words": 500})
        )
    );
    assert_eq!(m["ineligible"], json!([{"language": "syn-d", "entries": 2999}]));

    let low = run(&d.join("low"), &["--low-resource"]);
    assert_eq!(low["languages"][0]["test"]["words"], 200);
    assert_eq!(low["languages"][0]["train"]["words"], 2751);

    run(&d.join("std2"), &[]);
    for f in ["splits.json", "syn-a/train.tsv", "syn-a/dev.tsv", "syn-a/test.tsv"] {
        assert_eq!(
            fs::read(d.join("std").join(f)).unwrap(),
            fs::read(d.join("std2").join(f)).unwrap(),
            "{f}"
        );
    }

    let missing = g2p(&["partition", "--lexicons", s(&d.join("nowhere")), "--out", s(&d.join("o"))]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn train_predict_and_eval_end_to_end() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let splits = prepared_splits(d, [400, 500]);
    let cfg = write_config(d, "run.json", json!({}));
    let model = d.join("multi");
    ok(&g2p(&["--config", s(&cfg), "train", "--splits", s(&splits), "--out", s(&model)]));
    let saved = read_json(&model.join("config.json"));
    assert_eq!(saved["train"]["unk_mask_rate"], 0.15);
    assert_eq!(saved["train"]["seed"], 11);
    let report = read_json(&model.join("report.json"));
    assert_eq!(report["history"].as_array().unwrap().len(), 2);
    assert!(report["selected"].is_number());

    // Monolingual run: masking is off and the saved config says so.
    let mono = d.join("mono");
    ok(&g2p(&[
        "--config", s(&cfg), "train", "--splits", s(&splits), "--out", s(&mono), "--languages", "syn-a",
    ]));
    let saved = read_json(&mono.join("config.json"));
    assert_eq!(saved["train"]["unk_mask_rate"], 0.0);
    assert_eq!(saved["train"]["language_filter"], json!(["syn-a"]));

    let ckpt = model.join("model.ckpt");
    let predict = |tag: &str, input: &str| {
        g2p_with_stdin(&["--config", s(&cfg), "predict", "--checkpoint", s(&ckpt), "--tag", tag], input)
    };
    let text = ok(&predict("syn-a", "casa\n\nmesa\n"));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for (line, word) in lines.iter().zip(["casa", "mesa"]) {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 3, "{line}");
        assert_eq!(fields[0], word);
        assert!(fields[2].parse::<f64>().unwrap() <= 0.0);
    }
    assert_eq!(ok(&predict("syn-a", "casa\n\nmesa\n")), text);
    assert_eq!(ok(&predict("unk", "casa\n")).lines().count(), 1);
    assert_eq!(ok(&predict("syn-a", "")), "");

    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let broken = d.join("broken.ckpt");
    fs::write(&broken, bytes).unwrap();
    let out = g2p_with_stdin(&["predict", "--checkpoint", s(&broken)], "casa\n");
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CRC"));

    let eval_dir = d.join("eval");
    let table = ok(&g2p(&[
        "--config", s(&cfg), "eval", "--checkpoint", s(&ckpt), "--splits", s(&splits), "--out", s(&eval_dir),
        "--correlate",
    ]));
    assert!(table.contains("PER/WER(%)"));
    let row = table.lines().find(|l| l.starts_with("syn-b")).expect("syn-b row");
    let cell = row.split_whitespace().find(|c| c.contains('/')).unwrap();
    let (per, wer) = cell.split_once('/').unwrap();
    for part in [per, wer] {
        assert_eq!(part.split_once('.').unwrap().1.len(), 1, "{cell}");
    }
    let report = read_json(&eval_dir.join("eval.json"));
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert!(report["correlation"]["spearman_rho"].is_number());
    assert_eq!(fs::read_to_string(eval_dir.join("eval.txt")).unwrap(), table);

    // The monolingual checkpoint is scored on its own language only.
    let json_out = ok(&g2p(&[
        "--config", s(&cfg), "eval", "--checkpoint", s(&mono.join("model.ckpt")), "--splits", s(&splits), "--json",
    ]));
    let v: Value = serde_json::from_str(&json_out).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 1);

    // Fine-tuning needs the architecture the checkpoint was built with.
    let other = d.join("other.json");
    let mut cfg_v = read_json(&cfg);
    cfg_v["model"]["d_ff"] = json!(128);
    fs::write(&other, cfg_v.to_string()).unwrap();
    let out = g2p(&[
        "--config", s(&other), "finetune", "--checkpoint", s(&ckpt), "--splits", s(&splits),
        "--out", s(&d.join("ft")), "--languages", "syn-b",
    ]);
    assert_eq!(out.status.code(), Some(2));
    ok(&g2p(&[
        "--config", s(&cfg), "finetune", "--checkpoint", s(&ckpt), "--splits", s(&splits),
        "--out", s(&d.join("ft")), "--languages", "syn-b",
    ]));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let splits = prepared_splits(d, [400, 500]);
    let full_cfg = write_config(d, "full.json", json!({"epochs": 3}));
    // 400 training pairs in batches of 32: 13 steps per epoch; stop after the first epoch.
    let cut_cfg = write_config(d, "cut.json", json!({"epochs": 3, "max_steps": 13}));

    let full = d.join("full");
    ok(&g2p(&["--config", s(&full_cfg), "train", "--splits", s(&splits), "--out", s(&full)]));
    let part = d.join("part");
    ok(&g2p(&["--config", s(&cut_cfg), "train", "--splits", s(&splits), "--out", s(&part)]));
    assert_eq!(read_json(&part.join("report.json"))["history"].as_array().unwrap().len(), 1);
    ok(&g2p(&["--config", s(&full_cfg), "train", "--splits", s(&splits), "--out", s(&part), "--resume"]));

    let history = |p: &Path| read_json(&p.join("report.json"))["history"].clone();
    assert_eq!(history(&full), history(&part));
    for f in ["model.ckpt", "state/last.ckpt", "state/last.adam"] {
        let a = Checkpoint::load(&full.join(f)).unwrap();
        let b = Checkpoint::load(&part.join(f)).unwrap();
        assert_eq!(a.payloads, b.payloads, "{f}");
        assert_eq!(a.header.step, b.header.step);
    }

    // Resuming under a different configuration is refused.
    let other = write_config(d, "other.json", json!({"epochs": 3, "learning_rate": 5e-4}));
    let out = g2p(&["--config", s(&other), "train", "--splits", s(&splits), "--out", s(&part), "--resume"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"train": {"epochz": 3}}"#).unwrap();
    let out = g2p(&["--config", s(&path), "predict", "--checkpoint", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}
