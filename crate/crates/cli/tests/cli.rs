use std::fs;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dnsgt_core::ingest::{parse_jsonl, PcapWriter};
use serde_json::Value;

fn dnsgt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dnsgt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dnsgt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code plus the parsed one-line error.
fn fails(dir: &Path, args: &[&str]) -> (i32, Value) {
    let out = dnsgt(dir, args);
    let code = out.status.code().unwrap();
    assert_ne!(code, 0, "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    (code, serde_json::from_str(lines[0]).unwrap())
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Synthetic tiny corpus plus a short pre-training run in `dir/d`.
fn pretrained(dir: &Path, steps: &str) -> PathBuf {
    ok(dir, &["synth", "--preset", "tiny", "--out", "d/"]);
    ok(
        dir,
        &["pretrain", "--config", "d/tiny.json", "--max-steps", steps],
    );
    dir.join("d")
}

#[test]
fn synth_then_pretrain_writes_checkpoint_and_loss_curve() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["synth", "--preset", "tiny", "--out", "d/"]);
    let d = tmp.path().join("d");
    for f in [
        "tiny.json",
        "tiny.queries.jsonl",
        "tiny.sessions.jsonl",
        "tiny.domain_labels.jsonl",
        "tiny.host_labels.jsonl",
        "tiny.synth.manifest.json",
    ] {
        assert!(d.join(f).exists(), "{f}");
    }
    ok(tmp.path(), &["pretrain", "--config", "d/tiny.json"]);
    assert!(fs::metadata(d.join("tiny.ckpt")).unwrap().len() > 0);
    let loss = fs::read_to_string(d.join("tiny.loss.csv")).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 301);
    let first: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    let last: f64 = lines[300].split(',').nth(1).unwrap().parse().unwrap();
    assert!(last < first, "{first} -> {last}");

    let m = json(&d.join("tiny.pretrain.manifest.json"));
    assert_eq!(m["command"], "pretrain");
    assert_eq!(m["seed"], m["config"]["seed"]);
    assert_eq!(m["config"]["dim"], 32);
    let inputs = m["inputs"].as_object().unwrap();
    assert!(inputs.contains_key("d/tiny.json"));
    assert!(inputs.values().all(|h| h.as_str().unwrap().len() == 64));
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let snapshot = |dir: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .map(|p| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    fs::read(&p).unwrap(),
                )
            })
            .collect();
        files.sort();
        files
    };
    let run = || {
        ok(tmp.path(), &["synth", "--preset", "tiny", "--out", "d/"]);
        ok(
            tmp.path(),
            &["pretrain", "--config", "d/tiny.json", "--max-steps", "20"],
        );
        ok(
            tmp.path(),
            &[
                "preprocess",
                "--input",
                "d/tiny.queries.jsonl",
                "--out",
                "pp",
            ],
        );
        ok(
            tmp.path(),
            &["sequence", "--in", "pp", "--out", "s.jsonl", "--L", "8"],
        );
        (
            snapshot(&tmp.path().join("d")),
            snapshot(&tmp.path().join("pp")),
            fs::read(tmp.path().join("s.jsonl")).unwrap(),
        )
    };
    let a = run();
    let b = run();
    assert!(a.0.len() >= 11);
    assert_eq!(a, b);
}

#[test]
fn preprocess_sequence_and_vocab_reproduce_the_training_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let d = pretrained(tmp.path(), "1");
    ok(
        tmp.path(),
        &[
            "preprocess",
            "--input",
            "d/tiny.queries.jsonl",
            "--out",
            "pp",
        ],
    );
    let stats = json(&tmp.path().join("pp/stats.json"));
    assert_eq!(stats["hosts_kept"], 8);
    assert!(tmp.path().join("pp/preprocess.manifest.json").exists());
    ok(
        tmp.path(),
        &["sequence", "--in", "pp", "--out", "s.jsonl", "--L", "8"],
    );
    ok(
        tmp.path(),
        &[
            "build-vocab",
            "--sequences",
            "s.jsonl",
            "--max-domains",
            "50",
            "--out",
            "v.json",
        ],
    );
    assert_eq!(
        fs::read(tmp.path().join("v.json")).unwrap(),
        fs::read(d.join("tiny.vocab.json")).unwrap()
    );
    let line: Value = serde_json::from_str(
        fs::read_to_string(tmp.path().join("s.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    let n = line["domains"].as_array().unwrap().len();
    assert!((1..=8).contains(&n));
    assert_eq!(line["ts"].as_array().unwrap().len(), n);
    assert!(line["host"].is_string());
}

#[test]
fn pcap_and_jsonl_inputs_give_the_same_streams() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["synth", "--preset", "tiny", "--out", "d/"]);
    let records = parse_jsonl(tmp.path().join("d/tiny.queries.jsonl"))
        .unwrap()
        .records;
    let resolver = Ipv4Addr::new(10, 0, 0, 53);
    let mut w = PcapWriter::new(Vec::new(), false).unwrap();
    for r in &records {
        let host: Ipv4Addr = r.src_host.parse().unwrap();
        let (src, dst, sp, dp) = if r.is_request {
            (host, resolver, 33000, r.dst_port)
        } else {
            (resolver, host, 53, r.dst_port)
        };
        w.write_dns(
            r.timestamp,
            src,
            dst,
            sp,
            dp,
            r.txn_id,
            !r.is_request,
            r.qtype,
            &r.domain,
        )
        .unwrap();
    }
    fs::write(tmp.path().join("cap.pcap"), w.into_inner()).unwrap();
    ok(
        tmp.path(),
        &[
            "preprocess",
            "--input",
            "cap.pcap",
            "--format",
            "pcap",
            "--out",
            "a",
        ],
    );
    ok(
        tmp.path(),
        &[
            "preprocess",
            "--input",
            "d/tiny.queries.jsonl",
            "--out",
            "b",
        ],
    );
    let domains = |p: PathBuf| -> Vec<String> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                serde_json::from_str::<Value>(l).unwrap()["domain"]
                    .as_str()
                    .unwrap()
                    .to_string()
            })
            .collect()
    };
    for e in fs::read_dir(tmp.path().join("b")).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "jsonl") {
            let name = p.file_name().unwrap();
            assert_eq!(domains(tmp.path().join("a").join(name)), domains(p.clone()));
        }
    }
}

#[test]
fn infer_prints_aligned_listing() {
    let tmp = tempfile::tempdir().unwrap();
    pretrained(tmp.path(), "30");
    let out = ok(
        tmp.path(),
        &[
            "infer",
            "--checkpoint",
            "d/tiny.ckpt",
            "--sequence",
            "10.1.0.1 web06.com shared02.org <MASK> web01.com",
        ],
    );
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4);
    let arrows: Vec<usize> = lines.iter().map(|l| l.find("-> ").unwrap()).collect();
    assert!(arrows.iter().all(|&a| a == arrows[0]), "{out}");
    assert!(lines[1].starts_with("10.1.0.1 shared02.org -> "), "{out}");
    assert!(lines[2].starts_with("10.1.0.1 <MASK> -------> "), "{out}");
    for l in &lines {
        let pct = l.rsplit_once('(').unwrap().1;
        assert!(pct.ends_with("%)"));
        let v: f64 = pct.trim_end_matches("%)").parse().unwrap();
        assert!((0.0..=100.0).contains(&v));
        assert_eq!(pct.split('.').nth(1).unwrap().len(), 4, "{l}");
    }
}

#[test]
fn bench_reports_every_size_and_mode() {
    let tmp = tempfile::tempdir().unwrap();
    pretrained(tmp.path(), "1");
    let out = ok(
        tmp.path(),
        &[
            "bench",
            "--checkpoint",
            "d/tiny.ckpt",
            "--batch-sizes",
            "1,8",
            "--csv",
            "b.csv",
            "--json",
            "b.json",
        ],
    );
    assert_eq!(out.lines().count(), 5);
    let csv = fs::read_to_string(tmp.path().join("b.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(
        rows[0],
        "mode,batch_size,cold_start_s,mean_latency_s,throughput_batches_per_s"
    );
    assert_eq!(rows.len(), 5);
    let mut seen = Vec::new();
    for r in &rows[1..] {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f.len(), 5);
        for v in &f[2..] {
            assert!(v.parse::<f64>().unwrap() > 0.0);
        }
        seen.push((f[0].to_string(), f[1].to_string()));
    }
    assert_eq!(
        seen,
        [
            ("infer", "1"),
            ("train", "1"),
            ("infer", "8"),
            ("train", "8")
        ]
        .map(|(a, b)| (a.to_string(), b.to_string()))
    );
    let j = json(&tmp.path().join("b.json"));
    assert_eq!(j["runs"], 50);
    assert_eq!(j["skip"], 5);
    assert!(j["rows"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["latencies"].as_array().unwrap().len() == 50));
    assert!(tmp.path().join("b.csv.manifest.json").exists());
}

#[test]
fn finetune_eval_embed_and_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    pretrained(tmp.path(), "100");
    let corpus = ["--corpus", "d/tiny.sequences.jsonl"];
    let binary = [&corpus[..], &["--labels", "d/tiny.domain_labels.jsonl"]].concat();
    ok(
        tmp.path(),
        &[
            &[
                "finetune",
                "--checkpoint",
                "d/tiny.ckpt",
                "--config",
                "d/tiny.json",
                "--max-steps",
                "150",
                "--out",
                "ft.ckpt",
            ][..],
            &binary,
        ]
        .concat(),
    );
    let ftm = json(&tmp.path().join("ft.ckpt.manifest.json"));
    assert_eq!(ftm["config"]["max_steps"], 150);
    ok(
        tmp.path(),
        &[
            &["eval", "--checkpoint", "ft.ckpt", "--report", "r.json"][..],
            &binary,
        ]
        .concat(),
    );
    let r = json(&tmp.path().join("r.json"));
    for k in ["auc", "f1_at_05"] {
        let v = r[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} {v}");
    }
    assert!(r["auc"].as_f64().unwrap() > 0.8, "{r}");
    assert!(r["f1_best"]["threshold"].is_number());
    assert!(r["f1_best"]["value"].as_f64().unwrap() >= r["f1_at_05"].as_f64().unwrap());
    assert_eq!(r["per_fold"].as_array().unwrap().len(), 5);
    let roc = fs::read_to_string(tmp.path().join("r.roc.csv")).unwrap();
    assert!(roc.lines().count() > 2);
    let scores = fs::read_to_string(tmp.path().join("r.domain_scores.csv")).unwrap();
    assert_eq!(scores.lines().next().unwrap(), "domain,label,score");

    ok(
        tmp.path(),
        &["embed", "--checkpoint", "ft.ckpt", "--out", "e.jsonl"],
    );
    let e = fs::read_to_string(tmp.path().join("e.jsonl")).unwrap();
    let first: Value = serde_json::from_str(e.lines().next().unwrap()).unwrap();
    assert_eq!(first["vector"].as_array().unwrap().len(), 32);
    ok(
        tmp.path(),
        &[
            "embed",
            "--checkpoint",
            "ft.ckpt",
            "--format",
            "bin",
            "--out",
            "e.bin",
        ],
    );
    let bin = fs::read(tmp.path().join("e.bin")).unwrap();
    let n = e.lines().count();
    assert_eq!(bin.len(), 8 + n * 32 * 4);

    ok(
        tmp.path(),
        &[
            &[
                "analyze",
                "--checkpoint",
                "ft.ckpt",
                "--out",
                "an",
                "--min-occurrences",
                "2",
            ][..],
            &corpus,
        ]
        .concat(),
    );
    let a = json(&tmp.path().join("an/analysis.json"));
    assert!(a["distance"]["random"]["cosine"].is_number());
    assert_eq!(
        a["context_sensitivity"]["exceedance"]
            .as_array()
            .unwrap()
            .len(),
        3
    );
    assert!(tmp.path().join("an/scores.csv").exists());

    let hosts = [
        &corpus[..],
        &[
            "--labels",
            "d/tiny.host_labels.jsonl",
            "--task",
            "hostclass",
        ],
    ]
    .concat();
    ok(
        tmp.path(),
        &[
            &[
                "finetune",
                "--checkpoint",
                "d/tiny.ckpt",
                "--config",
                "d/tiny.json",
                "--max-steps",
                "40",
                "--out",
                "hc.ckpt",
            ][..],
            &hosts,
        ]
        .concat(),
    );
    ok(
        tmp.path(),
        &[
            &["eval", "--checkpoint", "hc.ckpt", "--report", "h.json"][..],
            &hosts,
        ]
        .concat(),
    );
    let h = json(&tmp.path().join("h.json"));
    assert_eq!(h["hosts"], 8);
    assert!(h["accuracy"].as_f64().unwrap() >= 0.0);
}

#[test]
fn word2vec_baselines_train_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["synth", "--preset", "tiny", "--out", "d/"]);
    for model in ["cbow", "skipgram"] {
        ok(
            tmp.path(),
            &[
                "pretrain",
                "--config",
                "d/tiny.json",
                "--model",
                model,
                "--name",
                model,
                "--max-steps",
                "20",
            ],
        );
        let ck = format!("d/{model}.ckpt");
        let seqs = format!("d/{model}.sequences.jsonl");
        ok(
            tmp.path(),
            &[
                "finetune",
                "--checkpoint",
                &ck,
                "--corpus",
                &seqs,
                "--labels",
                "d/tiny.domain_labels.jsonl",
                "--max-steps",
                "20",
                "--batch-size",
                "16",
                "--out",
                "w.ckpt",
            ],
        );
        ok(
            tmp.path(),
            &[
                "eval",
                "--checkpoint",
                "w.ckpt",
                "--corpus",
                &seqs,
                "--labels",
                "d/tiny.domain_labels.jsonl",
                "--report",
                "w.json",
            ],
        );
        assert!(json(&tmp.path().join("w.json"))["auc"].is_number());
    }
}

#[test]
#[allow(non_snake_case)]
fn exit_codes_and_error_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let help = dnsgt(tmp.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let usage = dnsgt(tmp.path(), &["sequence", "--bogus"]);
    assert_eq!(usage.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&usage.stderr).contains("Usage: dnsgt sequence"));
    assert_eq!(dnsgt(tmp.path(), &[]).status.code(), Some(1));

    let (code, e) = fails(
        tmp.path(),
        &["preprocess", "--input", "missing.pcap", "--out", "o"],
    );
    assert_eq!(code, 2);
    assert_eq!(e["error"], "FileNotFound");
    assert_eq!(e["exit_code"], 2);

    fs::write(tmp.path().join("junk.pcap"), b"not a capture at all").unwrap();
    let (code, e) = fails(
        tmp.path(),
        &["preprocess", "--input", "junk.pcap", "--out", "o"],
    );
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "BadMagic"));

    pretrained(tmp.path(), "1");
    let (code, e) = fails(
        tmp.path(),
        &[
            "infer",
            "--checkpoint",
            "d/tiny.ckpt",
            "--sequence",
            "10.1.0.1",
        ],
    );
    assert_eq!((code, e["error"].as_str().unwrap()), (1, "Usage"));

    ok(
        tmp.path(),
        &[
            "build-vocab",
            "--sequences",
            "d/tiny.sequences.jsonl",
            "--max-domains",
            "5",
            "--out",
            "small.json",
        ],
    );
    let (code, e) = fails(
        tmp.path(),
        &[
            "infer",
            "--checkpoint",
            "d/tiny.ckpt",
            "--vocab",
            "small.json",
            "--sequence",
            "h a.com",
        ],
    );
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "VocabMismatch"));

    let (code, e) = fails(
        tmp.path(),
        &[
            "finetune",
            "--checkpoint",
            "d/tiny.ckpt",
            "--corpus",
            "d/tiny.sequences.jsonl",
            "--labels",
            "d/tiny.domain_labels.jsonl",
            "--fold",
            "5",
            "--out",
            "x.ckpt",
        ],
    );
    assert_eq!((code, e["error"].as_str().unwrap()), (1, "Usage"));

    let huge_lr = [
        "pretrain",
        "--config",
        "d/tiny.json",
        "--max-steps",
        "50",
        "--lr",
        "1e300",
        "--name",
        "boom",
    ];
    let (code, e) = fails(tmp.path(), &huge_lr);
    assert_eq!(code, 3, "{e}");
    assert_eq!(e["error"], "NonFiniteLoss");
}

#[test]
fn help_lists_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let help = |cmd: &str| ok(tmp.path(), &[cmd, "--help"]);
    let cases: [(&str, &[&str]); 8] = [
        (
            "preprocess",
            &[
                "[default: 100]",
                "[default: 0.985]",
                "[default: 1.015]",
                "--format",
            ],
        ),
        (
            "sequence",
            &[
                "[default: density]",
                "--L <MAX_LEN>",
                "[default: 32]",
                "[default: 30]",
                "[default: 300]",
                "[default: 2]",
                "[default: 1]",
            ],
        ),
        ("build-vocab", &["[default: 30000]"]),
        (
            "finetune",
            &["[default: 5]", "[default: 0.7]", "[default: binary]"],
        ),
        ("eval", &["[default: 5]", "[default: binary]", "--report"]),
        ("analyze", &["[default: 5]", "[default: 200]"]),
        ("synth", &["[default: tiny]"]),
        (
            "bench",
            &["[default: 1,8,32]", "[default: 50]", "[default: 5]"],
        ),
    ];
    for (cmd, needles) in cases {
        let text = help(cmd);
        for n in needles {
            assert!(text.contains(n), "{cmd} --help lacks {n}:\n{text}");
        }
    }
    let top = ok(tmp.path(), &["--help"]);
    for cmd in [
        "preprocess",
        "sequence",
        "build-vocab",
        "pretrain",
        "finetune",
        "eval",
        "infer",
        "embed",
        "analyze",
        "synth",
        "bench",
    ] {
        assert!(top.contains(cmd), "{cmd}");
    }
}
