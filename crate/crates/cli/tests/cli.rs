use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn wadenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wadenet"))
        .args(args)
        .env("WADENET_THREADS", "1")
        .output()
        .expect("run wadenet")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Vec<Value> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("JSON line"))
        .collect()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "model": {"kind": "wadenet", "N": 2, "c": 4, "k": 3, "g": 2,
            "inception_kernels": [1, 3, 5, 7], "fc_widths": [8],
            "num_classes": 3, "window_len": 512, "dropout_p": 0.5},
  "train": {"lr0": 0.01, "epochs": 2, "batch_size": 8, "seed": 3}
}"#;

struct Corpus {
    dir: TempDir,
}

impl Corpus {
    fn new(clips: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let out = wadenet(&[
            "synth",
            "--clips",
            &clips.to_string(),
            "--seconds",
            "0.2",
            "--seed",
            "2",
            "--out",
            path(&data),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Corpus { dir }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn manifest(&self) -> PathBuf {
        self.file("data/manifest.csv")
    }

    fn train(&self, out: &str) -> Output {
        wadenet(&[
            "train",
            "--config",
            path(&self.file("tiny.json")),
            "--manifest",
            path(&self.manifest()),
            "--out",
            path(&self.file(out)),
        ])
    }
}

#[test]
fn synth_writes_the_default_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = wadenet(&["synth", "--seconds", "0.05", "--out", path(dir.path())]);
    assert_eq!(code(&out), 0);
    let summary = &stdout_json(&out)[0];
    assert_eq!(summary["clips"], 180);
    assert_eq!(summary["classes"], 3);
    let wavs = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "wav")
        })
        .count();
    assert_eq!(wavs, 180);
    let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 181);
    assert!(manifest.starts_with("path,label,split"));
}

#[test]
fn params_is_stable_and_sums_its_rows() {
    let a = wadenet(&["params"]);
    let b = wadenet(&["params"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let report = &stdout_json(&a)[0];
    let rows = report["layers"].as_array().unwrap();
    let sum: u64 = rows.iter().map(|r| r["count"].as_u64().unwrap()).sum();
    assert_eq!(report["total"].as_u64().unwrap(), sum);
    assert_eq!(report["kind"], "wadenet");
    assert_eq!(rows.last().unwrap()["shape"], serde_json::json!([7, 128]));

    let dir = tempfile::tempdir().unwrap();
    let naive = dir.path().join("naive.json");
    fs::write(&naive, TINY.replace("\"wadenet\"", "\"naive\"")).unwrap();
    let out = stdout_json(&wadenet(&["params", "--config", path(&naive)]))[0].clone();
    assert_eq!(out["kind"], "naive");
    assert!(out["layers"]
        .as_array()
        .unwrap()
        .iter()
        .all(|r| !r["name"].as_str().unwrap().contains("gate")));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    };
    let unknown = write(
        "unknown.json",
        &TINY.replace("\"dropout_p\"", "\"dropout\""),
    );
    let even = write("even.json", &TINY.replace("\"k\": 3", "\"k\": 4"));
    let broken = write("broken.json", "{\"model\": ");
    for p in [&unknown, &even, &broken] {
        let out = wadenet(&["params", "--config", path(p)]);
        assert_eq!(code(&out), 2, "{}", p.display());
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(
        code(&wadenet(&["gradcheck", "--inject-fault", "nosuchop"])),
        2
    );
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.csv");
    assert_eq!(code(&wadenet(&["train", "--manifest", path(&missing)])), 3);
    let bad = dir.path().join("bad.csv");
    fs::write(
        &bad,
        "path,label,split\nmissing.wav,a,\nother.wav,a,\nthird.wav,a,\n",
    )
    .unwrap();
    assert_eq!(
        code(&wadenet(&[
            "preprocess",
            "--manifest",
            path(&bad),
            "--out",
            path(dir.path())
        ])),
        3
    );
}

#[test]
fn preprocess_caches_every_window_idempotently() {
    let corpus = Corpus::new(4);
    let run = |out: &str| {
        let o = wadenet(&[
            "preprocess",
            "--manifest",
            path(&corpus.manifest()),
            "--config",
            path(&corpus.file("tiny.json")),
            "--seed",
            "5",
            "--out",
            path(&corpus.file(out)),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        stdout_json(&o)[0].clone()
    };
    let summary = run("cache_a");
    // 3200 samples per clip, 512-sample windows, hop 128
    assert_eq!(summary["windows"], 12 * ((3200 - 512) / 128 + 1));
    assert_eq!(summary["clips"], 12);
    run("cache_b");
    for f in ["windows.wdnw", "manifest.csv"] {
        assert_eq!(
            fs::read(corpus.file("cache_a").join(f)).unwrap(),
            fs::read(corpus.file("cache_b").join(f)).unwrap()
        );
    }
    let cache = fs::read(corpus.file("cache_a/windows.wdnw")).unwrap();
    assert_eq!(&cache[..4], b"WDNW");
    assert_eq!(cache.len(), 16 + 12 * 22 * (5 + 512 * 4));
}

#[test]
fn train_then_eval_agree() {
    let corpus = Corpus::new(5);
    let out = corpus.train("run");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = corpus.file("run");
    let streamed = stdout_json(&out);
    let metrics: Vec<Value> = fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(streamed, metrics);
    assert_eq!(metrics.len(), 2);
    for f in ["final.wdn", "best.wdn", "manifest.csv", "run.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let (checkpoint, split_manifest) = (run.join("final.wdn"), run.join("manifest.csv"));
    let eval = |extra: &[&str]| {
        let mut args = vec![
            "eval",
            "--checkpoint",
            path(&checkpoint),
            "--manifest",
            path(&split_manifest),
        ];
        args.extend_from_slice(extra);
        wadenet(&args)
    };
    let val = eval(&["--config", path(&run.join("run.json")), "--split", "val"]);
    assert_eq!(code(&val), 0, "{}", String::from_utf8_lossy(&val.stderr));
    let result = &stdout_json(&val)[0];
    let last = metrics.last().unwrap();
    assert_eq!(result["acc"], last["val_acc"]);
    assert_eq!(result["macro_f1"], last["val_f1"]);
    assert_eq!(result["confusion"].as_array().unwrap().len(), 3);

    let votes = eval(&["--clip-vote"]);
    assert_eq!(code(&votes), 0);
    let confusion = &stdout_json(&votes)[0]["confusion"];
    let clips: u64 = confusion
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(clips, 3);

    let other = corpus.file("other.json");
    fs::write(&other, TINY.replace("\"c\": 4", "\"c\": 8")).unwrap();
    assert_eq!(code(&eval(&["--config", path(&other)])), 2);

    let no_test = corpus.file("no_test.csv");
    fs::write(
        &no_test,
        fs::read_to_string(run.join("manifest.csv"))
            .unwrap()
            .replace(",test", ",val"),
    )
    .unwrap();
    let empty = wadenet(&[
        "eval",
        "--checkpoint",
        path(&run.join("final.wdn")),
        "--manifest",
        path(&no_test),
    ]);
    assert_eq!(code(&empty), 3);

    assert_eq!(code(&eval(&[])), 0);
    let raw = wadenet(&[
        "eval",
        "--checkpoint",
        path(&run.join("final.wdn")),
        "--manifest",
        path(&corpus.manifest()),
    ]);
    assert_eq!(code(&raw), 3);
}

#[test]
fn identical_runs_are_byte_identical() {
    let corpus = Corpus::new(4);
    assert_eq!(code(&corpus.train("a")), 0);
    assert_eq!(code(&corpus.train("b")), 0);
    for f in ["metrics.jsonl", "final.wdn", "best.wdn", "manifest.csv"] {
        assert_eq!(
            fs::read(corpus.file("a").join(f)).unwrap(),
            fs::read(corpus.file("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn gradcheck_passes_and_catches_a_fault() {
    let ok = wadenet(&["gradcheck"]);
    assert_eq!(code(&ok), 0);
    let lines = stdout_json(&ok);
    assert!(lines.iter().all(|l| l["passed"] == true));
    assert!(lines.iter().any(|l| l["name"] == "conv1d"));

    let bad = wadenet(&["gradcheck", "--inject-fault", "batchnorm1d"]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("batchnorm1d"));
}
