use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mie_core::dataset;
use mie_core::model::Checkpoint;
use mie_core::parity::ParityFixture;

const TINY_CONFIG: &str = r#"{
  "model": {"n_layers": 2, "n_heads": 2, "d_model": 16, "d_head": 8, "d_vocab": 567, "n_ctx": 24, "layernorm_eps": 1e-5},
  "tied_unembedding": false, "steps": 12, "batch_size": 4, "learning_rate": 0.003,
  "beta1": 0.9, "beta2": 0.98, "adam_eps": 1e-8, "init_std": 0.02, "grad_clip": 1.0, "seed": 1,
  "corpus": {"n_facts": 8, "world_seed": 3, "mix": {"facts": 0.4, "repeats": 0.2, "lists": 0.1, "redefinitions": 0.3},
    "facts_per_sequence": [1, 3], "repeat_half": [3, 6], "redefine_fact_rate": 0.3, "same_category_rate": 0.5,
    "vary_structure": true, "novel_subject_rate": 0.3, "category_repeat_rate": 0.5, "repeat_prefix_max": 4,
    "list_len": [4, 8]}
}"#;

fn mie(args: &[&str]) -> Output {
    mie_env(args, &[])
}

fn mie_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mie"));
    cmd.args(args).env_remove("MIE_THREADS").env("SOURCE_DATE_EPOCH", "0");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the tiny config and writes a matching toy dataset.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = dir.join("tiny.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let run = dir.join("run");
    let o = mie(&["train", "--config", s(&cfg), "--seed", "4", "--out", s(&run), "--log-every", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let data = dir.join("toy.json");
    let o = mie(&["dataset", "make-toy", "--n-facts", "8", "--entries", "16", "--world-seed", "3", "--seed", "2", "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (run.join("model.mie"), data)
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

#[test]
fn help_exits_zero() {
    let o = mie(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("sweep"));
    assert_eq!(code(&mie(&["sweep", "--help"])), 0);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&mie(&["frobnicate"])), 2);
    assert_eq!(code(&mie(&[])), 2);
    // --seed is mandatory for experiments
    assert_eq!(code(&mie(&["induction", "--model", "m.mie", "--out", "x"])), 2);
    let o = mie_env(&["induction", "--model", "m.mie", "--seed", "1", "--out", "x"], &[("MIE_THREADS", "zero")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("error[usage]"));
}

#[test]
fn missing_model_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mie(&["induction", "--model", s(&dir.path().join("absent.mie")), "--seed", "1", "--out", s(dir.path())]);
    assert_eq!(code(&o), 7, "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[io]"));
}

#[test]
fn corrupt_model_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.mie");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = mie(&["induction", "--model", s(&bad), "--seed", "1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn pipeline_writes_reports_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = trained(dir.path());
    for f in ["model.mie", "loss.csv", "vocab.json", "merges.txt", "config.json", "manifest.json"] {
        assert!(model.parent().unwrap().join(f).exists(), "{f}");
    }
    let loss = std::fs::read_to_string(model.parent().unwrap().join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 13);

    let out = |name: &str| dir.path().join(name);
    let runs: Vec<(&str, Vec<&str>, Vec<&str>)> = vec![
        ("sweep", vec!["--heads", "L1H0", "--alphas", "0,1,10"], vec!["sweep.csv", "sweep.json", "sweep.svg"]),
        ("attribute", vec![], vec!["attribution.csv", "attribution.json", "attribution.svg"]),
        ("heatmap", vec!["--field", "answer"], vec!["heatmap.csv", "heatmap.json", "heatmap.svg"]),
        ("baseline", vec!["--heads", "L1H0", "--seeds", "2"], vec!["baseline.csv", "baseline.json", "sweep.csv"]),
    ];
    for (cmd, extra, files) in runs {
        let o_dir = out(cmd);
        let mut args = vec![cmd, "--model", s(&model), "--data", s(&data), "--seed", "7", "--out", s(&o_dir)];
        args.extend(extra);
        let o = mie(&args);
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
        for f in files.iter().chain(&["manifest.json"]) {
            assert!(o_dir.join(f).exists(), "{cmd}: {f}");
        }
    }

    let o = mie(&["svd", "--model", s(&model), "--head", "L0H1", "--k", "3", "--seed", "1", "--out", s(&out("svd"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out("svd").join("svd.txt").exists());
    let o = mie(&["induction", "--model", s(&model), "--toy-pool", "--samples", "4", "--seed", "1", "--out", s(&out("ind"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out("ind").join("induction.csv")).unwrap();
    assert!(csv.starts_with("# mie induction csv v1\nlayer,head,score\n"));
    assert_eq!(csv.lines().count(), 2 + 4);

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out("sweep").join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "sweep");
    assert_eq!(manifest["seed"], 7);
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 2);
    assert!(inputs.iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));

    let sweep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out("sweep").join("sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep["payload"]["kind"], "sweep");
    assert_eq!(sweep["payload"]["data"]["results"].as_array().unwrap().len(), 3);
    assert_eq!(sweep["metadata"]["timestamp"], 0);
}

#[test]
fn bad_head_is_a_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = trained(dir.path());
    let o = mie(&["sweep", "--model", s(&model), "--data", s(&data), "--heads", "L9H0", "--seed", "1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = mie(&["sweep", "--model", s(&model), "--data", s(&data), "--heads", "L1H0", "--alphas", "1,x", "--seed", "1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn single_thread_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = trained(dir.path());
    let out = dir.path().join("sweep");
    let args = ["sweep", "--model", s(&model), "--data", s(&data), "--heads", "L1H1", "--keep-outcomes", "--seed", "3", "--out", s(&out)];
    assert_eq!(code(&mie_env(&args, &[("MIE_THREADS", "1")])), 0);
    let first = snapshot(&out);
    assert_eq!(code(&mie_env(&args, &[("MIE_THREADS", "1")])), 0);
    assert_eq!(first, snapshot(&out));

    let cfg = dir.path().join("tiny.json");
    let (a, b) = (dir.path().join("ta"), dir.path().join("tb"));
    for o in [&a, &b] {
        let r = mie_env(&["train", "--config", s(&cfg), "--seed", "9", "--out", s(o), "--log-every", "0"], &[("MIE_THREADS", "1")]);
        assert_eq!(code(&r), 0);
    }
    for f in ["model.mie", "loss.csv", "config.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn dataset_commands_leave_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let input = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/labeled50.json");
    let local = dir.path().join("in.json");
    std::fs::copy(&input, &local).unwrap();
    let before = std::fs::read(&local).unwrap();
    let out = |n: &str| dir.path().join(n);
    let (p, st, split, f, c) = (out("p.json"), out("s.json"), out("split"), out("f.json"), out("c.json"));
    let runs: Vec<Vec<&str>> = vec![
        vec!["dataset", "premise", "--in", s(&local), "--out", s(&p), "--premise", "Imagine"],
        vec!["dataset", "structure", "--in", s(&local), "--out", s(&st), "--first", "consider", "--second", "people-know"],
        vec!["dataset", "split-hinted", "--in", s(&local), "--out", s(&split)],
        vec!["dataset", "substitute-fact", "--in", s(&local), "--out", s(&f)],
        vec!["dataset", "filter", "--in", s(&local), "--out", s(&c), "--answer-category", "language", "--truncate-to", "5", "--seed", "1"],
    ];
    for args in &runs {
        let o = mie(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
    assert_eq!(std::fs::read(&local).unwrap(), before);

    let hinted = dataset::load(&out("split").join("hinted.json")).unwrap();
    let no_hint = dataset::load(&out("split").join("no_hint.json")).unwrap();
    assert_eq!(hinted.len() + no_hint.len(), 50);
    assert_eq!(dataset::load(&out("c.json")).unwrap().len(), 5);
    assert!(dataset::load(&out("p.json")).unwrap().iter().all(|e| e.prompt.starts_with("Imagine: ")));

    let o = mie(&["dataset", "premise", "--in", s(&local), "--out", s(&local), "--premise", "X"]);
    assert_eq!(code(&o), 2);
    assert_eq!(std::fs::read(&local).unwrap(), before);
}

#[test]
fn convert_check_compares_against_a_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = trained(dir.path());
    let ckpt = Checkpoint::load(&model).unwrap();
    let vocab = dataset::toy_vocab().unwrap();
    let fx = ParityFixture::record(&ckpt, &vocab, &["Alice speaks", "Redefine: Bob visits Paris. Bob visits"], "test").unwrap();
    let fx_path = dir.path().join("fixture.json");
    fx.save(&fx_path).unwrap();

    let out = dir.path().join("check");
    let o = mie(&["convert-check", "--model", s(&model), "--vocab", "toy", "--fixture", s(&fx_path), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("check.json").exists());

    let mut bad = fx.clone();
    bad.prompts[0].greedy_next = (bad.prompts[0].greedy_next + 1) % 567;
    bad.prompts[1].token_ids.push(0);
    let bad_path = dir.path().join("bad.json");
    bad.save(&bad_path).unwrap();
    let o = mie(&["convert-check", "--model", s(&model), "--vocab", "toy", "--fixture", s(&bad_path)]);
    assert_eq!(code(&o), 6, "{}", stderr(&o));

    let o = mie(&["convert-check", "--model", s(&model), "--vocab", "byte"]);
    assert_eq!(code(&o), 6, "{}", stderr(&o));
}
