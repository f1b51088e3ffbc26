use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn mvhgnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvhgnn"))
        .args(args)
        .env_remove("MVHGNN_CONFIG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let out = mvhgnn(args);
    assert_eq!(code(&out), 0, "{args:?}\nstdout: {}\nstderr: {}", stdout(&out), String::from_utf8_lossy(&out.stderr));
    stdout(&out)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 4-class, 6-view dataset small enough for a few-second run.
fn small_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "gen-data", "--classes", "4", "--per-class", "10", "--sketches-per-class", "8", "--views", "6", "--feature-dim", "16",
        "--sketch-dim", "16", "--prototype-dim", "8", "--seed", "2", "--out", s(&data),
    ]);
    data
}

const SMALL_TRAIN: [&str; 4] = ["--epochs", "3", "--levels", "2"];

fn train_small(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend(SMALL_TRAIN);
    args.extend(extra);
    ok(&args)
}

/// The `NN .. mAP` value row of an `eval` table.
fn metric_row(text: &str) -> Vec<f64> {
    let mut lines = text.lines();
    let head = lines.by_ref().find(|l| l.trim_start().starts_with("NN")).expect("metric header");
    assert_eq!(head.split_whitespace().collect::<Vec<_>>(), ["NN", "FT", "ST", "nDCG", "E", "MRR", "mAP"]);
    lines.next().unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect()
}

#[test]
fn help_documents_every_flag() {
    let expected: [(&str, &[&str]); 6] = [
        (
            "gen-data",
            &["--classes", "--per-class", "--sketches-per-class", "--views", "--feature-dim", "--sketch-dim", "--prototype-dim", "--noise", "--seed", "--out", "--execution"],
        ),
        (
            "train",
            &[
                "--config", "--data", "--out", "--mode", "--stage", "--init", "--strategy", "--seed", "--epochs", "--levels", "--views", "--pooling",
                "--no-quad", "--no-cls", "--no-sem", "--execution", "MVHGNN_CONFIG",
            ],
        ),
        ("encode", &["--ckpt", "--in", "--out", "--kind", "--execution"]),
        ("retrieve", &["--query", "--gallery", "--top", "--out"]),
        ("eval", &["--query", "--gallery", "--hist", "--bins", "--json"]),
        ("gradcheck", &["--module", "--seeds", "--execution"]),
    ];
    let top = ok(&["--help"]);
    for (cmd, flags) in expected {
        assert!(top.contains(cmd), "top-level help lacks {cmd}");
        let help = ok(&[cmd, "--help"]);
        for flag in flags {
            assert!(help.contains(flag), "`{cmd} --help` lacks {flag}");
        }
    }
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("27 of 27 functions pass"), "{out}");
    let out = ok(&["gradcheck", "--module", "losses", "--seeds", "3"]);
    assert!(!out.contains("encode_shape"));
}

#[test]
fn eval_on_identical_files_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    train_small(&data, &run, &[]);
    let emb = dir.path().join("g.mvhf");
    ok(&["encode", "--ckpt", s(&run.join("model.mvhf")), "--in", s(&run.join("gallery.mvhf")), "--out", s(&emb)]);
    let row = metric_row(&ok(&["eval", "--query", s(&emb), "--gallery", s(&emb)]));
    assert_eq!(row[0], 100.0);
    assert_eq!(row[6], 100.0);
}

#[test]
fn staged_training_matches_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let full = dir.path().join("full");
    let staged = dir.path().join("staged");
    let again = dir.path().join("again");
    train_small(&data, &full, &[]);
    train_small(&data, &again, &[]);
    train_small(&data, &staged, &["--stage", "1"]);
    assert!(!staged.join("model.mvhf").exists());
    let stage1 = staged.join("stage1.mvhf");
    train_small(&data, &staged, &["--stage", "2", "--init", s(&stage1)]);
    let bytes = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(bytes(full.join("model.mvhf")), bytes(again.join("model.mvhf")));
    assert_eq!(bytes(full.join("model.log.jsonl")), bytes(again.join("model.log.jsonl")));
    assert_eq!(bytes(full.join("model.mvhf")), bytes(staged.join("model.mvhf")));
    assert_eq!(bytes(full.join("metrics.json")), bytes(staged.join("metrics.json")));
}

#[test]
fn config_file_and_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "dataset = \"data\"\nout = \"from-config\"\nstrategy = \"one-stage\"\n[model]\nlevels = 2\n[train]\nepochs = 2\n[split]\nmode = \"zeroshot\"\nunseen_count = 1\n",
    )
    .unwrap();
    assert!(data.exists());
    ok(&["train", "--config", s(&cfg)]);
    let out = dir.path().join("from-config");
    let log = std::fs::read_to_string(out.join("model.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let written = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(written.contains("mode = \"zeroshot\""), "{written}");

    let env_out = dir.path().join("from-env");
    let status = Command::new(env!("CARGO_BIN_EXE_mvhgnn"))
        .args(["train", "--out", s(&env_out), "--epochs", "1"])
        .env("MVHGNN_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(code(&status), 0, "{}", String::from_utf8_lossy(&status.stderr));
    let log = std::fs::read_to_string(env_out.join("model.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn retrieve_lists_the_top_matches_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    train_small(&data, &run, &[]);
    let (q, g) = (dir.path().join("q.mvhf"), dir.path().join("g.mvhf"));
    ok(&["encode", "--ckpt", s(&run.join("model.mvhf")), "--in", s(&run.join("query.mvhf")), "--out", s(&q)]);
    ok(&["encode", "--ckpt", s(&run.join("model.mvhf")), "--in", s(&run.join("gallery.mvhf")), "--out", s(&g), "--kind", "shapes"]);
    let json: serde_json::Value = serde_json::from_str(&ok(&["retrieve", "--query", s(&q), "--gallery", s(&g), "--top", "3"])).unwrap();
    let queries = json.as_array().unwrap();
    assert_eq!(queries.len(), 8);
    for entry in queries {
        let matches = entry["matches"].as_array().unwrap();
        assert_eq!(matches.len(), 3);
        let scores: Vec<f64> = matches.iter().map(|m| m["score"].as_f64().unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{scores:?}");
        assert!(entry["class"].is_string());
    }

    let out = dir.path().join("r.json");
    ok(&["retrieve", "--query", s(&q), "--gallery", s(&g), "--top", "100", "--out", s(&out)]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(json[0]["matches"].as_array().unwrap().len(), 8);

    let hist = dir.path().join("h.csv");
    let metrics = dir.path().join("m.json");
    ok(&["eval", "--query", s(&q), "--gallery", s(&g), "--hist", s(&hist), "--bins", "5", "--json", s(&metrics)]);
    let csv = std::fs::read_to_string(hist).unwrap();
    assert_eq!(csv.lines().count(), 6);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(metrics).unwrap()).unwrap();
    assert!(m["mAP"].is_number());
}

#[test]
fn exit_codes_separate_config_and_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let write = |name: &str, text: &[u8]| {
        let p = d.join(name);
        std::fs::write(&p, text).unwrap();
        p
    };

    let unknown = write("unknown.toml", b"[train]\nepoch = 3\n");
    let bad_value = write("bad.toml", b"[train]\nepochs = 0\n");
    let broken = write("broken.toml", b"[train\n");
    for cfg in [&unknown, &bad_value, &broken] {
        let out = mvhgnn(&["train", "--config", s(cfg), "--out", s(&d.join("x"))]);
        assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(code(&mvhgnn(&["train", "--stage", "2", "--out", s(&d.join("x"))])), 2);
    assert_eq!(code(&mvhgnn(&["train", "--strategy", "one-stage", "--stage", "1"])), 2);
    assert_eq!(code(&mvhgnn(&["train", "--views", "6"])), 2);
    assert_eq!(code(&mvhgnn(&["gen-data", "--classes", "0", "--out", s(&d.join("x"))])), 2);
    assert_eq!(code(&mvhgnn(&["retrieve", "--query", "a", "--gallery", "b", "--top", "0"])), 2);
    assert!(!d.join("x").exists(), "nothing is written before validation");

    let missing = d.join("missing.mvhf");
    assert_eq!(code(&mvhgnn(&["train", "--config", s(&missing)])), 3);
    assert_eq!(code(&mvhgnn(&["eval", "--query", s(&missing), "--gallery", s(&missing)])), 3);
    let garbage = write("garbage.mvhf", b"NOPE\x01\x00");
    assert_eq!(code(&mvhgnn(&["eval", "--query", s(&garbage), "--gallery", s(&garbage)])), 3);
    let truncated = write("trunc.mvhf", b"MVHF\x01\x00\x05\x00ab");
    assert_eq!(code(&mvhgnn(&["eval", "--query", s(&truncated), "--gallery", s(&truncated)])), 3);
    assert_eq!(code(&mvhgnn(&["encode", "--ckpt", s(&garbage), "--in", s(&garbage), "--out", s(&d.join("o"))])), 3);

    // Unlabelled items cannot be scored.
    let data = small_data(d);
    std::fs::remove_file(data.join("sketches.mvhf.labels.json")).unwrap();
    let sk = data.join("sketches.mvhf");
    assert_eq!(code(&mvhgnn(&["eval", "--query", s(&sk), "--gallery", s(&sk)])), 3);
    assert_eq!(code(&mvhgnn(&["train", "--data", s(&data), "--levels", "2"])), 3);
    // Raw features are not a checkpoint.
    assert_eq!(code(&mvhgnn(&["encode", "--ckpt", s(&sk), "--in", s(&sk), "--out", s(&d.join("o"))])), 3);

    // Clap usage errors also exit 2.
    assert_eq!(code(&mvhgnn(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&mvhgnn(&["frobnicate"])), 2);
}

/// gen-data, train, encode and eval with every default, inside the time budget.
#[test]
fn default_pipeline_within_budget() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen-data", "--out", s(&data)]);
    let train_out = ok(&["train", "--data", s(&data), "--out", s(&run)]);
    let (q, g) = (dir.path().join("q.mvhf"), dir.path().join("g.mvhf"));
    let ckpt = run.join("model.mvhf");
    ok(&["encode", "--ckpt", s(&ckpt), "--in", s(&run.join("query.mvhf")), "--out", s(&q)]);
    ok(&["encode", "--ckpt", s(&ckpt), "--in", s(&run.join("gallery.mvhf")), "--out", s(&g)]);
    let eval_row = metric_row(&ok(&["eval", "--query", s(&q), "--gallery", s(&g)]));
    let elapsed = start.elapsed();

    // The composed pipeline scores exactly what train reported.
    assert_eq!(eval_row, metric_row(&train_out));
    assert!(eval_row[0] >= 90.0 && eval_row[6] >= 90.0, "{eval_row:?}");
    assert!(elapsed < Duration::from_secs(15 * 60), "{elapsed:?}");
}
