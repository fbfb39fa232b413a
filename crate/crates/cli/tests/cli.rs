use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evfuse::config::Config;
use evfuse::encoders::FutureSegment;
use evfuse::model::ModelConfig;
use evfuse::Tensor;

fn evfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evfuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A scenario small enough for a few seconds of training.
fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = Config::default();
    cfg.scenario.num_events = 40;
    cfg.scenario.lookback = 6;
    cfg.scenario.horizon = 6;
    cfg.scenario.vocab = 32;
    cfg.scenario.script_len_min = 3;
    cfg.scenario.script_len_max = 6;
    cfg.scenario.signal_tokens = 4;
    cfg.scenario.planted = 2;
    cfg.model = ModelConfig::micro();
    cfg.train.batch_size = 8;
    cfg.train.stage_epochs = [1, 1, 1];
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json_pretty().unwrap()).unwrap();
    path
}

fn generate(dir: &Path, cfg: &Path) -> PathBuf {
    let data = dir.join("data.jsonl");
    let out = evfuse(&["generate", "--config", s(cfg), "--out", s(&data), "--with-oracle-flags"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    data
}

fn train(cfg: &Path, data: &Path, out_dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", s(cfg), "--data", s(data), "--out-dir", s(out_dir)];
    args.extend_from_slice(extra);
    evfuse(&args)
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let data = generate(d, &cfg);
    let run = d.join("run");
    let out = train(&cfg, &data, &run, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["checkpoint.bin", "train_log.csv", "validation_log.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ckpt = run.join("checkpoint.bin");
    let common = ["--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&ckpt)];

    let metrics = d.join("metrics.csv");
    let mut args = vec!["eval", "--out", s(&metrics), "--split", "all"];
    args.extend_from_slice(&common);
    let out = evfuse(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&metrics).unwrap();
    assert!(text.starts_with("dataset,horizon,n_events,scaling,ts_mse,full_mse,mse_improv_pct"));

    let reports = d.join("reports");
    let mut args = vec!["gate-report", "--out-dir", s(&reports), "--svg"];
    args.extend_from_slice(&common);
    let out = evfuse(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let n_svg = fs::read_dir(&reports)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(n_svg, 1);
    assert!(fs::read_dir(&reports).unwrap().count() >= 4);

    let align = d.join("align.jsonl");
    let mut args = vec!["align-report", "--out", s(&align)];
    args.extend_from_slice(&common);
    let out = evfuse(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let first = fs::read_to_string(&align).unwrap();
    let first = first.lines().next().unwrap();
    for key in ["instance_id", "token_id", "salience", "argmax_step", "similarity"] {
        assert!(first.contains(key), "{first}");
    }
}

#[test]
fn scaled_and_raw_differ_by_the_factors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let data = generate(d, &cfg);
    let run = d.join("run");
    assert_eq!(code(&train(&cfg, &data, &run, &[])), 0);
    let ckpt = run.join("checkpoint.bin");
    let read = |flag: &str| {
        let out_path = d.join(format!("m{flag}.csv"));
        let out = evfuse(&[
            "eval",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--checkpoint",
            s(&ckpt),
            "--split",
            "all",
            "--out",
            s(&out_path),
            flag,
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let text = fs::read_to_string(out_path).unwrap();
        let row: Vec<String> = text.lines().nth(1).unwrap().split(',').map(String::from).collect();
        row
    };
    let scaled = read("--scaled");
    let raw = read("--raw");
    assert_eq!(scaled[3], "scaled");
    assert_eq!(raw[3], "raw");
    let ts_mse_raw: f64 = raw[4].parse().unwrap();
    assert_eq!(scaled[4], format!("{:.2}", ts_mse_raw * 1e4));
    let ts_mae_raw: f64 = raw[7].parse().unwrap();
    assert_eq!(scaled[7], format!("{:.2}", ts_mae_raw * 1e3));

    let out = evfuse(&[
        "eval",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&d.join("x.csv")),
        "--scaled",
        "--raw",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn same_seed_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let mut metrics = Vec::new();
    for k in 0..2 {
        let sub = d.join(format!("r{k}"));
        fs::create_dir_all(&sub).unwrap();
        let data = generate(&sub, &cfg);
        assert_eq!(code(&train(&cfg, &data, &sub, &["--seed", "7"])), 0);
        let m = sub.join("metrics.csv");
        let out = evfuse(&[
            "eval",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--checkpoint",
            s(&sub.join("checkpoint.bin")),
            "--out",
            s(&m),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        metrics.push(fs::read(m).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn resumed_training_matches_one_shot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let data = generate(d, &cfg);
    let once = d.join("once");
    assert_eq!(code(&train(&cfg, &data, &once, &[])), 0);

    let split = d.join("split");
    assert_eq!(code(&train(&cfg, &data, &split, &["--max-epochs", "2"])), 0);
    let partial = split.join("checkpoint.bin");
    let resumed = d.join("resumed");
    let out = train(&cfg, &data, &resumed, &["--resume", s(&partial)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(once.join("checkpoint.bin")).unwrap(),
        fs::read(resumed.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = evfuse(&["generate", "--bogus"]);
    assert_eq!(code(&out), 2);

    let cfg = small_config(d);
    let text = fs::read_to_string(&cfg).unwrap().replace("\"tau_nce\"", "\"tau_nse\"");
    let broken = d.join("broken.json");
    fs::write(&broken, text).unwrap();
    let out = evfuse(&["generate", "--config", s(&broken), "--out", s(&d.join("x.jsonl"))]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("tau_nse") && err.contains("valid keys"), "{err}");

    let out = evfuse(&["grad-check", "--module", "nope"]);
    assert_eq!(code(&out), 2);

    // reports need a model that finished the multimodal stage
    let data = generate(d, &cfg);
    let run = d.join("run");
    assert_eq!(code(&train(&cfg, &data, &run, &["--stages", "1"])), 0);
    let out = evfuse(&[
        "eval",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--out",
        s(&d.join("m.csv")),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let data = generate(d, &cfg);
    let text = fs::read_to_string(&data).unwrap();
    let bad = d.join("bad.jsonl");
    fs::write(&bad, text.replacen("\"tokens\":[", "\"tokens\":[\"x\",", 1)).unwrap();
    let out = train(&cfg, &bad, &d.join("run"), &[]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("line 1"), "{}", stderr(&out));

    let out = train(&cfg, &d.join("missing.jsonl"), &d.join("run"), &[]);
    assert_eq!(code(&out), 3);

    let damaged = d.join("damaged.bin");
    fs::write(&damaged, b"EVFCKPT1 not really").unwrap();
    let out = evfuse(&[
        "eval",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--checkpoint",
        s(&damaged),
        "--out",
        s(&d.join("m.csv")),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn overflowing_data_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg_path = small_config(d);
    let cfg = Config::load(&cfg_path).unwrap();
    let mut data = evfuse::datagen::generate(&cfg.scenario).unwrap();
    // finite targets whose squared error is not
    for inst in &mut data {
        let y = inst.target.values();
        let huge = Tensor::new(y.shape().to_vec(), y.data().iter().map(|v| v * 1e200).collect()).unwrap();
        inst.target = FutureSegment::new(huge).unwrap();
    }
    let bad = d.join("huge.jsonl");
    evfuse::datagen::write_jsonl(&bad, &data, false).unwrap();
    let out = train(&cfg_path, &bad, &d.join("run"), &[]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn grad_check_all_passes() {
    let out = evfuse(&["grad-check", "--module", "all", "--entries", "4"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn init_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let out = evfuse(&["init-config", "--out", s(&path), "--seed", "9"]);
    assert_eq!(code(&out), 0);
    let cfg = Config::load(&path).unwrap();
    assert_eq!(cfg.seed, 9);
}
