use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dvc_core::avs::VsTree;
use dvc_core::pipeline::EvalReport;

fn dvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dvc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dvc(args);
    assert!(
        out.status.success(),
        "dvc {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dvc-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const FAST: [&str; 6] = ["--epochs", "4", "--lr", "0.03", "--folds", "3"];

/// Simulated train/test files with only the train file visible to fitting.
fn simulated(name: &str, p: &str) -> (PathBuf, PathBuf, PathBuf) {
    let dir = scratch(name);
    let sim = dir.join("sim");
    ok(&[
        "simulate",
        "--p",
        p,
        "--n",
        "400",
        "--seed",
        "5",
        "--out",
        s(&sim),
    ]);
    let fit_dir = dir.join("fit_input");
    std::fs::create_dir_all(&fit_dir).unwrap();
    let train = fit_dir.join("train.csv");
    std::fs::copy(sim.join("train.csv"), &train).unwrap();
    (dir, train, sim.join("test.csv"))
}

#[test]
fn simulate_is_reproducible_and_records_relevant_features() {
    let dir = scratch("simulate");
    let a = dir.join("a");
    let b = dir.join("b");
    ok(&["simulate", "--p", "30", "--seed", "7", "--out", s(&a)]);
    ok(&["simulate", "--p", "30", "--seed", "7", "--out", s(&b)]);
    for f in ["data.csv", "train.csv", "test.csv", "metadata.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("metadata.json")).unwrap()).unwrap();
    let relevant: Vec<usize> = serde_json::from_value(meta["relevant_features"].clone()).unwrap();
    assert_eq!(relevant, (0..20).collect::<Vec<_>>());

    let c = dir.join("c");
    ok(&["simulate", "--p", "20", "--noise", "0", "--out", s(&c)]);
    let data = dvc_core::data::load_csv(c.join("data.csv"), "label").unwrap();
    assert_eq!((data.n(), data.p()), (1000, 20));
}

#[test]
fn fit_avs_evaluate_round_trip() {
    let (dir, train, test) = simulated("pipeline", "40");
    let run = dir.join("run");
    let mut args = vec!["fit", "--data", s(&train), "--out", s(&run), "--seed", "1"];
    args.extend(FAST);
    let table = ok(&args);
    assert!(table.contains("<- S"));
    for f in [
        "chain.json",
        "greedy_audit.json",
        "pipeline.json",
        "config.json",
        "manifest.json",
        "models/model_001.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    ok(&["avs", "--data", s(&train), "--model", s(&run)]);
    assert!(std::fs::read_to_string(run.join("vs_tree.dot"))
        .unwrap()
        .starts_with("digraph"));

    let report_path = dir.join("report.json");
    ok(&[
        "evaluate",
        "--data",
        s(&test),
        "--model",
        s(&run),
        "--tree",
        s(&run.join("vs_tree.json")),
        "--out",
        s(&report_path),
    ]);
    let report: EvalReport = serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    assert!(report.dvc.accuracy >= 0.95, "{report:?}");
    assert_eq!(
        report.routing.iter().map(|r| r.count).sum::<usize>(),
        report.n
    );

    let preds = dir.join("preds.json");
    ok(&[
        "predict",
        "--data",
        s(&test),
        "--model",
        s(&run),
        "--out",
        s(&preds),
    ]);
    let preds: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(&preds).unwrap()).unwrap();
    assert_eq!(preds.len(), report.n);
}

#[test]
fn reruns_are_byte_identical() {
    let (dir, train, _) = simulated("determinism", "30");
    let mut outs = Vec::new();
    for name in ["one", "two"] {
        let run = dir.join(name);
        let mut args = vec!["fit", "--data", s(&train), "--out", s(&run), "--seed", "3"];
        args.extend(FAST);
        ok(&args);
        ok(&["avs", "--data", s(&train), "--model", s(&run)]);
        outs.push(run);
    }
    let chain: serde_json::Value =
        serde_json::from_slice(&std::fs::read(outs[0].join("chain.json")).unwrap()).unwrap();
    let mut files = vec![
        "chain.json".to_string(),
        "vs_tree.dot".into(),
        "vs_tree.json".into(),
        "greedy_audit.json".into(),
    ];
    files.extend(
        chain["models"]
            .as_array()
            .unwrap()
            .iter()
            .map(|m| m.as_str().unwrap().to_string()),
    );
    for f in &files {
        assert_eq!(
            std::fs::read(outs[0].join(f)).unwrap(),
            std::fs::read(outs[1].join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn job_count_does_not_change_results() {
    let (dir, train, _) = simulated("jobs", "30");
    let mut chains = Vec::new();
    for jobs in ["1", "3"] {
        let run = dir.join(format!("jobs{jobs}"));
        let mut args = vec!["fit", "--data", s(&train), "--out", s(&run), "--jobs", jobs];
        args.extend(FAST);
        ok(&args);
        chains.push(std::fs::read(run.join("chain.json")).unwrap());
    }
    assert_eq!(chains[0], chains[1]);
}

#[test]
fn block_size_covering_everything_gives_one_block() {
    let (dir, train, _) = simulated("oneblock", "24");
    let run = dir.join("run");
    let mut args = vec![
        "fit",
        "--data",
        s(&train),
        "--out",
        s(&run),
        "--block-size",
        "50",
    ];
    args.extend(FAST);
    ok(&args);
    let chain: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("chain.json")).unwrap()).unwrap();
    assert_eq!(chain["order"], serde_json::json!([0]));
    assert_eq!(chain["selected_length"], 1);
}

#[test]
fn single_leaf_tree_reports_match_plain_model() {
    let (dir, train, test) = simulated("singleleaf", "30");
    let run = dir.join("run");
    let mut args = vec!["fit", "--data", s(&train), "--out", s(&run)];
    args.extend(FAST);
    ok(&args);
    let fitted = dvc_core::pipeline::FittedDvc::load(&run).unwrap();
    let s_len = fitted.chain.selected_len();
    let mut counts = vec![0; s_len + 1];
    counts[s_len - 1] = 1;
    let tree = VsTree::single_leaf(s_len, fitted.feature_names.clone(), counts, 0.9).unwrap();
    let tree_path = dir.join("leaf.json");
    tree.save(&tree_path).unwrap();

    let plain = dir.join("plain.json");
    let routed = dir.join("routed.json");
    ok(&[
        "evaluate",
        "--data",
        s(&test),
        "--model",
        s(&run),
        "--out",
        s(&plain),
    ]);
    ok(&[
        "evaluate",
        "--data",
        s(&test),
        "--model",
        s(&run),
        "--tree",
        s(&tree_path),
        "--out",
        s(&routed),
    ]);
    let plain: EvalReport = serde_json::from_slice(&std::fs::read(&plain).unwrap()).unwrap();
    let routed: EvalReport = serde_json::from_slice(&std::fs::read(&routed).unwrap()).unwrap();
    assert_eq!(routed.avs.unwrap(), plain.dvc);
    assert_eq!(routed.dvc, plain.dvc);
}

#[test]
fn predefined_blocks_and_toml_config() {
    let dir = scratch("wdbc");
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data");
    let cfg = dir.join("cfg.toml");
    std::fs::write(
        &cfg,
        "[train]\nepochs = 3\nlr = 0.03\ncv_folds = 3\nseed = 2\n",
    )
    .unwrap();
    let run = dir.join("run");
    ok(&[
        "fit",
        "--data",
        s(&data.join("wdbc.csv")),
        "--label-col",
        "diagnosis",
        "--blocks",
        s(&data.join("wdbc_blocks.json")),
        "--config",
        s(&cfg),
        "--out",
        s(&run),
    ]);
    let saved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["train"]["epochs"], 3);
    let chain: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("chain.json")).unwrap()).unwrap();
    assert_eq!(chain["order"].as_array().unwrap().len(), 6);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["dataset_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn exit_codes() {
    assert_eq!(dvc(&["--help"]).status.code(), Some(0));
    assert_eq!(dvc(&["--version"]).status.code(), Some(0));
    assert_eq!(dvc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dvc(&["fit", "--data", "x.csv"]).status.code(), Some(1));
    assert_eq!(
        dvc(&[
            "fit",
            "--data",
            "x.csv",
            "--out",
            "y",
            "--blocks",
            "b.json",
            "--block-size",
            "3"
        ])
        .status
        .code(),
        Some(1)
    );
    let dir = scratch("exit");
    let missing = dir.join("missing.csv");
    assert_eq!(
        dvc(&["fit", "--data", s(&missing), "--out", s(&dir)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn gradcheck_command() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("PASS"), "{out}");
    assert_eq!(dvc(&["gradcheck", "--inject-bug"]).status.code(), Some(2));

    let dir = scratch("gradcheck");
    let report = dir.join("scalar.json");
    ok(&["gradcheck", "--q", "1", "--cells", "1", "--out", s(&report)]);
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(rep["max_rel_error"].as_f64().unwrap() <= 1e-6);
}
