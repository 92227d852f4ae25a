//! `dvc`: simulate data, fit a variable-block chain, fit the variable
//! selection tree, predict and evaluate.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use dvc_core::avs::VsTree;
use dvc_core::blocks::BlockPartition;
use dvc_core::data::{load_csv, save_csv, simulate_gmm, split_indices, SimConfig};
use dvc_core::gradcheck::{run_gradcheck, GradcheckConfig, DEFAULT_TOLERANCE};
use dvc_core::pipeline::{
    evaluate, fit_dvc, fit_selection_tree, predict, BlockSpec, EvalReport, FittedDvc,
    PipelineConfig,
};

const TREE_JSON: &str = "vs_tree.json";
const TREE_DOT: &str = "vs_tree.dot";

#[derive(Parser)]
#[command(
    name = "dvc",
    version,
    about = "Deep variable-block chain classifier with adaptive variable selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a Gaussian-mixture dataset and a stratified train/test split.
    Simulate(SimulateArgs),
    /// Partition variables, build the greedy chain and select its length.
    Fit(FitArgs),
    /// Compute ν-numbers on training data and fit the variable selection tree.
    Avs(AvsArgs),
    /// Write per-sample predictions for a CSV.
    Predict(PredictArgs),
    /// Score a fitted model (and optionally the selection tree) on labelled data.
    Evaluate(PredictArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Standard,
    Correlated,
}

#[derive(Args)]
struct SimulateArgs {
    /// Total number of features (20 informative plus noise).
    #[arg(long)]
    p: Option<usize>,
    /// Number of pure-noise features; implies p = 20 + noise.
    #[arg(long)]
    noise: Option<usize>,
    #[arg(long, value_enum, default_value = "standard")]
    variant: Variant,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "label")]
    label_col: String,
}

#[derive(Args)]
struct TrainFlags {
    /// JSON or TOML file with `train`, `partition` and `tree` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainFlags,
    /// Predefined block structure (`{"blocks": [[...], ...]}`).
    #[arg(long, conflicts_with_all = ["block_size", "min_corr"])]
    blocks: Option<PathBuf>,
    #[arg(long)]
    block_size: Option<usize>,
    /// Correlation floor for grouping, or `none` for the plain size-capped procedure.
    #[arg(long, value_parser = parse_min_corr)]
    min_corr: Option<MinCorr>,
    /// Fit on the raw features instead of z-scores.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy)]
struct MinCorr(Option<f64>);

fn parse_min_corr(s: &str) -> std::result::Result<MinCorr, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(MinCorr(None));
    }
    let v: f64 = s
        .parse()
        .map_err(|_| format!("expected a number in [0, 1] or `none`, got `{s}`"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("{v} outside [0, 1]"));
    }
    Ok(MinCorr(Some(v)))
}

#[derive(Args)]
struct AvsArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Directory written by `fit`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    min_leaf: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; defaults to the model directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// Route samples through this selection tree (DVC-AVS).
    #[arg(long)]
    tree: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    models: usize,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Corrupt one analytic gradient entry (negative control).
    #[arg(long)]
    inject_bug: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: PipelineConfig,
    seed: u64,
    dataset: PathBuf,
    dataset_sha256: String,
    artifacts: Vec<PathBuf>,
    seconds: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Avs(a) => avs(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
    .map(|ok| {
        if ok {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(2)
        }
    })
}

fn fingerprint(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    Ok(cfg)
}

fn simulate(a: SimulateArgs) -> Result<bool> {
    let p = match (a.p, a.noise) {
        (Some(p), Some(noise)) if p != 20 + noise => {
            bail!("--p {p} disagrees with --noise {noise}")
        }
        (_, Some(noise)) => 20 + noise,
        (Some(p), None) => p,
        (None, None) => 100,
    };
    let mut cfg = match a.variant {
        Variant::Standard => SimConfig::standard(p, a.seed),
        Variant::Correlated => SimConfig::correlated(p, a.seed),
    };
    cfg.n = a.n;
    let (data, meta) = simulate_gmm(&cfg)?;
    let idx = split_indices(&data, a.test_fraction, a.seed)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_csv(&data, a.out.join("data.csv"), "label")?;
    save_csv(&data.subset(&idx.train), a.out.join("train.csv"), "label")?;
    save_csv(&data.subset(&idx.test), a.out.join("test.csv"), "label")?;

    #[derive(Serialize)]
    struct Meta<'a> {
        #[serde(flatten)]
        sim: &'a dvc_core::data::SimMetadata,
        test_fraction: f64,
        split: &'a dvc_core::data::SplitIndices,
    }
    write_json(
        &a.out.join("metadata.json"),
        &Meta {
            sim: &meta,
            test_fraction: a.test_fraction,
            split: &idx,
        },
    )?;
    println!(
        "wrote {} samples x {} features ({} train / {} test) to {}",
        data.n(),
        data.p(),
        idx.train.len(),
        idx.test.len(),
        a.out.display()
    );
    println!("relevant features: {:?}", meta.relevant_features);
    Ok(true)
}

fn apply_train_flags(cfg: &mut PipelineConfig, f: &TrainFlags) {
    let t = &mut cfg.train;
    if let Some(v) = f.seed {
        t.seed = v;
    }
    if let Some(v) = f.folds {
        t.cv_folds = v;
    }
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.lr {
        t.lr = v;
    }
    if let Some(v) = f.batch {
        t.batch_size = v;
    }
    if let Some(v) = f.l2 {
        t.l2 = v;
    }
    if let Some(v) = f.dropout {
        t.dropout = v;
    }
    if let Some(v) = f.jobs {
        t.jobs = v;
    }
}

fn fit(a: FitArgs) -> Result<bool> {
    let started = Instant::now();
    let mut cfg = load_config(a.train.config.as_deref())?;
    apply_train_flags(&mut cfg, &a.train);
    if let Some(bs) = a.block_size {
        cfg.partition.block_size = bs;
    }
    if let Some(MinCorr(mc)) = a.min_corr {
        cfg.partition.min_corr = mc;
    }
    if a.raw {
        cfg.raw_features = true;
    }
    let data = load_csv(&a.data.data, &a.data.label_col)?;
    let blocks = match &a.blocks {
        Some(path) => {
            let part = BlockPartition::load(path)?;
            if part.total_features() != data.p() {
                bail!(
                    "{} covers {} features but {} has {}",
                    path.display(),
                    part.total_features(),
                    a.data.data.display(),
                    data.p()
                );
            }
            BlockSpec::Given(part)
        }
        None => BlockSpec::Learned(cfg.partition),
    };
    let fitted = fit_dvc(&data, &blocks, &cfg)?;
    fitted.save(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;

    let chain = &fitted.chain;
    println!(
        "blocks: {}   selected length S = {}",
        chain.len(),
        chain.selected_len()
    );
    println!(
        "{:>4} {:>6} {:>10} {:>10}",
        "len", "block", "train_err", "cv_err"
    );
    for l in 0..chain.len() {
        println!(
            "{:>4} {:>6} {:>10.4} {:>10.4}{}",
            l + 1,
            chain.order[l],
            chain.train_errors[l],
            chain.cv_errors[l],
            if l + 1 == chain.selected_len() {
                "  <- S"
            } else {
                ""
            }
        );
    }
    let selected = dvc_core::chain::selected_variables(chain, chain.selected_len())?;
    println!("selected features ({}): {:?}", selected.len(), selected);

    let mut artifacts: Vec<PathBuf> = [
        "chain.json",
        "greedy_audit.json",
        "pipeline.json",
        "config.json",
    ]
    .into_iter()
    .map(PathBuf::from)
    .collect();
    artifacts.extend(
        (1..=chain.len())
            .map(|l| PathBuf::from("models").join(dvc_core::chain::model_file_name(l))),
    );
    write_json(
        &a.out.join("manifest.json"),
        &RunManifest {
            command: "fit".into(),
            seed: cfg.train.seed,
            config: cfg,
            dataset: a.data.data.clone(),
            dataset_sha256: fingerprint(&a.data.data)?,
            artifacts,
            seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    Ok(true)
}

fn avs(a: AvsArgs) -> Result<bool> {
    let started = Instant::now();
    let mut cfg = match &a.config {
        Some(p) => load_config(Some(p))?,
        None => {
            let saved = a.model.join("config.json");
            if saved.exists() {
                load_config(Some(&saved))?
            } else {
                PipelineConfig::default()
            }
        }
    };
    if let Some(v) = a.min_leaf {
        cfg.tree.min_leaf = v;
    }
    if let Some(v) = a.max_depth {
        cfg.tree.max_depth = v;
    }
    if let Some(v) = a.alpha {
        cfg.tree.alpha = v;
    }
    if let Some(v) = a.jobs {
        cfg.train.jobs = v;
    }
    let fitted = FittedDvc::load(&a.model)?;
    let data = load_csv(&a.data.data, &a.data.label_col)?;
    let (tree, records) = fit_selection_tree(&fitted, &data, &cfg)?;
    let out = a.out.unwrap_or_else(|| a.model.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    tree.save(out.join(TREE_JSON))?;
    std::fs::write(out.join(TREE_DOT), tree.to_dot())
        .with_context(|| format!("writing {}", out.join(TREE_DOT).display()))?;
    write_json(&out.join("nu_records.json"), &records)?;

    let mut hist = vec![0usize; tree.selected_len + 1];
    for r in &records {
        hist[r.nu - 1] += 1;
    }
    println!("nu-number counts (1..=S+1): {hist:?}");
    println!(
        "selection tree: {} leaves, split features {:?}",
        tree.leaf_count(),
        tree.split_features()
    );
    for (id, nu) in tree.leaf_labels() {
        println!("  leaf {id}: nu~ = {nu}");
    }
    write_json(
        &out.join("avs_manifest.json"),
        &RunManifest {
            command: "avs".into(),
            seed: cfg.train.seed,
            config: cfg,
            dataset: a.data.data.clone(),
            dataset_sha256: fingerprint(&a.data.data)?,
            artifacts: vec![TREE_JSON.into(), TREE_DOT.into(), "nu_records.json".into()],
            seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    Ok(true)
}

fn load_for_scoring(
    a: &PredictArgs,
) -> Result<(FittedDvc, Option<VsTree>, dvc_core::data::Dataset)> {
    let fitted = FittedDvc::load(&a.model)?;
    let tree = a.tree.as_ref().map(VsTree::load).transpose()?;
    let data = load_csv(&a.data.data, &a.data.label_col)?;
    if let Some(t) = &tree {
        if t.selected_len != fitted.chain.selected_len() {
            bail!(
                "tree was built for S = {}, model selects S = {}",
                t.selected_len,
                fitted.chain.selected_len()
            );
        }
    }
    Ok((fitted, tree, data))
}

fn predict_cmd(a: PredictArgs) -> Result<bool> {
    let (fitted, tree, data) = load_for_scoring(&a)?;
    let preds = predict(&fitted, tree.as_ref(), &data)?;
    match &a.out {
        Some(path) => write_json(path, &preds)?,
        None => println!("{}", serde_json::to_string_pretty(&preds)?),
    }
    Ok(true)
}

fn print_report(r: &EvalReport) {
    let auc = |a: Option<f64>| a.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    println!(
        "n = {}   chain {:?}   S = {}",
        r.n, r.chain_order, r.selected_len
    );
    println!("{:<8} {:>9} {:>8}", "method", "accuracy", "auc");
    println!("{:<8} {:>9.4} {:>8}", "DVC", r.dvc.accuracy, auc(r.dvc.auc));
    if let Some(s) = &r.avs {
        println!("{:<8} {:>9.4} {:>8}", "DVC-AVS", s.accuracy, auc(s.auc));
    }
    if !r.groups.is_empty() {
        println!(
            "{:>6} {:>4} {:>5} {:>8} {:>8}",
            "leaf", "nu~", "n", "DVC", "DVC-AVS"
        );
        for g in &r.groups {
            println!(
                "{:>6} {:>4} {:>5} {:>8.4} {:>8.4}",
                g.leaf, g.nu_tilde, g.n, g.dvc_accuracy, g.avs_accuracy
            );
        }
    }
}

fn evaluate_cmd(a: PredictArgs) -> Result<bool> {
    let (fitted, tree, data) = load_for_scoring(&a)?;
    let report = evaluate(&fitted, tree.as_ref(), &data)?;
    print_report(&report);
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    Ok(true)
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let started = Instant::now();
    let cfg = GradcheckConfig {
        models: a.models,
        q: a.q,
        cells: a.cells,
        seed: a.seed,
        inject_bug: a.inject_bug,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    let ok = report.passed(a.tolerance);
    println!(
        "{} models, max relative error {:.3e} (tolerance {:.1e}) in {:.2}s: {}",
        report.models.len(),
        report.max_rel_error,
        a.tolerance,
        started.elapsed().as_secs_f64(),
        if ok { "PASS" } else { "FAIL" }
    );
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    Ok(ok)
}
