use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use triage_core::aggregator::{
    forward, mean, read_checkpoint, write_checkpoint, AggregatorConfig, AggregatorParams, Checkpoint, Mode,
};
use triage_core::dataset::{
    assign_folds, generate_synthetic, load_bag, load_manifest, split_patients, CaseRecord, FeatureBag, SplitAssignment,
    SplitSet, SyntheticConfig,
};
use triage_core::evaluation::{
    evaluate, evaluate_partition, pr_points, read_predictions, roc_points, write_predictions, EvaluationConfig,
    PredictionRow, ScoredSet,
};
use triage_core::rng::derive_seed;
use triage_core::tessellation::{parse_fraction, read_mask, tessellate, TileParams};
use triage_core::training::{fold_seed, train_fold, FoldResult, LabeledBag, TrainConfig};
use triage_core::triage_sim::{iterations_csv, simulate, ScoredCase, SimConfig};

use crate::config::{comment, run_config, Settings, SplitConfig};
use crate::{Cli, CliError, Command, SettingsArgs};

type Result<T> = std::result::Result<T, CliError>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json<T: serde::Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("serializable")
}

fn settings_map(pairs: &[(&str, Value)]) -> Map<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn pretty(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_settings(args: &SettingsArgs) -> Result<Settings> {
    Settings::load(args.config.as_deref(), &args.set)
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Synth { settings, out } => synth(seed, settings, out),
        Command::Tessellate { slide_id, mask, extent, tile_size, min_coverage, magnification, out } => {
            tessellate_cmd(seed, slide_id, mask, extent, *tile_size, min_coverage, *magnification, out)
        }
        Command::Train { manifest, fold, settings, split, out, history } => {
            train(seed, manifest, *fold, settings, split.as_deref(), out, history.as_deref())
        }
        Command::TrainEnsemble { manifest, settings, out } => train_ensemble(seed, manifest, settings, out),
        Command::Predict { manifest, checkpoints, split, subset, out } => {
            predict(seed, manifest, checkpoints, split.as_deref(), subset, out)
        }
        Command::Evaluate { predictions, bootstrap, bins, sensitivities, partitions, out } => {
            evaluate_cmd(seed, predictions, *bootstrap, *bins, sensitivities, partitions, out)
        }
        Command::Simulate { predictions, iterations, pathologists, experts, per_pathologist, out } => {
            let config = SimConfig {
                n_pathologists: *pathologists,
                n_experts: *experts,
                cases_per_pathologist: *per_pathologist,
                iterations: *iterations,
                seed: derive_seed(seed, "simulate"),
            };
            simulate_cmd(seed, predictions, config, out)
        }
        Command::Attention { case_id, manifest, checkpoints, out } => attention(seed, case_id, manifest, checkpoints, out),
    }
}

fn synth(seed: u64, args: &SettingsArgs, out: &Path) -> Result<()> {
    let mut settings = load_settings(args)?;
    let mut config: SyntheticConfig = settings.take()?;
    settings.finish()?;
    config.seed = derive_seed(seed, "synth");
    let rc = run_config(
        "synth",
        seed,
        json!({ "config": args.config, "set": args.set, "out": out }),
        settings_map(&[("synthetic", to_json(&config))]),
    );
    let cohort = generate_synthetic(&config)?;
    cohort.write(out, Some(&rc))?;

    let mut text = comment(&rc).iter().map(|c| format!("# {c}\n")).collect::<String>();
    text.push_str("case_id,slide_id,grid_x,grid_y,section_id\n");
    for (i, case) in cohort.cases.iter().enumerate() {
        let bag = cohort.bag::<f32>(i)?;
        for (meta, &signal) in bag.tile_meta().iter().zip(&cohort.signal_tiles[i]) {
            if signal {
                text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    case.case_id, meta.slide_id, meta.grid_x, meta.grid_y, meta.section_id
                ));
            }
        }
    }
    write_file(&out.join("signal_tiles.csv"), text)
}

#[allow(clippy::too_many_arguments)]
fn tessellate_cmd(
    seed: u64,
    slide_id: &str,
    mask: &Path,
    extent: &str,
    tile_size: u32,
    min_coverage: &str,
    magnification: f64,
    out: &Path,
) -> Result<()> {
    let (w, h) = extent
        .split_once(['x', 'X'])
        .and_then(|(w, h)| Some((w.trim().parse::<u64>().ok()?, h.trim().parse::<u64>().ok()?)))
        .ok_or_else(|| CliError::Invalid(format!("--extent expects WIDTHxHEIGHT, got '{extent}'")))?;
    let params = TileParams { tile_size, target_magnification: magnification, min_coverage: parse_fraction(min_coverage)? };
    let map = read_mask(mask)?;
    let plan = tessellate(slide_id, &map, (w, h), &params)?;
    let rc = run_config(
        "tessellate",
        seed,
        json!({ "slide_id": slide_id, "mask": mask, "extent": [w, h], "out": out }),
        settings_map(&[
            ("tile_size", json!(tile_size)),
            ("target_magnification", json!(magnification)),
            ("min_coverage", json!(params.min_coverage.to_string())),
            ("mask_magnification", json!(map.mask_magnification())),
        ]),
    );
    write_file(out, plan.to_csv(&comment(&rc)))
}

struct TrainSetup {
    agg: AggregatorConfig,
    train: TrainConfig,
    split_config: SplitConfig,
    split: SplitAssignment,
    dev: Vec<LabeledBag<f32>>,
}

fn train_setup(seed: u64, manifest: &Path, args: &SettingsArgs, split_path: Option<&Path>) -> Result<TrainSetup> {
    let mut settings = load_settings(args)?;
    let agg: AggregatorConfig = settings.take()?;
    let mut train: TrainConfig = settings.take()?;
    let split_config: SplitConfig = settings.take()?;
    settings.finish()?;
    agg.validate()?;
    train.seed = derive_seed(seed, "train");
    train.validate()?;

    let cases = load_manifest(manifest)?;
    let split = match split_path {
        Some(p) => SplitAssignment::read(p)?,
        None => {
            let split = split_patients(
                &cases,
                split_config.test_fraction,
                derive_seed(seed, "split"),
                split_config.stratified_split,
            )?;
            assign_folds(&cases, &split, split_config.n_folds, derive_seed(seed, "folds"))?
        }
    };
    let dir = base_dir(manifest);
    let mut dev = Vec::new();
    for case in &cases {
        if let Some(fold) = split.fold_of(case) {
            dev.push(LabeledBag { bag: load_bag::<f32>(case, &dir)?, label: case.label, fold });
        }
    }
    Ok(TrainSetup { agg, train, split_config, split, dev })
}

fn train_settings(s: &TrainSetup) -> Map<String, Value> {
    settings_map(&[("aggregator", to_json(&s.agg)), ("training", to_json(&s.train)), ("split", to_json(&s.split_config))])
}

fn save_fold(result: &FoldResult<f32>, setup: &TrainSetup, rc: &Value, ckpt: &Path, history: &Path) -> Result<()> {
    let best = result.history.best();
    let metadata = json!({
        "fold": result.fold,
        "training": setup.train,
        "fold_seed": fold_seed(setup.train.seed, result.fold),
        "best_iteration": result.history.best_iteration,
        "best_validation_loss": best.map(|b| b.validation_loss),
        "run_config": rc,
    });
    let checkpoint = Checkpoint::new(result.params.clone(), metadata)?;
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_checkpoint(ckpt, &checkpoint)?;
    write_file(history, result.history.to_csv(&comment(rc)))
}

fn run_fold(setup: &TrainSetup, fold: usize) -> Result<FoldResult<f32>> {
    let config = TrainConfig { seed: fold_seed(setup.train.seed, fold), ..setup.train.clone() };
    Ok(train_fold(&setup.dev, fold, &setup.agg, &config)?)
}

fn train(
    seed: u64,
    manifest: &Path,
    fold: usize,
    args: &SettingsArgs,
    split: Option<&Path>,
    out: &Path,
    history: Option<&Path>,
) -> Result<()> {
    let setup = train_setup(seed, manifest, args, split)?;
    if fold >= setup.split.n_folds() {
        return Err(CliError::Invalid(format!("fold {fold} out of range; split has {} folds", setup.split.n_folds())));
    }
    let rc = run_config(
        "train",
        seed,
        json!({ "manifest": manifest, "fold": fold, "config": args.config, "set": args.set, "split": split, "out": out }),
        train_settings(&setup),
    );
    let result = run_fold(&setup, fold)?;
    let history = history.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("history.csv"));
    save_fold(&result, &setup, &rc, out, &history)
}

fn train_ensemble(seed: u64, manifest: &Path, args: &SettingsArgs, out: &Path) -> Result<()> {
    let setup = train_setup(seed, manifest, args, None)?;
    let rc = run_config(
        "train-ensemble",
        seed,
        json!({ "manifest": manifest, "config": args.config, "set": args.set, "out": out }),
        train_settings(&setup),
    );
    let mut split_text: String = comment(&rc).iter().map(|c| format!("# {c}\n")).collect();
    split_text.push_str(&setup.split.to_csv());
    write_file(&out.join("split.csv"), split_text)?;

    let mut folds = Vec::new();
    for k in 0..setup.split.n_folds() {
        let result = run_fold(&setup, k)?;
        let ckpt = out.join(format!("fold_{k}.ckpt"));
        save_fold(&result, &setup, &rc, &ckpt, &out.join(format!("fold_{k}_history.csv")))?;
        folds.push(json!({
            "fold": k,
            "checkpoint": format!("fold_{k}.ckpt"),
            "best_iteration": result.history.best_iteration,
            "best_validation_loss": result.history.best().map(|b| b.validation_loss),
        }));
    }
    write_file(&out.join("ensemble.json"), pretty(&json!({ "run_config": rc, "folds": folds })))
}

fn load_members(paths: &[PathBuf]) -> Result<Vec<AggregatorParams<f64>>> {
    let mut members: Vec<AggregatorParams<f64>> = Vec::new();
    for p in paths {
        let ckpt = read_checkpoint(p)?;
        if let Some(first) = members.first() {
            if first.config() != ckpt.params.config() {
                return Err(CliError::Invalid(format!("checkpoint {} has a different model config", p.display())));
            }
        }
        members.push(ckpt.params.cast());
    }
    Ok(members)
}

fn predict(
    seed: u64,
    manifest: &Path,
    checkpoints: &[PathBuf],
    split: Option<&Path>,
    subset: &str,
    out: &Path,
) -> Result<()> {
    let wanted = match (subset, split) {
        ("all", _) => None,
        ("test", Some(_)) => Some(SplitSet::Test),
        ("development", Some(_)) => Some(SplitSet::Development),
        ("test" | "development", None) => {
            return Err(CliError::Invalid(format!("--subset {subset} needs --split")));
        }
        _ => return Err(CliError::Invalid(format!("unknown subset '{subset}'; use all, test or development"))),
    };
    let members = load_members(checkpoints)?;
    let cases = load_manifest(manifest)?;
    let split = split.map(SplitAssignment::read).transpose()?;
    let dir = base_dir(manifest);
    let mut rows = Vec::new();
    for case in &cases {
        if let (Some(set), Some(split)) = (wanted, &split) {
            if split.set_of(case) != Some(set) {
                continue;
            }
        }
        let bag: FeatureBag<f64> = load_bag(case, &dir)?;
        let member_probs = members
            .iter()
            .map(|m| Ok(forward(m, &bag, Mode::Eval)?.prob_high))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(PredictionRow {
            case_id: case.case_id.clone(),
            prob_high: mean(&member_probs),
            label: case.label,
            tags: case.tags.clone(),
            member_probs,
        });
    }
    let rc = run_config(
        "predict",
        seed,
        json!({ "manifest": manifest, "checkpoints": checkpoints, "split": split.is_some(), "subset": subset, "out": out }),
        settings_map(&[("aggregator", to_json(members[0].config()))]),
    );
    write_file(out, write_predictions(&rows, &comment(&rc)))
}

fn read_rows(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let rows = read_predictions(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(CliError::Invalid(format!("predictions file {} contains no cases", path.display())));
    }
    Ok(rows)
}

fn evaluate_cmd(
    seed: u64,
    predictions: &Path,
    bootstrap: usize,
    bins: usize,
    sensitivities: &[f64],
    partitions: &[String],
    out: &Path,
) -> Result<()> {
    let rows = read_rows(predictions)?;
    let set = ScoredSet::from_rows(&rows)?;
    let config = EvaluationConfig {
        bootstrap_replicates: bootstrap,
        seed: derive_seed(seed, "evaluate"),
        n_bins: bins,
        sensitivities: sensitivities.to_vec(),
    };
    let rc = run_config(
        "evaluate",
        seed,
        json!({ "predictions": predictions, "partitions": partitions, "out": out }),
        settings_map(&[("evaluation", to_json(&config))]),
    );
    let overall = evaluate(&set, &config)?;
    let mut by_tag = BTreeMap::new();
    for tag in partitions {
        by_tag.insert(tag.clone(), evaluate_partition(&set, tag, &config)?);
    }
    let report = json!({ "run_config": rc, "overall": overall, "partitions": by_tag });
    let comments = comment(&rc);
    write_file(&out.join("report.json"), pretty(&report))?;
    write_file(&out.join("roc.csv"), roc_points(&set.scores, &set.labels)?.to_csv("fpr", "tpr", &comments))?;
    write_file(&out.join("pr.csv"), pr_points(&set.scores, &set.labels)?.to_csv("recall", "precision", &comments))?;
    write_file(&out.join("calibration.csv"), overall.calibration.to_csv(&comments))
}

fn simulate_cmd(seed: u64, predictions: &Path, config: SimConfig, out: &Path) -> Result<()> {
    let rows = read_rows(predictions)?;
    let pool: Vec<ScoredCase> = rows.iter().map(|r| ScoredCase { score: r.prob_high, high: r.label.is_high() }).collect();
    let rc = run_config(
        "simulate",
        seed,
        json!({ "predictions": predictions, "out": out }),
        settings_map(&[("simulation", to_json(&config))]),
    );
    let (report, records) = simulate(&pool, &config)?;
    write_file(out, pretty(&json!({ "run_config": rc, "report": report })))?;
    write_file(&out.with_extension("iterations.csv"), iterations_csv(&records, &config, &comment(&rc)))
}

fn attention(seed: u64, case_id: &str, manifest: &Path, checkpoints: &[PathBuf], out: &Path) -> Result<()> {
    let members = load_members(checkpoints)?;
    let cases = load_manifest(manifest)?;
    let case: &CaseRecord = cases
        .iter()
        .find(|c| c.case_id == case_id)
        .ok_or_else(|| CliError::Invalid(format!("unknown case_id '{case_id}'")))?;
    let bag: FeatureBag<f64> = load_bag(case, &base_dir(manifest))?;
    let maps = members
        .iter()
        .map(|m| Ok(forward(m, &bag, Mode::Eval)?.attention))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let weights: Vec<f64> = (0..bag.n_tiles()).map(|i| mean(&maps.iter().map(|m| m[i]).collect::<Vec<_>>())).collect();
    let rc = run_config(
        "attention",
        seed,
        json!({ "case": case_id, "manifest": manifest, "checkpoints": checkpoints, "out": out }),
        Map::new(),
    );
    let mut text: String = comment(&rc).iter().map(|c| format!("# {c}\n")).collect();
    text.push_str("slide_id,grid_x,grid_y,section_id,weight\n");
    for (meta, w) in bag.tile_meta().iter().zip(weights) {
        text.push_str(&format!("{},{},{},{},{}\n", meta.slide_id, meta.grid_x, meta.grid_y, meta.section_id, w));
    }
    write_file(out, text)
}
