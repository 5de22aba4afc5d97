use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;
use tmgp::affinity::MkmlConfig;
use tmgp::data::{
    fold_train_test, kfold, load_dataset, ratio_split, read_connectivity_csv, simulate_population,
    write_dataset, PopulationDataset, SimulationParams, TrainTest,
};
use tmgp::evaluation::{
    average_reports, evaluate, evaluate_against_baseline, node_scores, write_report, EvaluationReport, ReportFormat,
};
use tmgp::models::{load_bundle, save_bundle, ModelBundle};
use tmgp::topology::CentralityMetric;
use tmgp::training::{predict_multigraph, train, Prediction, TrainingTrace};

use crate::args::{interp_name, EvaluateArgs, MetricsArgs, PredictArgs, SimulateArgs, SplitArgs, TrainArgs, TrainCmd};
use crate::error::{CliError, Result};
use crate::output::{manifest_beside, RunManifest, Staging, MANIFEST_NAME};

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let params = SimulationParams {
        subjects: args.subjects,
        rois: args.rois,
        views: args.views,
        clusters: args.clusters,
        separation: args.separation,
        noise: args.noise,
        latent_dim: args.latent_dim,
        seed: args.seed,
    };
    let sim = simulate_population(&params).map_err(CliError::usage)?;
    let mut staging = Staging::near(&args.out)?;
    let dir = staging.dir(&args.out)?;
    write_dataset(&sim.dataset, &dir)?;
    let labels: String = sim.labels.iter().map(|l| format!("{l}\n")).collect();
    fs::write(dir.join("labels.txt"), labels)?;
    let manifest = RunManifest::new(
        "simulate",
        json!({
            "subjects": params.subjects,
            "rois": params.rois,
            "views": params.views,
            "clusters": params.clusters,
            "separation": params.separation,
            "noise": params.noise,
            "latent_dim": params.latent_dim,
        }),
    )
    .seed("simulation", params.seed);
    staging.commit(manifest, &dir_manifest(&args.out))?;
    info!("wrote {} subjects to {}", params.subjects, args.out.display());
    Ok(())
}

fn dir_manifest(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_NAME)
}

fn holdout(data: &PopulationDataset, split: &SplitArgs) -> Result<Option<TrainTest>> {
    split
        .train_frac
        .map(|frac| ratio_split(data.num_subjects(), frac, split.split_seed).map_err(CliError::usage))
        .transpose()
}

fn check_source_view(data: &PopulationDataset, source_view: usize) -> Result<()> {
    if source_view >= data.num_views() {
        return Err(CliError::usage(format!(
            "--source-view {source_view} out of range for {} views",
            data.num_views()
        )));
    }
    Ok(())
}

/// Validates the flags and trains on `data`.
fn fit(data: &PopulationDataset, args: &TrainArgs) -> Result<(ModelBundle, TrainingTrace)> {
    check_source_view(data, args.source_view)?;
    let cfg = args.config();
    cfg.validate().map_err(CliError::usage)?;
    let weights = args.weights(data.num_views() - 1);
    weights.validate().map_err(CliError::usage)?;
    info!(
        "training on {} subjects for {} iterations",
        data.num_subjects(),
        cfg.iterations
    );
    Ok(train(data, args.source_view, &cfg, &weights)?)
}

pub fn train_cmd(args: &TrainCmd) -> Result<()> {
    let full = load_dataset(&args.data)?;
    let split = holdout(&full, &args.split)?;
    let data = match &split {
        Some(tt) => full.subset(&tt.train),
        None => full,
    };
    let (bundle, trace) = fit(&data, &args.train)?;

    let trace_path = args.trace.clone().unwrap_or_else(|| args.out.with_extension("trace.csv"));
    let mut staging = Staging::near(&args.out)?;
    save_bundle(&bundle, &staging.file(&args.out)?)?;
    fs::write(staging.file(&trace_path)?, trace.to_csv())?;
    let mut config = args.train.to_json(&bundle.weights);
    config["train_frac"] = json!(args.split.train_frac);
    config["clusters_found"] = json!(trace.clusters);
    let manifest = RunManifest::new("train", config)
        .seed("training", args.train.seed)
        .seed("split", args.split.split_seed)
        .input("data", &args.data);
    staging.commit(manifest, &manifest_beside(&args.out))?;
    info!("wrote model to {}", args.out.display());
    Ok(())
}

fn check_dims(bundle: &ModelBundle, data: &PopulationDataset) -> Result<()> {
    let d = bundle.dims;
    if d.rois != data.rois() || d.views != data.num_views() {
        return Err(CliError::ingestion(format!(
            "model expects {} ROIs over {} views, dataset has {} ROIs over {} views",
            d.rois,
            d.views,
            data.rois(),
            data.num_views()
        )));
    }
    Ok(())
}

fn predict_dataset(bundle: &ModelBundle, test: &PopulationDataset) -> Result<PopulationDataset> {
    check_dims(bundle, test)?;
    let source = test.feature_matrix(bundle.source_view);
    let prediction: Prediction = predict_multigraph(bundle, &source, &MkmlConfig::default())?;
    Ok(prediction.to_dataset(test.subject_ids().to_vec(), test.view_ids())?)
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let bundle = load_bundle(&args.model)?;
    let full = load_dataset(&args.data)?;
    let test = match holdout(&full, &args.split)? {
        Some(tt) => full.subset(&tt.test),
        None => full,
    };
    let predicted = predict_dataset(&bundle, &test)?;
    let mut staging = Staging::near(&args.out)?;
    let dir = staging.dir(&args.out)?;
    write_dataset(&predicted, &dir)?;
    let manifest = RunManifest::new(
        "predict",
        json!({
            "source_view": bundle.source_view,
            "subjects": predicted.num_subjects(),
            "target_views": predicted.view_ids(),
            "train_frac": args.split.train_frac,
        }),
    )
    .seed("model", bundle.seed)
    .seed("split", args.split.split_seed)
    .input("model", &args.model)
    .input("data", &args.data);
    staging.commit(manifest, &dir_manifest(&args.out))?;
    info!("wrote {} predicted subjects to {}", predicted.num_subjects(), args.out.display());
    Ok(())
}

/// `report.csv` → `report_fold2.csv`.
fn fold_path(out: &Path, fold: usize) -> PathBuf {
    let stem = out.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let name = match out.extension() {
        Some(ext) => format!("{stem}_fold{fold}.{}", ext.to_string_lossy()),
        None => format!("{stem}_fold{fold}"),
    };
    out.with_file_name(name)
}

fn stage_report(staging: &mut Staging, report: &EvaluationReport, out: &Path, format: ReportFormat) -> Result<()> {
    let scratch = tempfile::tempdir()?;
    let name = out.file_name().ok_or_else(|| CliError::usage("--out needs a file name"))?;
    for written in write_report(report, &scratch.path().join(name), format)? {
        let dest = out.with_file_name(written.file_name().expect("report files have names"));
        let staged = staging.file(&dest)?;
        fs::copy(&written, staged)?;
    }
    Ok(())
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let interp = args.train.interp;
    let mut staging = Staging::near(&args.out)?;
    let manifest = if let Some(folds) = args.folds {
        let data_path = args.data.as_ref().ok_or_else(|| CliError::usage("--folds needs --data"))?;
        let data = load_dataset(data_path)?;
        check_source_view(&data, args.train.source_view)?;
        let parts = kfold(data.num_subjects(), folds, args.split_seed).map_err(CliError::usage)?;
        let mut reports = Vec::with_capacity(folds);
        for k in 0..folds {
            info!("fold {}/{folds}", k + 1);
            let tt = fold_train_test(&parts, k);
            let (bundle, _) = fit(&data.subset(&tt.train), &args.train)?;
            let truth = data.subset(&tt.test);
            let predicted = predict_dataset(&bundle, &truth)?;
            let mut report = evaluate(&predicted, &truth, interp)?;
            report.source_view = Some(data.view_ids()[args.train.source_view]);
            stage_report(&mut staging, &report, &fold_path(&args.out, k + 1), args.format)?;
            reports.push(report);
        }
        let average = average_reports(&reports)?;
        stage_report(&mut staging, &average, &args.out, args.format)?;
        let weights = args.train.weights(data.num_views() - 1);
        let mut config = args.train.to_json(&weights);
        config["folds"] = json!(folds);
        config["format"] = json!(format_name(args.format));
        RunManifest::new("evaluate", config)
            .seed("training", args.train.seed)
            .seed("split", args.split_seed)
            .input("data", data_path)
    } else {
        let (Some(pred_path), Some(truth_path)) = (&args.pred, &args.truth) else {
            return Err(CliError::usage("evaluate needs --pred and --truth, or --folds with --data"));
        };
        let pred = load_dataset(pred_path)?;
        let truth = load_dataset(truth_path)?;
        let report = match &args.baseline {
            Some(b) => evaluate_against_baseline(&pred, &load_dataset(b)?, &truth, interp)?,
            None => evaluate(&pred, &truth, interp)?,
        };
        stage_report(&mut staging, &report, &args.out, args.format)?;
        let mut manifest = RunManifest::new(
            "evaluate",
            json!({ "interp": interp_name(interp), "format": format_name(args.format) }),
        )
        .input("pred", pred_path)
        .input("truth", truth_path);
        if let Some(b) = &args.baseline {
            manifest = manifest.input("baseline", b);
        }
        manifest
    };
    staging.commit(manifest, &manifest_beside(&args.out))?;
    info!("wrote report to {}", args.out.display());
    Ok(())
}

fn format_name(format: ReportFormat) -> &'static str {
    match format {
        ReportFormat::Csv => "csv",
        ReportFormat::Markdown => "markdown",
    }
}

pub fn metrics_table(args: &MetricsArgs) -> Result<String> {
    let graph = read_connectivity_csv(&args.graph)?;
    let columns = CentralityMetric::ALL
        .iter()
        .map(|&m| node_scores(&graph, m, args.interp))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut out = String::from("roi");
    for m in CentralityMetric::ALL {
        out.push(',');
        out.push_str(m.short_name());
    }
    out.push('\n');
    for roi in 0..graph.r() {
        out.push_str(&roi.to_string());
        for col in &columns {
            out.push(',');
            out.push_str(&col[roi].to_string());
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn metrics(args: &MetricsArgs) -> Result<()> {
    let table = metrics_table(args)?;
    if let Some(out) = &args.out {
        let mut staging = Staging::near(out)?;
        fs::write(staging.file(out)?, &table)?;
        let manifest = RunManifest::new("metrics", json!({ "interp": interp_name(args.interp) }))
            .input("graph", &args.graph);
        staging.commit(manifest, &manifest_beside(out))?;
    }
    std::io::stdout().lock().write_all(table.as_bytes())?;
    Ok(())
}
