//! Command-line front end: `run_cli` parses arguments, dispatches the
//! subcommand and maps failures onto exit codes (1 usage, 2 data/numeric).

mod args;
mod convert;

use std::path::{Path, PathBuf};

use clap::Parser;
use deepshore::experiment::{compare_reports, run_subcase_experiment, PipelineConfig, Subcase, ZetaSpace};
use deepshore::io::{write_scheme, Container, ContainerKind};
use deepshore::net::{build_model, kfold_split_blocks, predict, train_with_validation, Standardizer, VoxelDataset};
use deepshore::nonneg::{clamp_log_one, exp_restore};
use deepshore::phantom::{generate_dataset, PhantomConfig, PhantomDataset};
use deepshore::sh::{acc_coeffs, eval_sh_basis, ShFitter};
use deepshore::shore::{fod_shore_fitter, optimize_zeta_columns, ShoreFitter};
use deepshore::stats::summarize_report;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use args::{Cli, Command};
pub use convert::{
    coeffs_from_container, coeffs_to_container, dataset_from_container, dataset_to_container, model_from_container,
    model_to_container, Coeffs, CoeffsMeta, ModelMeta, Representation, Space, SphereSpec,
};

/// Key of the wall-clock field in JSON reports; the only non-reproducible entry.
pub const TIMESTAMP_KEY: &str = "generated_at";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(deepshore::Error),
}

impl From<deepshore::Error> for CliError {
    fn from(e: deepshore::Error) -> Self {
        match e {
            deepshore::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Usage(io.to_string()),
            other => CliError::Data(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn configure_threads() {
    if let Ok(v) = std::env::var("DEEPSHORE_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(0) => {}
            // a second call in the same process keeps the first pool
            Ok(n) => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            Err(_) => log::warn!("ignoring DEEPSHORE_THREADS={v:?}"),
        }
    }
}

/// Runs one subcommand; `argv` excludes the program name.
pub fn run_cli(argv: &[String]) -> i32 {
    let parsed = Cli::try_parse_from(std::iter::once("deepshore".to_string()).chain(argv.iter().cloned()));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Phantom(a) => cmd_phantom(a),
        Command::FitShore(a) => cmd_fit_shore(a),
        Command::OptimizeZeta(a) => cmd_optimize_zeta(a),
        Command::FodToShore(a) => cmd_fod_to_shore(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Crossval(a) => cmd_crossval(a),
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    phantom: PhantomConfig,
    pipeline: PipelineConfig,
}

fn resolve(c: &args::Common) -> CliResult<FileConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<FileConfig>(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let pl = &mut cfg.pipeline;
    if let Some(s) = c.seed {
        cfg.phantom.seed = s;
        pl.train.seed = s;
        pl.fold_seed = s;
    }
    if let Some(s) = &c.shells {
        cfg.phantom.shells = s.clone();
        pl.shells = Some(s.clone());
    }
    if let Some(w) = c.withhold_b {
        pl.withhold_b = (w > 0.0).then_some(w);
    }
    if let Some(v) = c.radial_order {
        pl.shore.radial_order = v;
    }
    if let Some(v) = c.lambda_n {
        pl.shore.lambda_n = v;
    }
    if let Some(v) = c.lambda_l {
        pl.shore.lambda_l = v;
    }
    if let Some(v) = c.nonneg_epsilon {
        pl.nonneg.epsilon = v;
    }
    if let Some(v) = c.k_folds {
        pl.train.k_folds = v;
    }
    if let Some(v) = c.batch_size {
        pl.train.batch_size = v;
    }
    if let Some(v) = c.epochs {
        pl.train.epochs = v;
    }
    usage_check(pl.validate())?;
    Ok(cfg)
}

/// Invalid user-supplied settings are usage errors.
fn usage_check<T>(r: deepshore::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        deepshore::Error::InvalidArgument(m) => CliError::Usage(m),
        other => other.into(),
    })
}

fn require_out(c: &args::Common) -> CliResult<&Path> {
    c.out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Data(e.into()))
}

fn timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    format!("{secs}")
}

/// Adds the timestamp and writes to `--report`, or prints to stdout.
fn emit_report(path: Option<&PathBuf>, mut value: Value, print_without_path: bool) -> CliResult<()> {
    if let Value::Object(map) = &mut value {
        map.insert(TIMESTAMP_KEY.into(), Value::String(timestamp()));
    }
    match path {
        Some(p) => write_json(p, &value),
        None if print_without_path => {
            println!("{}", serde_json::to_string_pretty(&value)?);
            Ok(())
        }
        None => Ok(()),
    }
}

fn load_dataset(path: &Path) -> CliResult<PhantomDataset> {
    Ok(dataset_from_container(&Container::read_kind(path, ContainerKind::Dataset)?)?)
}

fn load_coeffs(path: &Path) -> CliResult<Coeffs> {
    Ok(coeffs_from_container(&Container::read_kind(path, ContainerKind::Coeffs)?)?)
}

fn cmd_phantom(a: args::PhantomArgs) -> CliResult<()> {
    let out = require_out(&a.common)?.to_path_buf();
    let mut cfg = resolve(&a.common)?.phantom;
    if let Some(v) = a.voxels {
        cfg.n_voxels = v;
    }
    if let Some(v) = a.rotations {
        cfg.rotations_per_voxel = v;
    }
    if let Some(k) = a.kappa {
        cfg.kappa = k;
    }
    if let Some(s) = &a.snr {
        cfg.snr = match s.to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "none" => None,
            v => Some(v.parse().map_err(|_| CliError::Usage(format!("bad --snr {s:?}")))?),
        };
    }
    usage_check(cfg.validate())?;
    let data = generate_dataset(&cfg)?;
    dataset_to_container(&data)?.write(&out)?;
    match (&a.bval, &a.bvec) {
        (Some(bval), Some(bvec)) => write_scheme(&data.samples, bval, bvec)?,
        (None, None) => {}
        _ => return Err(CliError::Usage("--bval and --bvec go together".into())),
    }
    log::info!("wrote {} rows to {}", data.len(), out.display());
    emit_report(
        a.common.report.as_ref(),
        json!({"command": "phantom", "config": cfg, "rows": data.len(), "samples": data.samples.len()}),
        false,
    )
}

/// Masked samples of a dataset, as `samples × rows` columns.
fn masked_columns(cfg: &PipelineConfig, data: &PhantomDataset) -> CliResult<(deepshore::QSpaceSamples, DMatrix<f64>)> {
    let mask = usage_check(cfg.mask_indices(&data.samples))?;
    let samples = data.samples.subset(&mask)?;
    Ok((samples, data.signals.select_columns(&mask).transpose()))
}

fn log_columns(m: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    m.map(|v| clamp_log_one(v, eps))
}

fn cmd_fit_shore(a: args::FitShoreArgs) -> CliResult<()> {
    let out = require_out(&a.common)?.to_path_buf();
    let cfg = resolve(&a.common)?.pipeline;
    let data = load_dataset(&a.input)?;
    let (samples, cols) = masked_columns(&cfg, &data)?;
    let zeta = a.zeta.unwrap_or_else(|| samples.default_zeta0());
    let fitter = ShoreFitter::new(&samples, &cfg.shore, zeta)?;
    let source = if a.linear { cols } else { log_columns(&cols, cfg.nonneg.epsilon) };
    let coeffs = Coeffs {
        meta: CoeffsMeta {
            representation: Representation::Shore,
            space: if a.linear { Space::Linear } else { Space::Log },
            nonneg_epsilon: cfg.nonneg.epsilon,
            zeta: Some(zeta),
            shore: Some(cfg.shore),
            sh_order: None,
            shells: Some(samples.shells()),
            sphere: None,
        },
        coeffs: fitter.fit_columns(&source)?.transpose(),
        rows: (0..data.len()).collect(),
        block_ids: data.block_ids.clone(),
    };
    coeffs_to_container(&coeffs)?.write(&out)?;
    emit_report(
        a.common.report.as_ref(),
        json!({"command": "fit-shore", "zeta": zeta, "meta": coeffs.meta, "config": cfg, "rows": data.len()}),
        false,
    )
}

fn cmd_optimize_zeta(a: args::OptimizeZetaArgs) -> CliResult<()> {
    let cfg = resolve(&a.common)?.pipeline;
    let data = load_dataset(&a.input)?;
    let (samples, cols) = masked_columns(&cfg, &data)?;
    let max_rows = a.max_rows.unwrap_or(cfg.zeta_max_rows).max(1);
    let step = data.len().div_ceil(max_rows).max(1);
    let rows: Vec<usize> = (0..data.len()).step_by(step).collect();
    let cols = cols.select_columns(&rows);
    let cols = match cfg.zeta_space {
        ZetaSpace::Linear => cols,
        ZetaSpace::Log => log_columns(&cols, cfg.nonneg.epsilon),
    };
    let zeta0 = a.zeta0.or(cfg.zeta0).unwrap_or_else(|| samples.default_zeta0());
    let opt = optimize_zeta_columns(&cols, &samples, &cfg.shore, zeta0)?;
    let value = json!({
        "command": "optimize-zeta",
        "zeta": opt.zeta,
        "objective": opt.objective,
        "initial_zeta": opt.initial_zeta,
        "initial_objective": opt.initial_objective,
        "iterations": opt.iterations,
        "rows_used": rows.len(),
        "shells": samples.shells(),
        "config": cfg,
    });
    if let Some(out) = &a.common.out {
        write_json(out, &value)?;
    }
    emit_report(a.common.report.as_ref(), value, a.common.out.is_none())
}

fn cmd_fod_to_shore(a: args::FodToShoreArgs) -> CliResult<()> {
    let out = require_out(&a.common)?.to_path_buf();
    let cfg = resolve(&a.common)?.pipeline;
    let data = load_dataset(&a.input)?;
    let sphere = SphereSpec {
        count: cfg.sphere_directions,
        seed: cfg.directions_seed,
        iterations: cfg.repulsion_iterations,
    };
    let dirs = sphere.directions()?;
    let basis = eval_sh_basis(&dirs, data.config.sh_order)?.matrix;
    let mut values = &basis * data.fods.transpose();
    if !a.linear {
        values = log_columns(&values, cfg.nonneg.epsilon);
    }
    let fitter = usage_check(fod_shore_fitter(&dirs, a.zeta, &cfg.shore))?;
    let coeffs = Coeffs {
        meta: CoeffsMeta {
            representation: Representation::Shore,
            space: if a.linear { Space::Linear } else { Space::Log },
            nonneg_epsilon: cfg.nonneg.epsilon,
            zeta: Some(a.zeta),
            shore: Some(cfg.shore),
            sh_order: Some(data.config.sh_order),
            shells: None,
            sphere: Some(sphere),
        },
        coeffs: fitter.fit_columns(&values)?.transpose(),
        rows: (0..data.len()).collect(),
        block_ids: data.block_ids.clone(),
    };
    coeffs_to_container(&coeffs)?.write(&out)?;
    emit_report(
        a.common.report.as_ref(),
        json!({"command": "fod-to-shore", "meta": coeffs.meta, "config": cfg, "rows": data.len()}),
        false,
    )
}

fn cmd_train(a: args::TrainArgs) -> CliResult<()> {
    let out = require_out(&a.common)?.to_path_buf();
    let cfg = resolve(&a.common)?.pipeline;
    let inputs = load_coeffs(&a.inputs)?;
    let targets = load_coeffs(&a.targets)?;
    if inputs.rows != targets.rows {
        return Err(CliError::Usage("inputs and targets cover different rows".into()));
    }
    let all = VoxelDataset::new(inputs.coeffs.clone(), targets.coeffs.clone(), inputs.block_ids.clone())?;
    let (fit_set, validation) = if a.validate {
        let folds = usage_check(kfold_split_blocks(&all.block_ids, cfg.train.k_folds, cfg.fold_seed))?;
        (all.select_rows(&folds[0].train)?, Some(all.select_rows(&folds[0].test)?))
    } else {
        (all, None)
    };
    let scaler = Standardizer::fit(&fit_set);
    let fit_std = scaler.transform(&fit_set)?;
    let val_std = validation.as_ref().map(|v| scaler.transform(v)).transpose()?;
    let model = build_model(fit_set.input_dim(), fit_set.target_dim(), cfg.train.seed)?;
    let outcome = train_with_validation(&model, &fit_std, val_std.as_ref(), &cfg.train)?;
    let meta = ModelMeta {
        input_dim: fit_set.input_dim(),
        output_dim: fit_set.target_dim(),
        seed: cfg.train.seed,
        train: cfg.train,
        inputs: inputs.meta,
        targets: targets.meta,
    };
    model_to_container(&outcome.model, &scaler, &meta)?.write(&out)?;
    emit_report(
        a.common.report.as_ref(),
        json!({
            "command": "train",
            "loss_history": outcome.loss_history,
            "validation_history": outcome.validation_history,
            "best_epoch": outcome.best_epoch,
            "train": cfg.train,
            "fold_seed": cfg.fold_seed,
        }),
        false,
    )
}

fn cmd_predict(a: args::PredictArgs) -> CliResult<()> {
    let out = require_out(&a.common)?.to_path_buf();
    let (model, scaler, meta) = model_from_container(&Container::read_kind(&a.model, ContainerKind::Model)?)?;
    let inputs = load_coeffs(&a.inputs)?;
    if inputs.meta != meta.inputs {
        log::warn!("input coefficients differ from the ones the model was trained on");
    }
    if inputs.coeffs.ncols() != meta.input_dim {
        return Err(CliError::Data(deepshore::Error::LengthMismatch {
            expected: meta.input_dim,
            found: inputs.coeffs.ncols(),
        }));
    }
    let pred = scaler.inverse_targets(&predict(&model, &scaler.transform_inputs(&inputs.coeffs))?);
    let coeffs = Coeffs {
        meta: meta.targets,
        coeffs: pred,
        rows: inputs.rows,
        block_ids: inputs.block_ids,
    };
    coeffs_to_container(&coeffs)?.write(&out)?;
    emit_report(
        a.common.report.as_ref(),
        json!({"command": "predict", "rows": coeffs.rows.len(), "meta": coeffs.meta}),
        false,
    )
}

/// Sphere values (dirs × rows) of FOD-side coefficients.
fn fod_sphere_values(c: &Coeffs) -> CliResult<(deepshore::DirectionSet, DMatrix<f64>)> {
    let sphere = c
        .meta
        .sphere
        .ok_or_else(|| CliError::Usage("coefficients carry no FOD sphere sampling".into()))?;
    let dirs = sphere.directions()?;
    let basis = match c.meta.representation {
        Representation::Shore => {
            let zeta = c.meta.zeta.ok_or_else(|| CliError::Usage("SHORE coefficients without zeta".into()))?;
            let shore = c.meta.shore.unwrap_or_default();
            fod_shore_fitter(&dirs, zeta, &shore)?.linear_fit().design().clone()
        }
        Representation::Sh => eval_sh_basis(&dirs, c.meta.sh_order.unwrap_or(8))?.matrix,
    };
    if basis.ncols() != c.coeffs.ncols() {
        return Err(CliError::Data(deepshore::Error::LengthMismatch {
            expected: basis.ncols(),
            found: c.coeffs.ncols(),
        }));
    }
    Ok((dirs, &basis * c.coeffs.transpose()))
}

fn cmd_evaluate(a: args::EvaluateArgs) -> CliResult<()> {
    let pred = load_coeffs(&a.pred)?;
    let truth = load_dataset(&a.truth)?;
    let sh_order = truth.config.sh_order;
    let (dirs, values) = fod_sphere_values(&pred)?;
    let restored = match pred.meta.space {
        Space::Log => DMatrix::from_vec(values.nrows(), values.ncols(), exp_restore(values.as_slice())?),
        Space::Linear => values,
    };
    let min_restored = restored.iter().copied().fold(f64::INFINITY, f64::min);
    let sh = ShFitter::new(&dirs, sh_order, 0.0)?.fit_columns(&restored)?;
    let acc = pred
        .rows
        .iter()
        .enumerate()
        .map(|(j, &r)| {
            if r >= truth.len() {
                return Err(deepshore::Error::Format(format!("row {r} is outside the dataset")));
            }
            let t: Vec<f64> = truth.fods.row(r).iter().copied().collect();
            acc_coeffs(sh.column(j).as_slice(), &t)
        })
        .collect::<deepshore::Result<Vec<_>>>()?;
    let (median, mean) = summarize_report(&acc)?;
    let value = json!({
        "command": "evaluate",
        "rows": pred.rows,
        "acc": acc,
        "median": median,
        "mean": mean,
        "min_restored": min_restored,
        "meta": pred.meta,
    });
    if let Some(out) = &a.common.out {
        let mut c = Container::new(ContainerKind::Report, value.clone());
        c.push_vector("acc", &acc)?;
        c.write(out)?;
    }
    emit_report(a.common.report.as_ref(), value, true)
}

fn cmd_crossval(a: args::CrossvalArgs) -> CliResult<()> {
    let mut cfg = resolve(&a.common)?.pipeline;
    if let Some(k) = a.eval_folds {
        cfg.eval_folds = k;
    }
    if let Some(k) = a.train_folds {
        cfg.train.k_folds = k;
    }
    if a.no_nested {
        cfg.nested = false;
    }
    let subcases = match &a.subcase {
        Some(names) => names
            .iter()
            .map(|n| usage_check(n.parse::<Subcase>()))
            .collect::<CliResult<Vec<_>>>()?,
        None => vec![cfg.subcase],
    };
    usage_check(cfg.validate())?;
    let data = load_dataset(&a.input)?;
    let mut reports = subcases
        .iter()
        .map(|&s| {
            let c = PipelineConfig {
                subcase: s,
                ..cfg.clone()
            };
            usage_check(run_subcase_experiment(&c, &data))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let comparisons = if reports.len() > 1 {
        compare_reports(&mut reports)?
    } else {
        Vec::new()
    };
    let folds = deepshore::net::kfold_split_blocks(&data.block_ids, cfg.eval_folds, cfg.fold_seed)?;
    let per_fold: Vec<Value> = reports
        .iter()
        .map(|r| {
            let dist: Vec<Value> = folds
                .iter()
                .map(|f| {
                    let acc = r.fold_acc(&f.test);
                    let (median, mean) = summarize_report(&acc).unwrap_or((f64::NAN, f64::NAN));
                    json!({"median": median, "mean": mean, "acc": acc})
                })
                .collect();
            json!({"subcase": r.subcase, "folds": dist})
        })
        .collect();
    let value = json!({
        "command": "crossval",
        "config": cfg,
        "reports": reports,
        "per_fold": per_fold,
        "comparisons": comparisons,
        "note": "zeta is optimized on the training rows of each fold and frozen for its test rows",
    });
    if let Some(out) = &a.common.out {
        let mut c = Container::new(ContainerKind::Report, value.clone());
        for r in &reports {
            c.push_vector(&format!("acc.{}", r.subcase), &r.acc)?;
        }
        c.write(out)?;
    }
    emit_report(a.common.report.as_ref(), value, true)
}
