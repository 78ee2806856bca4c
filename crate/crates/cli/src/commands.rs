use std::path::{Path, PathBuf};

use far::attacks::{adversarial_ifia, derive_seed, ifia, pgd, perturbation_norm, AttackConfig};
use far::data::Dataset;
use far::harness::{emit_report, evaluate as evaluate_model, run_sweep, sweep_to_csv, ReportFormat};
use far::models::Model;
use far::objectives::{second_order_model, train_with_output, TrainOutput};
use far::Tensor;
use serde::Serialize;

use crate::config::{AttackMethod, RunConfig};
use crate::{CliError, Common};

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(common: &Common) -> Result<Context, CliError> {
        let mut cfg = RunConfig::load(&common.config)?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        let out = common.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("far_out"));
        std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        // The echo leaves out the output directory so that it only depends
        // on what determines the results.
        cfg.out = None;
        std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
        Ok(Context { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn check_model(model: &Model, data: &Dataset) -> Result<(), CliError> {
    if model.input_shape() != data.sample_shape() || model.class_count() < data.class_count {
        return Err(CliError::Config(format!(
            "model takes {:?} with {} classes but the data has {:?} with {} classes",
            model.input_shape(),
            model.class_count(),
            data.sample_shape(),
            data.class_count
        )));
    }
    Ok(())
}

/// The checkpoint, or the configured model trained through every stage.
/// Stage `i` (from 1) trains with seed `derive_seed(seed, i)`; when
/// `outputs` is set each stage logs and checkpoints under `stage_<i>`.
fn obtain_model(ctx: &Context, train_data: &Dataset, outputs: bool) -> Result<Model, CliError> {
    let cfg = &ctx.cfg;
    let data = match cfg.train_samples {
        Some(n) if n < train_data.len() => train_data.subset(n, cfg.seed)?,
        _ => train_data.clone(),
    };
    let mut model = match &cfg.checkpoint {
        Some(p) => Model::load(p)?,
        None => cfg.require_model()?.build(data.sample_shape(), data.class_count, cfg.seed)?,
    };
    check_model(&model, &data)?;
    for (i, stage) in cfg.train.iter().enumerate() {
        let stage = far::objectives::TrainConfig { seed: derive_seed(cfg.seed, i as u64 + 1), ..stage.clone() };
        log::info!("stage {}: {} for {} epochs", i + 1, stage.objective.name(), stage.epochs);
        let out = outputs.then(|| TrainOutput { dir: ctx.path(&format!("stage_{}", i + 1)) });
        model = train_with_output(&model, &data, &stage, out.as_ref())?.model;
    }
    Ok(model)
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    if ctx.cfg.train.is_empty() {
        return Err(CliError::Config("at least one [[train]] stage is required".into()));
    }
    let (train_data, _) = ctx.cfg.load_data()?;
    let model = obtain_model(ctx, &train_data, true)?;
    model.save(ctx.path("model.farm"))?;
    Ok(())
}

pub fn evaluate(ctx: &Context) -> Result<(), CliError> {
    let eval = ctx.cfg.require_eval()?.clone();
    let (train_data, test_data) = ctx.cfg.load_data()?;
    let model = obtain_model(ctx, &train_data, false)?;
    check_model(&model, &test_data)?;
    let report = evaluate_model(&model, &test_data, &far::harness::EvalConfig { seed: ctx.cfg.seed, ..eval })?;
    emit_report(&report, ctx.path("report.csv"), ReportFormat::Csv)?;
    emit_report(&report, ctx.path("report.json"), ReportFormat::Json)?;
    Ok(())
}

fn test_sample(test: &Dataset, index: usize) -> Result<(Tensor, usize), CliError> {
    if index >= test.len() {
        return Err(CliError::Config(format!("--index {index} is outside the {} test images", test.len())));
    }
    Ok(test.sample(index))
}

fn write_tensor_csv(path: &Path, t: &Tensor) -> Result<(), CliError> {
    let mut s = String::from("index,value\n");
    for (i, v) in t.data().iter().enumerate() {
        s.push_str(&format!("{i},{v:?}\n"));
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Serialize)]
struct AttackSummary {
    index: usize,
    label: usize,
    method: AttackMethod,
    prediction_before: usize,
    prediction_after: usize,
    perturbation_norm: f64,
    final_dissimilarity: Option<f64>,
    final_objective: f64,
    iterations_used: usize,
    restart: usize,
    failed_restarts: usize,
}

pub fn attack(ctx: &Context, index: usize) -> Result<(), CliError> {
    let section = ctx.cfg.attack.clone().ok_or_else(|| CliError::Config("an [attack] section is required".into()))?;
    let (train_data, test_data) = ctx.cfg.load_data()?;
    let model = obtain_model(ctx, &train_data, false)?;
    check_model(&model, &test_data)?;
    let (x, label) = test_sample(&test_data, index)?;
    let cfg = AttackConfig { data_bounds: test_data.bounds, seed: derive_seed(ctx.cfg.seed, index as u64), ..section.config };
    let attack_model = second_order_model(&model, section.beta)?;
    let result = match section.method {
        AttackMethod::Ifia => ifia(&attack_model, &x, &cfg)?,
        AttackMethod::AdversarialIfia => adversarial_ifia(&attack_model, &x, label, &cfg)?,
        AttackMethod::Pgd => pgd(&model, &x, label, &cfg)?,
    };
    let before_class = model.predict(&x)?;
    let before = cfg.attribution.compute(&model, &x, before_class)?;
    let after = cfg.attribution.compute(&model, &result.x_adv, before_class)?;
    write_tensor_csv(&ctx.path("x_adv.csv"), &result.x_adv)?;
    before.save_csv(ctx.path("attribution_before.csv"))?;
    before.save_binary(ctx.path("attribution_before.bin"))?;
    after.save_csv(ctx.path("attribution_after.csv"))?;
    after.save_binary(ctx.path("attribution_after.bin"))?;
    let summary = AttackSummary {
        index,
        label,
        method: section.method,
        prediction_before: before_class,
        prediction_after: model.predict(&result.x_adv)?,
        perturbation_norm: perturbation_norm(&result.x_adv, &x, cfg.norm),
        final_dissimilarity: result.final_dissimilarity,
        final_objective: result.final_objective,
        iterations_used: result.iterations_used,
        restart: result.restart,
        failed_restarts: result.failed_restarts,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(ctx.path("attack.json"), json + "\n")?;
    log::info!("attack on image {index}: prediction {} -> {}", summary.prediction_before, summary.prediction_after);
    Ok(())
}

pub fn explain(ctx: &Context, index: usize) -> Result<(), CliError> {
    let section = ctx.cfg.explain.clone().ok_or_else(|| CliError::Config("an [explain] section is required".into()))?;
    let (train_data, test_data) = ctx.cfg.load_data()?;
    let model = obtain_model(ctx, &train_data, false)?;
    check_model(&model, &test_data)?;
    let (x, _) = test_sample(&test_data, index)?;
    let class = match section.class {
        Some(c) => c,
        None => model.predict(&x)?,
    };
    let map = section.attribution.compute(&model, &x, class)?;
    map.save_csv(ctx.path("attribution.csv"))?;
    map.save_binary(ctx.path("attribution.bin"))?;
    Ok(())
}

pub fn sweep(ctx: &Context) -> Result<(), CliError> {
    let spec = ctx.cfg.sweep_spec()?;
    if ctx.cfg.checkpoint.is_some() {
        return Err(CliError::Config("sweeps train from scratch and do not take a checkpoint".into()));
    }
    let (train_data, test_data) = ctx.cfg.load_data()?;
    let rows = run_sweep(&spec, &train_data, &test_data)?;
    std::fs::write(ctx.path("sweep.csv"), sweep_to_csv(&spec, &rows)?)?;
    Ok(())
}
