//! Evaluation pipeline (NA, AA, IN, CO), experiments, sweeps and reports.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{derive_seed, ifia, pgd, AttackConfig};
use crate::attribution::integrated_gradients;
use crate::autodiff::ActivationSpec;
use crate::data::Dataset;
use crate::error::{FarError, Result};
use crate::metrics::robustness_score;
use crate::models::{initialize, CnnConfig, InitKind, InitScheme, Model};
use crate::objectives::{second_order_model, train, TrainConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Attributional attack; its data bounds are taken from the dataset.
    pub ifia: AttackConfig,
    /// Adversarial-accuracy attack.
    pub pgd: AttackConfig,
    /// IG steps for the maps compared by IN and CO.
    #[serde(default = "default_ig_steps")]
    pub ig_steps: usize,
    pub top_k: usize,
    /// Softplus tightness used for ReLU second derivatives inside IFIA.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Size of the seeded evaluation subset; all samples when absent.
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_ig_steps() -> usize {
    128
}

fn default_beta() -> f64 {
    1.0
}

impl EvalConfig {
    /// IFIA (7 steps, 1.2/7 relative, 3 restarts, Sum-Top-K), PGD (40 steps,
    /// 0.03 relative, 3 restarts), IG with 128 steps, beta 1, 1000 samples.
    pub fn standard(epsilon: f64, k: usize) -> Self {
        EvalConfig {
            ifia: AttackConfig::ifia(epsilon, k, (0.0, 1.0)),
            pgd: AttackConfig::pgd(epsilon, (0.0, 1.0)),
            ig_steps: 128,
            top_k: k,
            beta: 1.0,
            samples: Some(1000),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ig_steps == 0 || self.top_k == 0 {
            return Err(FarError::InvalidArgument("ig_steps and top_k must be positive".into()));
        }
        ActivationSpec::relu_substitute(self.beta).validate()?;
        self.ifia.validate()?;
        self.pgd.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Position in the evaluated (possibly subsetted) set.
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    /// Prediction at the PGD point; absent when the sample was misclassified.
    pub adversarial_prediction: Option<usize>,
    pub top_k_intersection: Option<f64>,
    pub kendall_tau: Option<f64>,
    /// Why IN/CO are missing, without commas or newlines.
    pub note: Option<String>,
}

impl SampleRecord {
    pub fn correct(&self) -> bool {
        self.prediction == self.label
    }

    pub fn adversarially_correct(&self) -> bool {
        self.adversarial_prediction == Some(self.label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub natural_accuracy: f64,
    /// Over all samples; misclassified samples count as broken.
    pub adversarial_accuracy: f64,
    /// Mean over samples with a prediction-preserving IFIA result.
    pub top_k_intersection: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub attributed: usize,
    pub excluded: usize,
    pub records: Vec<SampleRecord>,
    pub config: EvalConfig,
}

impl EvalReport {
    /// Recomputes the summary fields from the records.
    pub fn from_records(records: Vec<SampleRecord>, config: EvalConfig) -> Result<Self> {
        let n = records.len();
        if n == 0 {
            return Err(FarError::InvalidArgument("no samples to report".into()));
        }
        let correct = records.iter().filter(|r| r.correct()).count();
        let robust = records.iter().filter(|r| r.adversarially_correct()).count();
        let scored: Vec<(f64, f64)> =
            records.iter().filter_map(|r| Some((r.top_k_intersection?, r.kendall_tau?))).collect();
        let mean = |f: fn(&(f64, f64)) -> f64| {
            (!scored.is_empty()).then(|| scored.iter().map(f).sum::<f64>() / scored.len() as f64)
        };
        Ok(EvalReport {
            natural_accuracy: correct as f64 / n as f64,
            adversarial_accuracy: robust as f64 / n as f64,
            top_k_intersection: mean(|s| s.0),
            kendall_tau: mean(|s| s.1),
            attributed: scored.len(),
            excluded: n - scored.len(),
            records,
            config,
        })
    }
}

fn clean_note(e: &FarError) -> String {
    e.to_string().replace([',', '\n', '\r'], ";")
}

fn evaluate_sample(model: &Model, attack_model: &Model, index: usize, x: &Tensor, label: usize, cfg: &EvalConfig) -> Result<SampleRecord> {
    let prediction = model.predict(x)?;
    let adversarial_prediction = if prediction == label {
        let a = AttackConfig { seed: derive_seed(cfg.seed, 2 * index as u64), ..cfg.pgd.clone() };
        Some(model.predict(&pgd(model, x, label, &a)?.x_adv)?)
    } else {
        None
    };
    let mut record = SampleRecord { index, label, prediction, adversarial_prediction, top_k_intersection: None, kendall_tau: None, note: None };
    let a = AttackConfig { seed: derive_seed(cfg.seed, 2 * index as u64 + 1), ..cfg.ifia.clone() };
    let scored = ifia(attack_model, x, &a).and_then(|r| {
        if !r.prediction_preserved {
            return Err(FarError::InvalidArgument("attack changed the prediction".into()));
        }
        let zero = Tensor::zeros(x.shape());
        let before = integrated_gradients(model, x, &zero, prediction, cfg.ig_steps)?.values;
        let after = integrated_gradients(model, &r.x_adv, &zero, prediction, cfg.ig_steps)?.values;
        robustness_score(&before, &after, cfg.top_k)
    });
    match scored {
        Ok(s) => {
            record.top_k_intersection = Some(s.top_k_intersection);
            record.kendall_tau = Some(s.kendall_tau);
        }
        Err(e) => {
            log::debug!("sample {index} excluded from IN/CO: {e}");
            record.note = Some(clean_note(&e));
        }
    }
    Ok(record)
}

/// Natural accuracy, PGD adversarial accuracy and IFIA robustness of
/// `model` on `data` (or its seeded subset). Attack failures on a sample
/// exclude it from IN/CO and are counted.
pub fn evaluate(model: &Model, data: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let cfg = EvalConfig {
        ifia: AttackConfig { data_bounds: data.bounds, ..cfg.ifia.clone() },
        pgd: AttackConfig { data_bounds: data.bounds, ..cfg.pgd.clone() },
        ..cfg.clone()
    };
    cfg.validate()?;
    let data = match cfg.samples {
        Some(n) if n < data.len() => data.subset(n, cfg.seed)?,
        _ => data.clone(),
    };
    if data.is_empty() {
        return Err(FarError::InvalidArgument("empty evaluation set".into()));
    }
    if data.sample_shape() != model.input_shape() {
        return Err(FarError::Shape(format!("data samples {:?} vs model input {:?}", data.sample_shape(), model.input_shape())));
    }
    let attack_model = second_order_model(model, cfg.beta)?;
    let records = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = data.sample(i);
            evaluate_sample(model, &attack_model, i, &x, y, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::from_records(records, cfg)?;
    log::info!(
        "evaluated {} samples: NA {:.4}, AA {:.4}, IN {:?}, CO {:?}, excluded {}",
        report.records.len(),
        report.natural_accuracy,
        report.adversarial_accuracy,
        report.top_k_intersection,
        report.kendall_tau,
        report.excluded
    );
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    /// Per-sample rows with the config and summary as `#` comment lines.
    Csv,
    Json,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> ReportFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

/// Columns of the per-sample CSV, in order.
pub const REPORT_COLUMNS: [&str; 7] =
    ["index", "label", "prediction", "adversarial_prediction", "top_k_intersection", "kendall_tau", "note"];

#[derive(Serialize, Deserialize)]
struct Summary {
    natural_accuracy: f64,
    adversarial_accuracy: f64,
    top_k_intersection: Option<f64>,
    kendall_tau: Option<f64>,
    attributed: usize,
    excluded: usize,
}

fn json_err(e: serde_json::Error) -> FarError {
    FarError::Format(e.to_string())
}

fn opt<T: std::fmt::Debug>(v: &Option<T>) -> String {
    v.as_ref().map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn report_to_string(report: &EvalReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).map_err(json_err),
        ReportFormat::Csv => {
            let summary = Summary {
                natural_accuracy: report.natural_accuracy,
                adversarial_accuracy: report.adversarial_accuracy,
                top_k_intersection: report.top_k_intersection,
                kendall_tau: report.kendall_tau,
                attributed: report.attributed,
                excluded: report.excluded,
            };
            let mut s = String::new();
            s.push_str(&format!("# config {}\n", serde_json::to_string(&report.config).map_err(json_err)?));
            s.push_str(&format!("# summary {}\n", serde_json::to_string(&summary).map_err(json_err)?));
            s.push_str(&REPORT_COLUMNS.join(","));
            s.push('\n');
            for r in &report.records {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.index,
                    r.label,
                    r.prediction,
                    r.adversarial_prediction.map(|p| p.to_string()).unwrap_or_default(),
                    opt(&r.top_k_intersection),
                    opt(&r.kendall_tau),
                    r.note.as_deref().unwrap_or("")
                ));
            }
            Ok(s)
        }
    }
}

pub fn report_from_str(text: &str, format: ReportFormat) -> Result<EvalReport> {
    if format == ReportFormat::Json {
        return serde_json::from_str(text).map_err(json_err);
    }
    let mut config = None;
    let mut summary = None;
    let mut records = Vec::new();
    let mut header_seen = false;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# config ") {
            config = Some(serde_json::from_str::<EvalConfig>(rest).map_err(json_err)?);
        } else if let Some(rest) = line.strip_prefix("# summary ") {
            summary = Some(serde_json::from_str::<Summary>(rest).map_err(json_err)?);
        } else if line.starts_with('#') {
            continue;
        } else if !header_seen {
            if line != REPORT_COLUMNS.join(",") {
                return Err(FarError::Format(format!("unexpected report header {line:?}")));
            }
            header_seen = true;
        } else {
            records.push(parse_record(line)?);
        }
    }
    let (config, s) = match (config, summary) {
        (Some(c), Some(s)) => (c, s),
        _ => return Err(FarError::Format("report is missing its config or summary line".into())),
    };
    Ok(EvalReport {
        natural_accuracy: s.natural_accuracy,
        adversarial_accuracy: s.adversarial_accuracy,
        top_k_intersection: s.top_k_intersection,
        kendall_tau: s.kendall_tau,
        attributed: s.attributed,
        excluded: s.excluded,
        records,
        config,
    })
}

fn parse_record(line: &str) -> Result<SampleRecord> {
    let f: Vec<&str> = line.splitn(REPORT_COLUMNS.len(), ',').collect();
    if f.len() != REPORT_COLUMNS.len() {
        return Err(FarError::Format(format!("report row {line:?} has {} fields", f.len())));
    }
    let bad = |what: &str| FarError::Format(format!("bad {what} in report row {line:?}"));
    let int = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(what));
    let opt_int = |s: &str, what: &str| if s.is_empty() { Ok(None) } else { int(s, what).map(Some) };
    let opt_f = |s: &str, what: &str| if s.is_empty() { Ok(None) } else { s.parse::<f64>().map(Some).map_err(|_| bad(what)) };
    Ok(SampleRecord {
        index: int(f[0], "index")?,
        label: int(f[1], "label")?,
        prediction: int(f[2], "prediction")?,
        adversarial_prediction: opt_int(f[3], "adversarial_prediction")?,
        top_k_intersection: opt_f(f[4], "top_k_intersection")?,
        kendall_tau: opt_f(f[5], "kendall_tau")?,
        note: (!f[6].is_empty()).then(|| f[6].to_string()),
    })
}

pub fn emit_report(report: &EvalReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    std::fs::write(path, report_to_string(report, format)?)?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>, format: ReportFormat) -> Result<EvalReport> {
    report_from_str(&std::fs::read_to_string(path)?, format)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Mlp { hidden: Vec<usize> },
    SmallCnn {
        #[serde(default)]
        cnn: CnnConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    #[serde(default)]
    pub activation: ActivationSpec,
    #[serde(default = "default_init")]
    pub init: InitKind,
}

fn default_init() -> InitKind {
    InitKind::Ptd
}

impl ModelSpec {
    pub fn build(&self, input_shape: &[usize], class_count: usize, seed: u64) -> Result<Model> {
        let model = match &self.architecture {
            Architecture::Mlp { hidden } => {
                let d = input_shape.iter().product();
                let m = Model::mlp(d, hidden, class_count, self.activation)?;
                if input_shape.len() == 1 {
                    m
                } else {
                    Model::new(m.layers().to_vec(), self.activation, input_shape.to_vec(), class_count)?
                }
            }
            Architecture::SmallCnn { cnn } => Model::small_cnn(input_shape, class_count, cnn)?.with_activation(self.activation)?,
        };
        Ok(initialize(&model, InitScheme { kind: self.init, seed }))
    }
}

/// A model built and initialized from a seed, trained through each stage
/// in order, then evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub stages: Vec<TrainConfig>,
    pub eval: EvalConfig,
    /// Size of the seeded training subset; the full set when absent.
    #[serde(default)]
    pub train_samples: Option<usize>,
}

impl ExperimentConfig {
    /// Seed-dependent parts: init seed, stage seeds, subsets, eval seed.
    pub fn seeded(&self, seed: u64) -> ExperimentConfig {
        let mut c = self.clone();
        for (i, s) in c.stages.iter_mut().enumerate() {
            s.seed = derive_seed(seed, i as u64 + 1);
        }
        c.eval.seed = seed;
        c
    }
}

pub fn train_experiment(cfg: &ExperimentConfig, train_data: &Dataset, seed: u64) -> Result<Model> {
    let cfg = cfg.seeded(seed);
    let data = match cfg.train_samples {
        Some(n) if n < train_data.len() => train_data.subset(n, seed)?,
        _ => train_data.clone(),
    };
    let mut model = cfg.model.build(data.sample_shape(), data.class_count, seed)?;
    for stage in &cfg.stages {
        model = train(&model, &data, stage)?.model;
    }
    Ok(model)
}

pub fn run_experiment(cfg: &ExperimentConfig, train_data: &Dataset, eval_data: &Dataset, seed: u64) -> Result<(Model, EvalReport)> {
    let model = train_experiment(cfg, train_data, seed)?;
    let report = evaluate(&model, eval_data, &cfg.seeded(seed).eval)?;
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "parameter", content = "values", rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepValues {
    /// Sets `lambda` of every training stage.
    Lambda(Vec<f64>),
    /// Sets the softplus tightness of every stage and of the evaluation attack.
    Beta(Vec<f64>),
    InitScheme(Vec<InitKind>),
}

impl SweepValues {
    pub fn parameter(&self) -> &'static str {
        match self {
            SweepValues::Lambda(_) => "lambda",
            SweepValues::Beta(_) => "beta",
            SweepValues::InitScheme(_) => "init_scheme",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepValues::Lambda(v) | SweepValues::Beta(v) => v.len(),
            SweepValues::InitScheme(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, i: usize) -> String {
        match self {
            SweepValues::Lambda(v) | SweepValues::Beta(v) => format!("{:?}", v[i]),
            SweepValues::InitScheme(v) => v[i].name().to_string(),
        }
    }

    fn apply(&self, i: usize, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        match self {
            SweepValues::Lambda(v) => c.stages.iter_mut().for_each(|s| s.lambda = v[i]),
            SweepValues::Beta(v) => {
                c.stages.iter_mut().for_each(|s| s.beta = v[i]);
                c.eval.beta = v[i];
            }
            SweepValues::InitScheme(v) => c.model.init = v[i],
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub sweep: SweepValues,
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub parameter: &'static str,
    pub value: String,
    pub seed: u64,
    pub outcome: std::result::Result<EvalReport, String>,
}

type RunKey = (ModelSpec, Vec<TrainConfig>, Option<usize>, u64);

/// Trains and evaluates every (value, seed) pair. A failed run is
/// recorded in its row and the sweep continues. Runs whose training
/// configuration does not depend on the swept value share one model.
pub fn run_sweep(spec: &SweepSpec, train_data: &Dataset, eval_data: &Dataset) -> Result<Vec<SweepRow>> {
    if spec.sweep.is_empty() || spec.seeds.is_empty() {
        return Err(FarError::InvalidArgument("sweep needs at least one value and one seed".into()));
    }
    let mut trained: Vec<(RunKey, Model)> = Vec::new();
    let mut rows = Vec::new();
    for i in 0..spec.sweep.len() {
        let cfg = spec.sweep.apply(i, &spec.base);
        for &seed in &spec.seeds {
            let key = (cfg.model.clone(), cfg.stages.clone(), cfg.train_samples, seed);
            let model = match trained.iter().find(|(k, _)| *k == key) {
                Some((_, m)) => Ok(m.clone()),
                None => train_experiment(&cfg, train_data, seed).inspect(|m| trained.push((key, m.clone()))),
            };
            let outcome = model.and_then(|m| evaluate(&m, eval_data, &cfg.seeded(seed).eval)).map_err(|e| clean_note(&e));
            if let Err(e) = &outcome {
                log::warn!("{} = {} seed {seed} failed: {e}", spec.sweep.parameter(), spec.sweep.label(i));
            }
            rows.push(SweepRow { parameter: spec.sweep.parameter(), value: spec.sweep.label(i), seed, outcome });
        }
    }
    Ok(rows)
}

pub const SWEEP_COLUMNS: [&str; 10] = [
    "parameter",
    "value",
    "seed",
    "natural_accuracy",
    "adversarial_accuracy",
    "top_k_intersection",
    "kendall_tau",
    "attributed",
    "excluded",
    "error",
];

pub fn sweep_to_csv(spec: &SweepSpec, rows: &[SweepRow]) -> Result<String> {
    let mut s = format!("# config {}\n{}\n", serde_json::to_string(spec).map_err(json_err)?, SWEEP_COLUMNS.join(","));
    for r in rows {
        let fields = match &r.outcome {
            Ok(rep) => [
                format!("{:?}", rep.natural_accuracy),
                format!("{:?}", rep.adversarial_accuracy),
                opt(&rep.top_k_intersection),
                opt(&rep.kendall_tau),
                rep.attributed.to_string(),
                rep.excluded.to_string(),
                String::new(),
            ],
            Err(e) => [String::new(), String::new(), String::new(), String::new(), String::new(), String::new(), e.clone()],
        };
        s.push_str(&format!("{},{},{},{}\n", r.parameter, r.value, r.seed, fields.join(",")));
    }
    Ok(s)
}

pub fn write_sweep_csv(spec: &SweepSpec, rows: &[SweepRow], mut w: impl Write) -> Result<()> {
    w.write_all(sweep_to_csv(spec, rows)?.as_bytes())?;
    Ok(())
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
