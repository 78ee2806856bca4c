//! Training objectives and the outer minimization loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{adversarial_ifia, derive_seed, ifia, AttackConfig, AttackResult, Target};
use crate::attribution::{AttributionSpec, Baseline, Method};
use crate::autodiff::{ActivationKind, ActivationSpec, Tape};
use crate::data::{Batch, Dataset};
use crate::error::{FarError, Result};
use crate::metrics::Dissimilarity;
use crate::models::{cross_entropy_on, Model};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Nat,
    /// Madry adversarial training mixed with clean loss at `adv_ratio`.
    Adv,
    IgNorm,
    IgSumNorm,
    Align,
    Aat,
    AdvAat,
}

impl Objective {
    pub const ALL: [Objective; 7] =
        [Objective::Nat, Objective::Adv, Objective::IgNorm, Objective::IgSumNorm, Objective::Align, Objective::Aat, Objective::AdvAat];

    /// Inner maximization includes the classification loss.
    pub fn is_robust(&self) -> bool {
        matches!(self, Objective::Adv | Objective::IgSumNorm | Objective::AdvAat)
    }

    /// Has an attribution term.
    pub fn is_attributional(&self) -> bool {
        !matches!(self, Objective::Nat | Objective::Adv)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Nat => "nat",
            Objective::Adv => "adv",
            Objective::IgNorm => "ig_norm",
            Objective::IgSumNorm => "ig_sum_norm",
            Objective::Align => "align",
            Objective::Aat => "aat",
            Objective::AdvAat => "adv_aat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    #[serde(default)]
    pub lambda: f64,
    /// Inner maximization. Its map, dissimilarity and target are replaced
    /// by the objective's own (see [`TrainConfig::effective_attack`]).
    pub attack: AttackConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_adv_ratio")]
    pub adv_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    /// Tightness of the softplus curvature used for ReLU second derivatives.
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_epochs() -> usize {
    1
}

fn default_batch_size() -> usize {
    50
}

fn default_adv_ratio() -> f64 {
    0.7
}

fn default_beta() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn new(objective: Objective, attack: AttackConfig) -> Self {
        TrainConfig {
            objective,
            lambda: 0.0,
            attack,
            optimizer: AdamConfig::default(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            adv_ratio: default_adv_ratio(),
            seed: 0,
            beta: default_beta(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FarError::InvalidArgument(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.adv_ratio) {
            return bad(format!("adv_ratio must lie in [0, 1], got {}", self.adv_ratio));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        ActivationSpec::relu_substitute(self.beta).validate()?;
        self.effective_attack().validate()
    }

    /// The attack the objective runs: map, dissimilarity and target are
    /// fixed by the objective, `lambda` is taken from this config.
    pub fn effective_attack(&self) -> AttackConfig {
        let steps = self.attack.attribution.steps;
        let ig_from_input = AttributionSpec { method: Method::IntegratedGradients, steps, baseline: Baseline::Input };
        let ig_from_zero = AttributionSpec { method: Method::IntegratedGradients, steps, baseline: Baseline::Zero };
        let align = AttributionSpec { method: Method::Alignment, steps, baseline: Baseline::Zero };
        let (attribution, dissimilarity, target) = match self.objective {
            Objective::Nat | Objective::Adv => (self.attack.attribution, self.attack.dissimilarity, self.attack.target),
            Objective::IgNorm | Objective::IgSumNorm => (ig_from_input, Dissimilarity::L1, Target::Zero),
            Objective::Align => (align, Dissimilarity::LogExpAlign, Target::Zero),
            Objective::Aat | Objective::AdvAat => (ig_from_zero, Dissimilarity::Pcl, Target::Original),
        };
        let lambda = if self.objective == Objective::Adv { 0.0 } else { self.lambda };
        AttackConfig { attribution, dissimilarity, target, lambda, ..self.attack.clone() }
    }
}

/// `model` with ReLU second derivatives replaced by the softplus curvature.
pub fn second_order_model(model: &Model, beta: f64) -> Result<Model> {
    match model.activation().kind {
        ActivationKind::Relu => model.with_activation(ActivationSpec::relu_substitute(beta)),
        ActivationKind::Softplus => Ok(model.clone()),
    }
}

/// Mean cross-entropy over the batch.
pub fn loss_nat(model: &Model, batch: &Batch) -> Result<f64> {
    crate::models::cross_entropy(&model.forward(&batch.images)?, &batch.labels)
}

/// Loss value, its parts and optionally its parameter gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub value: f64,
    /// Cross-entropy part (clean, adversarial or mixed per objective).
    pub classification: f64,
    /// Mean dissimilarity before weighting by lambda.
    pub regularizer: f64,
    pub grads: Option<Vec<Tensor>>,
    /// Clean predictions, for accuracy bookkeeping.
    pub predictions: Vec<usize>,
}

fn add_into(acc: &mut [Tensor], g: &[Tensor], w: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += w * y;
        }
    }
}

/// Weighted mean cross-entropy and its parameter gradient.
fn ce_term(model: &Model, images: &Tensor, labels: &[usize], want_grad: bool) -> Result<(f64, Option<Vec<Tensor>>, Tensor)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, want_grad);
    let logits = bound.logits(tape.constant(images.clone()))?;
    let loss = cross_entropy_on(logits, labels)?;
    let grads = if want_grad {
        Some(tape.grad(loss, &bound.params, false)?.into_iter().map(|g| g.value().as_ref().clone()).collect())
    } else {
        None
    };
    Ok((loss.item(), grads, logits.value().as_ref().clone()))
}

/// `d(S(x_adv), S_target(x))` for one sample with live parameters.
fn dissimilarity_term(
    model: &Model,
    x: &Tensor,
    x_adv: &Tensor,
    class: usize,
    attack: &AttackConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, want_grad);
    let s_adv = attack.attribution.on(&bound, tape.constant(x_adv.clone()), x, class)?;
    let target = match attack.target {
        Target::Original => attack.attribution.on(&bound, tape.constant(x.clone()), x, class)?,
        Target::Zero => tape.constant(Tensor::zeros(&s_adv.shape())),
    };
    let d = attack.dissimilarity.eval_on(s_adv, target)?;
    let grads = if want_grad {
        Some(tape.grad(d, &bound.params, false)?.into_iter().map(|g| g.value().as_ref().clone()).collect())
    } else {
        None
    };
    Ok((d.item(), grads))
}

/// Objective value at given adversarial inputs (one per sample; ignored
/// for `Nat`). The adversarial inputs are constants.
pub fn objective_at(model: &Model, batch: &Batch, x_adv: &[Tensor], cfg: &TrainConfig, want_grad: bool) -> Result<LossEval> {
    let n = batch.len();
    if n == 0 {
        return Err(FarError::InvalidArgument("empty batch".into()));
    }
    if cfg.objective != Objective::Nat && x_adv.len() != n {
        return Err(FarError::Shape(format!("{} adversarial inputs for a batch of {n}", x_adv.len())));
    }
    let zero_grads = || model.params().iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
    let mut grads = want_grad.then(zero_grads);
    let adv_images = || -> Result<Tensor> { Tensor::stack(x_adv) };

    // Classification part.
    let (clean_w, adv_w) = match cfg.objective {
        Objective::Nat | Objective::IgNorm | Objective::Align | Objective::Aat => (1.0, 0.0),
        Objective::Adv => (1.0 - cfg.adv_ratio, cfg.adv_ratio),
        Objective::IgSumNorm | Objective::AdvAat => (0.0, 1.0),
    };
    let (clean_ce, clean_g, clean_logits) = ce_term(model, &batch.images, &batch.labels, want_grad && clean_w > 0.0)?;
    let mut classification = 0.0;
    if clean_w > 0.0 {
        classification += clean_w * clean_ce;
        if let (Some(acc), Some(g)) = (grads.as_mut(), clean_g) {
            add_into(acc, &g, clean_w);
        }
    }
    if adv_w > 0.0 {
        let (adv_ce, adv_g, _) = ce_term(model, &adv_images()?, &batch.labels, want_grad)?;
        classification += adv_w * adv_ce;
        if let (Some(acc), Some(g)) = (grads.as_mut(), adv_g) {
            add_into(acc, &g, adv_w);
        }
    }
    let c = model.class_count();
    let predictions: Vec<usize> = clean_logits.data().chunks(c).map(|r| Tensor::from_vec(r.to_vec()).argmax()).collect();

    // Attribution part, one tape per sample, reduced in sample order.
    let mut regularizer = 0.0;
    if cfg.objective.is_attributional() && cfg.lambda > 0.0 {
        let attack = cfg.effective_attack();
        let so = second_order_model(model, cfg.beta)?;
        let terms: Vec<(f64, Option<Vec<Tensor>>)> = (0..n)
            .into_par_iter()
            .map(|i| dissimilarity_term(&so, &batch.sample(i), &x_adv[i], predictions[i], &attack, want_grad))
            .collect::<Result<_>>()?;
        for (d, g) in &terms {
            regularizer += d / n as f64;
            if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
                add_into(acc, g, cfg.lambda / n as f64);
            }
        }
    }
    let value = classification + cfg.lambda * regularizer;
    if !value.is_finite() {
        return Err(FarError::NonFinite("objective value".into()));
    }
    if let Some(g) = &grads {
        for t in g {
            t.ensure_finite("objective gradient")?;
        }
    }
    Ok(LossEval { value, classification, regularizer: if cfg.objective.is_attributional() { regularizer } else { 0.0 }, grads, predictions })
}

/// Runs the objective's inner maximization on every sample of the batch.
/// Sample `i` uses attack seed `derive_seed(seed, i)`.
pub fn inner_maximize(model: &Model, batch: &Batch, cfg: &TrainConfig, seed: u64) -> Result<Vec<AttackResult>> {
    let attack = cfg.effective_attack();
    let so = second_order_model(model, cfg.beta)?;
    (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let x = batch.sample(i);
            let a = AttackConfig { seed: derive_seed(seed, i as u64), ..attack.clone() };
            if cfg.objective.is_robust() {
                adversarial_ifia(&so, &x, batch.labels[i], &a)
            } else {
                ifia(&so, &x, &a)
            }
        })
        .collect()
}

fn objective_full(model: &Model, batch: &Batch, cfg: &TrainConfig, seed: u64, want_grad: bool) -> Result<LossEval> {
    if cfg.objective == Objective::Nat {
        return objective_at(model, batch, &[], cfg, want_grad);
    }
    if !cfg.objective.is_robust() && cfg.lambda == 0.0 {
        let unperturbed: Vec<Tensor> = (0..batch.len()).map(|i| batch.sample(i)).collect();
        return objective_at(model, batch, &unperturbed, cfg, want_grad);
    }
    let adv: Vec<Tensor> = inner_maximize(model, batch, cfg, seed)?.into_iter().map(|r| r.x_adv).collect();
    objective_at(model, batch, &adv, cfg, want_grad)
}

fn check_kind(cfg: &TrainConfig, robust: bool) -> Result<()> {
    if cfg.objective.is_robust() != robust || cfg.objective == Objective::Nat {
        return Err(FarError::InvalidArgument(format!("objective {:?} does not have this form", cfg.objective)));
    }
    Ok(())
}

/// `l(x, y) + lambda * max d(S(x_adv), S_target(x))` with the inner max
/// found by IFIA.
pub fn loss_far_regularized(model: &Model, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
    check_kind(cfg, false)?;
    Ok(objective_full(model, batch, cfg, cfg.seed, false)?.value)
}

/// `max { l(x_adv, y) + lambda * d(S(x_adv), S_target(x)) }` with the
/// inner max found by adversarial IFIA (PGD when `lambda = 0`).
pub fn loss_far_robust(model: &Model, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
    check_kind(cfg, true)?;
    Ok(objective_full(model, batch, cfg, cfg.seed, false)?.value)
}

/// `max ||IG(x_adv; baseline x)||_1` over the attack ball.
pub fn ig_norm_term(model: &Model, x: &Tensor, cfg: &TrainConfig) -> Result<f64> {
    let cfg = TrainConfig { objective: Objective::IgNorm, ..cfg.clone() };
    let attack = AttackConfig { seed: cfg.seed, ..cfg.effective_attack() };
    let r = ifia(&second_order_model(model, cfg.beta)?, x, &attack)?;
    Ok(r.final_dissimilarity.unwrap_or(0.0))
}

/// `max log(1 + exp(sum(cos(g^ybar(x_adv), x) - cos(g^y(x_adv), x))))`.
pub fn align_term(model: &Model, x: &Tensor, cfg: &TrainConfig) -> Result<f64> {
    let cfg = TrainConfig { objective: Objective::Align, ..cfg.clone() };
    let attack = AttackConfig { seed: cfg.seed, ..cfg.effective_attack() };
    let r = ifia(&second_order_model(model, cfg.beta)?, x, &attack)?;
    Ok(r.final_dissimilarity.unwrap_or(0.0))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam { cfg, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &[Tensor], grads: &[Tensor]) -> Vec<Tensor> {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let mut out = Vec::with_capacity(params.len());
        for ((p, g), (m, v)) in params.iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let mut next = p.clone();
            for (((w, &gi), mi), vi) in next.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
            out.push(next);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Sample-weighted mean objective over the epoch.
    pub loss: f64,
    /// Accuracy of clean predictions made during the epoch.
    pub natural_accuracy: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub model: Model,
}

/// Where training writes checkpoints (`epoch_<n>.farm`) and its CSV log.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch}.farm"))
    }
}

pub fn train(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_output(model, data, cfg, None)
}

/// Runs `cfg.epochs` epochs of Adam on the objective, starting from
/// `model`'s parameters. The attack's data bounds are taken from the
/// dataset. Results depend only on the inputs, not on the thread count.
pub fn train_with_output(model: &Model, data: &Dataset, cfg: &TrainConfig, out: Option<&TrainOutput>) -> Result<TrainReport> {
    let cfg = TrainConfig { attack: AttackConfig { data_bounds: data.bounds, ..cfg.attack.clone() }, ..cfg.clone() };
    cfg.validate()?;
    if data.is_empty() {
        return Err(FarError::InvalidArgument("empty training set".into()));
    }
    if data.sample_shape() != model.input_shape() {
        return Err(FarError::Shape(format!("data samples {:?} vs model input {:?}", data.sample_shape(), model.input_shape())));
    }
    let mut log = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(o.log_path())?);
            writeln!(f, "epoch,loss,natural_accuracy")?;
            Some(f)
        }
        None => None,
    };
    let mut model = model.clone();
    let mut adam = Adam::new(cfg.optimizer, model.params());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in data.batches(cfg.batch_size, derive_seed(cfg.seed, epoch as u64))?.enumerate() {
            let seed = derive_seed(cfg.seed ^ 0x5EED_A77A, ((epoch as u64) << 32) | b as u64);
            let eval = objective_full(&model, &batch, &cfg, seed, true).map_err(|e| match e {
                FarError::NonFinite(detail) => FarError::Diverged { epoch, batch: b, detail },
                other => other,
            })?;
            loss_sum += eval.value * batch.len() as f64;
            correct += eval.predictions.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
            let params = adam.step(model.params(), eval.grads.as_ref().expect("gradients requested"));
            model = model.with_params(params)?;
            log::debug!("epoch {epoch} batch {b}: loss {:.6}", eval.value);
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / data.len() as f64,
            natural_accuracy: correct as f64 / data.len() as f64,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {}: loss {:.6}, train accuracy {:.4}, {:.1}s",
            cfg.objective.name(),
            stats.epoch,
            stats.loss,
            stats.natural_accuracy,
            stats.wall_time_s
        );
        if let (Some(o), Some(f)) = (out, log.as_mut()) {
            writeln!(f, "{},{:?},{:?}", stats.epoch, stats.loss, stats.natural_accuracy)?;
            f.flush()?;
            model.save(o.checkpoint_path(stats.epoch))?;
        }
        epochs.push(stats);
    }
    Ok(TrainReport { epochs, model })
}

/// Reads a training log written by [`train_with_output`].
pub fn read_train_log(path: impl AsRef<Path>) -> Result<Vec<(usize, f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let parse = |s: &str| s.parse::<f64>().map_err(|e| FarError::Format(e.to_string()));
            if f.len() != 3 {
                return Err(FarError::Format(format!("bad training log line {l:?}")));
            }
            Ok((f[0].parse().map_err(|_| FarError::Format(format!("bad epoch in {l:?}")))?, parse(f[1])?, parse(f[2])?))
        })
        .collect()
}
