//! Attribution attacks (IFIA, adversarial IFIA) and PGD.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionSpec;
use crate::autodiff::{Tape, Var};
use crate::error::{FarError, Result};
use crate::metrics::Dissimilarity;
use crate::models::{cross_entropy_on, BoundModel, Model};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Inf,
    L2,
}

/// What the attacked map is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// The map of the unperturbed input.
    Original,
    /// An all-zero map.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    /// Absolute step size.
    pub step_size: f64,
    pub iterations: usize,
    /// Replaced by the dataset's bounds in training and evaluation.
    #[serde(default = "default_bounds")]
    pub data_bounds: (f64, f64),
    #[serde(default = "default_dissimilarity")]
    pub dissimilarity: Dissimilarity,
    #[serde(default)]
    pub attribution: AttributionSpec,
    #[serde(default = "default_target")]
    pub target: Target,
    /// Weight of the dissimilarity in adversarial IFIA; unused by IFIA.
    #[serde(default)]
    pub lambda: f64,
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_dissimilarity() -> Dissimilarity {
    Dissimilarity::Pcl
}

fn default_bounds() -> (f64, f64) {
    (0.0, 1.0)
}

fn default_target() -> Target {
    Target::Original
}

impl AttackConfig {
    /// Evaluation-time IFIA: 7 steps of `1.2 / 7 * epsilon`, Sum-Top-K,
    /// IG with 32 steps, 3 restarts.
    pub fn ifia(epsilon: f64, k: usize, data_bounds: (f64, f64)) -> Self {
        AttackConfig {
            norm: Norm::Inf,
            epsilon,
            step_size: 1.2 / 7.0 * epsilon,
            iterations: 7,
            data_bounds,
            dissimilarity: Dissimilarity::SumTopK { k },
            attribution: AttributionSpec::ig(32),
            target: Target::Original,
            lambda: 0.0,
            restarts: 3,
            seed: 0,
        }
    }

    /// PGD: 40 steps of `0.03 * epsilon`, 3 restarts.
    pub fn pgd(epsilon: f64, data_bounds: (f64, f64)) -> Self {
        AttackConfig {
            norm: Norm::Inf,
            epsilon,
            step_size: 0.03 * epsilon,
            iterations: 40,
            data_bounds,
            dissimilarity: Dissimilarity::Pcl,
            attribution: AttributionSpec::ig(32),
            target: Target::Original,
            lambda: 0.0,
            restarts: 3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FarError::InvalidArgument(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size must be >= 0, got {}", self.step_size));
        }
        if self.data_bounds.0.partial_cmp(&self.data_bounds.1) != Some(std::cmp::Ordering::Less) {
            return bad(format!("data bounds {:?} are empty", self.data_bounds));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.restarts == 0 {
            return bad("restarts must be >= 1".into());
        }
        self.attribution.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub x_adv: Tensor,
    /// Accepted steps of the restart that was returned.
    pub iterations_used: usize,
    pub prediction_preserved: bool,
    /// Dissimilarity at `x_adv`; absent when the attack never evaluated it.
    pub final_dissimilarity: Option<f64>,
    /// Value of the ascended objective at `x_adv`.
    pub final_objective: f64,
    pub restart: usize,
    /// Restarts abandoned because of a non-finite gradient.
    pub failed_restarts: usize,
}

/// Elementwise sign for `Inf`, unit 2-norm for `L2`; zero stays zero.
pub fn normalize_p(g: &Tensor, norm: Norm) -> Tensor {
    match norm {
        Norm::Inf => g.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }),
        Norm::L2 => {
            let n = g.norm_l2();
            if n == 0.0 {
                g.map(|_| 0.0)
            } else {
                g.map(|v| v / n)
            }
        }
    }
}

/// Projects onto the `epsilon` ball around `x`, then into the data bounds.
pub fn project_p(x_adv: &Tensor, x: &Tensor, epsilon: f64, bounds: (f64, f64), norm: Norm) -> Result<Tensor> {
    x_adv.check_same_shape(x)?;
    let (lo, hi) = bounds;
    let out = match norm {
        Norm::Inf => x_adv.zip_map(x, |a, o| a.clamp(o - epsilon, o + epsilon).clamp(lo, hi))?,
        Norm::L2 => {
            let delta = x_adv.sub(x)?;
            let n = delta.norm_l2();
            let delta = if n > epsilon { delta.scale(epsilon / n) } else { delta };
            delta.zip_map(x, |d, o| (o + d).clamp(lo, hi))?
        }
    };
    Ok(out)
}

/// Distance of `x_adv` from `x` in the attack norm.
pub fn perturbation_norm(x_adv: &Tensor, x: &Tensor, norm: Norm) -> f64 {
    let d = x_adv.sub(x).expect("same shape");
    match norm {
        Norm::Inf => d.norm_linf(),
        Norm::L2 => d.norm_l2(),
    }
}

/// Independent per-item seed derived from a base seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_start(x: &Tensor, cfg: &AttackConfig, restart: usize) -> Result<Tensor> {
    if restart == 0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart as u64);
    let eps = cfg.epsilon;
    let noise: Vec<f64> = match cfg.norm {
        Norm::Inf => (0..x.len()).map(|_| if eps > 0.0 { rng.random_range(-eps..=eps) } else { 0.0 }).collect(),
        Norm::L2 => {
            let dir: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let r = eps * rng.random_range(0.0f64..=1.0).powf(1.0 / x.len() as f64);
            dir.into_iter().map(|v| v / n * r).collect()
        }
    };
    let start = x.add(&Tensor::from_parts(x.shape().to_vec(), noise))?;
    project_p(&start, x, eps, cfg.data_bounds, cfg.norm)
}

/// One attack problem: the unperturbed input, its class and its map.
struct Problem<'a> {
    model: &'a Model,
    x: &'a Tensor,
    cfg: &'a AttackConfig,
    /// Predicted class at `x`; the class every map is taken for.
    y: usize,
    target: Tensor,
}

struct Probe {
    prediction: usize,
    objective: f64,
    dissimilarity: Option<f64>,
    grad: Option<Tensor>,
}

impl<'a> Problem<'a> {
    fn new(model: &'a Model, x: &'a Tensor, cfg: &'a AttackConfig, need_map: bool) -> Result<Self> {
        cfg.validate()?;
        model.check_input(x)?;
        if x.data().iter().any(|v| !(cfg.data_bounds.0..=cfg.data_bounds.1).contains(v)) {
            return Err(FarError::InvalidArgument("input lies outside the attack data bounds".into()));
        }
        let y = model.predict(x)?;
        let target = if !need_map {
            Tensor::zeros(&[0])
        } else {
            match cfg.target {
                Target::Original => cfg.attribution.compute(model, x, y)?.values,
                Target::Zero => {
                    let shape = cfg.attribution.compute(model, x, y)?.values.shape().to_vec();
                    Tensor::zeros(&shape)
                }
            }
        };
        if need_map {
            cfg.dissimilarity.validate(target.len())?;
        }
        Ok(Problem { model, x, cfg, y, target })
    }

    fn dissimilarity_on<'t>(&self, bound: &BoundModel<'_, 't>, xv: Var<'t>) -> Result<Var<'t>> {
        let map = self.cfg.attribution.on(bound, xv, self.x, self.y)?;
        self.cfg.dissimilarity.eval_on(map, bound.tape().constant(self.target.clone()))
    }

    /// Evaluates `cur` for the attack objective. `label` selects the
    /// adversarial objective `CE(label) + lambda * d`; without it the
    /// objective is `d` alone.
    fn probe(&self, cur: &Tensor, label: Option<usize>, need_grad: bool) -> Result<Probe> {
        let tape = Tape::new();
        let bound = self.model.bind(&tape, false);
        // A var even without `need_grad`: maps are built from input gradients.
        let xv = tape.var(cur.clone());
        let mut batched = vec![1];
        batched.extend_from_slice(cur.shape());
        let logits = bound.logits(xv.reshape(&batched))?;
        let prediction = logits.value().argmax();
        let (objective, dissimilarity) = match label {
            None => {
                let d = self.dissimilarity_on(&bound, xv)?;
                (d, Some(d))
            }
            Some(l) => {
                let ce = cross_entropy_on(logits, &[l])?;
                if self.cfg.lambda > 0.0 {
                    let d = self.dissimilarity_on(&bound, xv)?;
                    (ce + d.scale(self.cfg.lambda), Some(d))
                } else {
                    (ce, None)
                }
            }
        };
        let grad = if need_grad {
            let g = tape.grad(objective, &[xv], false)?[0].value().as_ref().clone();
            g.ensure_finite("attack gradient")?;
            Some(g)
        } else {
            None
        };
        let value = objective.item();
        if !value.is_finite() {
            return Err(FarError::NonFinite("attack objective".into()));
        }
        Ok(Probe { prediction, objective: value, dissimilarity: dissimilarity.map(|d| d.item()), grad })
    }

    fn step(&self, cur: &Tensor, grad: &Tensor) -> Result<Tensor> {
        let moved = cur.add(&normalize_p(grad, self.cfg.norm).scale(self.cfg.step_size))?;
        project_p(&moved, self.x, self.cfg.epsilon, self.cfg.data_bounds, self.cfg.norm)
    }
}

/// Iterative feature-importance attack.
///
/// Each restart ascends the dissimilarity between the map at the iterate
/// and the target map, stopping before the first step that changes the
/// prediction. The best prediction-preserving iterate over all restarts is
/// returned.
pub fn ifia(model: &Model, x: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    let p = Problem::new(model, x, cfg, true)?;
    let base = p.probe(x, None, false)?;
    let mut best = AttackResult {
        x_adv: x.clone(),
        iterations_used: 0,
        prediction_preserved: true,
        final_dissimilarity: base.dissimilarity,
        final_objective: base.objective,
        restart: 0,
        failed_restarts: 0,
    };
    let mut failed = 0;
    for r in 0..cfg.restarts {
        match ifia_restart(&p, r) {
            Ok(Some(res)) if res.final_objective > best.final_objective => best = res,
            Ok(_) => {}
            Err(e) if e.is_numerical() => {
                log::warn!("ifia restart {r} abandoned: {e}");
                failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    best.failed_restarts = failed;
    Ok(best)
}

fn ifia_restart(p: &Problem<'_>, restart: usize) -> Result<Option<AttackResult>> {
    let n = p.cfg.iterations;
    let mut cur = random_start(p.x, p.cfg, restart)?;
    let mut probe = p.probe(&cur, None, n > 0)?;
    if probe.prediction != p.y {
        return Ok(None);
    }
    let mut best = (cur.clone(), probe.objective, 0);
    for i in 0..n {
        let next = p.step(&cur, probe.grad.as_ref().expect("gradient requested"))?;
        let next_probe = p.probe(&next, None, i + 1 < n)?;
        if next_probe.prediction != p.y {
            break;
        }
        cur = next;
        probe = next_probe;
        if probe.objective > best.1 {
            best = (cur.clone(), probe.objective, i + 1);
        }
    }
    Ok(Some(AttackResult {
        x_adv: best.0,
        iterations_used: best.2,
        prediction_preserved: true,
        final_dissimilarity: Some(best.1),
        final_objective: best.1,
        restart,
        failed_restarts: 0,
    }))
}

/// Ascent on `CE(x_adv, label) + lambda * d(S(x_adv), target)` for exactly
/// `iterations` steps per restart. The first restart whose final iterate is
/// misclassified wins; otherwise the one with the largest objective.
pub fn adversarial_ifia(model: &Model, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    if label >= model.class_count() {
        return Err(FarError::InvalidClass { index: label, classes: model.class_count() });
    }
    let p = Problem::new(model, x, cfg, cfg.lambda > 0.0)?;
    let mut chosen: Option<AttackResult> = None;
    let mut failed = 0;
    for r in 0..cfg.restarts {
        let res = match adversarial_restart(&p, label, r) {
            Ok(res) => res,
            Err(e) if e.is_numerical() => {
                log::warn!("adversarial restart {r} abandoned: {e}");
                failed += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let fooled = model.predict(&res.x_adv)? != label;
        if fooled {
            chosen = Some(res);
            break;
        }
        if chosen.as_ref().is_none_or(|c| res.final_objective > c.final_objective) {
            chosen = Some(res);
        }
    }
    let mut res = match chosen {
        Some(res) => res,
        None => {
            let probe = p.probe(x, Some(label), false)?;
            AttackResult {
                x_adv: x.clone(),
                iterations_used: 0,
                prediction_preserved: true,
                final_dissimilarity: probe.dissimilarity,
                final_objective: probe.objective,
                restart: 0,
                failed_restarts: 0,
            }
        }
    };
    res.failed_restarts = failed;
    Ok(res)
}

fn adversarial_restart(p: &Problem<'_>, label: usize, restart: usize) -> Result<AttackResult> {
    let mut cur = random_start(p.x, p.cfg, restart)?;
    for _ in 0..p.cfg.iterations {
        let probe = p.probe(&cur, Some(label), true)?;
        cur = p.step(&cur, probe.grad.as_ref().expect("gradient requested"))?;
    }
    let last = p.probe(&cur, Some(label), false)?;
    Ok(AttackResult {
        x_adv: cur,
        iterations_used: p.cfg.iterations,
        prediction_preserved: last.prediction == p.y,
        final_dissimilarity: last.dissimilarity,
        final_objective: last.objective,
        restart,
        failed_restarts: 0,
    })
}

/// Projected sign-gradient ascent on cross-entropy: adversarial IFIA with
/// `lambda = 0`.
pub fn pgd(model: &Model, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    let cfg = AttackConfig { lambda: 0.0, ..cfg.clone() };
    adversarial_ifia(model, x, label, &cfg)
}
