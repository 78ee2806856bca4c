//! Acceptance criteria 1 to 10, one status line each on stderr.
//!
//! Criteria 6 to 8 train small CNNs on MNIST and Fashion-MNIST and only run
//! when `FAR_ACCEPTANCE` is `full` (the stated scale) or `reduced` (a short
//! run whose numbers are evidence, not a verdict). IDX files are read from
//! `FAR_DATA_DIR/{mnist,fashion}`, by default `data/` at the workspace root.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use far::attacks::{adversarial_ifia, ifia, pgd, AttackConfig, Norm, Target};
use far::attribution::{integrated_gradients, AttributionSpec};
use far::data::{load_idx, Batch, Dataset};
use far::harness::{evaluate, run_experiment, run_sweep, train_experiment, EvalConfig, ExperimentConfig, ModelSpec, SweepSpec, SweepValues};
use far::metrics::{kendall_tau, pearson_loss, pearson_loss_on, top_k_indices, top_k_intersection, Dissimilarity};
use far::models::{cross_entropy, initialize, CnnConfig, InitKind, InitScheme, Model};
use far::objectives::{objective_at, second_order_model, Objective, TrainConfig};
use far::{ActivationSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{run_ok, write_config, SYNTHETIC};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Outcome {
        Outcome { status: if ok { Status::Pass } else { Status::Fail }, detail }
    }

    fn skip(detail: impl Into<String>) -> Outcome {
        Outcome { status: Status::Skip, detail: detail.into() }
    }
}

/// Writes past the test harness's output capture.
fn note(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = err.write_all(line.as_bytes());
    let _ = err.write_all(b"\n");
}

fn run_criterion(n: usize, title: &str, label: &str, f: impl FnOnce() -> Outcome) -> Status {
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Outcome { status: Status::Fail, detail: format!("panicked: {}", msg.unwrap_or_default()) }
    });
    let word = match out.status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Skip => "SKIP",
    };
    note(&format!("acceptance {n:>2} {word}{label} {title}: {} [{:.1}s]", out.detail, start.elapsed().as_secs_f64()));
    out.status
}

// Random models and inputs.

/// An MLP, or with probability `conv` a small CNN (whose max pooling is
/// only piecewise smooth).
fn random_model(rng: &mut ChaCha8Rng, act: ActivationSpec, conv: f64) -> Model {
    let model = if !rng.random_bool(conv) {
        let d = rng.random_range(2..=8);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=8)).collect();
        Model::mlp(d, &hidden, rng.random_range(2..=4), act).unwrap()
    } else {
        let cnn = CnnConfig { conv1_filters: 2, conv2_filters: 3, kernel: 5, pool: 2, hidden: 6, padding: 2 };
        Model::small_cnn(&[8, 8, rng.random_range(1..=2)], 3, &cnn).unwrap().with_activation(act).unwrap()
    };
    let kind = InitKind::ALL[rng.random_range(0..InitKind::ALL.len())];
    initialize(&model, InitScheme { kind, seed: rng.random() })
}

fn random_input(rng: &mut ChaCha8Rng, model: &Model, lo: f64, hi: f64) -> Tensor {
    Tensor::new(model.input_shape().to_vec(), (0..model.input_len()).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn central_difference(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Componentwise relative error, with magnitudes below 1e-3 treated as 1e-3.
fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    got.iter().zip(want).map(|(g, w)| (g - w).abs() / w.abs().max(1e-3)).fold(0.0, f64::max)
}

// 1. Differentiation.

fn differentiation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut first, mut second) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let act = ActivationSpec::softplus(rng.random_range(0.5..4.0));
        let m = random_model(&mut rng, act, 0.25);
        let x = random_input(&mut rng, &m, -1.0, 1.0);
        let class = rng.random_range(0..m.class_count());
        let g = m.input_gradient(&x, class).unwrap();
        let fd = central_difference(&x, 1e-5, |z| m.forward(z).unwrap().data()[class]);
        first = first.max(max_rel_err(g.data(), &fd));

        let target = random_input(&mut rng, &m, -1.0, 1.0);
        let got = m
            .grad_of_scalar_of_gradient(&x, class, |_, g| {
                let t = g.tape().constant(target.reshape(&g.shape())?);
                Ok(pearson_loss_on(g, t))
            })
            .unwrap();
        let fd = central_difference(&x, 1e-5, |z| pearson_loss(&m.input_gradient(z, class).unwrap(), &target).unwrap());
        second = second.max(max_rel_err(got.data(), &fd));
    }
    Outcome::check(
        first <= 1e-4 && second <= 1e-3,
        format!("100 smooth models, max relative error {first:.2e} first order (<= 1e-4), {second:.2e} second order (<= 1e-3)"),
    )
}

// 2. Integrated Gradients axioms.

fn ig_axioms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for _ in 0..50 {
        let act = ActivationSpec::softplus(rng.random_range(0.5..4.0));
        let m = random_model(&mut rng, act, 0.0);
        let x = random_input(&mut rng, &m, -1.0, 1.0);
        let b = if rng.random_bool(0.5) { Tensor::zeros(x.shape()) } else { random_input(&mut rng, &m, -1.0, 1.0) };
        let class = rng.random_range(0..m.class_count());
        let ig = integrated_gradients(&m, &x, &b, class, 256).unwrap().values;
        let delta = m.forward(&x).unwrap().data()[class] - m.forward(&b).unwrap().data()[class];
        worst = worst.max((ig.sum() - delta).abs() / delta.abs().max(1e-2));
        let same = integrated_gradients(&m, &x, &x, class, 256).unwrap().values;
        if same.data().iter().any(|v| *v != 0.0) {
            nonzero += 1;
        }
    }
    Outcome::check(
        worst <= 1e-3 && nonzero == 0,
        format!("50 softplus MLPs at 256 steps, completeness residual {worst:.2e} (<= 1e-3), {nonzero} nonzero IG(x, x)"),
    )
}

// 3. Objective equivalences.

fn channels(shape: &[usize]) -> usize {
    if shape.len() == 3 {
        shape[2]
    } else {
        1
    }
}

fn cosines(g: &Tensor, x: &Tensor, c: usize) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|u| u * u).sum::<f64>().sqrt();
    g.data()
        .chunks(c)
        .zip(x.data().chunks(c))
        .map(|(g, x)| {
            let (gn, xn) = (norm(g), norm(x));
            if gn < 1e-12 || xn < 1e-12 {
                0.0
            } else {
                g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / (gn * xn)
            }
        })
        .collect()
}

fn argmax_except(v: &[f64], skip: usize) -> usize {
    (0..v.len()).filter(|&i| i != skip).fold(usize::MAX, |best, i| if best == usize::MAX || v[i] > v[best] { i } else { best })
}

fn equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = [0.0f64; 3];
    for _ in 0..20 {
        let act = if rng.random_bool(0.5) { ActivationSpec::relu() } else { ActivationSpec::softplus(rng.random_range(0.5..4.0)) };
        let m = random_model(&mut rng, act, 0.5);
        let n = 4;
        let xs: Vec<Tensor> = (0..n).map(|_| random_input(&mut rng, &m, 0.0, 1.0)).collect();
        let batch = Batch { images: Tensor::stack(&xs).unwrap(), labels: (0..n).map(|_| rng.random_range(0..m.class_count())).collect() };
        let x_adv: Vec<Tensor> = xs
            .iter()
            .map(|x| {
                let v = x.data().iter().map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)).collect();
                Tensor::new(x.shape().to_vec(), v).unwrap()
            })
            .collect();
        let lambda = rng.random_range(0.1..2.0);
        let beta = rng.random_range(0.5..5.0);
        let cfg = |objective, lambda: f64, adv_ratio: f64| {
            let attack = AttackConfig { attribution: AttributionSpec::ig(16), ..AttackConfig::ifia(0.2, 2, (0.0, 1.0)) };
            TrainConfig { lambda, beta, adv_ratio, ..TrainConfig::new(objective, attack) }
        };
        let value = |c: &TrainConfig| objective_at(&m, &batch, &x_adv, c, false).unwrap().value;
        let close = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);

        let so = second_order_model(&m, beta).unwrap();
        let clean = m.forward(&batch.images).unwrap();
        let c = m.class_count();
        let preds: Vec<usize> = clean.data().chunks(c).map(|r| Tensor::from_vec(r.to_vec()).argmax()).collect();
        let ce_clean = cross_entropy(&clean, &batch.labels).unwrap();
        let ce_adv = cross_entropy(&m.forward(&Tensor::stack(&x_adv).unwrap()).unwrap(), &batch.labels).unwrap();

        // Robust loss without the attribution term is Madry's loss.
        for c in [cfg(Objective::AdvAat, 0.0, 0.7), cfg(Objective::IgSumNorm, 0.0, 0.7), cfg(Objective::Adv, 0.0, 1.0)] {
            worst[0] = worst[0].max(close(value(&c), ce_adv));
        }

        // L1 distance of IG maps to zero, IG taken from the clean input.
        let ig_norm = (0..n)
            .map(|i| integrated_gradients(&so, &x_adv[i], &xs[i], preds[i], 16).unwrap().values.norm_l1())
            .sum::<f64>()
            / n as f64;
        worst[1] = worst[1].max(close(value(&cfg(Objective::IgNorm, lambda, 0.7)), ce_clean + lambda * ig_norm));
        worst[1] = worst[1].max(close(value(&cfg(Objective::IgSumNorm, lambda, 0.7)), ce_adv + lambda * ig_norm));

        // Log-exp dissimilarity of the alignment map to zero.
        let ch = channels(m.input_shape());
        let align = (0..n)
            .map(|i| {
                let y = preds[i];
                let ybar = argmax_except(so.forward(&x_adv[i]).unwrap().data(), y);
                let cy = cosines(&so.input_gradient(&x_adv[i], y).unwrap(), &xs[i], ch);
                let cbar = cosines(&so.input_gradient(&x_adv[i], ybar).unwrap(), &xs[i], ch);
                let s: f64 = cbar.iter().zip(&cy).map(|(a, b)| a - b).sum();
                s.exp().ln_1p()
            })
            .sum::<f64>()
            / n as f64;
        worst[2] = worst[2].max(close(value(&cfg(Objective::Align, lambda, 0.7)), ce_clean + lambda * align));
    }
    Outcome::check(
        worst.iter().all(|w| *w <= 1e-9),
        format!(
            "20 (model, batch, perturbation) triples, relative gaps {:.1e} Madry, {:.1e} IG-NORM, {:.1e} Align (<= 1e-9)",
            worst[0], worst[1], worst[2]
        ),
    )
}

// 4. Attack feasibility.

fn attack_feasibility() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut violations = Vec::new();
    let mut max_excess = f64::NEG_INFINITY;
    for trial in 0..1000 {
        let act = if rng.random_bool(0.5) { ActivationSpec::relu() } else { ActivationSpec::softplus(rng.random_range(0.5..4.0)) };
        let d = rng.random_range(2..=6);
        let m = Model::mlp(d, &[rng.random_range(2..=6)], rng.random_range(2..=4), act).unwrap();
        let m = initialize(&m, InitScheme { kind: InitKind::ALL[rng.random_range(0..InitKind::ALL.len())], seed: rng.random() });
        let bounds = if rng.random_bool(0.5) { (0.0, 1.0) } else { (-1.0, 1.0) };
        let x = random_input(&mut rng, &m, bounds.0, bounds.1);
        let norm = if rng.random_bool(0.8) { Norm::Inf } else { Norm::L2 };
        let eps = rng.random_range(0.0..0.5);
        let cfg = AttackConfig {
            norm,
            epsilon: eps,
            step_size: rng.random_range(0.01..0.3),
            iterations: rng.random_range(1..=6),
            data_bounds: bounds,
            dissimilarity: match rng.random_range(0..3) {
                0 => Dissimilarity::Pcl,
                1 => Dissimilarity::L1,
                _ => Dissimilarity::SumTopK { k: rng.random_range(1..=d) },
            },
            attribution: if rng.random_bool(0.5) { AttributionSpec::saliency() } else { AttributionSpec::ig(4) },
            target: Target::Original,
            lambda: rng.random_range(0.0..2.0),
            restarts: rng.random_range(1..=3),
            seed: rng.random(),
        };
        let so = second_order_model(&m, rng.random_range(0.5..4.0)).unwrap();
        let label = rng.random_range(0..m.class_count());
        let (name, result) = match trial % 3 {
            0 => ("IFIA", ifia(&so, &x, &cfg)),
            1 => ("AdvIFIA", adversarial_ifia(&so, &x, label, &cfg)),
            _ => ("PGD", pgd(&m, &x, label, &cfg)),
        };
        let r = match result {
            Ok(r) => r,
            Err(e) => {
                violations.push(format!("{name} run {trial} errored: {e}"));
                continue;
            }
        };
        let dev = r.x_adv.sub(&x).unwrap();
        let size = if norm == Norm::L2 { dev.norm_l2().max(dev.norm_linf()) } else { dev.norm_linf() };
        max_excess = max_excess.max(size - eps);
        if size > eps + 1e-9 {
            violations.push(format!("{name} run {trial} left the ball by {:.3e}", size - eps));
        }
        if r.x_adv.data().iter().any(|v| *v < bounds.0 || *v > bounds.1) {
            violations.push(format!("{name} run {trial} left the data bounds"));
        }
        if name == "IFIA" && (!r.prediction_preserved || m.predict(&r.x_adv).unwrap() != m.predict(&x).unwrap()) {
            violations.push(format!("IFIA run {trial} changed the prediction"));
        }
    }
    Outcome::check(
        violations.is_empty(),
        match violations.first() {
            None => format!("1000 IFIA/AdvIFIA/PGD runs, largest norm minus budget {max_excess:.2e}, no bound or prediction violations"),
            Some(v) => format!("{} violations, first: {v}", violations.len()),
        },
    )
}

// 5. Oracle dominance.

/// A 2-input one-hidden-layer softplus network evaluated without the tape.
struct Toy {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    beta: f64,
}

impl Toy {
    fn from_model(m: &Model, beta: f64) -> Toy {
        let p = m.params();
        Toy { w1: p[0].data().to_vec(), b1: p[1].data().to_vec(), w2: p[2].data().to_vec(), b2: p[3].data().to_vec(), beta }
    }

    fn pre(&self, x: [f64; 2]) -> Vec<f64> {
        let h = self.b1.len();
        (0..h).map(|j| x[0] * self.w1[j] + x[1] * self.w1[h + j] + self.b1[j]).collect()
    }

    fn logits(&self, x: [f64; 2]) -> Vec<f64> {
        let c = self.b2.len();
        let b = self.beta;
        let act: Vec<f64> = self.pre(x).iter().map(|z| ((b * z).exp().ln_1p()) / b).collect();
        (0..c).map(|k| self.b2[k] + act.iter().enumerate().map(|(j, a)| a * self.w2[j * c + k]).sum::<f64>()).collect()
    }

    fn predict(&self, x: [f64; 2]) -> usize {
        let l = self.logits(x);
        (0..l.len()).fold(0, |best, k| if l[k] > l[best] { k } else { best })
    }

    fn gradient(&self, x: [f64; 2], class: usize) -> [f64; 2] {
        let (h, c) = (self.b1.len(), self.b2.len());
        let mut g = [0.0; 2];
        for (j, z) in self.pre(x).iter().enumerate() {
            let s = 1.0 / (1.0 + (-self.beta * z).exp()) * self.w2[j * c + class];
            g[0] += self.w1[j] * s;
            g[1] += self.w1[h + j] * s;
        }
        g
    }

    /// Midpoint-rule IG from the zero baseline.
    fn ig(&self, x: [f64; 2], class: usize, steps: usize) -> [f64; 2] {
        let mut avg = [0.0; 2];
        for k in 0..steps {
            let a = (k as f64 + 0.5) / steps as f64;
            let g = self.gradient([a * x[0], a * x[1]], class);
            avg[0] += g[0] / steps as f64;
            avg[1] += g[1] / steps as f64;
        }
        [avg[0] * x[0], avg[1] * x[1]]
    }
}

fn oracle_dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let eps = 0.3;
    let mut wins = 0;
    let mut ratios = Vec::new();
    for _ in 0..100 {
        let beta = rng.random_range(1.0..4.0);
        let m = Model::mlp(2, &[rng.random_range(4..=10)], 3, ActivationSpec::softplus(beta)).unwrap();
        let kind = [InitKind::HeNormal, InitKind::GlorotNormal, InitKind::HeUniform, InitKind::GlorotUniform][rng.random_range(0..4)];
        let m = initialize(&m, InitScheme { kind, seed: rng.random() });
        let toy = Toy::from_model(&m, beta);
        let x = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let y = toy.predict(x);
        let top = top_k_indices(&toy.ig(x, y, 32), 1)[0];
        let d = |z: [f64; 2]| -toy.ig(z, y, 32)[top];

        let cfg = AttackConfig { seed: rng.random(), ..AttackConfig::ifia(eps, 1, (0.0, 1.0)) };
        let r = ifia(&m, &Tensor::from_vec(x.to_vec()), &cfg).unwrap();
        let found = [r.x_adv.data()[0], r.x_adv.data()[1]];
        let gain = if toy.predict(found) == y { d(found) - d(x) } else { f64::NEG_INFINITY };

        let mut best = d(x);
        for a in 0..=60 {
            for b in 0..=60 {
                let z = [(x[0] - eps + 0.01 * a as f64).clamp(0.0, 1.0), (x[1] - eps + 0.01 * b as f64).clamp(0.0, 1.0)];
                if toy.predict(z) == y {
                    best = best.max(d(z));
                }
            }
        }
        let optimum = best - d(x);
        if gain >= 0.9 * optimum - 1e-12 {
            wins += 1;
        }
        if optimum > 1e-12 {
            ratios.push(gain / optimum);
        }
    }
    ratios.sort_by(f64::total_cmp);
    let median = ratios.get(ratios.len() / 2).copied().unwrap_or(f64::NAN);
    Outcome::check(
        wins >= 80,
        format!("IFIA gain within 90% of the grid optimum in {wins}/100 trials (>= 80), median gain ratio {median:.3}"),
    )
}

// 9. Metric properties.

fn brute_tau_b(a: &[f64], b: &[f64]) -> f64 {
    let (mut conc, mut disc, mut ta, mut tb) = (0.0f64, 0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let (da, db) = (a[i] - a[j], b[i] - b[j]);
            if da == 0.0 && db == 0.0 {
            } else if da == 0.0 {
                ta += 1.0;
            } else if db == 0.0 {
                tb += 1.0;
            } else if da * db > 0.0 {
                conc += 1.0;
            } else {
                disc += 1.0;
            }
        }
    }
    (conc - disc) / ((conc + disc + ta) * (conc + disc + tb)).sqrt()
}

fn sort_top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = v.iter().copied().zip(0..).collect();
    pairs.sort_by(|p, q| q.0.partial_cmp(&p.0).unwrap().then(p.1.cmp(&q.1)));
    pairs[..k].iter().map(|p| p.1).collect()
}

fn metric_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut failures: Vec<String> = Vec::new();
    let t = |v: &[f64]| Tensor::from_vec(v.to_vec());
    for trial in 0..1000 {
        let n = rng.random_range(2..=50);
        let tied = trial % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| if tied { rng.random_range(-4i32..4) as f64 * 0.5 } else { rng.random_range(-5.0..5.0) }).collect()
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));

        let slow = brute_tau_b(&a, &b);
        match kendall_tau(&t(&a), &t(&b)) {
            Ok(v) if (v - slow).abs() <= 1e-12 => {}
            Err(_) if !slow.is_finite() => {}
            other => failures.push(format!("kendall {other:?} vs brute force {slow} on {a:?} / {b:?}")),
        }

        let k = rng.random_range(1..=n);
        let (ta, tb) = (sort_top_k(&a, k), sort_top_k(&b, k));
        if top_k_indices(&a, k) != ta {
            failures.push(format!("top-{k} of {a:?}"));
        }
        let shared = tb.iter().filter(|i| ta.contains(i)).count() as f64 / k as f64;
        if top_k_intersection(&t(&a), &t(&b), k).unwrap() != shared {
            failures.push(format!("top-{k} intersection of {a:?} / {b:?}"));
        }

        let l = pearson_loss(&t(&a), &t(&b)).unwrap();
        let (scale, shift) = (rng.random_range(0.01..100.0), rng.random_range(-10.0..10.0));
        let moved: Vec<f64> = a.iter().map(|v| scale * v + shift).collect();
        if !(0.0..=1.0).contains(&l) || (pearson_loss(&t(&moved), &t(&b)).unwrap() - l).abs() > 1e-9 {
            failures.push(format!("PCL {l} not bounded or not affine invariant on {a:?} / {b:?}"));
        }

        let fa: Vec<f64> = a.iter().map(|v| (0.7 * v).exp() + 3.0).collect();
        if top_k_intersection(&t(&fa), &t(&b), k).unwrap() != shared {
            failures.push(format!("top-{k} intersection changed under a monotone map of {a:?}"));
        }
        match (kendall_tau(&t(&a), &t(&b)), kendall_tau(&t(&fa), &t(&b))) {
            (Ok(u), Ok(v)) if (u - v).abs() <= 1e-12 => {}
            (Err(_), Err(_)) => {}
            (u, v) => failures.push(format!("kendall {u:?} vs {v:?} under a monotone map of {a:?}")),
        }
    }
    Outcome::check(
        failures.is_empty(),
        match failures.first() {
            None => "1000 random vector pairs of length <= 50: Kendall tau-b and top-k match their oracles, PCL bounded and affine invariant, rank metrics monotone invariant".into(),
            Some(f) => format!("{} failures, first: {f}", failures.len()),
        },
    )
}

// 10. CLI determinism.

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTHETIC);
    let commands: [(&str, &[&str]); 5] =
        [("train", &[]), ("evaluate", &[]), ("attack", &["--index", "3"]), ("explain", &["--index", "5"]), ("sweep", &[])];
    let mut differing = Vec::new();
    let mut files = 0;
    for (cmd, extra) in commands {
        let args = [extra, &["--workers", "2"][..]].concat();
        let a = run_ok(cmd, &cfg, &dir.path().join(format!("{cmd}_a")), &args);
        let b = run_ok(cmd, &cfg, &dir.path().join(format!("{cmd}_b")), &args);
        files += a.len();
        if a != b {
            differing.push(cmd);
        }
    }
    Outcome::check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("train, evaluate, attack, explain and sweep each run twice: all {files} output files byte-identical")
        } else {
            format!("outputs differ for {differing:?}")
        },
    )
}

// 6 to 8. Desk-scale experiments.

#[derive(Clone, Copy)]
struct Scale {
    train_samples: usize,
    nat_epochs: usize,
    finetune_epochs: usize,
    eval_samples: usize,
    seeds: &'static [u64],
}

const FULL: Scale = Scale { train_samples: 10_000, nat_epochs: 5, finetune_epochs: 5, eval_samples: 1000, seeds: &[0, 1, 2] };
const REDUCED: Scale = Scale { train_samples: 1000, nat_epochs: 5, finetune_epochs: 1, eval_samples: 50, seeds: &[0] };

fn data_root() -> PathBuf {
    std::env::var_os("FAR_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn load(name: &str) -> Option<(Dataset, Dataset)> {
    let dir = data_root().join(name);
    let f = |s: &str| dir.join(s);
    if !f("train-images-idx3-ubyte").exists() {
        return None;
    }
    let train = load_idx(f("train-images-idx3-ubyte"), f("train-labels-idx1-ubyte")).unwrap();
    let test = load_idx(f("t10k-images-idx3-ubyte"), f("t10k-labels-idx1-ubyte")).unwrap();
    Some((train, test))
}

struct Preset {
    model: ModelSpec,
    stage: TrainConfig,
    eval: EvalConfig,
}

fn preset(name: &str) -> Preset {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(format!("{name}.toml"));
    let v: toml::Table = toml::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    Preset {
        model: v["model"].clone().try_into().unwrap(),
        stage: v["train"].as_array().unwrap()[0].clone().try_into().unwrap(),
        eval: v["eval"].clone().try_into().unwrap(),
    }
}

/// Natural pretraining followed by fine-tuning with the `finetune` preset.
fn experiment(dataset: &str, finetune: &str, scale: Scale) -> ExperimentConfig {
    let nat = preset(&format!("{dataset}_nat"));
    let ft = preset(&format!("{dataset}_{finetune}"));
    ExperimentConfig {
        model: nat.model,
        stages: vec![
            TrainConfig { epochs: scale.nat_epochs, ..nat.stage },
            TrainConfig { epochs: scale.finetune_epochs, ..ft.stage },
        ],
        eval: EvalConfig { samples: Some(scale.eval_samples), ..nat.eval },
        train_samples: Some(scale.train_samples),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn missing(name: &str) -> Outcome {
    Outcome::skip(format!("{name} IDX files not found under {}", data_root().join(name).display()))
}

fn table_ordering(scale: Scale) -> Outcome {
    let Some((train, test)) = load("mnist") else { return missing("mnist") };
    let mut summary = Vec::new();
    for name in ["nat", "aat", "adv"] {
        let cfg = experiment("mnist", name, scale);
        let reports: Vec<_> = scale
            .seeds
            .iter()
            .map(|&s| {
                note(&format!("  criterion 6: {name} seed {s}"));
                run_experiment(&cfg, &train, &test, s).unwrap().1
            })
            .collect();
        let na = mean(reports.iter().map(|r| r.natural_accuracy));
        let aa = mean(reports.iter().map(|r| r.adversarial_accuracy));
        let inter = mean(reports.iter().map(|r| r.top_k_intersection.unwrap_or(f64::NAN)));
        let co = mean(reports.iter().map(|r| r.kendall_tau.unwrap_or(f64::NAN)));
        note(&format!("  criterion 6: {name} NA {na:.4} AA {aa:.4} IN {inter:.4} CO {co:.4}"));
        summary.push((na, aa, inter, co));
    }
    let [(na_n, aa_n, in_n, co_n), (na_a, _, in_a, co_a), (_, aa_m, _, _)] = summary[..] else { unreachable!() };
    let ok = in_a - in_n >= 0.15 && co_a - co_n >= 0.15 && na_n >= 0.95 && na_a >= 0.93 && aa_m - aa_n >= 0.5;
    Outcome::check(
        ok,
        format!(
            "IN gain {:.3} (>= 0.15), CO gain {:.3} (>= 0.15), NA nat {na_n:.3} (>= 0.95), NA aat {na_a:.3} (>= 0.93), AA gain of adv {:.3} (>= 0.5)",
            in_a - in_n,
            co_a - co_n,
            aa_m - aa_n
        ),
    )
}

fn lambda_direction(scale: Scale) -> Outcome {
    let Some((train, test)) = load("fashion") else { return missing("fashion") };
    let mut at = Vec::new();
    for (finetune, robust) in [("aat", false), ("adv_aat", true)] {
        let spec = SweepSpec { sweep: SweepValues::Lambda(vec![0.0, 1.0]), base: experiment("fashion", finetune, scale), seeds: scale.seeds.to_vec() };
        note(&format!("  criterion 7: {finetune} lambda sweep"));
        let rows = run_sweep(&spec, &train, &test).unwrap();
        let per_value: Vec<f64> = rows
            .chunks(scale.seeds.len())
            .map(|chunk| {
                mean(chunk.iter().map(|r| {
                    let rep = r.outcome.as_ref().unwrap();
                    if robust {
                        rep.adversarial_accuracy
                    } else {
                        rep.top_k_intersection.unwrap_or(f64::NAN)
                    }
                }))
            })
            .collect();
        at.push(per_value);
    }
    let (in0, in1, aa0, aa1) = (at[0][0], at[0][1], at[1][0], at[1][1]);
    Outcome::check(
        in1 - in0 >= 0.1 && aa1 <= aa0,
        format!("AAT IN {in0:.3} -> {in1:.3} from lambda 0 to 1 (gain >= 0.1), AdvAAT AA {aa0:.3} -> {aa1:.3} (must not rise)"),
    )
}

fn beta_sensitivity(scale: Scale) -> Outcome {
    let Some((train, test)) = load("mnist") else { return missing("mnist") };
    let cfg = experiment("mnist", "nat", scale);
    let models: Vec<Model> = scale.seeds.iter().map(|&s| train_experiment(&cfg, &train, s).unwrap()).collect();
    let betas = [0.1, 1.0, 10.0, 100.0];
    let ins: Vec<f64> = betas
        .iter()
        .map(|&beta| {
            let v = mean(scale.seeds.iter().zip(&models).map(|(&s, m)| {
                let eval = EvalConfig { beta, ..cfg.seeded(s).eval };
                evaluate(m, &test, &eval).unwrap().top_k_intersection.unwrap_or(f64::NAN)
            }));
            note(&format!("  criterion 8: beta {beta} IN {v:.4}"));
            v
        })
        .collect();
    let spread = ins.iter().copied().fold(f64::NEG_INFINITY, f64::max) - ins.iter().copied().fold(f64::INFINITY, f64::min);
    Outcome::check(
        spread >= 0.05 && ins[3] >= ins[1],
        format!("IN over beta 0.1/1/10/100 = {:.3}/{:.3}/{:.3}/{:.3}, spread {spread:.3} (>= 0.05), IN(100) >= IN(1)", ins[0], ins[1], ins[2], ins[3]),
    )
}

#[test]
fn acceptance_criteria() {
    let mode = std::env::var("FAR_ACCEPTANCE").unwrap_or_default();
    let scale = match mode.as_str() {
        "full" => Some((FULL, "")),
        "reduced" => Some((REDUCED, " (reduced scale)")),
        _ => None,
    };
    let gated = |f: fn(Scale) -> Outcome| -> Box<dyn FnOnce() -> Outcome> {
        match scale {
            Some((s, _)) => Box::new(move || f(s)),
            None => Box::new(|| Outcome::skip("set FAR_ACCEPTANCE=full to run at the stated scale, or reduced for a short run")),
        }
    };
    let desk_label = scale.map(|s| s.1).unwrap_or("");

    let mut results = vec![
        (1, "", run_criterion(1, "differentiation", "", differentiation)),
        (2, "", run_criterion(2, "IG axioms", "", ig_axioms)),
        (3, "", run_criterion(3, "objective equivalences", "", equivalences)),
        (4, "", run_criterion(4, "attack feasibility", "", attack_feasibility)),
        (5, "", run_criterion(5, "oracle dominance", "", oracle_dominance)),
    ];
    results.push((6, desk_label, run_criterion(6, "desk-scale MNIST ordering", desk_label, gated(table_ordering))));
    results.push((7, desk_label, run_criterion(7, "lambda sweep direction", desk_label, gated(lambda_direction))));
    results.push((8, desk_label, run_criterion(8, "beta sensitivity", desk_label, gated(beta_sensitivity))));
    results.push((9, "", run_criterion(9, "metric properties", "", metric_properties)));
    results.push((10, "", run_criterion(10, "CLI determinism", "", cli_determinism)));

    // Reduced-scale runs are reported but do not decide the test.
    let failed: Vec<usize> = results.iter().filter(|(_, label, s)| *s == Status::Fail && label.is_empty()).map(|(n, _, _)| *n).collect();
    assert!(failed.is_empty(), "acceptance criteria {failed:?} failed");
}
