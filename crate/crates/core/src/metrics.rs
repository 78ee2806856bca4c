//! Dissimilarities between attribution maps and rank-based robustness scores.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{FarError, Result};
use crate::models::{input_gradient_on, BoundModel, Model};
use crate::tensor::Tensor;

/// Variance below which a map is treated as constant by [`pearson_loss`].
pub const PCC_VARIANCE_FLOOR: f64 = 1e-12;
/// Norm below which a cosine is defined as zero in [`alignment_map`].
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dissimilarity {
    /// Pearson correlation loss `1 - (PCC + 1) / 2`.
    Pcl,
    L1,
    /// `-sum_{i in TopK(target)} map_i`.
    SumTopK { k: usize },
    /// `log(1 + exp(-sum(map - target)))`.
    LogExpAlign,
}

impl Dissimilarity {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if let Dissimilarity::SumTopK { k } = *self {
            check_k(k, dim)?;
        }
        Ok(())
    }

    pub fn eval(&self, map: &Tensor, target: &Tensor) -> Result<f64> {
        match *self {
            Dissimilarity::Pcl => pearson_loss(map, target),
            Dissimilarity::L1 => l1_distance(map, target),
            Dissimilarity::SumTopK { k } => sum_top_k(map, target, k),
            Dissimilarity::LogExpAlign => {
                map.check_same_shape(target)?;
                Ok(logexp_align(&map.sub(target)?))
            }
        }
    }

    /// Taped version; differentiable in both arguments except that the
    /// top-k index set of `SumTopK` is read off `target` as a constant.
    pub fn eval_on<'t>(&self, map: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
        if map.shape() != target.shape() {
            return Err(FarError::Shape(format!("maps {:?} vs {:?}", map.shape(), target.shape())));
        }
        Ok(match *self {
            Dissimilarity::Pcl => pearson_loss_on(map, target),
            Dissimilarity::L1 => (map - target).abs().sum(),
            Dissimilarity::SumTopK { k } => {
                check_k(k, map.len())?;
                sum_top_k_on(map, &target.value(), k)
            }
            Dissimilarity::LogExpAlign => logexp_align_on(map - target),
        })
    }
}

fn check_k(k: usize, dim: usize) -> Result<()> {
    if k == 0 || k > dim {
        return Err(FarError::InvalidArgument(format!("k = {k} must lie in 1..={dim}")));
    }
    Ok(())
}

fn population_variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
}

/// Pearson correlation, or 0 if either side is (numerically) constant.
pub fn pearson_correlation(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b)?;
    if population_variance(a.data()) < PCC_VARIANCE_FLOOR || population_variance(b.data()) < PCC_VARIANCE_FLOOR {
        return Ok(0.0);
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn pearson_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(1.0 - (pearson_correlation(a, b)? + 1.0) / 2.0)
}

pub fn pearson_loss_on<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let tape = a.tape();
    if population_variance(a.value().data()) < PCC_VARIANCE_FLOOR || population_variance(b.value().data()) < PCC_VARIANCE_FLOOR {
        return tape.scalar(0.5);
    }
    let shape = a.shape();
    let ac = a - a.mean().expand(&shape);
    let bc = b - b.mean().expand(&shape);
    let pcc = ac.dot(bc) / (ac.dot(ac) * bc.dot(bc)).sqrt();
    pcc.scale(-0.5).add_scalar(0.5)
}

pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum())
}

/// Flat indices of the `k` largest values, largest first; equal values are
/// ordered by lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

pub fn sum_top_k(adv: &Tensor, orig: &Tensor, k: usize) -> Result<f64> {
    adv.check_same_shape(orig)?;
    check_k(k, adv.len())?;
    Ok(-top_k_indices(orig.data(), k).into_iter().map(|i| adv.data()[i]).sum::<f64>())
}

pub fn sum_top_k_on<'t>(adv: Var<'t>, orig: &Tensor, k: usize) -> Var<'t> {
    adv.select(top_k_indices(orig.data(), k)).sum().scale(-1.0)
}

/// `log(1 + exp(-sum(s)))`, stable for large `|sum(s)|`.
pub fn logexp_align(s: &Tensor) -> f64 {
    crate::autodiff::softplus(-s.sum())
}

pub fn logexp_align_on(s: Var<'_>) -> Var<'_> {
    (-s.sum()).softplus(1.0)
}

pub fn top_k_intersection(a: &Tensor, b: &Tensor, k: usize) -> Result<f64> {
    a.check_same_shape(b)?;
    check_k(k, a.len())?;
    let mut in_a = vec![false; a.len()];
    for i in top_k_indices(a.data(), k) {
        in_a[i] = true;
    }
    let shared = top_k_indices(b.data(), k).into_iter().filter(|&i| in_a[i]).count();
    Ok(shared as f64 / k as f64)
}

/// Kendall tau-b in O(n log n) (Knight's merge-sort counting).
///
/// Undefined, and an error, when either side has all values equal.
pub fn kendall_tau(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.len();
    if n < 2 {
        return Err(FarError::InvalidArgument("kendall tau needs at least 2 elements".into()));
    }
    let mut pairs: Vec<(f64, f64)> = a.data().iter().copied().zip(b.data().iter().copied()).collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));

    let pairs_of = |t: u64| t * t.saturating_sub(1) / 2;
    let n0 = pairs_of(n as u64);
    let (mut ties_a, mut ties_ab) = (0u64, 0u64);
    let (mut run_a, mut run_ab) = (1u64, 1u64);
    for w in pairs.windows(2) {
        if w[0].0 == w[1].0 {
            run_a += 1;
            if w[0].1 == w[1].1 {
                run_ab += 1;
            } else {
                ties_ab += pairs_of(run_ab);
                run_ab = 1;
            }
        } else {
            ties_a += pairs_of(run_a);
            ties_ab += pairs_of(run_ab);
            run_a = 1;
            run_ab = 1;
        }
    }
    ties_a += pairs_of(run_a);
    ties_ab += pairs_of(run_ab);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);

    let mut ties_b = 0u64;
    let mut run_b = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run_b += 1;
        } else {
            ties_b += pairs_of(run_b);
            run_b = 1;
        }
    }
    ties_b += pairs_of(run_b);

    if ties_a == n0 || ties_b == n0 {
        return Err(FarError::InvalidArgument("kendall tau undefined for a constant ranking".into()));
    }
    let num = n0 as f64 - ties_a as f64 - ties_b as f64 + ties_ab as f64 - 2.0 * swaps as f64;
    let den = ((n0 - ties_a) as f64 * (n0 - ties_b) as f64).sqrt();
    Ok((num / den).clamp(-1.0, 1.0))
}

/// Sorts `v` ascending and returns the number of strictly inverted pairs.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    let k = k + mid - i;
    buf[k..n].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// IN and CO between two maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessScore {
    pub top_k_intersection: f64,
    pub kendall_tau: f64,
    pub k: usize,
}

pub fn robustness_score(a: &Tensor, b: &Tensor, k: usize) -> Result<RobustnessScore> {
    Ok(RobustnessScore { top_k_intersection: top_k_intersection(a, b, k)?, kendall_tau: kendall_tau(a, b)?, k })
}

/// Index of the largest logit other than `y`; ties go to the lower index.
pub fn runner_up(logits: &[f64], y: usize) -> usize {
    let mut best = if y == 0 { 1 } else { 0 };
    for (t, &v) in logits.iter().enumerate() {
        if t != y && v > logits[best] {
            best = t;
        }
    }
    best
}

fn channels(shape: &[usize]) -> usize {
    if shape.len() == 3 {
        shape[2]
    } else {
        1
    }
}

/// Per-position cosine between the channel vectors of `g` and of the
/// constant `x`; zero wherever either vector is shorter than the floor.
fn pointwise_cosine<'t>(g: Var<'t>, x: &Tensor, c: usize) -> Var<'t> {
    let tape = g.tape();
    let p = x.len() / c;
    let g = g.reshape(&[p, c]);
    let xs = x.data();
    let x_norm: Vec<f64> = xs.chunks(c).map(|v| v.iter().map(|u| u * u).sum::<f64>().sqrt()).collect();
    let g_sq = g.value().data().chunks(c).map(|v| v.iter().map(|u| u * u).sum::<f64>()).collect::<Vec<_>>();
    let live: Vec<f64> = (0..p)
        .map(|i| if x_norm[i] >= COSINE_NORM_FLOOR && g_sq[i].sqrt() >= COSINE_NORM_FLOOR { 1.0 } else { 0.0 })
        .collect();
    let dot = (g * tape.constant(Tensor::from_parts(vec![p, c], xs.to_vec()))).sum_cols();
    // Dead positions get a unit denominator and a zeroed numerator so no
    // square root or division is taken at zero.
    let dead = tape.constant(Tensor::from_vec(live.iter().map(|l| 1.0 - l).collect()));
    let g_norm = ((g * g).sum_cols() + dead).sqrt();
    let x_norm = tape.constant(Tensor::from_vec(x_norm.iter().zip(&live).map(|(n, l)| if *l > 0.0 { *n } else { 1.0 }).collect()));
    dot * tape.constant(Tensor::from_vec(live)) / (g_norm * x_norm)
}

/// `cos(g^y(x_iter), x_ref) - cos(g^ybar(x_iter), x_ref)` per position,
/// where `ybar` is the strongest class other than `y` at `x_iter`.
///
/// `x_iter` is a `[1, ...input_shape]` var; the result has the input shape.
pub fn alignment_map_on<'t>(bound: &BoundModel<'_, 't>, x_iter: Var<'t>, x_ref: &Tensor, y: usize) -> Result<Var<'t>> {
    let model = bound.model;
    let c = model.class_count();
    if y >= c {
        return Err(FarError::InvalidClass { index: y, classes: c });
    }
    let logits = model.forward(&x_iter.value())?;
    let ybar = runner_up(logits.data(), y);
    let ch = channels(model.input_shape());
    let gy = input_gradient_on(bound, x_iter, y)?;
    let gbar = input_gradient_on(bound, x_iter, ybar)?;
    let s = pointwise_cosine(gy, x_ref, ch) - pointwise_cosine(gbar, x_ref, ch);
    let mut shape = model.input_shape().to_vec();
    if ch > 1 {
        shape.pop();
    }
    Ok(s.reshape(&shape))
}

/// Alignment map at `x` itself with `y` its predicted class. For image
/// inputs the map has shape `H x W`, one value per pixel.
pub fn alignment_map(model: &Model, x: &Tensor) -> Result<Tensor> {
    model.check_input(x)?;
    let y = model.predict(x)?;
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let mut shape = vec![1];
    shape.extend_from_slice(model.input_shape());
    let xv = tape.var(x.reshape(&shape)?);
    let s = alignment_map_on(&bound, xv, x, y)?;
    let out = s.value().as_ref().clone();
    out.ensure_finite("alignment map")?;
    Ok(out)
}
