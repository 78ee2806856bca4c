//! Saliency maps and Integrated Gradients.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{FarError, Result};
use crate::metrics::alignment_map_on;
use crate::models::{input_gradient_on, BoundModel, Model};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Absolute input gradient.
    #[serde(rename = "SM")]
    Saliency,
    #[serde(rename = "IG")]
    IntegratedGradients,
    /// Pointwise cosine alignment of input gradients with the input.
    #[serde(rename = "ALIGN")]
    Alignment,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Saliency => "SM",
            Method::IntegratedGradients => "IG",
            Method::Alignment => "ALIGN",
        }
    }
}

/// Reference point of the IG path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Zero,
    /// The unperturbed input the attack or regularizer started from.
    Input,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionSpec {
    pub method: Method,
    pub steps: usize,
    pub baseline: Baseline,
}

impl Default for AttributionSpec {
    fn default() -> Self {
        AttributionSpec { method: Method::IntegratedGradients, steps: 32, baseline: Baseline::Zero }
    }
}

impl AttributionSpec {
    pub fn saliency() -> Self {
        AttributionSpec { method: Method::Saliency, ..Default::default() }
    }

    pub fn ig(steps: usize) -> Self {
        AttributionSpec { steps, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == Method::IntegratedGradients && self.steps == 0 {
            return Err(FarError::InvalidArgument("IG needs steps >= 1".into()));
        }
        Ok(())
    }

    /// Taped map of `x` (input-shaped var) for `class`; `origin` supplies
    /// the baseline when it is [`Baseline::Input`].
    pub fn on<'t>(&self, bound: &BoundModel<'_, 't>, x: Var<'t>, origin: &Tensor, class: usize) -> Result<Var<'t>> {
        match self.method {
            Method::Saliency => saliency_on(bound, x, class),
            Method::Alignment => {
                let shape = x.shape();
                let mut batched = vec![1];
                batched.extend_from_slice(&shape);
                alignment_map_on(bound, x.reshape(&batched), origin, class)
            }
            Method::IntegratedGradients => {
                let tape = bound.tape();
                let b = match self.baseline {
                    Baseline::Zero => tape.constant(Tensor::zeros(&x.shape())),
                    Baseline::Input => tape.constant(origin.clone()),
                };
                integrated_gradients_on(bound, x, b, class, self.steps)
            }
        }
    }

    /// Map at `x` for `class`, with `x` itself as the origin.
    pub fn compute(&self, model: &Model, x: &Tensor, class: usize) -> Result<AttributionMap> {
        self.validate()?;
        match self.method {
            Method::Saliency => saliency_map(model, x, class),
            Method::Alignment => {
                let tape = Tape::new();
                let bound = model.bind(&tape, false);
                let xv = tape.var(x.clone());
                let values = self.on(&bound, xv, x, class)?.value().as_ref().clone();
                values.ensure_finite("alignment map")?;
                Ok(AttributionMap { values, class_index: class, method: Method::Alignment, baseline: None, steps: None })
            }
            Method::IntegratedGradients => {
                let b = match self.baseline {
                    Baseline::Zero => Tensor::zeros(x.shape()),
                    Baseline::Input => x.clone(),
                };
                integrated_gradients(model, x, &b, class, self.steps)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub values: Tensor,
    pub class_index: usize,
    pub method: Method,
    pub baseline: Option<Tensor>,
    pub steps: Option<usize>,
}

/// `|d f_class / d x|` as a taped, input-shaped var.
pub fn saliency_on<'t>(bound: &BoundModel<'_, 't>, x: Var<'t>, class: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    let mut batched = vec![1];
    batched.extend_from_slice(&shape);
    let g = input_gradient_on(bound, x.reshape(&batched), class)?;
    Ok(g.reshape(&shape).abs())
}

/// Midpoint-rule Integrated Gradients as a taped, input-shaped var,
/// differentiable in `x`, `baseline` and the model parameters.
///
/// All `steps` path points are evaluated as one batch.
pub fn integrated_gradients_on<'t>(
    bound: &BoundModel<'_, 't>,
    x: Var<'t>,
    baseline: Var<'t>,
    class: usize,
    steps: usize,
) -> Result<Var<'t>> {
    if steps == 0 {
        return Err(FarError::InvalidArgument("IG needs steps >= 1".into()));
    }
    let shape = x.shape();
    if baseline.shape() != shape {
        return Err(FarError::Shape(format!("baseline {:?} vs input {:?}", baseline.shape(), shape)));
    }
    let tape = bound.tape();
    let d = x.len();
    let xf = x.reshape(&[d]);
    let bf = baseline.reshape(&[d]);
    let diff = xf - bf;
    let alphas: Vec<f64> = (0..steps).flat_map(|i| std::iter::repeat_n((i as f64 + 0.5) / steps as f64, d)).collect();
    let alphas = tape.constant(Tensor::from_parts(vec![steps, d], alphas));
    let mut path_shape = vec![steps];
    path_shape.extend_from_slice(&shape);
    let path = (bf.broadcast_rows(steps) + alphas * diff.broadcast_rows(steps)).reshape(&path_shape);
    let g = input_gradient_on(bound, path, class)?;
    let avg = g.reshape(&[steps, d]).sum_rows().scale(1.0 / steps as f64);
    Ok((avg * diff).reshape(&shape))
}

pub fn saliency_map(model: &Model, x: &Tensor, class: usize) -> Result<AttributionMap> {
    model.check_input(x)?;
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let xv = tape.var(x.clone());
    let values = saliency_on(&bound, xv, class)?.value().as_ref().clone();
    values.ensure_finite("saliency map")?;
    Ok(AttributionMap { values, class_index: class, method: Method::Saliency, baseline: None, steps: None })
}

pub fn integrated_gradients(model: &Model, x: &Tensor, baseline: &Tensor, class: usize, steps: usize) -> Result<AttributionMap> {
    model.check_input(x)?;
    x.check_same_shape(baseline)?;
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let xv = tape.var(x.clone());
    let bv = tape.constant(baseline.clone());
    let values = integrated_gradients_on(&bound, xv, bv, class, steps)?.value().as_ref().clone();
    values.ensure_finite("integrated gradients")?;
    Ok(AttributionMap {
        values,
        class_index: class,
        method: Method::IntegratedGradients,
        baseline: Some(baseline.clone()),
        steps: Some(steps),
    })
}

const MAP_MAGIC: &[u8; 8] = b"FARATTR\0";
const MAP_VERSION: u32 = 1;

impl AttributionMap {
    /// `index,value` rows over the flattened map.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "index,value")?;
        for (i, v) in self.values.data().iter().enumerate() {
            writeln!(w, "{i},{v:?}")?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl Read, shape: &[usize]) -> Result<Tensor> {
        let mut text = String::new();
        std::io::BufReader::new(r).read_to_string(&mut text)?;
        let mut lines = text.lines();
        if lines.next() != Some("index,value") {
            return Err(FarError::Format("attribution CSV: missing header".into()));
        }
        let mut values = Vec::new();
        for (n, line) in lines.enumerate() {
            let (i, v) = line.split_once(',').ok_or_else(|| FarError::Format(format!("attribution CSV line {}", n + 2)))?;
            if i.parse::<usize>().ok() != Some(n) {
                return Err(FarError::Format(format!("attribution CSV: bad index on line {}", n + 2)));
            }
            values.push(v.parse::<f64>().map_err(|e| FarError::Format(e.to_string()))?);
        }
        Tensor::new(shape.to_vec(), values)
    }

    /// Magic `FARATTR\0`, version, method byte, class, rank, dimensions,
    /// then row-major f64 values; integers and floats little-endian.
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAP_MAGIC)?;
        w.write_all(&MAP_VERSION.to_le_bytes())?;
        w.write_all(&[match self.method {
            Method::Saliency => 0u8,
            Method::IntegratedGradients => 1,
            Method::Alignment => 2,
        }])?;
        w.write_all(&(self.class_index as u64).to_le_bytes())?;
        w.write_all(&(self.values.ndim() as u32).to_le_bytes())?;
        for &d in self.values.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in self.values.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads back what [`AttributionMap::write_binary`] wrote. Baseline and
    /// step count are not stored.
    pub fn read_binary(r: &mut impl Read) -> Result<AttributionMap> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAP_MAGIC {
            return Err(FarError::Format("not an attribution file (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != MAP_VERSION {
            return Err(FarError::Format("unsupported attribution format version".into()));
        }
        let mut m = [0u8];
        r.read_exact(&mut m)?;
        let method = match m[0] {
            0 => Method::Saliency,
            1 => Method::IntegratedGradients,
            2 => Method::Alignment,
            other => return Err(FarError::Format(format!("unknown method tag {other}"))),
        };
        r.read_exact(&mut b8)?;
        let class_index = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(AttributionMap { values: Tensor::new(shape, data)?, class_index, method, baseline: None, steps: None })
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(&mut f)?;
        f.flush()?;
        Ok(())
    }
}
