//! Small classifiers, their parameter initialization and serialization.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ActivationSpec, Tape, Var};
use crate::error::{FarError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// `y = x W + b` with `W` stored as `[inputs, outputs]`.
    Dense { inputs: usize, outputs: usize },
    /// Stride-1 convolution over NHWC input; `padding` zeros are added on
    /// every spatial side first. The kernel is stored `[k, k, in, filters]`.
    Conv2d { kernel: usize, in_channels: usize, filters: usize, padding: usize },
    MaxPool { size: usize },
    Flatten,
    /// The model-wide activation function.
    Activation,
}

impl Layer {
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Layer::Dense { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            Layer::Conv2d { kernel, in_channels, filters, .. } => {
                vec![vec![kernel, kernel, in_channels, filters], vec![filters]]
            }
            _ => Vec::new(),
        }
    }

    /// (fan_in, fan_out) of the weight tensor.
    fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            Layer::Dense { inputs, outputs } => Some((inputs, outputs)),
            Layer::Conv2d { kernel, in_channels, filters, .. } => {
                Some((kernel * kernel * in_channels, kernel * kernel * filters))
            }
            _ => None,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: &str| Err(FarError::Shape(format!("layer {self:?} cannot take input {input:?}: {why}")));
        match *self {
            Layer::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return bad("dense input must be a vector of matching length");
                }
                Ok(vec![outputs])
            }
            Layer::Conv2d { kernel, in_channels, filters, padding } => {
                if input.len() != 3 || input[2] != in_channels {
                    return bad("expected H x W x C with matching channels");
                }
                let (h, w) = (input[0] + 2 * padding, input[1] + 2 * padding);
                if h < kernel || w < kernel {
                    return bad("input smaller than kernel");
                }
                Ok(vec![h + 1 - kernel, w + 1 - kernel, filters])
            }
            Layer::MaxPool { size } => {
                if input.len() != 3 || size == 0 || input[0] < size || input[1] < size {
                    return bad("pooling window does not fit");
                }
                Ok(vec![input[0] / size, input[1] / size, input[2]])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Activation => Ok(input.to_vec()),
        }
    }
}

/// Widths of the two-convolution classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub pool: usize,
    pub hidden: usize,
    /// Zero padding per side for both convolutions (0 = valid, 2 = same for 5x5).
    pub padding: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig { conv1_filters: 32, conv2_filters: 64, kernel: 5, pool: 2, hidden: 1024, padding: 0 }
    }
}

/// Parameterized feed-forward classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    activation: ActivationSpec,
    input_shape: Vec<usize>,
    class_count: usize,
    params: Vec<Tensor>,
}

impl Model {
    /// Builds a model with all parameters zero; see [`initialize`].
    pub fn new(layers: Vec<Layer>, activation: ActivationSpec, input_shape: Vec<usize>, class_count: usize) -> Result<Self> {
        activation.validate()?;
        if class_count < 2 {
            return Err(FarError::InvalidArgument(format!("class_count must be >= 2, got {class_count}")));
        }
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        if shape != [class_count] {
            return Err(FarError::Shape(format!("network emits {shape:?}, expected [{class_count}]")));
        }
        let params = layers.iter().flat_map(|l| l.param_shapes()).map(|s| Tensor::zeros(&s)).collect();
        Ok(Model { layers, activation, input_shape, class_count, params })
    }

    /// Fully connected network with the activation between dense layers.
    pub fn mlp(input_dim: usize, hidden: &[usize], class_count: usize, activation: ActivationSpec) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            layers.push(Layer::Dense { inputs: width, outputs: h });
            layers.push(Layer::Activation);
            width = h;
        }
        layers.push(Layer::Dense { inputs: width, outputs: class_count });
        Model::new(layers, activation, vec![input_dim], class_count)
    }

    /// Two convolution + pooling stages followed by two dense layers, ReLU.
    pub fn small_cnn(input_shape: &[usize], class_count: usize, cfg: &CnnConfig) -> Result<Self> {
        if input_shape.len() != 3 {
            return Err(FarError::Shape(format!("small CNN needs H x W x C input, got {input_shape:?}")));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::new();
        for filters in [cfg.conv1_filters, cfg.conv2_filters] {
            let conv = Layer::Conv2d { kernel: cfg.kernel, in_channels: shape[2], filters, padding: cfg.padding };
            shape = conv.output_shape(&shape).map_err(|_| too_small(input_shape, cfg))?;
            let pool = Layer::MaxPool { size: cfg.pool };
            shape = pool.output_shape(&shape).map_err(|_| too_small(input_shape, cfg))?;
            layers.extend([conv, Layer::Activation, pool]);
        }
        let flat: usize = shape.iter().product();
        if flat == 0 {
            return Err(too_small(input_shape, cfg));
        }
        layers.extend([
            Layer::Flatten,
            Layer::Dense { inputs: flat, outputs: cfg.hidden },
            Layer::Activation,
            Layer::Dense { inputs: cfg.hidden, outputs: class_count },
        ]);
        Model::new(layers, ActivationSpec::relu(), input_shape.to_vec(), class_count)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> &ActivationSpec {
        &self.activation
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Same parameters, different activation treatment.
    pub fn with_activation(&self, activation: ActivationSpec) -> Result<Model> {
        activation.validate()?;
        Ok(Model { activation, ..self.clone() })
    }

    /// Replaces all parameters; shapes must match the current ones.
    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Model> {
        if params.len() != self.params.len() {
            return Err(FarError::Shape(format!("expected {} parameter tensors, got {}", self.params.len(), params.len())));
        }
        for (old, new) in self.params.iter().zip(&params) {
            old.check_same_shape(new)?;
        }
        Ok(Model { params, ..self.clone() })
    }

    /// Records the parameters on `tape`, as differentiable leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'_, 't> {
        let params = self
            .params
            .iter()
            .map(|p| if trainable { tape.var(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        BoundModel { model: self, params }
    }

    /// Logits for a single input (`[classes]`) or a batch (`[n, classes]`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let (batched, input) = self.batch_view(&tape, x)?;
        let logits = bound.logits(input)?;
        let value = logits.value().as_ref().clone();
        if batched {
            Ok(value)
        } else {
            value.into_reshape(&[self.class_count])
        }
    }

    /// Predicted class; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        self.check_input(x)?;
        Ok(self.forward(x)?.argmax())
    }

    /// Predictions for every row of a batch.
    pub fn predict_batch(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        let c = self.class_count;
        Ok(logits.data().chunks(c).map(|row| Tensor::from_vec(row.to_vec()).argmax()).collect())
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(FarError::Shape(format!("input shape {:?}, model expects {:?}", x.shape(), self.input_shape)));
        }
        Ok(())
    }

    /// Puts `x` on the tape with a leading batch axis.
    pub(crate) fn batch_view<'t>(&self, tape: &'t Tape, x: &Tensor) -> Result<(bool, Var<'t>)> {
        if x.shape() == self.input_shape.as_slice() {
            let mut shape = vec![1];
            shape.extend_from_slice(&self.input_shape);
            return Ok((false, tape.constant(x.reshape(&shape)?)));
        }
        if x.ndim() == self.input_shape.len() + 1 && x.shape()[1..] == self.input_shape[..] {
            return Ok((true, tape.constant(x.clone())));
        }
        Err(FarError::Shape(format!("input shape {:?}, model expects {:?} or a batch of it", x.shape(), self.input_shape)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Model::read_from(&mut file)
    }

    /// Binary layout: magic `FARMODEL`, format version (u32 LE), header
    /// length (u64 LE), JSON header, then every parameter as f64 LE in
    /// declaration order.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = ModelHeader {
            layers: self.layers.clone(),
            activation: self.activation,
            input_shape: self.input_shape.clone(),
            class_count: self.class_count,
            param_shapes: self.params.iter().map(|p| p.shape().to_vec()).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| FarError::Format(e.to_string()))?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in &self.params {
            for v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Model> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(FarError::Format("not a model file (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != MODEL_VERSION {
            return Err(FarError::Format(format!("unsupported model format version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: ModelHeader = serde_json::from_slice(&json).map_err(|e| FarError::Format(e.to_string()))?;
        let model = Model::new(header.layers, header.activation, header.input_shape, header.class_count)?;
        let expected: Vec<Vec<usize>> = model.params.iter().map(|p| p.shape().to_vec()).collect();
        if expected != header.param_shapes {
            return Err(FarError::Format("parameter shapes disagree with layer specs".into()));
        }
        let mut params = Vec::with_capacity(expected.len());
        for shape in expected {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.push(Tensor::new(shape, data)?);
        }
        model.with_params(params)
    }
}

fn too_small(input_shape: &[usize], cfg: &CnnConfig) -> FarError {
    FarError::Shape(format!(
        "input {input_shape:?} too small for two {k}x{k} convolutions (padding {p}) with {s}x{s} pooling",
        k = cfg.kernel,
        p = cfg.padding,
        s = cfg.pool
    ))
}

const MODEL_MAGIC: &[u8; 8] = b"FARMODEL";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    layers: Vec<Layer>,
    activation: ActivationSpec,
    input_shape: Vec<usize>,
    class_count: usize,
    param_shapes: Vec<Vec<usize>>,
}

/// A model whose parameters live on a tape.
pub struct BoundModel<'m, 't> {
    pub model: &'m Model,
    pub params: Vec<Var<'t>>,
}

impl<'m, 't> BoundModel<'m, 't> {
    pub fn tape(&self) -> &'t Tape {
        self.params[0].tape()
    }

    /// Logits `[n, classes]` for a batch `[n, ...input_shape]`.
    pub fn logits(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != self.model.input_shape.len() + 1 || shape[1..] != self.model.input_shape[..] {
            return Err(FarError::Shape(format!("batch shape {:?} does not match model input {:?}", shape, self.model.input_shape)));
        }
        let n = shape[0];
        let mut h = x;
        let mut p = self.params.iter();
        for layer in &self.model.layers {
            h = match *layer {
                Layer::Dense { .. } => {
                    let (w, b) = (*p.next().unwrap(), *p.next().unwrap());
                    h.matmul(w).add_row_bias(b)
                }
                Layer::Conv2d { padding, .. } => {
                    let (k, b) = (*p.next().unwrap(), *p.next().unwrap());
                    let y = h.pad_spatial(padding).conv2d(k);
                    let ys = y.shape();
                    y.reshape(&[ys[0] * ys[1] * ys[2], ys[3]]).add_row_bias(b).reshape(&ys)
                }
                Layer::MaxPool { size } => h.max_pool(size),
                Layer::Flatten => {
                    let len = h.len() / n;
                    h.reshape(&[n, len])
                }
                Layer::Activation => h.activate(&self.model.activation),
            };
        }
        if !h.value().all_finite() {
            return Err(FarError::NonFinite("forward pass".into()));
        }
        Ok(h)
    }

    /// Sum over the batch of the logit of `class` for every row.
    pub fn class_logit_sum(&self, x: Var<'t>, class: usize) -> Result<Var<'t>> {
        let c = self.model.class_count;
        if class >= c {
            return Err(FarError::InvalidClass { index: class, classes: c });
        }
        let logits = self.logits(x)?;
        let n = logits.shape()[0];
        Ok(logits.select((0..n).map(|i| i * c + class).collect()).sum())
    }
}

/// `d logit_class / d x` for a batch var `x`, recorded so that it can be
/// differentiated again.
pub fn input_gradient_on<'t>(bound: &BoundModel<'_, 't>, x: Var<'t>, class: usize) -> Result<Var<'t>> {
    // A constant input is lifted to a leaf so the logits stay on the tape
    // even when the parameters are frozen.
    let x = if x.requires_grad() { x } else { bound.tape().var(x.value().as_ref().clone()) };
    let out = bound.class_logit_sum(x, class)?;
    Ok(bound.tape().grad(out, &[x], true)?[0])
}

/// Mean cross-entropy of softmax(`logits`) (`[n, classes]`) against `labels`.
pub fn cross_entropy_on<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(FarError::Shape(format!("logits {shape:?} for {} labels", labels.len())));
    }
    let c = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(FarError::InvalidClass { index: bad, classes: c });
    }
    let tape = logits.tape();
    // Row maxima are taken as constants; log-sum-exp does not depend on the shift.
    let value = logits.value();
    let maxima: Vec<f64> = value.data().chunks(c).map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let m = tape.constant(Tensor::from_vec(maxima));
    let shifted = logits - m.broadcast_cols(c);
    let lse = shifted.exp().sum_cols().ln() + m;
    let picked = logits.select(labels.iter().enumerate().map(|(i, &l)| i * c + l).collect());
    Ok((lse - picked).mean())
}

/// Mean cross-entropy over a batch without recording gradients.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let l = tape.constant(logits.clone());
    Ok(cross_entropy_on(l, labels)?.item())
}

impl Model {
    /// Signed input gradient of the logit of `class` at a single input.
    pub fn input_gradient(&self, x: &Tensor, class: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let xv = tape.var(x.reshape(&shape)?);
        let out = bound.class_logit_sum(xv, class)?;
        let g = tape.grad(out, &[xv], false)?[0];
        g.value().reshape(x.shape())
    }

    /// Gradient with respect to `x` of `scalar(x, g)`, where `g` is the
    /// input gradient of the logit of `class`. Second derivatives of ReLU
    /// follow the model's [`ActivationSpec`].
    pub fn grad_of_scalar_of_gradient<F>(&self, x: &Tensor, class: usize, scalar: F) -> Result<Tensor>
    where
        F: for<'t> FnOnce(Var<'t>, Var<'t>) -> Result<Var<'t>>,
    {
        self.check_input(x)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let xv = tape.var(x.reshape(&shape)?);
        let g = input_gradient_on(&bound, xv, class)?;
        let s = scalar(xv, g)?;
        if s.len() != 1 {
            return Err(FarError::Shape(format!("scalar function returned shape {:?}", s.shape())));
        }
        let out = tape.grad(s, &[xv], false)?[0];
        out.value().reshape(x.shape())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitKind {
    /// Framework default: He uniform with a = sqrt(5), bias U(+-1/sqrt(fan_in)).
    #[serde(rename = "PTD")]
    Ptd,
    /// Weights N(0, 0.1^2), biases 0.1.
    #[serde(rename = "CUST")]
    Cust,
    /// Everything U(+-0.1).
    #[serde(rename = "UNI")]
    Uni,
    #[serde(rename = "HU")]
    HeUniform,
    #[serde(rename = "HN")]
    HeNormal,
    #[serde(rename = "GU")]
    GlorotUniform,
    #[serde(rename = "GN")]
    GlorotNormal,
}

impl InitKind {
    pub const ALL: [InitKind; 7] = [
        InitKind::Ptd,
        InitKind::Cust,
        InitKind::Uni,
        InitKind::HeUniform,
        InitKind::HeNormal,
        InitKind::GlorotUniform,
        InitKind::GlorotNormal,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            InitKind::Ptd => "PTD",
            InitKind::Cust => "CUST",
            InitKind::Uni => "UNI",
            InitKind::HeUniform => "HU",
            InitKind::HeNormal => "HN",
            InitKind::GlorotUniform => "GU",
            InitKind::GlorotNormal => "GN",
        }
    }

    pub fn parse(name: &str) -> Result<InitKind> {
        InitKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| FarError::InvalidArgument(format!("unknown init scheme {name:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitScheme {
    pub kind: InitKind,
    pub seed: u64,
}

enum Sampler {
    Uniform(f64),
    Normal(f64),
    Constant(f64),
}

impl Sampler {
    fn fill(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        match *self {
            Sampler::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b)).collect(),
            Sampler::Normal(sd) => {
                let dist = Normal::new(0.0, sd).expect("positive standard deviation");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Sampler::Constant(c) => vec![c; n],
        }
    }
}

/// He uniform bound `sqrt(6 / ((1 + a^2) fan_in))`.
pub fn he_uniform_bound(a: f64, fan_in: usize) -> f64 {
    (6.0 / ((1.0 + a * a) * fan_in as f64)).sqrt()
}

/// He normal standard deviation `sqrt(2 / ((1 + a^2) fan_in))`.
pub fn he_normal_std(a: f64, fan_in: usize) -> f64 {
    (2.0 / ((1.0 + a * a) * fan_in as f64)).sqrt()
}

pub fn glorot_uniform_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn glorot_normal_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Samples every parameter of `model` according to `scheme`.
///
/// Parameter tensor `i` (layer order, weight before bias) draws from stream
/// `i` of a ChaCha8 generator keyed by the seed, so each tensor depends only
/// on the seed, its position and its shape.
pub fn initialize(model: &Model, scheme: InitScheme) -> Model {
    let mut params = Vec::with_capacity(model.params.len());
    let mut stream = 0u64;
    for layer in &model.layers {
        let Some((fan_in, fan_out)) = layer.fans() else { continue };
        let (weight, bias) = match scheme.kind {
            InitKind::Ptd => {
                let b = 1.0 / (fan_in as f64).sqrt();
                (Sampler::Uniform(he_uniform_bound(5f64.sqrt(), fan_in)), Sampler::Uniform(b))
            }
            InitKind::Cust => (Sampler::Normal(0.1), Sampler::Constant(0.1)),
            InitKind::Uni => (Sampler::Uniform(0.1), Sampler::Uniform(0.1)),
            InitKind::HeUniform => (Sampler::Uniform(he_uniform_bound(0.0, fan_in)), Sampler::Constant(0.0)),
            InitKind::HeNormal => (Sampler::Normal(he_normal_std(0.0, fan_in)), Sampler::Constant(0.0)),
            InitKind::GlorotUniform => {
                (Sampler::Uniform(glorot_uniform_bound(fan_in, fan_out)), Sampler::Constant(0.0))
            }
            InitKind::GlorotNormal => (Sampler::Normal(glorot_normal_std(fan_in, fan_out)), Sampler::Constant(0.0)),
        };
        for (shape, sampler) in layer.param_shapes().into_iter().zip([weight, bias]) {
            let mut rng = ChaCha8Rng::seed_from_u64(scheme.seed);
            rng.set_stream(stream);
            stream += 1;
            let n = shape.iter().product();
            params.push(Tensor::from_parts(shape, sampler.fill(&mut rng, n)));
        }
    }
    Model { params, ..model.clone() }
}
