//! VGG-style full-disk classifier: architecture description, parameter
//! initialisation, forward recording and weight persistence.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Dtype, Tape, Tensor, TensorError, Var};

/// Number of output logits; index 0 is FL, index 1 is NF.
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter `{param}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { param: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("weights file is missing parameter `{0}`")]
    MissingParam(String),
    #[error("weights file has unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("unknown initialisation scheme `{0}`")]
    UnknownScheme(String),
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("input does not fit the architecture: {0}")]
    InputMismatch(String),
    #[error("malformed weights file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    AdaptiveAvgPool { height: usize, width: usize },
    Flatten,
    Linear { out_features: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Ordered layer list plus the index of the layer whose output is the
/// final convolutional activation used by Grad-CAM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input: InputGeometry,
    pub layers: Vec<Layer>,
    pub tap: usize,
}

fn conv3(out_channels: usize) -> Layer {
    Layer::Conv { out_channels, kernel: 3, stride: 1, padding: 1 }
}

const POOL2: Layer = Layer::MaxPool { kernel: 2, stride: 2 };

impl ArchitectureSpec {
    /// VGG-16 feature stack on a 3x512x512 input, 7x7 adaptive average
    /// pooling and a 25088-4096-4096-2 classifier.
    pub fn vgg16_fulldisk() -> Self {
        let mut layers = Vec::new();
        for block in [&[64, 64][..], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]] {
            for &c in block {
                layers.push(conv3(c));
                layers.push(Layer::Relu);
            }
            layers.push(POOL2);
        }
        let tap = layers.len() - 1;
        layers.extend([
            Layer::AdaptiveAvgPool { height: 7, width: 7 },
            Layer::Flatten,
            Layer::Linear { out_features: 4096 },
            Layer::Relu,
            Layer::Linear { out_features: 4096 },
            Layer::Relu,
            Layer::Linear { out_features: NUM_CLASSES },
        ]);
        Self { name: "vgg16".into(), input: InputGeometry { channels: 3, height: 512, width: 512 }, layers, tap }
    }

    /// Two conv blocks (8 and 16 channels), 4x4 adaptive pooling and a single
    /// fully connected layer, on 64x64 inputs.
    pub fn tiny() -> Self {
        let layers = vec![
            conv3(8),
            Layer::Relu,
            POOL2,
            conv3(16),
            Layer::Relu,
            POOL2,
            Layer::AdaptiveAvgPool { height: 4, width: 4 },
            Layer::Flatten,
            Layer::Linear { out_features: NUM_CLASSES },
        ];
        Self { name: "tiny".into(), input: InputGeometry { channels: 3, height: 64, width: 64 }, layers, tap: 5 }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "vgg16" => Ok(Self::vgg16_fulldisk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(ModelError::UnknownArchitecture(other.into())),
        }
    }

    pub fn with_input(mut self, height: usize, width: usize) -> Self {
        self.input.height = height;
        self.input.width = width;
        self
    }

    fn section_names(&self) -> Vec<String> {
        let flatten = self.layers.iter().position(|l| matches!(l, Layer::Flatten));
        let pool = self.layers.iter().position(|l| matches!(l, Layer::AdaptiveAvgPool { .. }));
        let head = pool.or(flatten).unwrap_or(self.layers.len());
        let tail = flatten.map_or(self.layers.len(), |f| f + 1);
        (0..self.layers.len())
            .map(|i| {
                if i < head {
                    format!("features.{i}")
                } else if i >= tail {
                    format!("classifier.{}", i - tail)
                } else {
                    format!("pool.{}", i - head)
                }
            })
            .collect()
    }

    /// Per-layer output shapes (without the batch axis) for a `c x h x w`
    /// input, together with the parameter shapes in layer order.
    #[allow(clippy::type_complexity)]
    pub fn infer(&self, height: usize, width: usize) -> Result<(Vec<Vec<usize>>, Vec<(String, Vec<usize>)>)> {
        let names = self.section_names();
        let mut shape = vec![self.input.channels, height, width];
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut params = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| ModelError::InputMismatch(format!("layer {i} ({layer:?}): {msg}"));
            shape = match *layer {
                Layer::Conv { out_channels, kernel, stride, padding } => {
                    let [c, h, w] = shape[..] else { return Err(fail(format!("expected CHW, got {shape:?}"))) };
                    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                    if stride == 0 || kernel > ph || kernel > pw {
                        return Err(fail(format!("kernel {kernel} does not fit {h}x{w}")));
                    }
                    if (ph - kernel) % stride != 0 || (pw - kernel) % stride != 0 {
                        return Err(fail("output size is fractional".into()));
                    }
                    params.push((format!("{}.weight", names[i]), vec![out_channels, c, kernel, kernel]));
                    params.push((format!("{}.bias", names[i]), vec![out_channels]));
                    vec![out_channels, (ph - kernel) / stride + 1, (pw - kernel) / stride + 1]
                }
                Layer::Relu => shape,
                Layer::MaxPool { kernel, stride } => {
                    let [c, h, w] = shape[..] else { return Err(fail(format!("expected CHW, got {shape:?}"))) };
                    if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                        return Err(fail(format!("cannot pool {h}x{w}")));
                    }
                    vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                Layer::AdaptiveAvgPool { height: oh, width: ow } => {
                    let [c, h, w] = shape[..] else { return Err(fail(format!("expected CHW, got {shape:?}"))) };
                    if h < oh || w < ow {
                        return Err(fail(format!("{h}x{w} is smaller than the {oh}x{ow} target")));
                    }
                    vec![c, oh, ow]
                }
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Linear { out_features } => {
                    let [fin] = shape[..] else { return Err(fail(format!("expected a flat vector, got {shape:?}"))) };
                    params.push((format!("{}.weight", names[i]), vec![out_features, fin]));
                    params.push((format!("{}.bias", names[i]), vec![out_features]));
                    vec![out_features]
                }
            };
            shapes.push(shape.clone());
        }
        Ok((shapes, params))
    }

    /// Checks shape inference at the configured input, the two-logit head
    /// and the tap position (after the last convolution, before flattening).
    pub fn validate(&self) -> Result<()> {
        let (shapes, _) = self.infer(self.input.height, self.input.width)?;
        if shapes.last().map(Vec::as_slice) != Some(&[NUM_CLASSES][..]) {
            return Err(ModelError::InvalidSpec(format!("final layer must output {NUM_CLASSES} logits")));
        }
        let last_conv = self
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Conv { .. }))
            .ok_or_else(|| ModelError::InvalidSpec("no convolutional layer".into()))?;
        if self.tap < last_conv || self.tap >= self.layers.len() || shapes[self.tap].len() != 3 {
            return Err(ModelError::InvalidSpec(format!(
                "tap {} must point at a spatial activation after the last conv (layer {last_conv})",
                self.tap
            )));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        Ok(self.infer(self.input.height, self.input.width)?.1)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_shapes()?.iter().map(|(_, s)| s.iter().product::<usize>()).sum())
    }
}

/// Weight initialisation. Biases are always zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `U(-sqrt(1/fan_in), sqrt(1/fan_in))`.
    #[default]
    UniformFanIn,
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    HeUniform,
}

impl InitScheme {
    pub fn bound(self, fan_in: usize) -> f64 {
        match self {
            InitScheme::UniformFanIn => (1.0 / fan_in as f64).sqrt(),
            InitScheme::HeUniform => (6.0 / fan_in as f64).sqrt(),
        }
    }
}

impl FromStr for InitScheme {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-fan-in" => Ok(Self::UniformFanIn),
            "he-uniform" => Ok(Self::HeUniform),
            other => Err(ModelError::UnknownScheme(other.into())),
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::UniformFanIn => "uniform-fan-in",
            Self::HeUniform => "he-uniform",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Variables recorded by [`Model::record`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[N, 2]` logits.
    pub logits: Var,
    /// Final convolutional activation.
    pub tap: Var,
    /// Output of every layer, in order.
    pub activations: Vec<Var>,
    /// Parameter leaves, in [`Model::params`] order.
    pub params: Vec<Var>,
}

/// Plain forward result.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Final convolutional activation, when caching was requested.
    pub final_conv: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ArchitectureSpec,
    params: Vec<Param>,
}

impl Model {
    /// Wraps an explicit parameter list, which must match the spec's
    /// parameter names and shapes in order.
    pub fn new(spec: ArchitectureSpec, params: Vec<Param>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.param_shapes()?;
        if expected.len() != params.len() {
            return Err(ModelError::InvalidSpec(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name {
                return Err(ModelError::UnknownParam(p.name.clone()));
            }
            if shape.as_slice() != p.value.shape() {
                return Err(ModelError::ShapeMismatch {
                    param: name.clone(),
                    expected: shape.clone(),
                    found: p.value.shape().to_vec(),
                });
            }
        }
        Ok(Self { spec, params })
    }

    /// Deterministic initialisation from `seed`.
    pub fn init(spec: ArchitectureSpec, scheme: InitScheme, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .param_shapes()?
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let b = scheme.bound(fan_in);
                    Tensor::from_fn(shape, |_| rng.random_range(-b..=b))
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Replaces parameter `index` with a tensor of the same shape.
    pub fn set_param(&mut self, index: usize, value: Tensor) -> Result<()> {
        let p = &mut self.params[index];
        if p.value.shape() != value.shape() {
            return Err(ModelError::ShapeMismatch {
                param: p.name.clone(),
                expected: p.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records the forward computation of `input` (`[N,C,H,W]`) on `tape`.
    /// Parameters become leaves that require gradients iff `trainable`.
    pub fn record(&self, tape: &mut Tape, input: Var, trainable: bool) -> Result<ForwardPass> {
        let xs = tape.value(input).shape().to_vec();
        if xs.len() != 4 || xs[1] != self.spec.input.channels {
            return Err(ModelError::InputMismatch(format!(
                "expected [N, {}, H, W], got {xs:?}",
                self.spec.input.channels
            )));
        }
        self.spec.infer(xs[2], xs[3])?;
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone(), trainable)).collect();
        let mut next_param = params.iter().copied();
        let mut h = input;
        let mut activations = Vec::with_capacity(self.spec.layers.len());
        for layer in &self.spec.layers {
            h = match *layer {
                Layer::Conv { stride, padding, .. } => {
                    let (w, b) = (next_param.next().unwrap(), next_param.next().unwrap());
                    tape.conv2d(h, w, b, stride, padding)?
                }
                Layer::Relu => tape.relu(h)?,
                Layer::MaxPool { kernel, stride } => tape.max_pool2d(h, kernel, stride)?,
                Layer::AdaptiveAvgPool { height, width } => tape.adaptive_avg_pool2d(h, height, width)?,
                Layer::Flatten => tape.flatten(h)?,
                Layer::Linear { .. } => {
                    let (w, b) = (next_param.next().unwrap(), next_param.next().unwrap());
                    tape.linear(h, w, b)?
                }
            };
            activations.push(h);
        }
        Ok(ForwardPass { logits: h, tap: activations[self.spec.tap], activations, params })
    }

    /// Runs `batch` (`[N,C,H,W]`) through the network.
    pub fn forward(&self, batch: &Tensor, cache: bool) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let pass = self.record(&mut tape, x, false)?;
        Ok(ForwardOutput {
            logits: tape.value(pass.logits).clone(),
            final_conv: cache.then(|| tape.value(pass.tap).clone()),
        })
    }

    /// Forward pass for single-channel images `[N,1,H,W]`, duplicated to the
    /// model's channel count first.
    pub fn forward_gray(&self, batch: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let dup = tape.channel_duplicate(x, self.spec.input.channels)?;
        let pass = self.record(&mut tape, dup, false)?;
        Ok(ForwardOutput { logits: tape.value(pass.logits).clone(), final_conv: None })
    }

    /// Writes every parameter as a name line followed by an `f64` raster record.
    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for p in &self.params {
            writeln!(out, "{}", p.name)?;
            tensor::write_raster(&mut out, &p.value, Dtype::F64)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loads a weights file written by [`Model::save_weights`] (or any
    /// converter producing the same records) against `spec`.
    pub fn load_weights(spec: ArchitectureSpec, path: impl AsRef<Path>) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        Self::read_weights(spec, &mut input)
    }

    pub fn read_weights<R: BufRead>(spec: ArchitectureSpec, input: &mut R) -> Result<Self> {
        spec.validate()?;
        let expected = spec.param_shapes()?;
        let mut slots: Vec<Option<Tensor>> = vec![None; expected.len()];
        loop {
            let mut name = String::new();
            if input.read_line(&mut name)? == 0 {
                break;
            }
            let name = name.trim_end_matches('\n').to_string();
            if name.is_empty() {
                return Err(ModelError::Malformed("empty parameter name".into()));
            }
            let idx =
                expected.iter().position(|(n, _)| *n == name).ok_or_else(|| ModelError::UnknownParam(name.clone()))?;
            let value = tensor::read_raster(input)?;
            if value.shape() != expected[idx].1.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    param: name,
                    expected: expected[idx].1.clone(),
                    found: value.shape().to_vec(),
                });
            }
            slots[idx] = Some(value);
        }
        let params = expected
            .into_iter()
            .zip(slots)
            .map(|((name, _), v)| match v {
                Some(value) => Ok(Param { name, value }),
                None => Err(ModelError::MissingParam(name)),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, params })
    }
}

/// Row-wise softmax of `[N, 2]` logits.
pub fn softmax_rows(logits: &Tensor) -> Vec<[f64; NUM_CLASSES]> {
    logits
        .data()
        .chunks(NUM_CLASSES)
        .map(|r| {
            let m = r[0].max(r[1]);
            let (a, b) = ((r[0] - m).exp(), (r[1] - m).exp());
            [a / (a + b), b / (a + b)]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg_shapes_at_512_and_224() {
        let spec = ArchitectureSpec::vgg16_fulldisk();
        spec.validate().unwrap();
        let (shapes, _) = spec.infer(512, 512).unwrap();
        assert_eq!(shapes[spec.tap], vec![512, 16, 16]);
        assert_eq!(shapes.last().unwrap(), &vec![2]);
        let (shapes, _) = spec.infer(224, 224).unwrap();
        let flat = spec.layers.iter().position(|l| *l == Layer::Flatten).unwrap();
        assert_eq!(shapes[flat], vec![25088]);
        let convs = spec.layers.iter().filter(|l| matches!(l, Layer::Conv { .. })).count();
        let pools = spec.layers.iter().filter(|l| matches!(l, Layer::MaxPool { .. })).count();
        let fcs = spec.layers.iter().filter(|l| matches!(l, Layer::Linear { .. })).count();
        assert_eq!((convs, pools, fcs), (13, 5, 3));
    }

    #[test]
    fn vgg_param_names_follow_sections() {
        let names: Vec<_> =
            ArchitectureSpec::vgg16_fulldisk().param_shapes().unwrap().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "features.0.weight");
        assert_eq!(names[25], "features.28.bias");
        assert_eq!(names[26], "classifier.0.weight");
        assert_eq!(names.last().unwrap(), "classifier.4.bias");
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = Model::init(ArchitectureSpec::tiny(), InitScheme::default(), 7).unwrap();
        let b = Model::init(ArchitectureSpec::tiny(), InitScheme::default(), 7).unwrap();
        let c = Model::init(ArchitectureSpec::tiny(), InitScheme::default(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_fan_in_bounds_and_zero_bias() {
        let m = Model::init(ArchitectureSpec::tiny(), InitScheme::UniformFanIn, 0).unwrap();
        let w = m.param("features.3.weight").unwrap();
        let bound = (1.0f64 / 72.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(w.data().iter().any(|v| v.abs() > 0.5 * bound));
        assert!(m.param("features.3.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_scheme_is_rejected() {
        assert!(matches!("xavier".parse::<InitScheme>(), Err(ModelError::UnknownScheme(_))));
        assert_eq!("he-uniform".parse::<InitScheme>().unwrap(), InitScheme::HeUniform);
    }

    #[test]
    fn forward_basic_properties() {
        let m = Model::init(ArchitectureSpec::tiny(), InitScheme::default(), 0).unwrap();
        let img = Tensor::from_fn([1, 3, 64, 64], |i| ((i * 37) % 11) as f64 / 11.0 - 0.5);
        let mut two = img.data().to_vec();
        two.extend_from_slice(img.data());
        let out = m.forward(&Tensor::new([2, 3, 64, 64], two).unwrap(), true).unwrap();
        assert_eq!(out.logits.shape(), &[2, 2]);
        assert_eq!(out.logits.data()[..2], out.logits.data()[2..]);
        assert_eq!(out.final_conv.unwrap().shape(), &[2, 16, 16, 16]);
        let p = softmax_rows(&out.logits)[0];
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);

        let zero = m.forward(&Tensor::zeros([1, 3, 64, 64]), false).unwrap();
        assert!(zero.logits.data().iter().all(|v| v.abs() < 1e-300));
    }

    #[test]
    fn forward_rejects_wrong_channels() {
        let m = Model::init(ArchitectureSpec::tiny(), InitScheme::default(), 0).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros([1, 1, 64, 64]), false), Err(ModelError::InputMismatch(_))));
    }

    #[test]
    fn weights_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let m = Model::init(ArchitectureSpec::tiny(), InitScheme::default(), 3).unwrap();
        m.save_weights(&path).unwrap();
        let back = Model::load_weights(ArchitectureSpec::tiny(), &path).unwrap();
        assert_eq!(back, m);

        let mut wide = ArchitectureSpec::tiny();
        wide.layers[3] = conv3(12);
        match Model::load_weights(wide, &path) {
            Err(ModelError::ShapeMismatch { param, .. }) => assert_eq!(param, "features.3.weight"),
            other => panic!("unexpected {other:?}"),
        }

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            Model::load_weights(ArchitectureSpec::tiny(), &path),
            Err(ModelError::Tensor(TensorError::PayloadLength { .. }))
        ));
    }
}
