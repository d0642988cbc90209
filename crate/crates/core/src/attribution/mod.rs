//! Attribution maps for a single model decision: Grad-CAM, guided
//! backpropagation, Guided Grad-CAM, Integrated Gradients, Deep SHAP and an
//! occlusion oracle.
//!
//! Every method works on a [`Differentiable`] target, which records a batched
//! forward pass on a tape. Images are single-channel `[1, H, W]` tensors and
//! maps come back as `[H, W]`.

mod overlay;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Label;
use crate::model::{Model, ModelError};
use crate::tensor::{BackwardMode, Tape, Tensor, TensorError, Var};

pub use overlay::{clip_level, render_overlay, write_overlay_png};

/// Summation-to-delta tolerance for Deep SHAP: `|residual| <= rel * |delta| + abs`.
pub const SHAP_RELATIVE_TOLERANCE: f64 = 1e-6;
pub const SHAP_ABSOLUTE_FLOOR: f64 = 1e-12;
/// Completeness tolerance for Integrated Gradients.
pub const IG_RELATIVE_TOLERANCE: f64 = 1e-3;
pub const IG_ABSOLUTE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("the target has no final convolutional tap")]
    MissingTap,
    #[error("step count must be at least 1")]
    InvalidSteps,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("background set is empty")]
    EmptyBackgrounds,
    #[error("invalid occlusion geometry: {0}")]
    InvalidPatch(String),
    #[error("{method} completeness violated: residual {residual:e} exceeds {tolerance:e}")]
    Completeness { method: Method, residual: f64, tolerance: f64 },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AttributionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    GuidedGradCam,
    IntegratedGradients,
    DeepShap,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::GuidedGradCam => "guided-grad-cam",
            Method::IntegratedGradients => "integrated-gradients",
            Method::DeepShap => "deep-shap",
        })
    }
}

/// `f(x) - f(reference)` together with how far the attributions miss it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummationCheck {
    pub delta: f64,
    /// `sum(attributions) - delta`.
    pub residual: f64,
}

impl SummationCheck {
    pub fn holds(&self, relative: f64, absolute: f64) -> bool {
        self.residual.abs() <= relative * self.delta.abs() + absolute
    }

    pub fn relative_error(&self) -> f64 {
        self.residual.abs() / self.delta.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    /// `[H, W]` signed relevance.
    pub values: Tensor,
    pub method: Method,
    pub target: Option<Label>,
    /// Human-readable baseline description.
    pub baseline: String,
    /// Integration steps or background count.
    pub samples: usize,
    /// Mean absolute residual, for completeness methods.
    pub completeness_residual: Option<f64>,
    /// One entry per reference input (IG: the baseline; Deep SHAP: each background).
    pub checks: Vec<SummationCheck>,
}

impl AttributionMap {
    /// Fails if any summation check exceeds the method's tolerance.
    pub fn verify(&self) -> Result<()> {
        let (rel, abs) = match self.method {
            Method::IntegratedGradients => (IG_RELATIVE_TOLERANCE, IG_ABSOLUTE_FLOOR),
            Method::DeepShap => (SHAP_RELATIVE_TOLERANCE, SHAP_ABSOLUTE_FLOOR),
            Method::GuidedGradCam => return Ok(()),
        };
        match self.checks.iter().find(|c| !c.holds(rel, abs)) {
            Some(c) => Err(AttributionError::Completeness {
                method: self.method,
                residual: c.residual,
                tolerance: rel * c.delta.abs() + abs,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Zero,
    Provided,
}

/// Ordered, non-empty set of reference inputs sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSet {
    inputs: Vec<Tensor>,
    kind: BaselineKind,
}

impl BaselineSet {
    pub fn new(inputs: Vec<Tensor>, kind: BaselineKind) -> Result<Self> {
        let first = inputs.first().ok_or(AttributionError::EmptyBackgrounds)?;
        if let Some(bad) = inputs.iter().find(|t| t.shape() != first.shape()) {
            return Err(AttributionError::ShapeMismatch(format!(
                "background {:?} vs {:?}",
                bad.shape(),
                first.shape()
            )));
        }
        Ok(Self { inputs, kind })
    }

    pub fn zero(shape: &[usize]) -> Self {
        Self { inputs: vec![Tensor::zeros(shape.to_vec())], kind: BaselineKind::Zero }
    }

    pub fn provided(inputs: Vec<Tensor>) -> Result<Self> {
        Self::new(inputs, BaselineKind::Provided)
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn kind(&self) -> BaselineKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn describe(&self) -> String {
        match self.kind {
            BaselineKind::Zero => "zero".into(),
            BaselineKind::Provided => format!("{} provided", self.inputs.len()),
        }
    }
}

/// Output of [`Differentiable::record`].
#[derive(Debug, Clone, Copy)]
pub struct Recorded {
    /// `[N, K]` outputs; the attributed scalar is column [`Differentiable::column`].
    pub outputs: Var,
    /// Final convolutional activation `[N, C, h, w]`, if the target has one.
    pub tap: Option<Var>,
}

/// A scalar function of an image that can be recorded on a tape for a batch.
pub trait Differentiable: Sync {
    /// Records the function for `batch` (`[N, ...image shape]`).
    fn record(&self, tape: &mut Tape, batch: Var) -> Result<Recorded>;

    /// Output column holding the attributed scalar.
    fn column(&self) -> usize {
        0
    }

    fn target(&self) -> Option<Label> {
        None
    }
}

/// Logit of one class for a gray `[1, H, W]` image; the image is duplicated
/// to the model's channel count inside the recorded graph.
#[derive(Debug, Clone, Copy)]
pub struct ClassLogit<'a> {
    pub model: &'a Model,
    pub class: Label,
}

impl<'a> ClassLogit<'a> {
    pub fn new(model: &'a Model, class: Label) -> Self {
        Self { model, class }
    }
}

impl Differentiable for ClassLogit<'_> {
    fn record(&self, tape: &mut Tape, batch: Var) -> Result<Recorded> {
        let dup = tape.channel_duplicate(batch, self.model.spec().input.channels)?;
        let pass = self.model.record(tape, dup, false)?;
        Ok(Recorded { outputs: pass.logits, tap: Some(pass.tap) })
    }

    fn column(&self) -> usize {
        self.class.index()
    }

    fn target(&self) -> Option<Label> {
        Some(self.class)
    }
}

/// Any closure recording a batched graph, for toy functions.
pub struct TapeFn<F>(pub F);

impl<F> Differentiable for TapeFn<F>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    fn record(&self, tape: &mut Tape, batch: Var) -> Result<Recorded> {
        Ok(Recorded { outputs: (self.0)(tape, batch)?, tap: None })
    }
}

fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let shape = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape {
            return Err(AttributionError::ShapeMismatch(format!("{:?} vs {shape:?}", img.shape())));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(shape);
    Ok(Tensor::new(full, data)?)
}

fn map_shape(image: &Tensor) -> Result<Vec<usize>> {
    match image.shape() {
        [1, h, w] => Ok(vec![*h, *w]),
        s => Err(AttributionError::ShapeMismatch(format!("expected a [1,H,W] image, got {s:?}"))),
    }
}

/// One-hot seed selecting `column` in every row of an `[N, K]` output.
fn column_seed(outputs: &Tensor, column: usize) -> Result<Tensor> {
    match outputs.shape() {
        [n, k] if column < *k => {
            let k = *k;
            Ok(Tensor::from_fn([*n, k], |i| if i % k == column { 1.0 } else { 0.0 }))
        }
        s => Err(AttributionError::ShapeMismatch(format!("output {s:?} has no column {column}"))),
    }
}

fn column_values(outputs: &Tensor, column: usize) -> Vec<f64> {
    let k = outputs.shape()[1];
    outputs.data().iter().skip(column).step_by(k).copied().collect()
}

/// A recorded batch: tape, input leaf and outputs.
struct Session {
    tape: Tape,
    input: Var,
    rec: Recorded,
}

impl Session {
    fn run<D: Differentiable + ?Sized>(f: &D, images: &[&Tensor], grad: bool) -> Result<Self> {
        let mut tape = Tape::new();
        let input = tape.leaf(stack(images)?, grad);
        let rec = f.record(&mut tape, input)?;
        if tape.value(rec.outputs).ndim() != 2 {
            return Err(AttributionError::ShapeMismatch(format!(
                "outputs must be [N, K], got {:?}",
                tape.value(rec.outputs).shape()
            )));
        }
        Ok(Self { tape, input, rec })
    }

    fn values(&self, column: usize) -> Vec<f64> {
        column_values(self.tape.value(self.rec.outputs), column)
    }

    /// Gradients of the selected column with respect to the input batch and
    /// (if present) the tap.
    fn backward(&self, column: usize, mode: BackwardMode<'_>) -> Result<(Tensor, Option<Tensor>)> {
        let seed = column_seed(self.tape.value(self.rec.outputs), column)?;
        let mut grads = self.tape.backward(self.rec.outputs, Some(&seed), mode)?;
        let input = grads.take(self.input)?;
        let tap = match self.rec.tap {
            Some(t) => Some(grads.take(t)?),
            None => None,
        };
        Ok((input, tap))
    }
}

/// Evaluates the attributed scalar for each image.
pub fn evaluate<D: Differentiable + ?Sized>(f: &D, images: &[&Tensor]) -> Result<Vec<f64>> {
    Ok(Session::run(f, images, false)?.values(f.column()))
}

/// Gradient of the attributed scalar with respect to the image.
pub fn gradient<D: Differentiable + ?Sized>(f: &D, image: &Tensor) -> Result<Tensor> {
    let shape = map_shape(image)?;
    let s = Session::run(f, &[image], true)?;
    Ok(s.backward(f.column(), BackwardMode::Standard)?.0.reshape(shape)?)
}

/// Coarse and input-sized Grad-CAM maps.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCam {
    /// `[h, w]` map at the tap resolution.
    pub coarse: Tensor,
    /// `[H, W]` bilinear upsampling of `coarse`.
    pub upsampled: Tensor,
}

/// `ReLU(sum_k alpha_k * A_k)` for activations `[K, h, w]` and one weight per map.
pub fn grad_cam_from_parts(activations: &Tensor, alphas: &[f64]) -> Result<Tensor> {
    let (k, h, w) = match activations.shape() {
        [k, h, w] => (*k, *h, *w),
        s => return Err(AttributionError::ShapeMismatch(format!("activations {s:?}, expected [K,h,w]"))),
    };
    if alphas.len() != k {
        return Err(AttributionError::ShapeMismatch(format!("{} weights for {k} maps", alphas.len())));
    }
    let a = activations.data();
    let plane = h * w;
    Ok(Tensor::from_fn([h, w], |p| {
        alphas.iter().enumerate().map(|(c, &alpha)| alpha * a[c * plane + p]).sum::<f64>().max(0.0)
    }))
}

/// Bilinear resize of an `[h, w]` map with half-pixel centres and edge clamping.
pub fn upsample_bilinear(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        s => return Err(AttributionError::ShapeMismatch(format!("map {s:?}, expected [h,w]"))),
    };
    if out_h == 0 || out_w == 0 {
        return Err(AttributionError::ShapeMismatch("empty output size".into()));
    }
    let src = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let d = map.data();
    Ok(Tensor::from_fn([out_h, out_w], |i| {
        let (y0, y1, fy) = src(i / out_w, out_h, h);
        let (x0, x1, fx) = src(i % out_w, out_w, w);
        let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
        let bottom = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

fn grad_cam_from_session(s: &Session, tap_grad: Option<Tensor>, out: &[usize]) -> Result<GradCam> {
    let tap = s.rec.tap.ok_or(AttributionError::MissingTap)?;
    let grad = tap_grad.ok_or(AttributionError::MissingTap)?;
    let acts = s.tape.value(tap);
    let (k, h, w) = match acts.shape() {
        [1, k, h, w] => (*k, *h, *w),
        sh => return Err(AttributionError::ShapeMismatch(format!("tap {sh:?}, expected [1,K,h,w]"))),
    };
    let plane = h * w;
    let alphas: Vec<f64> = grad.data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
    let coarse = grad_cam_from_parts(&acts.reshape([k, h, w])?, &alphas)?;
    let upsampled = upsample_bilinear(&coarse, out[0], out[1])?;
    Ok(GradCam { coarse, upsampled })
}

pub fn grad_cam<D: Differentiable + ?Sized>(f: &D, image: &Tensor) -> Result<GradCam> {
    let shape = map_shape(image)?;
    let s = Session::run(f, &[image], true)?;
    if s.rec.tap.is_none() {
        return Err(AttributionError::MissingTap);
    }
    let (_, tap_grad) = s.backward(f.column(), BackwardMode::Standard)?;
    grad_cam_from_session(&s, tap_grad, &shape)
}

/// Guided-mode gradient of the target with respect to the gray image.
pub fn guided_backprop<D: Differentiable + ?Sized>(f: &D, image: &Tensor) -> Result<Tensor> {
    let shape = map_shape(image)?;
    let s = Session::run(f, &[image], true)?;
    Ok(s.backward(f.column(), BackwardMode::Guided)?.0.reshape(shape)?)
}

/// Elementwise product of the upsampled Grad-CAM map and the guided-backprop map.
pub fn guided_grad_cam<D: Differentiable + ?Sized>(f: &D, image: &Tensor) -> Result<AttributionMap> {
    let shape = map_shape(image)?;
    let s = Session::run(f, &[image], true)?;
    let (_, tap_grad) = s.backward(f.column(), BackwardMode::Standard)?;
    let cam = grad_cam_from_session(&s, tap_grad, &shape)?;
    let guided = s.backward(f.column(), BackwardMode::Guided)?.0.reshape(shape)?;
    Ok(AttributionMap {
        values: cam.upsampled.zip_map(&guided, |a, b| a * b)?,
        method: Method::GuidedGradCam,
        target: f.target(),
        baseline: "none".into(),
        samples: 1,
        completeness_residual: None,
        checks: Vec::new(),
    })
}

/// Midpoint-rule Integrated Gradients along the straight path from a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntegratedGradients {
    pub steps: usize,
    /// Path points per recorded batch.
    pub batch: usize,
}

impl Default for IntegratedGradients {
    fn default() -> Self {
        Self { steps: 256, batch: 16 }
    }
}

impl IntegratedGradients {
    pub fn with_steps(steps: usize) -> Self {
        Self { steps, ..Self::default() }
    }

    pub fn attribute<D: Differentiable + ?Sized>(
        &self,
        f: &D,
        image: &Tensor,
        baseline: &Tensor,
    ) -> Result<AttributionMap> {
        if self.steps == 0 {
            return Err(AttributionError::InvalidSteps);
        }
        let shape = map_shape(image)?;
        if baseline.shape() != image.shape() {
            return Err(AttributionError::ShapeMismatch(format!(
                "baseline {:?} vs image {:?}",
                baseline.shape(),
                image.shape()
            )));
        }
        let m = self.steps;
        let diff = image.zip_map(baseline, |x, b| x - b)?;
        let batch = self.batch.max(1);
        let chunks: Vec<Vec<f64>> = (0..m.div_ceil(batch))
            .into_par_iter()
            .map(|c| -> Result<Vec<f64>> {
                let points: Vec<Tensor> = (c * batch..((c + 1) * batch).min(m))
                    .map(|k| {
                        let alpha = (k as f64 + 0.5) / m as f64;
                        baseline.zip_map(&diff, |b, d| b + alpha * d)
                    })
                    .collect::<Result<_, _>>()?;
                let refs: Vec<&Tensor> = points.iter().collect();
                let s = Session::run(f, &refs, true)?;
                let (g, _) = s.backward(f.column(), BackwardMode::Standard)?;
                let n = image.numel();
                let mut sum = vec![0.0; n];
                for row in g.data().chunks(n) {
                    sum.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                Ok(sum)
            })
            .collect::<Result<_>>()?;
        let mut total = vec![0.0; image.numel()];
        for c in &chunks {
            total.iter_mut().zip(c).for_each(|(a, v)| *a += v);
        }
        let values: Vec<f64> = total.iter().zip(diff.data()).map(|(g, d)| d * g / m as f64).collect();
        let ends = evaluate(f, &[image, baseline])?;
        let delta = ends[0] - ends[1];
        let residual = values.iter().sum::<f64>() - delta;
        Ok(AttributionMap {
            values: Tensor::new(shape, values)?,
            method: Method::IntegratedGradients,
            target: f.target(),
            baseline: if baseline.data().iter().all(|&v| v == 0.0) { "zero".into() } else { "provided".into() },
            samples: m,
            completeness_residual: Some(residual.abs()),
            checks: vec![SummationCheck { delta, residual }],
        })
    }
}

/// Deep SHAP: Rescale-rule multipliers against each background, averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeepShap {
    /// Backgrounds per recorded batch.
    pub batch: usize,
}

impl Default for DeepShap {
    fn default() -> Self {
        Self { batch: 8 }
    }
}

impl DeepShap {
    pub fn attribute<D: Differentiable + ?Sized>(
        &self,
        f: &D,
        image: &Tensor,
        backgrounds: &BaselineSet,
    ) -> Result<AttributionMap> {
        let shape = map_shape(image)?;
        let bg = backgrounds.inputs();
        if bg.is_empty() {
            return Err(AttributionError::EmptyBackgrounds);
        }
        if bg[0].shape() != image.shape() {
            return Err(AttributionError::ShapeMismatch(format!(
                "background {:?} vs image {:?}",
                bg[0].shape(),
                image.shape()
            )));
        }
        let n = image.numel();
        let batch = self.batch.max(1);
        let parts: Vec<(Vec<f64>, Vec<SummationCheck>)> = bg
            .par_chunks(batch)
            .map(|chunk| -> Result<(Vec<f64>, Vec<SummationCheck>)> {
                let xs: Vec<&Tensor> = vec![image; chunk.len()];
                let refs: Vec<&Tensor> = chunk.iter().collect();
                let actual = Session::run(f, &xs, true)?;
                let reference = Session::run(f, &refs, false)?;
                let (mult, _) = actual.backward(f.column(), BackwardMode::Rescale(&reference.tape))?;
                let (fx, fb) = (actual.values(f.column()), reference.values(f.column()));
                let mut sum = vec![0.0; n];
                let mut checks = Vec::with_capacity(chunk.len());
                for (j, b) in chunk.iter().enumerate() {
                    let m = &mult.data()[j * n..][..n];
                    let mut total = 0.0;
                    for (((a, &mi), &xi), &bi) in sum.iter_mut().zip(m).zip(image.data()).zip(b.data()) {
                        let v = (xi - bi) * mi;
                        *a += v;
                        total += v;
                    }
                    let delta = fx[j] - fb[j];
                    checks.push(SummationCheck { delta, residual: total - delta });
                }
                Ok((sum, checks))
            })
            .collect::<Result<_>>()?;
        let mut total = vec![0.0; n];
        let mut checks = Vec::with_capacity(bg.len());
        for (s, c) in parts {
            total.iter_mut().zip(&s).for_each(|(a, v)| *a += v);
            checks.extend(c);
        }
        let k = bg.len() as f64;
        let mean_residual = checks.iter().map(|c| c.residual.abs()).sum::<f64>() / k;
        Ok(AttributionMap {
            values: Tensor::new(shape, total.into_iter().map(|v| v / k).collect())?,
            method: Method::DeepShap,
            target: f.target(),
            baseline: backgrounds.describe(),
            samples: bg.len(),
            completeness_residual: Some(mean_residual),
            checks,
        })
    }
}

/// Sliding-patch occlusion: each pixel gets the mean drop `f(x) - f(x
/// occluded)` over the patches covering it. The last patch in each direction
/// is aligned to the image edge so every pixel is covered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occlusion {
    pub patch: usize,
    pub stride: usize,
    pub fill: f64,
    pub batch: usize,
}

impl Occlusion {
    pub fn new(patch: usize, stride: usize) -> Self {
        Self { patch, stride, fill: 0.0, batch: 16 }
    }

    fn offsets(&self, extent: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..=extent - self.patch).step_by(self.stride).collect();
        if *v.last().unwrap() != extent - self.patch {
            v.push(extent - self.patch);
        }
        v
    }

    pub fn attribute<D: Differentiable + ?Sized>(&self, f: &D, image: &Tensor) -> Result<Tensor> {
        let shape = map_shape(image)?;
        let (h, w) = (shape[0], shape[1]);
        if self.stride == 0 {
            return Err(AttributionError::InvalidPatch("stride must be positive".into()));
        }
        if self.patch == 0 || self.patch > h || self.patch > w {
            return Err(AttributionError::InvalidPatch(format!("patch {} for a {h}x{w} image", self.patch)));
        }
        let positions: Vec<(usize, usize)> =
            self.offsets(h).into_iter().flat_map(|y| self.offsets(w).into_iter().map(move |x| (y, x))).collect();
        let base = evaluate(f, &[image])?[0];
        let p = self.patch;
        let drops: Vec<Vec<f64>> = positions
            .par_chunks(self.batch.max(1))
            .map(|chunk| -> Result<Vec<f64>> {
                let occluded: Vec<Tensor> = chunk
                    .iter()
                    .map(|&(y0, x0)| {
                        let d = image.data();
                        Tensor::from_fn([1, h, w], |i| {
                            let (y, x) = (i / w, i % w);
                            if (y0..y0 + p).contains(&y) && (x0..x0 + p).contains(&x) {
                                self.fill
                            } else {
                                d[i]
                            }
                        })
                    })
                    .collect();
                let refs: Vec<&Tensor> = occluded.iter().collect();
                Ok(evaluate(f, &refs)?.into_iter().map(|v| base - v).collect())
            })
            .collect::<Result<_>>()?;
        let mut sum = vec![0.0; h * w];
        let mut count = vec![0u32; h * w];
        for (&(y0, x0), drop) in positions.iter().zip(drops.iter().flatten()) {
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    sum[y * w + x] += drop;
                    count[y * w + x] += 1;
                }
            }
        }
        let values = sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
        Ok(Tensor::new(shape, values)?)
    }
}

/// Fraction of total absolute attribution inside `mask` (same shape as `map`).
pub fn mass_in_region(map: &Tensor, mask: &[bool]) -> Result<f64> {
    if mask.len() != map.numel() {
        return Err(AttributionError::ShapeMismatch(format!("mask {} vs map {}", mask.len(), map.numel())));
    }
    let total: f64 = map.data().iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = map.data().iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v.abs()).sum();
    Ok(inside / total)
}

/// Spearman rank correlation (average ranks for ties).
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}
