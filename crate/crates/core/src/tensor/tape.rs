use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Below this absolute input difference the rescale rule falls back to the
/// ordinary local derivative.
pub const RESCALE_DELTA: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How nonlinearities are treated during the backward walk.
#[derive(Debug, Clone, Copy)]
pub enum BackwardMode<'a> {
    Standard,
    /// ReLU passes `g * 1[x > 0] * 1[g > 0]`.
    Guided,
    /// Multipliers relative to the reference pass recorded on the given tape,
    /// which must come from the same sequence of operations.
    Rescale(&'a Tape),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    Relu { input: Var },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    AdaptiveAvgPool2d { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    LogSoftmax { input: Var },
    NllLoss { input: Var, targets: Vec<usize>, weights: Vec<f64>, total: f64 },
    ChannelDuplicate { input: Var, copies: usize },
    Reshape { input: Var },
    Add { lhs: Var, rhs: Var },
    Mul { lhs: Var, rhs: Var },
    Scale { input: Var, factor: f64 },
    Sum { input: Var },
    Select { input: Var, index: usize },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::AdaptiveAvgPool2d { .. } => "adaptive_avg_pool2d",
            Op::Linear { .. } => "linear",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::NllLoss { .. } => "nll_loss",
            Op::ChannelDuplicate { .. } => "channel_duplicate",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Select { .. } => "select",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Linear record of a forward computation. Nodes are appended in execution
/// order, so every node's inputs precede it.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward walk: one gradient per variable that requires one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seeded output with respect to `var`. Variables that
    /// do not require gradients, or were recorded after the output, are
    /// detached.
    pub fn wrt(&self, var: Var) -> Result<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref).ok_or(TensorError::Detached(var.0))
    }

    pub fn take(&mut self, var: Var) -> Result<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take).ok_or(TensorError::Detached(var.0))
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Only leaves created with `requires_grad` (and
    /// everything computed from them) receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(var.0))
        }
    }

    fn record(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var]) -> Result<Var> {
        let kind = op.kind();
        let value = Tensor::from_parts(shape, data).check_finite(kind)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, value, rg))
    }

    /// 2-D cross-correlation with zero padding. `input` is `[N,C,H,W]`,
    /// `weight` is `[K,C,kh,kw]` and `bias` is `[K]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let (xs, ws, bs) = (self.value(input).shape(), self.value(weight).shape(), self.value(bias).shape());
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(mismatch("conv2d", format!("input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        if ws[1] != xs[1] || bs[0] != ws[0] {
            return Err(mismatch("conv2d", format!("input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument { op: "conv2d", detail: "stride must be positive".into() });
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw {
            return Err(mismatch("conv2d", format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}")));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(TensorError::InexactOutput {
                op: "conv2d",
                detail: format!("({ph}-{kh})/{stride} or ({pw}-{kw})/{stride} is fractional"),
            });
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h,
            w,
            k: ws[0],
            kh,
            kw,
            stride,
            pad: padding,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        let shape = vec![geom.n, geom.k, geom.oh, geom.ow];
        self.record(Op::Conv2d { input, weight, bias, geom }, shape, data, &[input, weight, bias])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        self.record(Op::Relu { input }, shape, data, &[input])
    }

    /// Max pooling over the last two axes of a 4-D input (floor semantics).
    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.check(input)?;
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 || kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(mismatch("max_pool2d", format!("input {xs:?} with kernel {kernel}, stride {stride}")));
        }
        let (data, argmax, oh, ow) =
            kernels::max_pool2d_forward(self.value(input).data(), xs[0] * xs[1], xs[2], xs[3], kernel, stride);
        self.record(Op::MaxPool2d { input, argmax }, vec![xs[0], xs[1], oh, ow], data, &[input])
    }

    /// Adaptive average pooling of a 4-D input to `out_h x out_w`.
    pub fn adaptive_avg_pool2d(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check(input)?;
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 || out_h == 0 || out_w == 0 || xs[2] < out_h || xs[3] < out_w {
            return Err(mismatch("adaptive_avg_pool2d", format!("input {xs:?} cannot pool to {out_h}x{out_w}")));
        }
        let data =
            kernels::adaptive_avg_pool2d_forward(self.value(input).data(), xs[0] * xs[1], xs[2], xs[3], out_h, out_w);
        self.record(Op::AdaptiveAvgPool2d { input }, vec![xs[0], xs[1], out_h, out_w], data, &[input])
    }

    /// Fully connected layer: `input` `[N,in]`, `weight` `[out,in]`, `bias` `[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let (xs, ws, bs) = (self.value(input).shape(), self.value(weight).shape(), self.value(bias).shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[1] || bs[0] != ws[0] {
            return Err(mismatch("linear", format!("input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let data = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            fin,
            fout,
        );
        self.record(Op::Linear { input, weight, bias }, vec![n, fout], data, &[input, weight, bias])
    }

    /// Row-wise log-softmax over the last axis of a 2-D input.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let xs = x.shape().to_vec();
        if xs.len() != 2 {
            return Err(mismatch("log_softmax", format!("expected [N, C], got {xs:?}")));
        }
        let c = xs[1];
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        self.record(Op::LogSoftmax { input }, xs, data, &[input])
    }

    /// Weighted negative log-likelihood, normalised by the sum of the weights
    /// applied to each sample.
    pub fn nll_loss(&mut self, log_probs: Var, targets: &[usize], class_weights: &[f64]) -> Result<Var> {
        self.check(log_probs)?;
        let lp = self.value(log_probs);
        let ls = lp.shape();
        if ls.len() != 2 || ls[0] != targets.len() || class_weights.len() != ls[1] {
            return Err(mismatch(
                "nll_loss",
                format!("log_probs {ls:?}, {} targets, {} weights", targets.len(), class_weights.len()),
            ));
        }
        if class_weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(TensorError::InvalidArgument { op: "nll_loss", detail: "class weights must be > 0".into() });
        }
        let c = ls[1];
        let mut num = 0.0;
        let mut total = 0.0;
        for (n, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::TargetOutOfRange { target: t, classes: c });
            }
            let w = class_weights[t];
            num -= w * lp.data()[n * c + t];
            total += w;
        }
        let op = Op::NllLoss { input: log_probs, targets: targets.to_vec(), weights: class_weights.to_vec(), total };
        self.record(op, Vec::new(), vec![num / total], &[log_probs])
    }

    /// Repeats a single-channel input along the channel axis (third from the
    /// end): `[1,H,W] -> [copies,H,W]` or `[N,1,H,W] -> [N,copies,H,W]`.
    pub fn channel_duplicate(&mut self, input: Var, copies: usize) -> Result<Var> {
        self.check(input)?;
        let xs = self.value(input).shape().to_vec();
        if xs.len() < 3 || xs[xs.len() - 3] != 1 || copies == 0 {
            return Err(mismatch("channel_duplicate", format!("expected a single-channel input, got {xs:?}")));
        }
        let plane = xs[xs.len() - 2] * xs[xs.len() - 1];
        let outer: usize = xs[..xs.len() - 3].iter().product();
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(outer * copies * plane);
        for o in 0..outer {
            for _ in 0..copies {
                data.extend_from_slice(&x[o * plane..][..plane]);
            }
        }
        let mut shape = xs;
        let ci = shape.len() - 3;
        shape[ci] = copies;
        self.record(Op::ChannelDuplicate { input, copies }, shape, data, &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        if shape.iter().product::<usize>() != x.numel() || shape.contains(&0) {
            return Err(mismatch("reshape", format!("{:?} -> {shape:?}", x.shape())));
        }
        let data = x.data().to_vec();
        self.record(Op::Reshape { input }, shape.to_vec(), data, &[input])
    }

    /// Collapses all axes after the first: `[N, ...] -> [N, rest]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let xs = self.value(input).shape();
        if xs.is_empty() {
            return Err(mismatch("flatten", "scalar input".into()));
        }
        let n = xs[0];
        let rest = xs[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (shape, data) = self.binary(lhs, rhs, "add", |a, b| a + b)?;
        self.record(Op::Add { lhs, rhs }, shape, data, &[lhs, rhs])
    }

    /// Elementwise product.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (shape, data) = self.binary(lhs, rhs, "mul", |a, b| a * b)?;
        self.record(Op::Mul { lhs, rhs }, shape, data, &[lhs, rhs])
    }

    fn binary(
        &self,
        lhs: Var,
        rhs: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        self.check(lhs)?;
        self.check(rhs)?;
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok((a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|v| v * factor).collect();
        self.record(Op::Scale { input, factor }, shape, data, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let s = self.value(input).sum();
        self.record(Op::Sum { input }, Vec::new(), vec![s], &[input])
    }

    /// Picks one element (flat row-major index) as a scalar.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        if index >= x.numel() {
            return Err(TensorError::InvalidArgument {
                op: "select",
                detail: format!("index {index} out of range for {:?}", x.shape()),
            });
        }
        let v = x.data()[index];
        self.record(Op::Select { input, index }, Vec::new(), vec![v], &[input])
    }

    /// Walks the tape backwards from `output`. A scalar output is seeded with
    /// 1; any other output needs an explicit `seed` of the same shape.
    pub fn backward(&self, output: Var, seed: Option<&Tensor>, mode: BackwardMode<'_>) -> Result<Gradients> {
        self.check(output)?;
        if !self.nodes[output.0].requires_grad {
            return Err(TensorError::Detached(output.0));
        }
        let out_val = self.value(output);
        let seed = match seed {
            Some(s) if s.shape() == out_val.shape() => s.data().to_vec(),
            Some(s) => {
                return Err(mismatch("backward", format!("seed {:?} vs output {:?}", s.shape(), out_val.shape())))
            }
            None if out_val.numel() == 1 => vec![1.0],
            None => return Err(TensorError::NonScalarSeed),
        };
        if let BackwardMode::Rescale(reference) = mode {
            if reference.nodes.len() <= output.0 {
                return Err(TensorError::ReferenceMismatch(format!(
                    "reference has {} nodes, output is node {}",
                    reference.nodes.len(),
                    output.0
                )));
            }
        }

        let end = output.0 + 1;
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; end];
        acc[output.0] = Some(seed);
        for i in (0..end).rev() {
            let Some(g) = acc[i].take() else { continue };
            self.propagate(i, &g, mode, &mut acc)?;
            acc[i] = Some(g);
        }

        let mut grads = Vec::with_capacity(end);
        for (i, g) in acc.into_iter().enumerate() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads.push(None);
                continue;
            }
            let shape = node.value.shape().to_vec();
            let t = match g {
                Some(data) => Tensor::from_parts(shape, data).check_finite("backward")?,
                None => Tensor::zeros(shape),
            };
            grads.push(Some(t));
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], mode: BackwardMode<'_>, acc: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                if needs(input) {
                    let dx = kernels::conv2d_backward_input(g, self.value(*weight).data(), geom);
                    accumulate(acc, *input, dx);
                }
                if needs(weight) || needs(bias) {
                    let (dw, db) = kernels::conv2d_backward_params(g, self.value(*input).data(), geom);
                    if needs(weight) {
                        accumulate(acc, *weight, dw);
                    }
                    if needs(bias) {
                        accumulate(acc, *bias, db);
                    }
                }
            }
            Op::Relu { input } => {
                if needs(input) {
                    let x = self.value(*input).data();
                    let dx: Vec<f64> = match mode {
                        BackwardMode::Standard => {
                            x.iter().zip(g).map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 }).collect()
                        }
                        BackwardMode::Guided => {
                            x.iter().zip(g).map(|(&xv, &gv)| if xv > 0.0 && gv > 0.0 { gv } else { 0.0 }).collect()
                        }
                        BackwardMode::Rescale(reference) => {
                            let xr = reference.reference_input(i, *input, node)?;
                            x.iter()
                                .zip(xr)
                                .zip(g)
                                .map(|((&xv, &rv), &gv)| {
                                    let dxv = xv - rv;
                                    let m = if dxv.abs() > RESCALE_DELTA {
                                        (xv.max(0.0) - rv.max(0.0)) / dxv
                                    } else if xv > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    };
                                    m * gv
                                })
                                .collect()
                        }
                    };
                    accumulate(acc, *input, dx);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if needs(input) {
                    let n_in = self.value(*input).numel();
                    let dx = match mode {
                        BackwardMode::Rescale(reference) => {
                            self.max_pool_rescale(i, *input, node, argmax, g, reference)?
                        }
                        _ => {
                            let mut dx = vec![0.0; n_in];
                            for (&a, &gv) in argmax.iter().zip(g) {
                                dx[a] += gv;
                            }
                            dx
                        }
                    };
                    accumulate(acc, *input, dx);
                }
            }
            Op::AdaptiveAvgPool2d { input } => {
                if needs(input) {
                    let xs = self.value(*input).shape();
                    let os = node.value.shape();
                    let dx = kernels::adaptive_avg_pool2d_backward(g, xs[0] * xs[1], xs[2], xs[3], os[2], os[3]);
                    accumulate(acc, *input, dx);
                }
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.value(*input).shape();
                let (n, fin, fout) = (xs[0], xs[1], node.value.shape()[1]);
                if needs(input) {
                    let dx = kernels::linear_backward_input(g, self.value(*weight).data(), n, fin, fout);
                    accumulate(acc, *input, dx);
                }
                if needs(weight) || needs(bias) {
                    let (dw, db) = kernels::linear_backward_params(g, self.value(*input).data(), n, fin, fout);
                    if needs(weight) {
                        accumulate(acc, *weight, dw);
                    }
                    if needs(bias) {
                        accumulate(acc, *bias, db);
                    }
                }
            }
            Op::LogSoftmax { input } => {
                if needs(input) {
                    let c = node.value.shape()[1];
                    let y = node.value.data();
                    let mut dx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(c).zip(g.chunks(c)) {
                        let gs: f64 = gr.iter().sum();
                        dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| gv - yv.exp() * gs));
                    }
                    accumulate(acc, *input, dx);
                }
            }
            Op::NllLoss { input, targets, weights, total } => {
                if needs(input) {
                    let c = weights.len();
                    let mut dx = vec![0.0; targets.len() * c];
                    for (n, &t) in targets.iter().enumerate() {
                        dx[n * c + t] = -g[0] * weights[t] / total;
                    }
                    accumulate(acc, *input, dx);
                }
            }
            Op::ChannelDuplicate { input, copies } => {
                if needs(input) {
                    let xs = self.value(*input).shape();
                    let plane = xs[xs.len() - 2] * xs[xs.len() - 1];
                    let outer = self.value(*input).numel() / plane;
                    let mut dx = vec![0.0; outer * plane];
                    for o in 0..outer {
                        let d = &mut dx[o * plane..][..plane];
                        for c in 0..*copies {
                            for (t, &s) in d.iter_mut().zip(&g[(o * copies + c) * plane..][..plane]) {
                                *t += s;
                            }
                        }
                    }
                    accumulate(acc, *input, dx);
                }
            }
            Op::Reshape { input } => {
                if needs(input) {
                    accumulate(acc, *input, g.to_vec());
                }
            }
            Op::Add { lhs, rhs } => {
                for v in [lhs, rhs] {
                    if needs(v) {
                        accumulate(acc, *v, g.to_vec());
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.value(*lhs).data(), self.value(*rhs).data());
                if needs(lhs) {
                    accumulate(acc, *lhs, b.iter().zip(g).map(|(bv, gv)| bv * gv).collect());
                }
                if needs(rhs) {
                    accumulate(acc, *rhs, a.iter().zip(g).map(|(av, gv)| av * gv).collect());
                }
            }
            Op::Scale { input, factor } => {
                if needs(input) {
                    accumulate(acc, *input, g.iter().map(|v| v * factor).collect());
                }
            }
            Op::Sum { input } => {
                if needs(input) {
                    accumulate(acc, *input, vec![g[0]; self.value(*input).numel()]);
                }
            }
            Op::Select { input, index } => {
                if needs(input) {
                    let mut dx = vec![0.0; self.value(*input).numel()];
                    dx[*index] = g[0];
                    accumulate(acc, *input, dx);
                }
            }
        }
        Ok(())
    }

    /// Input value of node `i` in this (reference) tape, after checking that
    /// it has the same kind and shape as `node` in the tape being walked.
    fn reference_input(&self, i: usize, input: Var, node: &Node) -> Result<&[f64]> {
        let r = self.nodes.get(i).ok_or_else(|| TensorError::ReferenceMismatch(format!("node {i} missing")))?;
        if r.op.kind() != node.op.kind() || r.value.shape() != node.value.shape() {
            return Err(TensorError::ReferenceMismatch(format!(
                "node {i}: {} {:?} vs {} {:?}",
                node.op.kind(),
                node.value.shape(),
                r.op.kind(),
                r.value.shape()
            )));
        }
        let rin = &self.nodes[input.0].value;
        Ok(rin.data())
    }

    /// Rescale rule for max pooling. Each output difference `y - ry` is split
    /// as `(max(y, ry) - ry) + (y - max(y, ry))`; the first part is routed to
    /// the actual input's argmax and the second to the reference argmax, and
    /// the routed amounts are divided by the input differences there.
    fn max_pool_rescale(
        &self,
        i: usize,
        input: Var,
        node: &Node,
        argmax: &[usize],
        g: &[f64],
        reference: &Tape,
    ) -> Result<Vec<f64>> {
        let xr = reference.reference_input(i, input, node)?;
        let Op::MaxPool2d { argmax: ref_argmax, .. } = &reference.nodes[i].op else {
            unreachable!("kind checked by reference_input");
        };
        let x = self.value(input).data();
        let y = node.value.data();
        let ry = reference.nodes[i].value.data();
        let mut routed = vec![0.0; x.len()];
        let mut plain = vec![0.0; x.len()];
        for o in 0..y.len() {
            let cross = y[o].max(ry[o]);
            routed[argmax[o]] += g[o] * (cross - ry[o]);
            routed[ref_argmax[o]] += g[o] * (y[o] - cross);
            plain[argmax[o]] += g[o];
        }
        Ok(x.iter()
            .zip(xr)
            .enumerate()
            .map(|(j, (&xv, &rv))| {
                let d = xv - rv;
                if d.abs() > RESCALE_DELTA {
                    routed[j] / d
                } else {
                    plain[j]
                }
            })
            .collect())
    }
}

fn accumulate(acc: &mut [Option<Vec<f64>>], var: Var, delta: Vec<f64>) {
    match &mut acc[var.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
