//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use chrono::{Duration, TimeZone, Utc};
use flarecast::catalog::{FlareEvent, Label, Timestamp};
use flarecast::tensor::{BackwardMode, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_MAX_RELATIVE_ERROR: f64 = 1e-4;
/// Gradient magnitudes below this are compared in absolute terms.
pub const FD_SCALE_FLOOR: f64 = 1e-3;
/// Coordinates probed per input tensor.
pub const FD_PROBES: usize = 96;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks stay out of finite-difference reach.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.01 apart, so pooling windows never tie.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

impl GradCase {
    fn new(name: String, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> Self {
        Self { name, inputs, build: Box::new(build) }
    }

    /// Scalar objective: the op output itself if scalar, otherwise its
    /// inner product with a fixed random weighting.
    fn objective(&self, tape: &mut Tape, leaves: &[Var]) -> Var {
        let out = (self.build)(tape, leaves);
        if tape.value(out).numel() == 1 && tape.value(out).ndim() == 0 {
            return out;
        }
        let shape = tape.value(out).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
        let r = tape.leaf(uniform(&mut rng, &shape, -1.0, 1.0), false);
        let prod = tape.mul(out, r).unwrap();
        tape.sum(prod).unwrap()
    }

    fn value_at(&self, inputs: &[Tensor]) -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let y = self.objective(&mut tape, &leaves);
        tape.value(y).data()[0]
    }

    /// Largest relative disagreement between the tape gradient and central
    /// differences over up to [`FD_PROBES`] coordinates of every input.
    pub fn max_relative_error(&self) -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = self.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let y = self.objective(&mut tape, &leaves);
        let grads = tape.backward(y, None, BackwardMode::Standard).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst = 0.0f64;
        for (k, leaf) in leaves.iter().enumerate() {
            let analytic = grads.wrt(*leaf).unwrap().data().to_vec();
            let n = self.inputs[k].numel();
            let mut coords: Vec<usize> = (0..n).collect();
            coords.shuffle(&mut rng);
            coords.truncate(FD_PROBES);
            for &i in &coords {
                let mut probe = self.inputs.clone();
                let base = self.inputs[k].data()[i];
                let mut shifted = |delta: f64| {
                    let mut d = self.inputs[k].data().to_vec();
                    d[i] = base + delta;
                    probe[k] = Tensor::new(self.inputs[k].shape().to_vec(), d).unwrap();
                    self.value_at(&probe)
                };
                let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
                let a = analytic[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_SCALE_FLOOR);
                worst = worst.max(err);
            }
        }
        worst
    }
}

/// At least twenty randomly shaped cases covering every differentiable op.
pub fn gradient_suite(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for _ in 0..4 {
        let n = rng.random_range(1..=2);
        let cin = rng.random_range(1..=3);
        let cout = rng.random_range(1..=4);
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let padding = rng.random_range(0..=1).min(k / 2);
        let h = (rng.random_range(2..=4) - 1) * stride + k - 2 * padding;
        let w = (rng.random_range(2..=4) - 1) * stride + k - 2 * padding;
        cases.push(GradCase::new(
            format!("conv2d n{n} c{cin}->{cout} k{k} s{stride} p{padding} {h}x{w}"),
            vec![
                uniform(&mut rng, &[n, cin, h, w], -1.0, 1.0),
                uniform(&mut rng, &[cout, cin, k, k], -1.0, 1.0),
                uniform(&mut rng, &[cout], -1.0, 1.0),
            ],
            move |t, v| t.conv2d(v[0], v[1], v[2], stride, padding).unwrap(),
        ));
    }
    for _ in 0..2 {
        let shape =
            [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(2..=6), rng.random_range(2..=6)];
        cases.push(GradCase::new(format!("relu {shape:?}"), vec![off_zero(&mut rng, &shape)], |t, v| {
            t.relu(v[0]).unwrap()
        }));
    }
    for (kernel, stride) in [(2, 2), (3, 1), (2, 1)] {
        let h = kernel + stride * rng.random_range(1..=3);
        let w = kernel + stride * rng.random_range(1..=3);
        let shape = [rng.random_range(1..=2), rng.random_range(1..=3), h, w];
        cases.push(GradCase::new(
            format!("max_pool2d k{kernel} s{stride} {shape:?}"),
            vec![spread(&mut rng, &shape)],
            move |t, v| t.max_pool2d(v[0], kernel, stride).unwrap(),
        ));
    }
    for _ in 0..2 {
        let (h, w) = (rng.random_range(3..=9), rng.random_range(3..=9));
        let (oh, ow) = (rng.random_range(1..=h.min(4)), rng.random_range(1..=w.min(4)));
        let shape = [2, rng.random_range(1..=3), h, w];
        cases.push(GradCase::new(
            format!("adaptive_avg_pool2d {shape:?} -> {oh}x{ow}"),
            vec![uniform(&mut rng, &shape, -1.0, 1.0)],
            move |t, v| t.adaptive_avg_pool2d(v[0], oh, ow).unwrap(),
        ));
    }
    for _ in 0..3 {
        let (n, fin, fout) = (rng.random_range(1..=4), rng.random_range(1..=12), rng.random_range(1..=6));
        cases.push(GradCase::new(
            format!("linear n{n} {fin}->{fout}"),
            vec![
                uniform(&mut rng, &[n, fin], -1.0, 1.0),
                uniform(&mut rng, &[fout, fin], -1.0, 1.0),
                uniform(&mut rng, &[fout], -1.0, 1.0),
            ],
            |t, v| t.linear(v[0], v[1], v[2]).unwrap(),
        ));
    }
    for _ in 0..2 {
        let shape = [rng.random_range(1..=4), rng.random_range(2..=5)];
        cases.push(GradCase::new(
            format!("log_softmax {shape:?}"),
            vec![uniform(&mut rng, &shape, -3.0, 3.0)],
            |t, v| t.log_softmax(v[0]).unwrap(),
        ));
    }
    for _ in 0..2 {
        let (n, c) = (rng.random_range(1..=6), rng.random_range(2..=3));
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let weights: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..3.0)).collect();
        cases.push(GradCase::new(
            format!("log_softmax+nll_loss n{n} c{c}"),
            vec![uniform(&mut rng, &[n, c], -2.0, 2.0)],
            move |t, v| {
                let lp = t.log_softmax(v[0]).unwrap();
                t.nll_loss(lp, &targets, &weights).unwrap()
            },
        ));
    }
    {
        let shape = [2, 1, rng.random_range(2..=5), rng.random_range(2..=5)];
        cases.push(GradCase::new(
            format!("channel_duplicate {shape:?}"),
            vec![uniform(&mut rng, &shape, -1.0, 1.0)],
            |t, v| t.channel_duplicate(v[0], 3).unwrap(),
        ));
    }
    {
        let shape = [2, 3, 4];
        cases.push(GradCase::new(
            "reshape+flatten [2,3,4]".into(),
            vec![uniform(&mut rng, &shape, -1.0, 1.0)],
            |t, v| {
                let r = t.reshape(v[0], &[4, 3, 2]).unwrap();
                t.flatten(r).unwrap()
            },
        ));
    }
    {
        let shape = [rng.random_range(1..=4), rng.random_range(1..=5)];
        cases.push(GradCase::new(
            format!("add+mul+scale {shape:?}"),
            vec![uniform(&mut rng, &shape, -1.0, 1.0), uniform(&mut rng, &shape, -1.0, 1.0)],
            |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let p = t.mul(s, v[0]).unwrap();
                t.scale(p, -1.7).unwrap()
            },
        ));
    }
    {
        let shape = [3, 4];
        let index = rng.random_range(0..12);
        cases.push(GradCase::new(
            format!("select {index} + sum"),
            vec![uniform(&mut rng, &shape, -1.0, 1.0)],
            move |t, v| {
                let sq = t.mul(v[0], v[0]).unwrap();
                let a = t.select(sq, index).unwrap();
                let b = t.sum(sq).unwrap();
                t.add(a, b).unwrap()
            },
        ));
    }
    {
        // a small conv net end to end, gradients for input and every parameter
        let x = off_zero(&mut rng, &[2, 1, 6, 6]);
        let inputs = vec![
            x,
            uniform(&mut rng, &[3, 1, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[3], -0.1, 0.1),
            uniform(&mut rng, &[2, 12], -1.0, 1.0),
            uniform(&mut rng, &[2], -0.1, 0.1),
        ];
        cases.push(GradCase::new("conv-relu-pool-linear-logsoftmax".into(), inputs, |t, v| {
            let c = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
            let r = t.relu(c).unwrap();
            let p = t.adaptive_avg_pool2d(r, 2, 2).unwrap();
            let f = t.flatten(p).unwrap();
            let l = t.linear(f, v[3], v[4]).unwrap();
            let lp = t.log_softmax(l).unwrap();
            t.nll_loss(lp, &[0, 1], &[1.0, 2.0]).unwrap()
        }));
    }
    cases
}

pub fn hour(h: i64) -> Timestamp {
    Utc.with_ymd_and_hms(2014, 1, 1, 0, 0, 0).unwrap() + Duration::hours(h)
}

/// Random events within `hours` of the 2014 epoch, with deliberate flux and
/// peak-time collisions.
pub fn random_events(rng: &mut ChaCha8Rng, count: usize, hours: i64) -> Vec<FlareEvent> {
    const FLUXES: [f64; 8] = [1e-6, 5e-6, 9.9e-6, 1e-5, 1e-5, 2.5e-5, 1e-4, 3e-4];
    (0..count)
        .map(|_| {
            let peak = hour(0) + Duration::minutes(rng.random_range(0..hours * 60) / 15 * 15);
            let flux = FLUXES[rng.random_range(0..FLUXES.len())];
            let lat = rng.random_range(-40.0..40.0);
            let lon = rng.random_range(-90.0..90.0);
            FlareEvent::new(peak, flux, lat, lon).unwrap()
        })
        .collect()
}

/// Brute-force labelling: scan every event in catalog order. Returns the
/// label, the responsible event's position in `events`, and the tie flag.
pub fn label_by_scan(
    events: &[FlareEvent],
    t: Timestamp,
    window: Duration,
    threshold: f64,
) -> (Label, Option<usize>, bool) {
    let inside: Vec<usize> =
        (0..events.len()).filter(|&i| events[i].peak_time >= t && events[i].peak_time < t + window).collect();
    let Some(max) = inside.iter().map(|&i| events[i].peak_flux).reduce(f64::max) else {
        return (Label::Nf, None, false);
    };
    let at_max: Vec<usize> = inside.iter().copied().filter(|&i| events[i].peak_flux == max).collect();
    let chosen = *at_max.iter().min_by_key(|&&i| (events[i].peak_time, i)).unwrap();
    let label = if max >= threshold { Label::Fl } else { Label::Nf };
    (label, Some(chosen), at_max.len() > 1)
}

/// Confusion counts by direct enumeration: `(tp, fp, tn, fn)`.
pub fn count_outcomes(pairs: &[(Label, Label)]) -> (u64, u64, u64, u64) {
    let n = |truth: Label, pred: Label| pairs.iter().filter(|p| **p == (truth, pred)).count() as u64;
    (n(Label::Fl, Label::Fl), n(Label::Nf, Label::Fl), n(Label::Nf, Label::Nf), n(Label::Fl, Label::Nf))
}

pub fn tss_reference(tp: u64, fp: u64, tn: u64, fn_: u64) -> Option<f64> {
    let (p, n) = (tp + fn_, fp + tn);
    (p > 0 && n > 0).then(|| tp as f64 / p as f64 - fp as f64 / n as f64)
}

pub fn hss_reference(tp: u64, fp: u64, tn: u64, fn_: u64) -> Option<f64> {
    let (tp, fp, tn, fn_) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
    let den = (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn);
    (den != 0.0).then(|| 2.0 * (tp * tn - fn_ * fp) / den)
}

/// Partition by month, written out as a lookup table.
pub fn partition_of_month(month: u32) -> u8 {
    [1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4][month as usize - 1]
}
