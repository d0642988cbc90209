//! Attribution runs for one image, with a log of the checked properties.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::attribution::{
    self, AttributionMap, BaselineSet, ClassLogit, DeepShap, IntegratedGradients, Occlusion, SummationCheck,
    IG_ABSOLUTE_FLOOR, IG_RELATIVE_TOLERANCE, SHAP_ABSOLUTE_FLOOR, SHAP_RELATIVE_TOLERANCE,
};
use crate::catalog::Label;
use crate::model::Model;
use crate::tensor::{self, Dtype, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainMethod {
    Ggcam,
    Ig,
    Deepshap,
    Occlusion,
}

impl FromStr for ExplainMethod {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ggcam" => Ok(Self::Ggcam),
            "ig" => Ok(Self::Ig),
            "deepshap" => Ok(Self::Deepshap),
            "occlusion" => Ok(Self::Occlusion),
            other => Err(PipelineError::Config(format!(
                "unknown method `{other}` (expected ggcam, ig, deepshap or occlusion)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExplainOptions {
    pub method: ExplainMethod,
    pub target: Label,
    pub steps: usize,
    /// Baseline for IG (first entry) and backgrounds for Deep SHAP; zero image if absent.
    pub backgrounds: Option<BaselineSet>,
    pub patch: usize,
    pub stride: usize,
    pub top_k: usize,
}

impl ExplainOptions {
    pub fn new(method: ExplainMethod, target: Label) -> Self {
        Self { method, target, steps: 256, backgrounds: None, patch: 8, stride: 4, top_k: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub delta: f64,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopPixel {
    pub y: usize,
    pub x: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyLog {
    pub method: ExplainMethod,
    pub target: Label,
    pub f_input: f64,
    /// Target value at each reference input.
    pub f_baseline: Vec<f64>,
    pub completeness_residual: Option<f64>,
    pub checks: Vec<CheckEntry>,
    pub top: Vec<TopPixel>,
    pub passed: bool,
}

fn entries(checks: &[SummationCheck], rel: f64, abs: f64) -> Vec<CheckEntry> {
    checks
        .iter()
        .map(|c| CheckEntry {
            delta: c.delta,
            residual: c.residual,
            tolerance: rel * c.delta.abs() + abs,
            pass: c.holds(rel, abs),
        })
        .collect()
}

/// Largest `k` attributions by magnitude, ties broken by position.
pub fn top_pixels(values: &Tensor, k: usize) -> Vec<TopPixel> {
    let w = values.shape()[values.ndim() - 1];
    let d = values.data();
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[b].abs().total_cmp(&d[a].abs()).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| TopPixel { y: i / w, x: i % w, value: d[i] }).collect()
}

/// Runs one attribution method on a `[1, H, W]` image.
pub fn explain(model: &Model, image: &Tensor, opts: &ExplainOptions) -> Result<(Tensor, PropertyLog)> {
    let f = ClassLogit::new(model, opts.target);
    let refs = match &opts.backgrounds {
        Some(b) => b.clone(),
        None => BaselineSet::zero(image.shape()),
    };
    let f_input = attribution::evaluate(&f, &[image])?[0];
    let f_baseline = attribution::evaluate(&f, &refs.inputs().iter().collect::<Vec<_>>())?;
    let (values, residual, checks): (Tensor, Option<f64>, Vec<CheckEntry>) = match opts.method {
        ExplainMethod::Ggcam => (attribution::guided_grad_cam(&f, image)?.values, None, Vec::new()),
        ExplainMethod::Ig => {
            let map: AttributionMap =
                IntegratedGradients::with_steps(opts.steps).attribute(&f, image, &refs.inputs()[0])?;
            let c = entries(&map.checks, IG_RELATIVE_TOLERANCE, IG_ABSOLUTE_FLOOR);
            (map.values, map.completeness_residual, c)
        }
        ExplainMethod::Deepshap => {
            let map = DeepShap::default().attribute(&f, image, &refs)?;
            let c = entries(&map.checks, SHAP_RELATIVE_TOLERANCE, SHAP_ABSOLUTE_FLOOR);
            (map.values, map.completeness_residual, c)
        }
        ExplainMethod::Occlusion => {
            let occ = Occlusion::new(opts.patch, opts.stride);
            (occ.attribute(&f, image)?, None, Vec::new())
        }
    };
    let passed = checks.iter().all(|c| c.pass) && values.is_finite();
    let log = PropertyLog {
        method: opts.method,
        target: opts.target,
        f_input,
        f_baseline: match opts.method {
            ExplainMethod::Ig => f_baseline.into_iter().take(1).collect(),
            _ => f_baseline,
        },
        completeness_residual: residual,
        checks,
        top: top_pixels(&values, opts.top_k),
        passed,
    };
    Ok((values, log))
}

/// Output files written by [`write_outputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainFiles {
    pub raster: PathBuf,
    pub overlay: PathBuf,
    pub log: PathBuf,
}

/// Writes `<stem>.raster` (f64), `<stem>.png` (overlay) and `<stem>.json`.
pub fn write_outputs(
    dir: &Path,
    stem: &str,
    image: &Tensor,
    values: &Tensor,
    log: &PropertyLog,
) -> Result<ExplainFiles> {
    std::fs::create_dir_all(dir)?;
    let files = ExplainFiles {
        raster: dir.join(format!("{stem}.raster")),
        overlay: dir.join(format!("{stem}.png")),
        log: dir.join(format!("{stem}.json")),
    };
    tensor::write_raster(&mut BufWriter::new(File::create(&files.raster)?), values, Dtype::F64)?;
    attribution::write_overlay_png(&files.overlay, image, values)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(&files.log)?), log)?;
    Ok(files)
}
