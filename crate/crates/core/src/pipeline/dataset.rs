//! Labelled sample manifests, partition splits and gray image I/O.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};

use super::fetch::{FetchEntry, FetchStatus};
use super::{PipelineError, Result};
use crate::catalog::{self, Catalog, Label, Timestamp};
use crate::tensor::{self, Tensor};

/// One labelled observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub timestamp: Timestamp,
    /// Image path, relative to the image directory unless absolute.
    pub path: String,
    pub label: Label,
    pub partition: u8,
    /// Class letter, latitude and longitude of the responsible flare.
    pub event_class: Option<char>,
    pub hgs_latitude: Option<f64>,
    pub hgs_longitude: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    timestamp: String,
    path: String,
    label: Label,
    partition: u8,
    class: Option<char>,
    lat: Option<f64>,
    lon: Option<f64>,
}

/// Reads a dataset manifest (`timestamp,path,label,partition,class,lat,lon`).
pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<Sample>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<SampleRow>() {
        let row = row.map_err(|e| PipelineError::Manifest {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = out.len() + 2;
        let timestamp = catalog::parse_timestamp(&row.timestamp)
            .map_err(|e| PipelineError::Manifest { line, message: e.to_string() })?;
        if !(1..=4).contains(&row.partition) {
            return Err(PipelineError::Manifest { line, message: format!("partition {} not in 1..=4", row.partition) });
        }
        out.push(Sample {
            timestamp,
            path: row.path,
            label: row.label,
            partition: row.partition,
            event_class: row.class,
            hgs_latitude: row.lat,
            hgs_longitude: row.lon,
        });
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(writer: W, samples: &[Sample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(SampleRow {
            timestamp: catalog::format_timestamp(&s.timestamp),
            path: s.path.clone(),
            label: s.label,
            partition: s.partition,
            class: s.event_class,
            lat: s.hgs_latitude,
            lon: s.hgs_longitude,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn save_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    write_dataset(File::create(path)?, samples)
}

/// One sample per fetched image, labelled from the catalog with the default
/// 24-hour window at the requested time. Missing images are skipped.
pub fn label_images(catalog: &Catalog, images: &[FetchEntry]) -> Vec<Sample> {
    images
        .iter()
        .filter(|e| e.status != FetchStatus::Missing)
        .filter_map(|e| {
            let path = e.path.clone()?;
            let l = catalog.label_default(e.requested);
            Some(Sample {
                timestamp: e.requested,
                path,
                label: l.label,
                partition: catalog::assign_partition(e.requested),
                event_class: l.event.map(|ev| ev.letter()),
                hgs_latitude: l.event.map(|ev| ev.hgs_latitude),
                hgs_longitude: l.event.map(|ev| ev.hgs_longitude),
            })
        })
        .collect()
}

/// Per-partition, per-class sample counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub counts: BTreeMap<u8, BTreeMap<Label, usize>>,
}

impl PartitionCounts {
    pub fn of(samples: &[Sample]) -> Self {
        let mut counts: BTreeMap<u8, BTreeMap<Label, usize>> =
            (1..=4).map(|p| (p, Label::ALL.iter().map(|&l| (l, 0)).collect())).collect();
        for s in samples {
            *counts.entry(s.partition).or_default().entry(s.label).or_default() += 1;
        }
        Self { counts }
    }

    pub fn get(&self, partition: u8, label: Label) -> usize {
        self.counts.get(&partition).and_then(|m| m.get(&label)).copied().unwrap_or(0)
    }

    pub fn total(&self, label: Label) -> usize {
        self.counts.values().filter_map(|m| m.get(&label)).sum()
    }
}

impl fmt::Display for PartitionCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8} {:>8}", "partition", "FL", "NF")?;
        for &p in self.counts.keys() {
            writeln!(f, "{:<10} {:>8} {:>8}", p, self.get(p, Label::Fl), self.get(p, Label::Nf))?;
        }
        write!(f, "{:<10} {:>8} {:>8}", "total", self.total(Label::Fl), self.total(Label::Nf))
    }
}

/// Training samples (other partitions) and validation samples (`validation`).
pub fn split_fold(samples: &[Sample], validation: u8) -> (Vec<Sample>, Vec<Sample>) {
    samples.iter().cloned().partition(|s| s.partition != validation)
}

/// 8-bit gray to `[-1, 1]`, mid-gray near zero.
pub fn normalize_pixel(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn quantize_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn gray_to_tensor(img: &GrayImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new([1, h, w], img.as_raw().iter().map(|&v| normalize_pixel(v)).collect())
        .expect("pixel buffer matches image size")
}

/// Loads a PNG as a `[1, H, W]` tensor in `[-1, 1]`, resized to `size` x
/// `size` (bilinear) when given and different.
pub fn load_gray_png(path: impl AsRef<Path>, size: Option<usize>) -> Result<Tensor> {
    let mut img = image::open(path)?.to_luma8();
    if let Some(s) = size {
        if img.width() as usize != s || img.height() as usize != s {
            img = image::imageops::resize(&img, s as u32, s as u32, FilterType::Triangle);
        }
    }
    Ok(gray_to_tensor(&img))
}

pub fn tensor_to_gray(image: &Tensor) -> Result<GrayImage> {
    let (h, w) = match image.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(PipelineError::Data(format!("expected a [1,H,W] image, got {s:?}"))),
    };
    let buf = image.data().iter().map(|&v| quantize_pixel(v)).collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image"))
}

pub fn save_gray_png(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    tensor_to_gray(image)?.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Loads a PNG or a raster file as a `[1, H, W]` image.
pub fn load_image(path: impl AsRef<Path>, size: Option<usize>) -> Result<Tensor> {
    let path = path.as_ref();
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        return load_gray_png(path, size);
    }
    let t = tensor::read_raster(&mut BufReader::new(File::open(path)?))?;
    match *t.shape() {
        [1, _, _] => Ok(t),
        [h, w] => Ok(t.reshape([1, h, w])?),
        ref s => Err(PipelineError::Data(format!("raster {} has shape {s:?}", path.display()))),
    }
}

/// Where sample images come from.
#[derive(Debug, Clone)]
pub enum ImageSource {
    /// Images held in memory, aligned with the samples.
    Memory(Vec<Tensor>),
    /// Files resolved against a directory, resized to `size`.
    Files { dir: PathBuf, size: usize },
}

/// Samples together with their images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub source: ImageSource,
}

impl Dataset {
    pub fn in_memory(samples: Vec<Sample>, images: Vec<Tensor>) -> Result<Self> {
        if samples.len() != images.len() {
            return Err(PipelineError::Data(format!("{} samples but {} images", samples.len(), images.len())));
        }
        Ok(Self { samples, source: ImageSource::Memory(images) })
    }

    pub fn on_disk(samples: Vec<Sample>, dir: impl Into<PathBuf>, size: usize) -> Self {
        Self { samples, source: ImageSource::Files { dir: dir.into(), size } }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn resolve(dir: &Path, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            dir.join(p)
        }
    }

    pub fn image(&self, index: usize) -> Result<Tensor> {
        match &self.source {
            ImageSource::Memory(images) => Ok(images[index].clone()),
            ImageSource::Files { dir, size } => load_image(Self::resolve(dir, &self.samples[index].path), Some(*size)),
        }
    }

    /// Paths of samples whose image file does not exist.
    pub fn missing(&self) -> Vec<String> {
        match &self.source {
            ImageSource::Memory(_) => Vec::new(),
            ImageSource::Files { dir, .. } => {
                self.samples.iter().filter(|s| !Self::resolve(dir, &s.path).exists()).map(|s| s.path.clone()).collect()
            }
        }
    }

    /// Drops samples whose images are missing; returns the dropped paths.
    pub fn drop_missing(&mut self) -> Vec<String> {
        let missing = self.missing();
        if !missing.is_empty() {
            self.samples.retain(|s| !missing.contains(&s.path));
        }
        missing
    }

    pub fn subset(&self, keep: impl Fn(&Sample) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.samples[i])).collect();
        let samples = idx.iter().map(|&i| self.samples[i].clone()).collect();
        let source = match &self.source {
            ImageSource::Memory(images) => ImageSource::Memory(idx.iter().map(|&i| images[i].clone()).collect()),
            files => files.clone(),
        };
        Self { samples, source }
    }

    /// Training (other partitions) and validation (`validation`) subsets.
    pub fn fold(&self, validation: u8) -> (Self, Self) {
        (self.subset(|s| s.partition != validation), self.subset(|s| s.partition == validation))
    }
}
