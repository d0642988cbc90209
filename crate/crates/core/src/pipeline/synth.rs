//! Synthetic magnetogram-like data: Gaussian noise backgrounds, a planted
//! bipolar pair (one positive and one negative blob) for FL images, and an
//! optional single-polarity distractor blob for NF images.

use std::path::Path;

use chrono::{Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{save_gray_png, Dataset, Sample};
use super::fetch::{FetchEntry, FetchStatus};
use super::{PipelineError, Result};
use crate::catalog::{self, Catalog, FlareEvent, Label, Timestamp};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub noise_std: f64,
    pub blob_amplitude: f64,
    /// Blob width (standard deviation) in pixels.
    pub blob_sigma: f64,
    /// Centre-to-centre distance of the bipolar pair in pixels.
    pub separation: f64,
    /// Probability that an NF image carries a single-polarity blob.
    pub distractor_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { size: 64, noise_std: 0.2, blob_amplitude: 0.9, blob_sigma: 2.5, separation: 7.0, distractor_rate: 0.5 }
    }
}

/// Half-open pixel box `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Region {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    /// Row-major mask for an `h` x `w` image.
    pub fn mask(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w).map(|i| self.contains(i / w, i % w)).collect()
    }
}

fn add_blob(data: &mut [f64], size: usize, cy: f64, cx: f64, sigma: f64, amplitude: f64) {
    let two_s2 = 2.0 * sigma * sigma;
    for (i, v) in data.iter_mut().enumerate() {
        let (dy, dx) = ((i / size) as f64 - cy, (i % size) as f64 - cx);
        *v += amplitude * (-(dy * dy + dx * dx) / two_s2).exp();
    }
}

impl SynthSpec {
    fn noise(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let normal = Normal::new(0.0, self.noise_std).expect("finite noise level");
        (0..self.size * self.size).map(|_| normal.sample(rng)).collect()
    }

    fn finish(&self, data: Vec<f64>) -> Tensor {
        Tensor::new([1, self.size, self.size], data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
            .expect("image sized by spec")
    }

    /// Range of admissible pair centres so both blobs stay inside the image.
    fn margin(&self) -> f64 {
        self.separation / 2.0 + 2.0 * self.blob_sigma
    }

    /// Bipolar pair centred at `(cy, cx)`, oriented east-west with a small
    /// random tilt, and the box enclosing both blobs out to two widths.
    pub fn planted(&self, cy: f64, cx: f64, rng: &mut ChaCha8Rng) -> (Tensor, Region) {
        let mut data = self.noise(rng);
        let tilt: f64 = rng.random_range(-0.5..0.5);
        let (dy, dx) = (tilt.sin() * self.separation / 2.0, tilt.cos() * self.separation / 2.0);
        add_blob(&mut data, self.size, cy - dy, cx - dx, self.blob_sigma, self.blob_amplitude);
        add_blob(&mut data, self.size, cy + dy, cx + dx, self.blob_sigma, -self.blob_amplitude);
        let reach = 2.0 * self.blob_sigma;
        let clampi = |v: f64| v.clamp(0.0, self.size as f64) as usize;
        let region = Region {
            y0: clampi((cy - dy.abs() - reach).floor()),
            y1: clampi((cy + dy.abs() + reach).ceil() + 1.0),
            x0: clampi((cx - dx.abs() - reach).floor()),
            x1: clampi((cx + dx.abs() + reach).ceil() + 1.0),
        };
        (self.finish(data), region)
    }

    /// Noise, plus a single-polarity blob with probability `distractor_rate`.
    pub fn quiet(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let mut data = self.noise(rng);
        if rng.random_bool(self.distractor_rate) {
            let (cy, cx) = self.random_centre(rng);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            add_blob(&mut data, self.size, cy, cx, self.blob_sigma * 1.4, sign * self.blob_amplitude);
        }
        self.finish(data)
    }

    fn random_centre(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let m = self.margin();
        let hi = self.size as f64 - 1.0 - m;
        (rng.random_range(m..=hi), rng.random_range(m..=hi))
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || 2.0 * self.margin() >= self.size as f64 - 1.0 {
            return Err(PipelineError::Config(format!("image size {} too small for the planted pair", self.size)));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) || !(self.noise_std >= 0.0) {
            return Err(PipelineError::Config("invalid noise or distractor settings".into()));
        }
        Ok(())
    }
}

/// A labelled synthetic set with the planted box of every FL image.
#[derive(Debug, Clone)]
pub struct SynthSet {
    pub dataset: Dataset,
    pub regions: Vec<Option<Region>>,
}

/// `n` images with exactly `n_fl` FL, in seeded random order. Samples get
/// hourly timestamps from `start` and partition `partition`.
pub fn generate_split(
    spec: &SynthSpec,
    n: usize,
    n_fl: usize,
    partition: u8,
    start: Timestamp,
    seed: u64,
) -> Result<SynthSet> {
    spec.validate()?;
    if n_fl > n {
        return Err(PipelineError::Config(format!("{n_fl} FL images requested out of {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<Label> = (0..n).map(|i| if i < n_fl { Label::Fl } else { Label::Nf }).collect();
    labels.shuffle(&mut rng);
    let mut samples = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut regions = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let (img, region) = match label {
            Label::Fl => {
                let (cy, cx) = spec.random_centre(&mut rng);
                let (img, r) = spec.planted(cy, cx, &mut rng);
                (img, Some(r))
            }
            Label::Nf => (spec.quiet(&mut rng), None),
        };
        samples.push(Sample {
            timestamp: start + Duration::hours(i as i64),
            path: format!("synth_{partition}_{i:05}.png"),
            label,
            partition,
            event_class: (label == Label::Fl).then_some('M'),
            hgs_latitude: (label == Label::Fl).then_some(0.0),
            hgs_longitude: (label == Label::Fl).then_some(0.0),
        });
        images.push(img);
        regions.push(region);
    }
    Ok(SynthSet { dataset: Dataset::in_memory(samples, images)?, regions })
}

/// Training set in partition 1 and validation set in partition 4.
pub fn desk_split(
    spec: &SynthSpec,
    (n_train, fl_train): (usize, usize),
    (n_val, fl_val): (usize, usize),
    seed: u64,
) -> Result<(SynthSet, SynthSet)> {
    let jan = Utc.with_ymd_and_hms(2014, 1, 1, 0, 0, 0).unwrap();
    let oct = Utc.with_ymd_and_hms(2014, 10, 1, 0, 0, 0).unwrap();
    Ok((
        generate_split(spec, n_train, fl_train, 1, jan, seed)?,
        generate_split(spec, n_val, fl_val, 4, oct, seed ^ 0x9e37_79b9_7f4a_7c15)?,
    ))
}

/// Pixel position of a heliographic location on a disk filling 80% of the image.
fn disk_position(size: usize, lat: f64, lon: f64) -> (f64, f64) {
    let c = (size as f64 - 1.0) / 2.0;
    let r = 0.4 * size as f64;
    let (lat, lon) = (lat.to_radians(), lon.to_radians());
    (c - r * lat.sin(), c + r * lon.sin() * lat.cos())
}

/// Writes a catalog-driven archive into `dir`: random flare events between
/// `start` and `end`, one PNG per `cadence` step (FL images carry the pair at
/// the responsible event's projected position), `catalog.csv` and a fetch
/// manifest `manifest.csv`.
pub fn write_archive(
    dir: &Path,
    spec: &SynthSpec,
    start: Timestamp,
    end: Timestamp,
    cadence: Duration,
    events: usize,
    seed: u64,
) -> Result<(Catalog, Vec<FetchEntry>)> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = (end - start).num_seconds().max(1);
    let evs = (0..events)
        .map(|_| {
            let peak = start + Duration::seconds(rng.random_range(0..span));
            let flux = 10f64.powf(rng.random_range(-6.0..-3.5));
            FlareEvent::new(peak, flux, rng.random_range(-35.0..35.0), rng.random_range(-90.0..90.0))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cat = Catalog::new(evs);
    cat.write_csv(std::fs::File::create(dir.join("catalog.csv"))?)?;
    let limit = spec.margin();
    let hi = spec.size as f64 - 1.0 - limit;
    let mut entries = Vec::new();
    for t in catalog::generate_timeline(start, end, cadence)? {
        let l = cat.label_default(t);
        let img = match (l.label, l.event) {
            (Label::Fl, Some(ev)) => {
                let (y, x) = disk_position(spec.size, ev.hgs_latitude, ev.hgs_longitude);
                spec.planted(y.clamp(limit, hi), x.clamp(limit, hi), &mut rng).0
            }
            _ => spec.quiet(&mut rng),
        };
        let name = format!("{}.png", t.format("%Y%m%dT%H%M%SZ"));
        save_gray_png(dir.join(&name), &img)?;
        entries.push(FetchEntry {
            requested: t,
            observed: Some(t),
            path: Some(name),
            status: FetchStatus::Fetched,
            image_scale: 0.0,
            source_id: 0,
            error: None,
        });
    }
    super::fetch::save_manifest(dir.join("manifest.csv"), &entries)?;
    Ok((cat, entries))
}
