//! Rate-limited, caching client for the Helioviewer image service.
//!
//! Each timestamp costs two requests: `getClosestImage` to find the nearest
//! HMI magnetogram, then `takeScreenshot` to render it as a PNG. Rendered
//! images are stored as 8-bit gray PNGs next to a small JSON sidecar holding
//! the observation time, so later runs are served from the cache.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use image::imageops::FilterType;
use image::ImageFormat;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::catalog::{self, Timestamp};

pub const HELIOVIEWER_API: &str = "https://api.helioviewer.org/v2";
/// Helioviewer source id of SDO/HMI line-of-sight magnetograms.
pub const HMI_MAGNETOGRAM_SOURCE: u32 = 19;
const MAX_BODY_BYTES: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct FetchSpec {
    pub base_url: String,
    pub source_id: u32,
    /// Output images are `size` x `size`.
    pub size: usize,
    /// Arcseconds per pixel requested from the renderer.
    pub image_scale: f64,
    pub cache_dir: PathBuf,
    /// Minimum spacing between consecutive requests.
    pub min_interval: Duration,
    pub retries: u32,
    /// First retry delay; doubled on every further attempt.
    pub backoff: Duration,
    pub timeout: Duration,
}

impl FetchSpec {
    pub fn new(cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_url: HELIOVIEWER_API.into(),
            source_id: HMI_MAGNETOGRAM_SOURCE,
            size: 512,
            image_scale: 4.8,
            cache_dir: cache_dir.into(),
            min_interval: Duration::from_secs(1),
            retries: 3,
            backoff: Duration::from_secs(1),
            timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FetchStatus {
    Fetched,
    Cached,
    Missing,
}

/// One manifest row: what was asked for and what was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchEntry {
    pub requested: Timestamp,
    pub observed: Option<Timestamp>,
    /// File name inside the cache directory.
    pub path: Option<String>,
    pub status: FetchStatus,
    pub image_scale: f64,
    pub source_id: u32,
    pub error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryRow {
    requested: String,
    observed: Option<String>,
    path: Option<String>,
    status: FetchStatus,
    image_scale: f64,
    source_id: u32,
    error: Option<String>,
}

/// Writes a fetch manifest (`requested,observed,path,status,image_scale,source_id,error`).
pub fn write_manifest<W: Write>(writer: W, entries: &[FetchEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for e in entries {
        w.serialize(EntryRow {
            requested: catalog::format_timestamp(&e.requested),
            observed: e.observed.as_ref().map(catalog::format_timestamp),
            path: e.path.clone(),
            status: e.status,
            image_scale: e.image_scale,
            source_id: e.source_id,
            error: e.error.clone(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest<R: Read>(reader: R) -> Result<Vec<FetchEntry>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<EntryRow>() {
        let line = out.len() + 2;
        let row = row?;
        let ts =
            |s: &str| catalog::parse_timestamp(s).map_err(|e| PipelineError::Manifest { line, message: e.to_string() });
        out.push(FetchEntry {
            requested: ts(&row.requested)?,
            observed: row.observed.as_deref().map(ts).transpose()?,
            path: row.path,
            status: row.status,
            image_scale: row.image_scale,
            source_id: row.source_id,
            error: row.error,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<FetchEntry>> {
    read_manifest(BufReader::new(File::open(path)?))
}

pub fn save_manifest(path: impl AsRef<Path>, entries: &[FetchEntry]) -> Result<()> {
    write_manifest(File::create(path)?, entries)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    observed: String,
    image_scale: f64,
    source_id: u32,
}

#[derive(Debug, Deserialize)]
struct ClosestImage {
    date: String,
}

pub struct Fetcher {
    spec: FetchSpec,
    agent: ureq::Agent,
    last_request: Option<Instant>,
    requests: usize,
}

impl Fetcher {
    pub fn new(spec: FetchSpec) -> Result<Self> {
        std::fs::create_dir_all(&spec.cache_dir)?;
        let config =
            ureq::Agent::config_builder().timeout_global(Some(spec.timeout)).http_status_as_error(true).build();
        Ok(Self { agent: ureq::Agent::new_with_config(config), spec, last_request: None, requests: 0 })
    }

    /// Network requests issued so far, retries included.
    pub fn requests(&self) -> usize {
        self.requests
    }

    fn stem(t: &Timestamp) -> String {
        t.format("%Y%m%dT%H%M%SZ").to_string()
    }

    fn cached(&self, t: &Timestamp) -> Option<FetchEntry> {
        let name = format!("{}.png", Self::stem(t));
        let meta = self.spec.cache_dir.join(format!("{}.json", Self::stem(t)));
        if !self.spec.cache_dir.join(&name).exists() {
            return None;
        }
        let side: Sidecar = serde_json::from_reader(BufReader::new(File::open(meta).ok()?)).ok()?;
        Some(FetchEntry {
            requested: *t,
            observed: catalog::parse_timestamp(&side.observed).ok(),
            path: Some(name),
            status: FetchStatus::Cached,
            image_scale: side.image_scale,
            source_id: side.source_id,
            error: None,
        })
    }

    fn throttle(&mut self) {
        if let Some(last) = self.last_request {
            let next = last + self.spec.min_interval;
            let now = Instant::now();
            if next > now {
                thread::sleep(next - now);
            }
        }
        self.last_request = Some(Instant::now());
    }

    fn get(&mut self, endpoint: &str, query: &[(&str, String)]) -> Result<Vec<u8>> {
        let url = format!("{}/{endpoint}/", self.spec.base_url.trim_end_matches('/'));
        let mut last_err = String::new();
        for attempt in 0..=self.spec.retries {
            if attempt > 0 {
                thread::sleep(self.spec.backoff * 2u32.pow(attempt - 1));
            }
            self.throttle();
            self.requests += 1;
            let mut req = self.agent.get(&url);
            for (k, v) in query {
                req = req.query(*k, v);
            }
            match req.call().and_then(|r| r.into_body().with_config().limit(MAX_BODY_BYTES).read_to_vec()) {
                Ok(body) => return Ok(body),
                Err(e) => {
                    log::warn!("{endpoint} attempt {} failed: {e}", attempt + 1);
                    last_err = e.to_string();
                }
            }
        }
        Err(PipelineError::Http(format!("{endpoint}: {last_err}")))
    }

    fn download(&mut self, t: &Timestamp) -> Result<FetchEntry> {
        let body = self.get(
            "getClosestImage",
            &[("date", catalog::format_timestamp(t)), ("sourceId", self.spec.source_id.to_string())],
        )?;
        let closest: ClosestImage = serde_json::from_slice(&body)?;
        let observed = catalog::parse_timestamp(&closest.date)?;
        let size = self.spec.size.to_string();
        let png = self.get(
            "takeScreenshot",
            &[
                ("date", catalog::format_timestamp(&observed)),
                ("imageScale", self.spec.image_scale.to_string()),
                ("layers", format!("[{},1,100]", self.spec.source_id)),
                ("x0", "0".into()),
                ("y0", "0".into()),
                ("width", size.clone()),
                ("height", size),
                ("display", "true".into()),
                ("watermark", "false".into()),
            ],
        )?;
        let mut img = image::load_from_memory(&png)?.to_luma8();
        let s = self.spec.size as u32;
        if img.width() != s || img.height() != s {
            img = image::imageops::resize(&img, s, s, FilterType::Triangle);
        }
        let name = format!("{}.png", Self::stem(t));
        img.save_with_format(self.spec.cache_dir.join(&name), ImageFormat::Png)?;
        let side = Sidecar {
            observed: catalog::format_timestamp(&observed),
            image_scale: self.spec.image_scale,
            source_id: self.spec.source_id,
        };
        serde_json::to_writer(File::create(self.spec.cache_dir.join(format!("{}.json", Self::stem(t))))?, &side)?;
        Ok(FetchEntry {
            requested: *t,
            observed: Some(observed),
            path: Some(name),
            status: FetchStatus::Fetched,
            image_scale: self.spec.image_scale,
            source_id: self.spec.source_id,
            error: None,
        })
    }

    /// Cached image if present, otherwise a download; failures after all
    /// retries yield a `Missing` entry.
    pub fn fetch(&mut self, t: &Timestamp) -> FetchEntry {
        if let Some(hit) = self.cached(t) {
            return hit;
        }
        self.download(t).unwrap_or_else(|e| FetchEntry {
            requested: *t,
            observed: None,
            path: None,
            status: FetchStatus::Missing,
            image_scale: self.spec.image_scale,
            source_id: self.spec.source_id,
            error: Some(e.to_string()),
        })
    }

    pub fn fetch_all(&mut self, timestamps: &[Timestamp]) -> Vec<FetchEntry> {
        timestamps.iter().map(|t| self.fetch(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use std::io::{BufRead, Cursor};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Minimal HTTP server answering the two endpoints; the first
    /// `failures` requests get a 503.
    fn mock_server(failures: usize) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        let mut png = Vec::new();
        image::GrayImage::from_fn(32, 32, |x, y| image::Luma([(x * 8 + y) as u8]))
            .write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
            .unwrap();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = std::io::BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                        break;
                    }
                }
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let (status, ctype, body): (&str, &str, Vec<u8>) = if n < failures {
                    ("503 Service Unavailable", "text/plain", b"busy".to_vec())
                } else if request_line.contains("getClosestImage") {
                    ("200 OK", "application/json", br#"{"id":"1","date":"2014-03-01 00:00:08","scale":0.5}"#.to_vec())
                } else {
                    ("200 OK", "image/png", png.clone())
                };
                let head = format!(
                    "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    body.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(&body);
            }
        });
        (format!("http://{addr}"), hits)
    }

    fn spec(base: &str, dir: &Path) -> FetchSpec {
        FetchSpec {
            base_url: base.into(),
            size: 16,
            min_interval: Duration::from_millis(1),
            backoff: Duration::from_millis(1),
            timeout: Duration::from_secs(5),
            ..FetchSpec::new(dir)
        }
    }

    fn t0() -> Timestamp {
        Utc.with_ymd_and_hms(2014, 3, 1, 0, 0, 0).unwrap()
    }

    #[test]
    fn fetch_then_cache_hit() {
        let (base, hits) = mock_server(0);
        let dir = tempfile::tempdir().unwrap();
        let mut f = Fetcher::new(spec(&base, dir.path())).unwrap();
        let e = f.fetch(&t0());
        assert_eq!(e.status, FetchStatus::Fetched, "{e:?}");
        assert_eq!(e.observed, Some(Utc.with_ymd_and_hms(2014, 3, 1, 0, 0, 8).unwrap()));
        assert_eq!(hits.load(Ordering::SeqCst), 2);
        let img = image::open(dir.path().join(e.path.as_ref().unwrap())).unwrap();
        assert_eq!((img.width(), img.height()), (16, 16));
        assert!(matches!(img, image::DynamicImage::ImageLuma8(_)));

        let again = f.fetch(&t0());
        assert_eq!(again.status, FetchStatus::Cached);
        assert_eq!(again.observed, e.observed);
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn retries_with_backoff() {
        let (base, hits) = mock_server(2);
        let dir = tempfile::tempdir().unwrap();
        let mut f = Fetcher::new(spec(&base, dir.path())).unwrap();
        assert_eq!(f.fetch(&t0()).status, FetchStatus::Fetched);
        assert_eq!(hits.load(Ordering::SeqCst), 4);
        assert_eq!(f.requests(), 4);
    }

    #[test]
    fn offline_warm_cache_succeeds() {
        let (base, _) = mock_server(0);
        let dir = tempfile::tempdir().unwrap();
        Fetcher::new(spec(&base, dir.path())).unwrap().fetch(&t0());
        let mut offline = Fetcher::new(spec("http://127.0.0.1:9", dir.path())).unwrap();
        let e = offline.fetch_all(&[t0()]);
        assert_eq!(e[0].status, FetchStatus::Cached);
        assert_eq!(offline.requests(), 0);
    }

    #[test]
    fn unreachable_cold_cache_is_all_missing() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec("http://127.0.0.1:9", dir.path());
        s.retries = 1;
        let mut f = Fetcher::new(s).unwrap();
        let ts = [t0(), t0() + chrono::Duration::hours(1)];
        let entries = f.fetch_all(&ts);
        assert!(entries.iter().all(|e| e.status == FetchStatus::Missing && e.error.is_some()));
        assert_eq!(f.requests(), 4);

        let mut buf = Vec::new();
        write_manifest(&mut buf, &entries).unwrap();
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), entries);
    }
}
