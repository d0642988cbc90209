//! GOES flare events, hourly sample timelines and binary FL/NF labelling.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{DateTime, Duration, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Timestamp = DateTime<Utc>;

/// Peak flux threshold for the FL class (M1.0), in W/m^2.
pub const FLARE_THRESHOLD: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("invalid flare class `{0}`")]
    InvalidClass(String),
    #[error("invalid flux {0}")]
    InvalidFlux(f64),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("invalid timestamp `{0}`")]
    Timestamp(String),
    #[error("timeline end {end} precedes start {start}")]
    ReversedRange { start: Timestamp, end: Timestamp },
    #[error("class {0} has zero samples")]
    ZeroCount(Label),
    #[error("no augmentation kinds requested")]
    EmptyKinds,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CatalogError> = std::result::Result<T, E>;

/// Binary forecast target. The discriminant is the model's logit index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "FL")]
    Fl = 0,
    #[serde(rename = "NF")]
    Nf = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Fl, Label::Nf];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Fl),
            1 => Some(Label::Nf),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Fl => "FL",
            Label::Nf => "NF",
        })
    }
}

impl FromStr for Label {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "FL" | "fl" => Ok(Label::Fl),
            "NF" | "nf" => Ok(Label::Nf),
            other => Err(CatalogError::InvalidArgument(format!("unknown label `{other}`"))),
        }
    }
}

const DECADES: [(char, f64); 5] = [('A', 1e-8), ('B', 1e-7), ('C', 1e-6), ('M', 1e-5), ('X', 1e-4)];

/// Peak flux in W/m^2 for a GOES class label such as `M1.2`.
pub fn parse_flare_class(label: &str) -> Result<f64> {
    let label = label.trim();
    let mut chars = label.chars();
    let letter = chars.next().ok_or_else(|| CatalogError::InvalidClass(label.into()))?;
    let base = DECADES
        .iter()
        .find(|(l, _)| *l == letter.to_ascii_uppercase())
        .map(|&(_, b)| b)
        .ok_or_else(|| CatalogError::InvalidClass(label.into()))?;
    let mult: f64 = chars.as_str().parse().map_err(|_| CatalogError::InvalidClass(label.into()))?;
    if !(mult > 0.0) || !mult.is_finite() {
        return Err(CatalogError::InvalidClass(label.into()));
    }
    Ok(mult * base)
}

/// Class letter of the decade containing `flux`. Fluxes above the X decade
/// stay X; fluxes below A stay A.
pub fn class_letter(flux: f64) -> Result<char> {
    if !(flux > 0.0) || !flux.is_finite() {
        return Err(CatalogError::InvalidFlux(flux));
    }
    Ok(DECADES.iter().rev().find(|(_, b)| flux >= *b).map_or('A', |&(l, _)| l))
}

/// Formats `flux` as a GOES class label with one decimal, e.g. `X2.3`.
pub fn flux_to_class(flux: f64) -> Result<String> {
    let letter = class_letter(flux)?;
    let base = DECADES.iter().find(|(l, _)| *l == letter).unwrap().1;
    Ok(format!("{letter}{:.1}", flux / base))
}

pub fn parse_timestamp(s: &str) -> Result<Timestamp> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%dT%H"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc());
        }
    }
    Err(CatalogError::Timestamp(s.into()))
}

pub fn format_timestamp(t: &Timestamp) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlareEvent {
    pub start_time: Timestamp,
    pub peak_time: Timestamp,
    /// W/m^2.
    pub peak_flux: f64,
    pub class_label: String,
    /// Heliographic Stonyhurst latitude, degrees.
    pub hgs_latitude: f64,
    /// Heliographic Stonyhurst longitude, degrees.
    pub hgs_longitude: f64,
    pub noaa_ar: Option<u32>,
}

impl FlareEvent {
    /// Builds an event whose class label is derived from `peak_flux`.
    pub fn new(peak_time: Timestamp, peak_flux: f64, hgs_latitude: f64, hgs_longitude: f64) -> Result<Self> {
        let ev = Self {
            start_time: peak_time,
            peak_time,
            peak_flux,
            class_label: flux_to_class(peak_flux)?,
            hgs_latitude,
            hgs_longitude,
            noaa_ar: None,
        };
        ev.validate()?;
        Ok(ev)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_flux > 0.0) || !self.peak_flux.is_finite() {
            return Err(CatalogError::InvalidFlux(self.peak_flux));
        }
        parse_flare_class(&self.class_label)?;
        if self.start_time > self.peak_time {
            return Err(CatalogError::InvalidEvent(format!("start {} after peak {}", self.start_time, self.peak_time)));
        }
        for (what, v) in [("latitude", self.hgs_latitude), ("longitude", self.hgs_longitude)] {
            if !(-90.0..=90.0).contains(&v) {
                return Err(CatalogError::InvalidEvent(format!("{what} {v} outside [-90, 90]")));
            }
        }
        Ok(())
    }

    /// Class letter of the event's peak flux.
    pub fn letter(&self) -> char {
        class_letter(self.peak_flux).unwrap_or('A')
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    start_time: String,
    peak_time: String,
    peak_flux: f64,
    class: String,
    hgs_lat: f64,
    hgs_lon: f64,
    noaa_ar: Option<u32>,
}

/// Flare events ordered by peak time (ties keep insertion order).
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    events: Vec<FlareEvent>,
}

/// Outcome of labelling one timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeling<'a> {
    pub label: Label,
    pub event: Option<&'a FlareEvent>,
    /// Another event in the window shares the maximum flux.
    pub tie: bool,
}

impl Catalog {
    pub fn new(mut events: Vec<FlareEvent>) -> Self {
        events.sort_by_key(|e| e.peak_time);
        Self { events }
    }

    pub fn events(&self) -> &[FlareEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Reads the delimited catalog table
    /// (`start_time,peak_time,peak_flux,class,hgs_lat,hgs_lon,noaa_ar`).
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut events = Vec::new();
        for row in rdr.deserialize::<EventRow>() {
            let row = row.map_err(|e| CatalogError::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = events.len() as u64 + 2;
            let at = |e: CatalogError| CatalogError::Parse { line, message: e.to_string() };
            let ev = FlareEvent {
                start_time: parse_timestamp(&row.start_time).map_err(at)?,
                peak_time: parse_timestamp(&row.peak_time).map_err(at)?,
                peak_flux: row.peak_flux,
                class_label: row.class,
                hgs_latitude: row.hgs_lat,
                hgs_longitude: row.hgs_lon,
                noaa_ar: row.noaa_ar,
            };
            ev.validate().map_err(at)?;
            events.push(ev);
        }
        Ok(Self::new(events))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for e in &self.events {
            w.serialize(EventRow {
                start_time: format_timestamp(&e.start_time),
                peak_time: format_timestamp(&e.peak_time),
                peak_flux: e.peak_flux,
                class: e.class_label.clone(),
                hgs_lat: e.hgs_latitude,
                hgs_lon: e.hgs_longitude,
                noaa_ar: e.noaa_ar,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Labels `t` from the events whose peak falls in `[t, t + window)`. The
    /// responsible event is the one with the largest peak flux, earliest peak
    /// first on ties; the label is FL iff that flux reaches `threshold`.
    pub fn label_timestamp(&self, t: Timestamp, window: Duration, threshold: f64) -> Labeling<'_> {
        let end = t + window;
        let first = self.events.partition_point(|e| e.peak_time < t);
        let mut best: Option<&FlareEvent> = None;
        let mut tie = false;
        for e in self.events[first..].iter().take_while(|e| e.peak_time < end) {
            match best {
                Some(b) if e.peak_flux > b.peak_flux => {
                    best = Some(e);
                    tie = false;
                }
                Some(b) if e.peak_flux == b.peak_flux => tie = true,
                Some(_) => {}
                None => best = Some(e),
            }
        }
        let label = match best {
            Some(b) if b.peak_flux >= threshold => Label::Fl,
            _ => Label::Nf,
        };
        Labeling { label, event: best, tie }
    }

    /// Labelling with the default 24-hour window and M1.0 threshold.
    pub fn label_default(&self, t: Timestamp) -> Labeling<'_> {
        self.label_timestamp(t, Duration::hours(24), FLARE_THRESHOLD)
    }
}

/// Inclusive grid from the first whole hour at or after `start` to `end`,
/// stepping by `cadence`.
pub fn generate_timeline(start: Timestamp, end: Timestamp, cadence: Duration) -> Result<Vec<Timestamp>> {
    if end < start {
        return Err(CatalogError::ReversedRange { start, end });
    }
    if cadence <= Duration::zero() {
        return Err(CatalogError::InvalidArgument("cadence must be positive".into()));
    }
    let floor = start
        .with_minute(0)
        .and_then(|t| t.with_second(0))
        .and_then(|t| t.with_nanosecond(0))
        .expect("valid hour truncation");
    let mut t = if floor < start { floor + Duration::hours(1) } else { floor };
    let mut out = Vec::new();
    while t <= end {
        out.push(t);
        t += cadence;
    }
    Ok(out)
}

/// Tri-monthly partition: Jan-Mar 1, Apr-Jun 2, Jul-Sep 3, Oct-Dec 4.
pub fn assign_partition(t: Timestamp) -> u8 {
    use chrono::Datelike;
    ((t.month0() / 3) + 1) as u8
}

/// `weight_c = N_total / (num_classes * count_c)`.
pub fn class_weights(counts: &BTreeMap<Label, usize>) -> Result<BTreeMap<Label, f64>> {
    let total: usize = counts.values().sum();
    let k = counts.len() as f64;
    counts
        .iter()
        .map(
            |(&label, &c)| {
                if c == 0 {
                    Err(CatalogError::ZeroCount(label))
                } else {
                    Ok((label, total as f64 / (k * c as f64)))
                }
            },
        )
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ts(y: i32, mo: u32, d: u32, h: u32) -> Timestamp {
        Utc.with_ymd_and_hms(y, mo, d, h, 0, 0).unwrap()
    }

    #[test]
    fn class_parsing() {
        assert_eq!(parse_flare_class("M1.0").unwrap(), 1.0e-5);
        assert!((parse_flare_class("X2.3").unwrap() - 2.3e-4).abs() < 1e-18);
        assert!((parse_flare_class("C8.5").unwrap() - 8.5e-6).abs() < 1e-18);
        assert!(parse_flare_class("Q1.0").is_err());
        assert!(parse_flare_class("M0").is_err());
        assert!(parse_flare_class("M-1.0").is_err());
        assert!(parse_flare_class("").is_err());
        assert_eq!(flux_to_class(2.3e-4).unwrap(), "X2.3");
        assert_eq!(flux_to_class(9.9e-6).unwrap(), "C9.9");
        assert_eq!(flux_to_class(1e-5).unwrap(), "M1.0");
        assert!(flux_to_class(0.0).is_err());
    }

    #[test]
    fn labeling_examples() {
        let t0 = ts(2014, 2, 24, 19);
        let c3 = FlareEvent::new(t0 + Duration::hours(2), 3.0e-6, 10.0, -20.0).unwrap();
        let m12 = FlareEvent::new(t0 + Duration::hours(5), 1.2e-5, -12.0, -75.0).unwrap();
        let cat = Catalog::new(vec![m12.clone(), c3]);
        let l = cat.label_default(t0);
        assert_eq!(l.label, Label::Fl);
        assert_eq!(l.event, Some(&m12));

        let weak = Catalog::new(vec![FlareEvent::new(t0, 9.9e-6, 0.0, 0.0).unwrap()]);
        assert_eq!(weak.label_default(t0).label, Label::Nf);

        let empty = Catalog::default();
        let l = empty.label_default(t0);
        assert_eq!((l.label, l.event), (Label::Nf, None));
    }

    #[test]
    fn window_is_half_open_on_peak_time() {
        let t0 = ts(2012, 3, 7, 0);
        let at_start = Catalog::new(vec![FlareEvent::new(t0, 5e-4, 0.0, 0.0).unwrap()]);
        assert_eq!(at_start.label_default(t0).label, Label::Fl);
        let at_end = Catalog::new(vec![FlareEvent::new(t0 + Duration::hours(24), 5e-4, 0.0, 0.0).unwrap()]);
        assert_eq!(at_end.label_default(t0).label, Label::Nf);
    }

    #[test]
    fn ties_prefer_earliest_peak() {
        let t0 = ts(2012, 3, 7, 0);
        let a = FlareEvent::new(t0 + Duration::hours(3), 2e-5, 1.0, 1.0).unwrap();
        let b = FlareEvent::new(t0 + Duration::hours(1), 2e-5, 2.0, 2.0).unwrap();
        let cat = Catalog::new(vec![a, b.clone()]);
        let l = cat.label_default(t0);
        assert_eq!(l.event, Some(&b));
        assert!(l.tie);
    }

    #[test]
    fn timeline_examples() {
        let tl = generate_timeline(ts(2010, 12, 1, 0), ts(2010, 12, 2, 23), Duration::hours(1)).unwrap();
        assert_eq!(tl.len(), 48);
        assert_eq!(generate_timeline(ts(2011, 1, 1, 5), ts(2011, 1, 1, 5), Duration::hours(1)).unwrap().len(), 1);
        let full = generate_timeline(ts(2010, 12, 1, 0), ts(2018, 12, 31, 23), Duration::hours(1)).unwrap();
        assert!(full.len() >= 63_649);
        assert!(generate_timeline(ts(2011, 1, 2, 0), ts(2011, 1, 1, 0), Duration::hours(1)).is_err());
        let off = Utc.with_ymd_and_hms(2011, 1, 1, 4, 30, 0).unwrap();
        assert_eq!(generate_timeline(off, ts(2011, 1, 1, 6), Duration::hours(1)).unwrap()[0], ts(2011, 1, 1, 5));
    }

    #[test]
    fn partition_examples() {
        assert_eq!(assign_partition(ts(2014, 2, 15, 6)), 1);
        assert_eq!(assign_partition(ts(2013, 7, 1, 0)), 3);
        assert_eq!(assign_partition(ts(2010, 12, 31, 23)), 4);
    }

    #[test]
    fn class_weight_examples() {
        let w = class_weights(&BTreeMap::from([(Label::Fl, 4), (Label::Nf, 12)])).unwrap();
        assert_eq!(w[&Label::Fl], 2.0);
        assert!((w[&Label::Nf] - 2.0 / 3.0).abs() < 1e-15);
        let w = class_weights(&BTreeMap::from([(Label::Fl, 36_000), (Label::Nf, 54_649)])).unwrap();
        assert!((w[&Label::Fl] - 1.259).abs() < 5e-4);
        assert!((w[&Label::Nf] - 0.829).abs() < 5e-4);
        let w = class_weights(&BTreeMap::from([(Label::Fl, 5), (Label::Nf, 5)])).unwrap();
        assert!(w.values().all(|&v| v == 1.0));
        assert!(matches!(
            class_weights(&BTreeMap::from([(Label::Fl, 0), (Label::Nf, 5)])),
            Err(CatalogError::ZeroCount(Label::Fl))
        ));
    }

    #[test]
    fn catalog_csv_round_trip_and_errors() {
        let text = "start_time,peak_time,peak_flux,class,hgs_lat,hgs_lon,noaa_ar\n\
                    2014-02-25T00:39:00Z,2014-02-25T00:49:00Z,4.9e-4,X4.9,-15,-82,11990\n\
                    2014-02-24 10:00:00,2014-02-24 10:20:00,3.0e-6,C3.0,5,20,\n";
        let cat = Catalog::read_csv(text.as_bytes()).unwrap();
        assert_eq!(cat.len(), 2);
        assert_eq!(cat.events()[0].class_label, "C3.0");
        assert_eq!(cat.events()[1].noaa_ar, Some(11990));
        let mut out = Vec::new();
        cat.write_csv(&mut out).unwrap();
        let back = Catalog::read_csv(out.as_slice()).unwrap();
        assert_eq!(back.events(), cat.events());

        let bad = "start_time,peak_time,peak_flux,class,hgs_lat,hgs_lon,noaa_ar\n\
                   2014-02-25T00:39:00Z,2014-02-25T00:49:00Z,4.9e-4,X4.9,-15,-82,\n\
                   2014-02-25T00:39:00Z,2014-02-25T00:49:00Z,4.9e-4,Z4.9,-15,-82,\n";
        match Catalog::read_csv(bad.as_bytes()) {
            Err(CatalogError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
