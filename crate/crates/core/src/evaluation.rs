//! Forecast verification: confusion matrices, TSS/HSS, subgroup recall by
//! flare class and longitude band, heliographic recall grids and
//! cross-validation summaries.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{self, Label, Timestamp};

/// Flares with `|longitude|` at or below this are central; beyond it, near-limb.
pub const LIMB_LONGITUDE: f64 = 70.0;
pub const GRID_STEP_DEG: f64 = 5.0;
pub const GRID_BINS: usize = 36;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} is undefined for this confusion matrix")]
    Undefined(&'static str),
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("record {index}: {message}")]
    InvalidRecord { index: usize, message: String },
    #[error("no folds to summarise")]
    NoFolds,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// FL is the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn from_labels(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut cm = Self::default();
        for (truth, pred) in pairs {
            cm.add(truth, pred);
        }
        cm
    }

    pub fn add(&mut self, truth: Label, pred: Label) {
        match (truth, pred) {
            (Label::Fl, Label::Fl) => self.tp += 1,
            (Label::Fl, Label::Nf) => self.fn_ += 1,
            (Label::Nf, Label::Fl) => self.fp += 1,
            (Label::Nf, Label::Nf) => self.tn += 1,
        }
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self::new(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn_ + other.fn_)
    }

    /// `P = TP + FN`.
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    /// `N = TN + FP`.
    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }
}

/// True skill statistic, `TP/(TP+FN) - FP/(FP+TN)`.
pub fn tss(cm: &ConfusionMatrix) -> Result<f64> {
    let (p, n) = (cm.positives(), cm.negatives());
    if p == 0 || n == 0 {
        return Err(EvalError::Undefined("TSS"));
    }
    Ok(cm.tp as f64 / p as f64 - cm.fp as f64 / n as f64)
}

/// Heidke skill score, `2(TP*TN - FN*FP) / (P(FN+TN) + (TP+FP)N)`.
pub fn hss(cm: &ConfusionMatrix) -> Result<f64> {
    let (tp, fp, tn, fn_) = (cm.tp as f64, cm.fp as f64, cm.tn as f64, cm.fn_ as f64);
    let (p, n) = (tp + fn_, tn + fp);
    let denom = p * (fn_ + tn) + (tp + fp) * n;
    if denom == 0.0 {
        return Err(EvalError::Undefined("HSS"));
    }
    Ok(2.0 * (tp * tn - fn_ * fp) / denom)
}

/// `TP/(TP+FN)`, or `None` (no data) for an empty subgroup.
pub fn recall(tp: u64, fn_: u64) -> Option<f64> {
    (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64)
}

/// Probability that at least one region flares: `1 - prod(1 - p_i)`.
pub fn aggregate_ar_probability(probabilities: &[f64]) -> Result<f64> {
    let mut none = 1.0;
    for &p in probabilities {
        if !(0.0..=1.0).contains(&p) {
            return Err(EvalError::ProbabilityOutOfRange(p));
        }
        none *= 1.0 - p;
    }
    Ok(1.0 - none)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub timestamp: Timestamp,
    pub true_label: Label,
    pub predicted_label: Label,
    pub fl_probability: f64,
    /// Class letter of the responsible flare (FL records).
    pub event_class: Option<char>,
    pub hgs_latitude: Option<f64>,
    pub hgs_longitude: Option<f64>,
    pub fold: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordRow {
    timestamp: String,
    #[serde(rename = "true")]
    truth: Label,
    pred: Label,
    prob: f64,
    class: Option<char>,
    lat: Option<f64>,
    lon: Option<f64>,
    fold: u8,
}

/// Reads prediction records (`timestamp,true,pred,prob,class,lat,lon,fold`).
pub fn read_records<R: Read>(reader: R) -> Result<Vec<PredictionRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize::<RecordRow>()
        .enumerate()
        .map(|(index, row)| {
            let row = row?;
            let timestamp = catalog::parse_timestamp(&row.timestamp)
                .map_err(|e| EvalError::InvalidRecord { index, message: e.to_string() })?;
            Ok(PredictionRecord {
                timestamp,
                true_label: row.truth,
                predicted_label: row.pred,
                fl_probability: row.prob,
                event_class: row.class,
                hgs_latitude: row.lat,
                hgs_longitude: row.lon,
                fold: row.fold,
            })
        })
        .collect()
}

pub fn write_records<W: Write>(writer: W, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(RecordRow {
            timestamp: catalog::format_timestamp(&r.timestamp),
            truth: r.true_label,
            pred: r.predicted_label,
            prob: r.fl_probability,
            class: r.event_class,
            lat: r.hgs_latitude,
            lon: r.hgs_longitude,
            fold: r.fold,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn confusion(records: &[PredictionRecord]) -> ConfusionMatrix {
    ConfusionMatrix::from_labels(records.iter().map(|r| (r.true_label, r.predicted_label)))
}

/// Checks `predicted == FL iff prob >= threshold` and the probability range.
pub fn check_records(records: &[PredictionRecord], threshold: f64) -> Result<()> {
    for (index, r) in records.iter().enumerate() {
        if !(0.0..=1.0).contains(&r.fl_probability) {
            return Err(EvalError::InvalidRecord { index, message: format!("probability {}", r.fl_probability) });
        }
        let expected = if r.fl_probability >= threshold { Label::Fl } else { Label::Nf };
        if expected != r.predicted_label {
            return Err(EvalError::InvalidRecord {
                index,
                message: format!(
                    "prediction {} inconsistent with probability {} at threshold {threshold}",
                    r.predicted_label, r.fl_probability
                ),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SubClass {
    X,
    M,
    #[serde(rename = "X&M")]
    Combined,
}

impl SubClass {
    pub const ALL: [SubClass; 3] = [SubClass::X, SubClass::M, SubClass::Combined];

    fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'X' => Some(SubClass::X),
            'M' => Some(SubClass::M),
            _ => None,
        }
    }
}

impl fmt::Display for SubClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubClass::X => "X",
            SubClass::M => "M",
            SubClass::Combined => "X&M",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Central,
    NearLimb,
}

impl Band {
    pub fn of_longitude(lon: f64) -> Self {
        if lon.abs() <= LIMB_LONGITUDE {
            Band::Central
        } else {
            Band::NearLimb
        }
    }
}

/// TP/FN tally for FL records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hits {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Hits {
    fn add(&mut self, hit: bool) {
        if hit {
            self.tp += 1;
        } else {
            self.fn_ += 1;
        }
    }

    pub fn recall(&self) -> Option<f64> {
        recall(self.tp, self.fn_)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub class: SubClass,
    pub band: Band,
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub recall: Option<f64>,
}

/// Recall of FL records by class (X, M, X&M) and longitude band.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubgroupTable {
    cells: BTreeMap<(SubClass, Band), Hits>,
    /// FL records without class or longitude.
    pub unlocated: Hits,
}

impl SubgroupTable {
    pub fn from_counts(counts: &[(SubClass, Band, u64, u64)]) -> Self {
        let mut t = Self::default();
        for &(c, b, tp, fn_) in counts {
            t.cells.insert((c, b), Hits { tp, fn_ });
        }
        t
    }

    pub fn get(&self, class: SubClass, band: Band) -> Hits {
        self.cells.get(&(class, band)).copied().unwrap_or_default()
    }

    pub fn recall(&self, class: SubClass, band: Band) -> Option<f64> {
        self.get(class, band).recall()
    }

    pub fn rows(&self) -> Vec<SubgroupRow> {
        SubClass::ALL
            .iter()
            .flat_map(|&class| {
                [Band::Central, Band::NearLimb].map(|band| {
                    let h = self.get(class, band);
                    SubgroupRow { class, band, tp: h.tp, fn_: h.fn_, recall: h.recall() }
                })
            })
            .collect()
    }

    /// Text table with recall rounded to two decimals; `NA` marks empty groups.
    pub fn render(&self) -> String {
        let fmt_recall = |r: Option<f64>| r.map_or_else(|| "NA".to_string(), |v| format!("{v:.2}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:>7} {:>7} {:>6}   {:>7} {:>7} {:>6}",
            "class", "TP", "FN", "recall", "TP", "FN", "recall"
        );
        let _ = writeln!(s, "{:<8} {:^23}   {:^23}", "", "|lon| <= 70", "|lon| > 70");
        for class in SubClass::ALL {
            let (c, n) = (self.get(class, Band::Central), self.get(class, Band::NearLimb));
            let _ = writeln!(
                s,
                "{:<8} {:>7} {:>7} {:>6}   {:>7} {:>7} {:>6}",
                class.to_string(),
                c.tp,
                c.fn_,
                fmt_recall(c.recall()),
                n.tp,
                n.fn_,
                fmt_recall(n.recall())
            );
        }
        if self.unlocated.total() > 0 {
            let _ = writeln!(s, "unlocated FL records: TP {} FN {}", self.unlocated.tp, self.unlocated.fn_);
        }
        s
    }
}

pub fn subgroup_recall_table(records: &[PredictionRecord]) -> SubgroupTable {
    let mut table = SubgroupTable::default();
    for r in records.iter().filter(|r| r.true_label == Label::Fl) {
        let hit = r.predicted_label == Label::Fl;
        match (r.event_class.and_then(SubClass::from_letter), r.hgs_longitude) {
            (Some(class), Some(lon)) => {
                let band = Band::of_longitude(lon);
                table.cells.entry((class, band)).or_default().add(hit);
                table.cells.entry((SubClass::Combined, band)).or_default().add(hit);
            }
            _ => table.unlocated.add(hit),
        }
    }
    table
}

/// 5x5 degree Stonyhurst grid, 36 latitude by 36 longitude bins, per subclass.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    cells: Vec<Hits>,
}

/// Row of the grid export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lat_bin: i32,
    pub lon_bin: i32,
    pub subclass: SubClass,
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub recall: Option<f64>,
}

/// Bin index of a coordinate in `[-90, 90]`; `+90` falls in the top bin.
pub fn grid_bin(deg: f64) -> usize {
    (((deg + 90.0) / GRID_STEP_DEG).floor() as usize).min(GRID_BINS - 1)
}

fn subclass_slot(c: SubClass) -> usize {
    match c {
        SubClass::X => 0,
        SubClass::M => 1,
        SubClass::Combined => 2,
    }
}

impl SpatialGrid {
    fn empty() -> Self {
        Self { cells: vec![Hits::default(); 3 * GRID_BINS * GRID_BINS] }
    }

    fn slot(class: SubClass, lat_bin: usize, lon_bin: usize) -> usize {
        (subclass_slot(class) * GRID_BINS + lat_bin) * GRID_BINS + lon_bin
    }

    pub fn cell(&self, class: SubClass, lat_bin: usize, lon_bin: usize) -> Hits {
        self.cells[Self::slot(class, lat_bin, lon_bin)]
    }

    /// Cell containing `(lat, lon)`.
    pub fn at(&self, class: SubClass, lat: f64, lon: f64) -> Hits {
        self.cell(class, grid_bin(lat), grid_bin(lon))
    }

    pub fn totals(&self, class: SubClass) -> Hits {
        let s = subclass_slot(class) * GRID_BINS * GRID_BINS;
        self.cells[s..s + GRID_BINS * GRID_BINS]
            .iter()
            .fold(Hits::default(), |acc, h| Hits { tp: acc.tp + h.tp, fn_: acc.fn_ + h.fn_ })
    }

    /// Every cell for every subclass; `recall` is `None` where no records fell.
    pub fn rows(&self) -> Vec<GridRow> {
        let mut rows = Vec::with_capacity(self.cells.len());
        for class in SubClass::ALL {
            for la in 0..GRID_BINS {
                for lo in 0..GRID_BINS {
                    let h = self.cell(class, la, lo);
                    rows.push(GridRow {
                        lat_bin: la as i32 * GRID_STEP_DEG as i32 - 90,
                        lon_bin: lo as i32 * GRID_STEP_DEG as i32 - 90,
                        subclass: class,
                        tp: h.tp,
                        fn_: h.fn_,
                        recall: h.recall(),
                    });
                }
            }
        }
        rows
    }

    /// Delimited export: `lat_bin,lon_bin,subclass,tp,fn,recall`, with `NA`
    /// for empty cells. Bins are labelled by their lower edge.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["lat_bin", "lon_bin", "subclass", "tp", "fn", "recall"])?;
        for r in self.rows() {
            w.write_record([
                r.lat_bin.to_string(),
                r.lon_bin.to_string(),
                r.subclass.to_string(),
                r.tp.to_string(),
                r.fn_.to_string(),
                r.recall.map_or_else(|| "NA".to_string(), |v| v.to_string()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Bins located X/M-class FL records by responsible-flare position.
/// FL records without class or position are skipped.
pub fn spatial_recall_grid(records: &[PredictionRecord]) -> Result<SpatialGrid> {
    let mut grid = SpatialGrid::empty();
    for (index, r) in records.iter().enumerate() {
        if r.true_label != Label::Fl {
            continue;
        }
        let (Some(class), Some(lat), Some(lon)) =
            (r.event_class.and_then(SubClass::from_letter), r.hgs_latitude, r.hgs_longitude)
        else {
            continue;
        };
        if !(-90.0..=90.0).contains(&lat) || !(-90.0..=90.0).contains(&lon) {
            return Err(EvalError::InvalidRecord {
                index,
                message: format!("coordinates ({lat}, {lon}) out of range"),
            });
        }
        let hit = r.predicted_label == Label::Fl;
        let (la, lo) = (grid_bin(lat), grid_bin(lon));
        grid.cells[SpatialGrid::slot(class, la, lo)].add(hit);
        grid.cells[SpatialGrid::slot(SubClass::Combined, la, lo)].add(hit);
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: u8,
    pub confusion: ConfusionMatrix,
    pub tss: Option<f64>,
    pub hss: Option<f64>,
    /// Why the fold was excluded from the means, if it was.
    pub excluded: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationSummary {
    pub folds: Vec<FoldScore>,
    pub mean_tss: Option<f64>,
    pub mean_hss: Option<f64>,
    pub std_tss: Option<f64>,
    pub std_hss: Option<f64>,
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

/// Arithmetic means of per-fold scores. Folds whose TSS or HSS is undefined
/// are kept in the listing but flagged and left out of the means.
pub fn cross_validation_summary(folds: &[(u8, ConfusionMatrix)]) -> Result<CrossValidationSummary> {
    if folds.is_empty() {
        return Err(EvalError::NoFolds);
    }
    let scores: Vec<FoldScore> = folds
        .iter()
        .map(|&(fold, cm)| {
            let (t, h) = (tss(&cm), hss(&cm));
            let excluded = match (&t, &h) {
                (Ok(_), Ok(_)) => None,
                (Err(e), _) | (_, Err(e)) => Some(e.to_string()),
            };
            FoldScore { fold, confusion: cm, tss: t.ok(), hss: h.ok(), excluded }
        })
        .collect();
    let ok: Vec<&FoldScore> = scores.iter().filter(|f| f.excluded.is_none()).collect();
    let (mean_tss, std_tss) = mean_std(&ok.iter().filter_map(|f| f.tss).collect::<Vec<_>>());
    let (mean_hss, std_hss) = mean_std(&ok.iter().filter_map(|f| f.hss).collect::<Vec<_>>());
    Ok(CrossValidationSummary { folds: scores, mean_tss, mean_hss, std_tss, std_hss })
}

/// Skill scores for one set of prediction records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillReport {
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub tss: Option<f64>,
    pub hss: Option<f64>,
    pub fl_recall: Option<f64>,
    pub subgroups: Vec<SubgroupRow>,
    pub unlocated: Hits,
}

impl SkillReport {
    pub fn from_records(records: &[PredictionRecord], threshold: f64) -> Result<Self> {
        check_records(records, threshold)?;
        let cm = confusion(records);
        let table = subgroup_recall_table(records);
        Ok(Self {
            threshold,
            confusion: cm,
            tss: tss(&cm).ok(),
            hss: hss(&cm).ok(),
            fl_recall: recall(cm.tp, cm.fn_),
            subgroups: table.rows(),
            unlocated: table.unlocated,
        })
    }
}
