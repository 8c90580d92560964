//! Clinical CSV ingestion, death-count aggregation, and series framing.
//!
//! The dataset is the 13-field heart-failure clinical records table: 299
//! patient rows, no missing values. Columns are matched by header name
//! (case-insensitive), never by position. When the file is absent a seeded
//! synthetic generator produces schema-compatible records so the whole
//! pipeline runs self-contained.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing column '{name}'")]
    MissingColumn { name: String },
    #[error("unexpected column '{name}'")]
    UnexpectedColumn { name: String },
    #[error("row {row}, column '{column}': cannot parse '{value}' as a number")]
    InvalidCell {
        row: usize,
        column: &'static str,
        value: String,
    },
    #[error("row {row}: {reason}")]
    InvalidRecord { row: usize, reason: String },
    #[error("dataset has a header but no data rows")]
    EmptyDataset,
    #[error("no records given")]
    NoRecords,
    #[error("feature '{feature}' has zero variance")]
    ZeroVariance { feature: Feature },
    #[error("bin width must be positive, got {0}")]
    BadBinWidth(f64),
    #[error("series of length {len} is too short for lookback {lookback}")]
    SeriesTooShort { len: usize, lookback: usize },
    #[error("test fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("need at least {needed} items, got {got}")]
    TooFewItems { needed: usize, got: usize },
}

/// One row of the clinical table. Binary indicators are kept as 0/1 bytes;
/// everything else is a float in its natural unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    /// Years.
    pub age: f64,
    pub anaemia: u8,
    /// mcg/L.
    pub creatinine_phosphokinase: f64,
    pub diabetes: u8,
    /// Percent of blood leaving the left ventricle per contraction.
    pub ejection_fraction: f64,
    pub high_blood_pressure: u8,
    /// Kiloplatelets/mL.
    pub platelets: f64,
    /// mg/dL.
    pub serum_creatinine: f64,
    /// mEq/L.
    pub serum_sodium: f64,
    pub sex: u8,
    pub smoking: u8,
    /// Follow-up period, days.
    pub time: f64,
    pub death_event: u8,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("anaemia", self.anaemia),
            ("diabetes", self.diabetes),
            ("high_blood_pressure", self.high_blood_pressure),
            ("sex", self.sex),
            ("smoking", self.smoking),
            ("DEATH_EVENT", self.death_event),
        ] {
            if v > 1 {
                return Err(format!("binary field {name} must be 0 or 1, got {v}"));
            }
        }
        if !(self.age > 0.0) {
            return Err(format!("age must be positive, got {}", self.age));
        }
        if !(self.ejection_fraction > 0.0 && self.ejection_fraction <= 100.0) {
            return Err(format!(
                "ejection_fraction must lie in (0, 100], got {}",
                self.ejection_fraction
            ));
        }
        if !(self.serum_creatinine > 0.0) {
            return Err(format!(
                "serum_creatinine must be positive, got {}",
                self.serum_creatinine
            ));
        }
        Ok(())
    }
}

/// Canonical column set, in export order. The death column is spelled
/// `DEATH_EVENT` in the publicly distributed file; matching is
/// case-insensitive either way.
pub const COLUMNS: [&str; 13] = [
    "age",
    "anaemia",
    "creatinine_phosphokinase",
    "diabetes",
    "ejection_fraction",
    "high_blood_pressure",
    "platelets",
    "serum_creatinine",
    "serum_sodium",
    "sex",
    "smoking",
    "time",
    "DEATH_EVENT",
];

/// Features the figures are drawn over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Age,
    SerumCreatinine,
    EjectionFraction,
}

impl Feature {
    pub const ALL: [Feature; 3] = [
        Feature::Age,
        Feature::SerumCreatinine,
        Feature::EjectionFraction,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Feature::Age => "age",
            Feature::SerumCreatinine => "serum_creatinine",
            Feature::EjectionFraction => "ejection_fraction",
        }
    }

    pub fn value(&self, r: &PatientRecord) -> f64 {
        match self {
            Feature::Age => r.age,
            Feature::SerumCreatinine => r.serum_creatinine,
            Feature::EjectionFraction => r.ejection_fraction,
        }
    }

    fn set(&self, r: &mut PatientRecord, v: f64) {
        match self {
            Feature::Age => r.age = v,
            Feature::SerumCreatinine => r.serum_creatinine = v,
            Feature::EjectionFraction => r.ejection_fraction = v,
        }
    }

    /// Matches the figures' x-axis granularity: whole years and percentage
    /// points, tenths of mg/dL for creatinine.
    pub fn default_bin_width(&self) -> f64 {
        match self {
            Feature::Age => 1.0,
            Feature::SerumCreatinine => 0.1,
            Feature::EjectionFraction => 1.0,
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "age" => Ok(Feature::Age),
            "serum_creatinine" => Ok(Feature::SerumCreatinine),
            "ejection_fraction" => Ok(Feature::EjectionFraction),
            other => Err(format!(
                "unknown feature '{other}' (expected age, serum_creatinine, or ejection_fraction)"
            )),
        }
    }
}

/// Loads and validates the clinical CSV. Columns are mapped by header name,
/// so column order never matters; missing or extra columns, non-numeric or
/// empty cells, and invariant violations are all hard errors.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>, DataError> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();

    let mut index = [0usize; 13];
    for (slot, name) in COLUMNS.iter().enumerate() {
        let lower = name.to_ascii_lowercase();
        match headers.iter().position(|h| *h == lower) {
            Some(pos) => index[slot] = pos,
            None => {
                return Err(DataError::MissingColumn {
                    name: (*name).to_string(),
                })
            }
        }
    }
    if let Some(extra) = headers.iter().find(|h| {
        !COLUMNS
            .iter()
            .any(|c| c.to_ascii_lowercase() == h.as_str())
    }) {
        return Err(DataError::UnexpectedColumn {
            name: extra.clone(),
        });
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let record_row = i + 2; // 1-based, after the header line
        let field = |slot: usize| -> Result<f64, DataError> {
            let raw = row.get(index[slot]).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| DataError::InvalidCell {
                row: record_row,
                column: COLUMNS[slot],
                value: raw.to_string(),
            })
        };
        let binary = |slot: usize| -> Result<u8, DataError> {
            let v = field(slot)?;
            if v == 0.0 || v == 1.0 {
                Ok(v as u8)
            } else {
                Err(DataError::InvalidCell {
                    row: record_row,
                    column: COLUMNS[slot],
                    value: v.to_string(),
                })
            }
        };
        let record = PatientRecord {
            age: field(0)?,
            anaemia: binary(1)?,
            creatinine_phosphokinase: field(2)?,
            diabetes: binary(3)?,
            ejection_fraction: field(4)?,
            high_blood_pressure: binary(5)?,
            platelets: field(6)?,
            serum_creatinine: field(7)?,
            serum_sodium: field(8)?,
            sex: binary(9)?,
            smoking: binary(10)?,
            time: field(11)?,
            death_event: binary(12)?,
        };
        record.validate().map_err(|reason| DataError::InvalidRecord {
            row: record_row,
            reason,
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(records)
}

/// Writes records in the canonical 13-column format; `load_csv` of the
/// output reproduces the input.
pub fn write_csv(path: impl AsRef<Path>, records: &[PatientRecord]) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(COLUMNS)?;
    for r in records {
        writer.write_record([
            r.age.to_string(),
            r.anaemia.to_string(),
            r.creatinine_phosphokinase.to_string(),
            r.diabetes.to_string(),
            r.ejection_fraction.to_string(),
            r.high_blood_pressure.to_string(),
            r.platelets.to_string(),
            r.serum_creatinine.to_string(),
            r.serum_sodium.to_string(),
            r.sex.to_string(),
            r.smoking.to_string(),
            r.time.to_string(),
            r.death_event.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Per-feature normalization statistics (population standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub feature: Feature,
    pub mean: f64,
    pub std: f64,
}

/// Z-scores the listed features in place: `x' = (x - mean) / std`. Binary
/// fields are never touched. Returns the statistics needed to invert.
pub fn zscore_normalize(
    records: &[PatientRecord],
    features: &[Feature],
) -> Result<(Vec<PatientRecord>, Vec<FeatureStats>), DataError> {
    if records.is_empty() {
        return Err(DataError::NoRecords);
    }
    let n = records.len() as f64;
    let mut stats = Vec::with_capacity(features.len());
    for &feature in features {
        let mean = records.iter().map(|r| feature.value(r)).sum::<f64>() / n;
        let var = records
            .iter()
            .map(|r| {
                let d = feature.value(r) - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if std == 0.0 {
            return Err(DataError::ZeroVariance { feature });
        }
        stats.push(FeatureStats { feature, mean, std });
    }
    let mut out = records.to_vec();
    for r in &mut out {
        for s in &stats {
            s.feature.set(r, (s.feature.value(r) - s.mean) / s.std);
        }
    }
    Ok((out, stats))
}

/// Applies existing statistics to new records, the test-split path: the
/// statistics come from the train split and never see these records.
pub fn zscore_apply(records: &[PatientRecord], stats: &[FeatureStats]) -> Vec<PatientRecord> {
    let mut out = records.to_vec();
    for r in &mut out {
        for s in stats {
            s.feature.set(r, (s.feature.value(r) - s.mean) / s.std);
        }
    }
    out
}

/// Inverse of [`zscore_normalize`] given its statistics.
pub fn zscore_restore(records: &[PatientRecord], stats: &[FeatureStats]) -> Vec<PatientRecord> {
    let mut out = records.to_vec();
    for r in &mut out {
        for s in stats {
            s.feature.set(r, s.feature.value(r) * s.std + s.mean);
        }
    }
    out
}

/// Death-event counts per fixed-width feature bin; the quantity every
/// figure plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSeries {
    pub feature: Feature,
    /// `len + 1` ascending edges; bin i spans `[edges[i], edges[i+1])`,
    /// with the last bin closed on the right.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<f64>,
    /// Whether counts have been min-max scaled to [0, 1].
    pub normalized: bool,
}

impl FeatureSeries {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Left edge of bin `i`, the x value plots use.
    pub fn bin_start(&self, i: usize) -> f64 {
        self.bin_edges[i]
    }

    /// Copy of the series restricted to bins `from..`.
    pub fn tail(&self, from: usize) -> FeatureSeries {
        FeatureSeries {
            feature: self.feature,
            bin_edges: self.bin_edges[from..].to_vec(),
            counts: self.counts[from..].to_vec(),
            normalized: self.normalized,
        }
    }

    /// Min-max scaled copy plus the scaler that restores count units.
    pub fn min_max_normalized(&self) -> (FeatureSeries, MinMaxScaler) {
        let scaler = MinMaxScaler::fit(&self.counts);
        let scaled = FeatureSeries {
            feature: self.feature,
            bin_edges: self.bin_edges.clone(),
            counts: self.counts.iter().map(|&c| scaler.scale(c)).collect(),
            normalized: true,
        };
        (scaled, scaler)
    }
}

/// Counts death events per fixed-width bin spanning `[min, max]` of the
/// feature. The final bin includes the maximum value.
pub fn aggregate_death_counts(
    records: &[PatientRecord],
    feature: Feature,
    bin_width: f64,
) -> Result<FeatureSeries, DataError> {
    if records.is_empty() {
        return Err(DataError::NoRecords);
    }
    if !(bin_width > 0.0) {
        return Err(DataError::BadBinWidth(bin_width));
    }
    let lo = records
        .iter()
        .map(|r| feature.value(r))
        .fold(f64::INFINITY, f64::min);
    let hi = records
        .iter()
        .map(|r| feature.value(r))
        .fold(f64::NEG_INFINITY, f64::max);
    // Tolerance absorbs decimal round-off (for example 1.8/0.1 = 17.999...).
    const TOL: f64 = 1e-9;
    let n_bins = (((hi - lo) / bin_width - TOL).ceil().max(1.0)) as usize;
    let mut counts = vec![0.0; n_bins];
    for r in records {
        let idx = (((feature.value(r) - lo) / bin_width + TOL).floor() as usize).min(n_bins - 1);
        if r.death_event == 1 {
            counts[idx] += 1.0;
        }
    }
    let bin_edges = (0..=n_bins).map(|i| lo + i as f64 * bin_width).collect();
    Ok(FeatureSeries {
        feature,
        bin_edges,
        counts,
        normalized: false,
    })
}

/// Affine map between count units and the [0, 1] training range. A constant
/// series maps to 0 and restores exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: f64,
    pub range: f64,
}

impl MinMaxScaler {
    pub fn fit(values: &[f64]) -> Self {
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        MinMaxScaler {
            min,
            range: max - min,
        }
    }

    pub fn scale(&self, v: f64) -> f64 {
        if self.range > 0.0 {
            (v - self.min) / self.range
        } else {
            0.0
        }
    }

    pub fn restore(&self, v: f64) -> f64 {
        v * self.range + self.min
    }
}

/// Sliding windows over a (scaled) count series with next-value targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedWindows {
    pub lookback: usize,
    /// `k` windows of `lookback` scaled values each.
    pub inputs: Vec<Vec<f64>>,
    /// Scaled value immediately after each window.
    pub targets: Vec<f64>,
    /// Restores predictions and targets to count units.
    pub scaler: MinMaxScaler,
}

impl SupervisedWindows {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// The windows at the given indices, sharing this scaler.
    pub fn subset(&self, indices: &[usize]) -> SupervisedWindows {
        SupervisedWindows {
            lookback: self.lookback,
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            scaler: self.scaler,
        }
    }
}

/// Frames a count series for supervised next-value prediction. Counts are
/// min-max scaled to [0, 1] first; the scaler rides along for reporting.
pub fn windowize(series: &FeatureSeries, lookback: usize) -> Result<SupervisedWindows, DataError> {
    if lookback == 0 || series.len() <= lookback {
        return Err(DataError::SeriesTooShort {
            len: series.len(),
            lookback,
        });
    }
    let (scaled, scaler) = series.min_max_normalized();
    let k = scaled.len() - lookback;
    let mut inputs = Vec::with_capacity(k);
    let mut targets = Vec::with_capacity(k);
    for start in 0..k {
        inputs.push(scaled.counts[start..start + lookback].to_vec());
        targets.push(scaled.counts[start + lookback]);
    }
    Ok(SupervisedWindows {
        lookback,
        inputs,
        targets,
        scaler,
    })
}

/// Seeded shuffle-then-split. Returns `(train, test)`, both non-empty.
pub fn train_test_split<T: Clone>(
    items: &[T],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), DataError> {
    if !(0.0 < test_fraction && test_fraction < 1.0) {
        return Err(DataError::BadFraction(test_fraction));
    }
    if items.len() < 2 {
        return Err(DataError::TooFewItems {
            needed: 2,
            got: items.len(),
        });
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates over indices keeps the shuffle independent of T.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_test = ((items.len() as f64 * test_fraction).round() as usize).clamp(1, items.len() - 1);
    let split = items.len() - n_test;
    let train = order[..split].iter().map(|&i| items[i].clone()).collect();
    let test = order[split..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, test))
}

/// Split as index lists instead of clones; handy when train and test views
/// must share backing data.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    let indices: Vec<usize> = (0..n).collect();
    train_test_split(&indices, test_fraction, seed)
}

/// Generates `n >= 10` schema-valid records from a seeded generator. Death
/// probability rises with serum creatinine and falls with ejection fraction,
/// so the aggregate figures keep their qualitative shape.
pub fn generate_synthetic(n: usize, seed: u64) -> Result<Vec<PatientRecord>, DataError> {
    if n < 10 {
        return Err(DataError::TooFewItems { needed: 10, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cpk = LogNormal::<f64>::new(5.5, 0.9).expect("valid lognormal");
    let platelets = Normal::<f64>::new(263.0, 97.0).expect("valid normal");
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let age = rng.random_range(40..=95) as f64;
        let ejection_fraction = rng.random_range(15..=70) as f64;
        let serum_creatinine =
            ((0.5 + rng.random_range(0.0..1.0f64).powi(2) * 4.5) * 10.0).round() / 10.0;
        let logit = 0.9 * (serum_creatinine - 1.4) - 0.055 * (ejection_fraction - 38.0)
            + 0.02 * (age - 60.0)
            - 0.55;
        let p_death = 1.0 / (1.0 + (-logit).exp());
        let record = PatientRecord {
            age,
            anaemia: rng.random_bool(0.43) as u8,
            creatinine_phosphokinase: cpk.sample(&mut rng).clamp(23.0, 7861.0).round(),
            diabetes: rng.random_bool(0.42) as u8,
            ejection_fraction,
            high_blood_pressure: rng.random_bool(0.35) as u8,
            platelets: (platelets.sample(&mut rng).clamp(25.0, 850.0) * 1000.0).round(),
            serum_creatinine,
            serum_sodium: rng.random_range(113..=148) as f64,
            sex: rng.random_bool(0.65) as u8,
            smoking: rng.random_bool(0.32) as u8,
            time: rng.random_range(4..=285) as f64,
            death_event: rng.random_bool(p_death) as u8,
        };
        debug_assert!(record.validate().is_ok());
        records.push(record);
    }
    Ok(records)
}
