//! Pipeline configuration and the `qtsad` subcommands.
//!
//! Every command reads one TOML [`PipelineConfig`]; values may be overridden
//! with `QTSAD_<SECTION>_<KEY>` environment variables and a few flags.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    self, estimate_window_size, gini_feature_importance, kmeans_downsample, load_csv, make_windows,
    minmax_apply, minmax_fit, FeatureImportance, ForestConfig, NormalizationStats, SynthSpec,
    TimeSeriesTable, WindowSet,
};
use crate::detect::{
    self, calibrate, finalize, raw_scores, CalibrationStats, DetectorConfig, Models, RawScores,
    ScoreTrace,
};
use crate::error::{Error, Result};
use crate::layers::AnsatzConfig;
use crate::metrics::{MetricReport, DEFAULT_THETA};
use crate::model::{Critic, Generator, ModelConfig};
use crate::qsim::NoiseSpec;
use crate::rng;
use crate::trainer::{
    init_models, train_from, write_history_csv, Checkpoint, CheckpointMeta, EpochRecord,
    TrainConfig,
};

pub const ENV_PREFIX: &str = "QTSAD_";

/// Fixed conditioning length or `"estimate"` from the labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WindowSize {
    Fixed(usize),
    Named(WindowKeyword),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKeyword {
    Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Labeled series; split into train and test by `train_fraction` unless
    /// `test_path` is given, in which case it is the training series.
    pub path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub label_column: Option<String>,
    pub train_fraction: f64,
    /// Leading share of the test rows used for calibration and model selection.
    pub validation_fraction: f64,
    /// Features kept after Gini ranking; all when at least the column count.
    pub feature_count: usize,
    pub window: WindowSize,
    /// Step between training windows; `window + 1` (no overlap) when absent.
    pub stride: Option<usize>,
    /// K-means centroids replacing the training windows; 0 disables.
    pub n_clusters: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            test_path: None,
            label_column: Some("label".into()),
            train_fraction: 0.5,
            validation_fraction: 1.0 / 3.0,
            feature_count: 16,
            window: WindowSize::Fixed(3),
            stride: None,
            n_clusters: 300,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub generator: AnsatzConfig,
    pub critic: AnsatzConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dim: 6,
            generator: AnsatzConfig::default(),
            critic: AnsatzConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub theta: f64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { theta: DEFAULT_THETA }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    /// Keep the epoch with the best validation TaF1 when labels exist.
    pub enabled: bool,
    /// Evaluate every this many epochs.
    pub every: usize,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            enabled: true,
            every: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataSection,
    pub synth: SynthSpec,
    pub forest: ForestConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub selection: SelectionSection,
    pub detect: DetectorConfig,
    pub evaluate: EvaluateSection,
}

impl PipelineConfig {
    /// Parses TOML text, then applies `QTSAD_*` overrides from `env`.
    /// Relative data paths are resolved against `base_dir`.
    pub fn from_toml_str(
        text: &str,
        env: impl IntoIterator<Item = (String, String)>,
        base_dir: Option<&Path>,
    ) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(PipelineConfig::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        deep_merge(&mut merged, user);
        for (k, v) in env {
            if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
                set_override(&mut merged, &rest.to_ascii_lowercase(), &v);
            }
        }
        let mut cfg: PipelineConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(base) = base_dir {
            for p in [&mut cfg.data.path, &mut cfg.data.test_path].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, std::env::vars(), path.parent())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) && d.test_path.is_none() {
            return Err(Error::Config("data.train_fraction must lie in (0, 1)".into()));
        }
        if !(d.validation_fraction > 0.0 && d.validation_fraction < 1.0) {
            return Err(Error::Config("data.validation_fraction must lie in (0, 1)".into()));
        }
        if d.feature_count == 0 {
            return Err(Error::Config("data.feature_count must be positive".into()));
        }
        if matches!(d.window, WindowSize::Fixed(0)) || d.stride == Some(0) {
            return Err(Error::Config("data.window and data.stride must be positive".into()));
        }
        if self.selection.every == 0 {
            return Err(Error::Config("selection.every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.evaluate.theta) {
            return Err(Error::Config("evaluate.theta must lie in [0, 1]".into()));
        }
        if self.model.hidden_dim == 0 {
            return Err(Error::Config("model.hidden_dim must be positive".into()));
        }
        self.train.validate()?;
        if self.detect.threshold_window < 3 || self.detect.threshold_window % 2 == 0 {
            return Err(Error::Config("detect.threshold_window must be odd and at least 3".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, features: usize) -> ModelConfig {
        ModelConfig {
            features,
            hidden_dim: self.model.hidden_dim,
            generator: self.model.generator,
            critic: self.model.critic,
        }
    }

    /// Sets every seed to `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.forest.seed = seed;
        self.train.seed = seed;
    }
}

fn deep_merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Walks `key` (lowercase, `_`-joined) into nested tables, preferring the
/// longest existing table name at each level.
fn set_override(table: &mut toml::Table, key: &str, raw: &str) {
    if table.contains_key(key) && !table[key].is_table() {
        table.insert(key.to_string(), parse_env_value(raw));
        return;
    }
    let mut names: Vec<String> = table
        .iter()
        .filter(|(name, v)| v.is_table() && key.starts_with(&format!("{name}_")))
        .map(|(name, _)| name.clone())
        .collect();
    names.sort_by_key(|n| std::cmp::Reverse(n.len()));
    if let Some(name) = names.first() {
        let rest = key[name.len() + 1..].to_string();
        if let Some(toml::Value::Table(sub)) = table.get_mut(name) {
            set_override(sub, &rest, raw);
            return;
        }
    }
    table.insert(key.to_string(), parse_env_value(raw));
}

/// Normalized train/test tables plus the preprocessing decisions.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: TimeSeriesTable,
    pub test: TimeSeriesTable,
    /// Test rows before this index form the validation split.
    pub validation_rows: usize,
    pub stats: NormalizationStats,
    pub features: Vec<String>,
    pub ranking: Option<Vec<FeatureImportance>>,
    pub window: usize,
}

/// Loads, splits, ranks features, fixes the window size and normalizes.
pub fn prepare(config: &PipelineConfig) -> Result<PreparedData> {
    let d = &config.data;
    let label = d.label_column.as_deref();
    let path = d
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("data.path is required".into()))?;
    let primary = load_csv(path, label)?;
    let (train, test) = match &d.test_path {
        Some(tp) => (primary, load_csv(tp, label)?),
        None => {
            let cut = (primary.len() as f64 * d.train_fraction).round() as usize;
            if cut == 0 || cut >= primary.len() {
                return Err(Error::Input("train/test split leaves an empty part".into()));
            }
            (primary.slice(0, cut), primary.slice(cut, primary.len()))
        }
    };
    if train.feature_names != test.feature_names {
        return Err(Error::Input("train and test files have different columns".into()));
    }
    prepare_tables(config, train, test)
}

pub fn prepare_tables(config: &PipelineConfig, train: TimeSeriesTable, test: TimeSeriesTable) -> Result<PreparedData> {
    let d = &config.data;
    let validation_rows = (test.len() as f64 * d.validation_fraction).round() as usize;
    if validation_rows == 0 || validation_rows >= test.len() {
        return Err(Error::Input("validation split leaves an empty part".into()));
    }

    let validation = test.slice(0, validation_rows);
    let (features, ranking) = if d.feature_count >= train.n_features() {
        (train.feature_names.clone(), None)
    } else {
        // Rank on the labeled validation rows; the training split is normal-only.
        let forest = ForestConfig {
            seed: config.forest.seed,
            ..config.forest
        };
        let ranking = gini_feature_importance(&validation, &forest)?;
        let mut keep: Vec<String> = ranking[..d.feature_count].iter().map(|r| r.feature.clone()).collect();
        // Keep the original column order.
        keep.sort_by_key(|f| train.feature_names.iter().position(|n| n == f));
        (keep, Some(ranking))
    };
    let train = train.select_features(&features)?;
    let test = test.select_features(&features)?;

    let window = match d.window {
        WindowSize::Fixed(w) => w,
        WindowSize::Named(WindowKeyword::Estimate) => {
            let labels = validation
                .labels
                .as_ref()
                .ok_or_else(|| Error::Input("window estimation needs labels".into()))?;
            estimate_window_size(labels)?
        }
    };
    let stats = minmax_fit(&train)?;
    Ok(PreparedData {
        train: minmax_apply(&train, &stats)?,
        test: minmax_apply(&test, &stats)?,
        validation_rows,
        stats,
        features,
        ranking,
        window,
    })
}

/// Non-overlapping windows of the training split, optionally replaced by centroids.
pub fn training_windows(config: &PipelineConfig, prep: &PreparedData) -> Result<WindowSet> {
    let stride = config.data.stride.unwrap_or(prep.window + 1);
    let windows = make_windows(&prep.train, prep.window, stride)?;
    let k = config.data.n_clusters;
    if k > 0 && windows.len() > k {
        Ok(kmeans_downsample(&windows, k, config.seed)?.0)
    } else {
        Ok(windows)
    }
}

/// Runs the detector over the whole test table; the first
/// `validation_rows` entries are used for calibration only.
pub struct Detection {
    pub calibration: CalibrationStats,
    pub raw: RawScores,
    /// Trace over the evaluation rows (after validation).
    pub trace: ScoreTrace,
}

pub fn score_series(
    ckpt: &Checkpoint,
    values: &[f64],
    detector: &DetectorConfig,
) -> Result<RawScores> {
    let generator = Generator::new(&ckpt.meta.model)?;
    let critic = Critic::new(&ckpt.meta.model)?;
    let models = Models {
        generator: &generator,
        generator_params: &ckpt.generator,
        critic: &critic,
        critic_params: &ckpt.critic,
    };
    // Inference is noiseless; the stream is only drawn from when sampling eps.
    let mut r = rng::derived(ckpt.meta.train.seed, 3);
    raw_scores(
        values,
        ckpt.meta.model.features,
        ckpt.meta.window,
        models,
        detector,
        &NoiseSpec::noiseless(),
        &mut r,
    )
}

/// Splits raw scores at `validation_rows`, calibrates on the first part and
/// thresholds the second.
pub fn split_and_finalize(raw: &RawScores, validation_rows: usize, detector: &DetectorConfig) -> Result<(CalibrationStats, ScoreTrace)> {
    let cut = raw.position_of_row(validation_rows);
    if cut == 0 || cut >= raw.len() {
        return Err(Error::Input("validation split leaves no scored rows on one side".into()));
    }
    let calibration = calibrate(&raw.slice(0, cut))?;
    let trace = finalize(raw.slice(cut, raw.len()), &calibration, detector)?;
    Ok((calibration, trace))
}

pub fn run_detection(ckpt: &Checkpoint, prep: &PreparedData, detector: &DetectorConfig) -> Result<Detection> {
    let raw = score_series(ckpt, &prep.test.values, detector)?;
    let (calibration, trace) = split_and_finalize(&raw, prep.validation_rows, detector)?;
    Ok(Detection {
        calibration,
        raw,
        trace,
    })
}

/// Metrics of a trace against the labels of the rows it covers.
pub fn evaluate_trace(trace: &ScoreTrace, labels: &[bool], theta: f64) -> Result<MetricReport> {
    let rows: Vec<(usize, bool)> = trace.raw.t.iter().copied().zip(trace.anomaly.iter().copied()).collect();
    evaluate_rows(&rows, labels, theta)
}

/// `rows` are `(series row, flag)` pairs; they must be consecutive and inside `labels`.
pub fn evaluate_rows(rows: &[(usize, bool)], labels: &[bool], theta: f64) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(Error::Input("trace is empty".into()));
    }
    let first = rows[0].0;
    for (i, (t, _)) in rows.iter().enumerate() {
        if *t != first + i {
            return Err(Error::Input(format!("trace rows are not consecutive at entry {i}")));
        }
    }
    let last = first + rows.len();
    if last > labels.len() {
        return Err(Error::Input(format!(
            "trace covers rows up to {} but only {} labels exist",
            last - 1,
            labels.len()
        )));
    }
    let flags: Vec<bool> = rows.iter().map(|r| r.1).collect();
    MetricReport::compute(&flags, &labels[first..last], theta)
}

/// Trains on the prepared data. With selection enabled and validation labels
/// present, the epoch with the best validation TaF1 is kept.
pub fn train_pipeline(config: &PipelineConfig, prep: &PreparedData) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let windows = training_windows(config, prep)?;
    let model = config.model_config(prep.features.len());
    let (generator, critic, gp, cp) = init_models(&model, config.train.seed)?;
    let meta = CheckpointMeta {
        model,
        train: config.train,
        window: prep.window,
        normalization: Some(prep.stats.clone()),
    };
    let validation = prep.test.slice(0, prep.validation_rows);
    let labels = validation
        .labels
        .clone()
        .filter(|l| l.iter().any(|&x| x) && config.selection.enabled);
    let outcome = match labels {
        Some(labels) => {
            let every = config.selection.every;
            let select = |epoch: usize, g: &_, c: &_| -> Result<f64> {
                if epoch % every != 0 && epoch != config.train.epochs {
                    return Ok(f64::NEG_INFINITY);
                }
                let models = Models {
                    generator: &generator,
                    generator_params: g,
                    critic: &critic,
                    critic_params: c,
                };
                let mut r = rng::derived(config.train.seed, 3);
                let raw = raw_scores(
                    &validation.values,
                    validation.n_features(),
                    prep.window,
                    models,
                    &config.detect,
                    &NoiseSpec::noiseless(),
                    &mut r,
                )?;
                let calib = calibrate(&raw)?;
                let trace = finalize(raw, &calib, &config.detect)?;
                Ok(evaluate_trace(&trace, &labels, config.evaluate.theta)?.taf1)
            };
            train_from(&generator, &critic, gp, cp, &config.train, &windows, Some(select))?
        }
        None => train_from(
            &generator,
            &critic,
            gp,
            cp,
            &config.train,
            &windows,
            None::<fn(usize, &_, &_) -> Result<f64>>,
        )?,
    };
    let history = outcome.history.clone();
    Ok((Checkpoint::from_outcome(meta, &outcome), history))
}

#[derive(Parser, Debug)]
#[command(name = "qtsad", version, about = "Quantum-hybrid WGAN-GP time-series anomaly detection")]
pub struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file (synth) or directory (other commands).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint file to write (train) or read (calibrate, detect).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a labeled synthetic series as CSV.
    Synth,
    /// Fit normalization, rank features and fix the window size.
    Preprocess,
    /// Train the generator and critic; writes a checkpoint and history.csv.
    Train,
    /// Compute score calibration on the validation split.
    Calibrate,
    /// Score the evaluation split; writes trace.csv and trace.svg.
    Detect,
    /// Compute metrics for a trace against the configured labels.
    Evaluate {
        /// Trace CSV; defaults to <out>/trace.csv.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Redraw the SVG of a trace CSV.
    Plot {
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn checkpoint_path(cli: &Cli, out: &Path) -> PathBuf {
    cli.checkpoint.clone().unwrap_or_else(|| out.join("model.ckpt"))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::from_toml_str("", std::env::vars(), None)?,
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct PreprocessReport<'a> {
    window: usize,
    validation_rows: usize,
    train_rows: usize,
    test_rows: usize,
    features: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    ranking: Option<&'a [FeatureImportance]>,
}

/// Labels of the test split as used by detect and evaluate.
fn test_labels(prep: &PreparedData) -> Result<Vec<bool>> {
    prep.test
        .labels
        .clone()
        .ok_or_else(|| Error::Input("the test data has no label column".into()))
}

/// Runs one command; returns the text to print on success.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("synth.csv"));
            let table = data::synth_generate(&cfg.synth)?;
            table.write_csv(&out)?;
            Ok(format!("wrote {} rows to {}", table.len(), out.display()))
        }
        Command::Preprocess => {
            let out = out_dir(cli)?;
            let prep = prepare(&cfg)?;
            write_text(
                &out.join("normalization.toml"),
                &toml::to_string(&prep.stats).expect("stats serialize"),
            )?;
            let report = PreprocessReport {
                window: prep.window,
                validation_rows: prep.validation_rows,
                train_rows: prep.train.len(),
                test_rows: prep.test.len(),
                features: &prep.features,
                ranking: prep.ranking.as_deref(),
            };
            write_text(&out.join("preprocess.toml"), &toml::to_string(&report).expect("report serializes"))?;
            Ok(format!(
                "window {}, {} features, {} train rows, {} test rows",
                prep.window,
                prep.features.len(),
                prep.train.len(),
                prep.test.len()
            ))
        }
        Command::Train => {
            let out = out_dir(cli)?;
            let prep = prepare(&cfg)?;
            let (ckpt, history) = train_pipeline(&cfg, &prep)?;
            let path = checkpoint_path(cli, &out);
            ckpt.save(&path)?;
            write_history_csv(&history, &out.join("history.csv"))?;
            Ok(format!(
                "trained {} epochs (kept epoch {}), checkpoint {}",
                history.len(),
                ckpt.epoch,
                path.display()
            ))
        }
        Command::Calibrate => {
            let out = out_dir(cli)?;
            let ckpt = Checkpoint::load(&checkpoint_path(cli, &out))?;
            let prep = prepare_for_checkpoint(&cfg, &ckpt)?;
            let validation = prep.test.slice(0, prep.validation_rows);
            let raw = score_series(&ckpt, &validation.values, &cfg.detect)?;
            let calib = calibrate(&raw)?;
            calib.write_toml(&out.join("calibration.toml"))?;
            Ok(format!("calibrated on {} validation rows", raw.len()))
        }
        Command::Detect => {
            let out = out_dir(cli)?;
            let ckpt = Checkpoint::load(&checkpoint_path(cli, &out))?;
            let prep = prepare_for_checkpoint(&cfg, &ckpt)?;
            let raw = score_series(&ckpt, &prep.test.values, &cfg.detect)?;
            let cut = raw.position_of_row(prep.validation_rows);
            let calib_path = out.join("calibration.toml");
            let calib = if calib_path.exists() {
                CalibrationStats::read_toml(&calib_path)?
            } else {
                let c = calibrate(&raw.slice(0, cut))?;
                c.write_toml(&calib_path)?;
                c
            };
            if cut >= raw.len() {
                return Err(Error::Input("no rows left after the validation split".into()));
            }
            let trace = finalize(raw.slice(cut, raw.len()), &calib, &cfg.detect)?;
            trace.write_csv(&out.join("trace.csv"))?;
            let svg = detect::render_svg(&detect::TracePlot::from_trace(&trace), prep.test.labels.as_deref());
            write_text(&out.join("trace.svg"), &svg)?;
            let flagged = trace.anomaly.iter().filter(|&&a| a).count();
            Ok(format!("{flagged} of {} rows flagged", trace.len()))
        }
        Command::Evaluate { trace } => {
            let out = out_dir(cli)?;
            let trace_path = trace.clone().unwrap_or_else(|| out.join("trace.csv"));
            let rows = detect::read_trace_flags(&trace_path)?;
            let prep = prepare(&cfg)?;
            let labels = test_labels(&prep)?;
            let report = evaluate_rows(&rows, &labels, cfg.evaluate.theta)?;
            report.write_toml(&out.join("metrics.toml"))?;
            report.write_csv(&out.join("metrics.csv"))?;
            Ok(report.table())
        }
        Command::Plot { trace } => {
            let out = out_dir(cli)?;
            let trace_path = trace.clone().unwrap_or_else(|| out.join("trace.csv"));
            let tr = detect::TracePlot::read_csv(&trace_path)?;
            let labels = cfg
                .data
                .path
                .as_ref()
                .map(|_| prepare(&cfg).map(|p| p.test.labels))
                .transpose()?
                .flatten();
            let svg = detect::render_svg(&tr, labels.as_deref());
            let path = out.join("trace.svg");
            write_text(&path, &svg)?;
            Ok(format!("wrote {}", path.display()))
        }
    }
}

/// [`prepare`] with the window and normalization stored in the checkpoint.
fn prepare_for_checkpoint(cfg: &PipelineConfig, ckpt: &Checkpoint) -> Result<PreparedData> {
    let mut prep = prepare(cfg)?;
    if let Some(stats) = &ckpt.meta.normalization {
        if stats.features != prep.features {
            return Err(Error::Input("checkpoint was trained on different features".into()));
        }
        if *stats != prep.stats {
            return Err(Error::Input(
                "checkpoint normalization differs from this configuration's training split".into(),
            ));
        }
    }
    prep.window = ckpt.meta.window;
    Ok(prep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_config_is_default() {
        let cfg = PipelineConfig::from_toml_str("", env(&[]), None).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn file_then_env_precedence() {
        let text = "seed = 4\n[train]\nepochs = 7\nlambda_gp = 2.5\n[data]\nwindow = \"estimate\"\n";
        let cfg = PipelineConfig::from_toml_str(
            text,
            env(&[
                ("QTSAD_TRAIN_EPOCHS", "9"),
                ("QTSAD_DETECT_K_SENS", "2.25"),
                ("QTSAD_MODEL_CRITIC_N_QUBITS", "3"),
                ("QTSAD_DATA_LABEL_COLUMN", "attack"),
                ("OTHER_TRAIN_EPOCHS", "1"),
            ]),
            None,
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.lambda_gp, 2.5);
        assert_eq!(cfg.detect.k_sens, 2.25);
        assert_eq!(cfg.model.critic.n_qubits, 3);
        assert_eq!(cfg.model.generator.n_qubits, AnsatzConfig::default().n_qubits);
        assert_eq!(cfg.data.label_column.as_deref(), Some("attack"));
        assert_eq!(cfg.data.window, WindowSize::Named(WindowKeyword::Estimate));
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        for text in [
            "[train]\nepochz = 3\n",
            "bogus = 1\n",
            "[data]\nwindow = \"guess\"\n",
            "[detect]\nthreshold_window = 10\n",
            "[evaluate]\ntheta = 1.5\n",
            "[train]\ncritic_learning_rate = -1.0\n",
        ] {
            let err = PipelineConfig::from_toml_str(text, env(&[]), None).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn relative_paths_follow_config_dir() {
        let cfg = PipelineConfig::from_toml_str(
            "[data]\npath = \"a.csv\"\n",
            env(&[]),
            Some(Path::new("/x/y")),
        )
        .unwrap();
        assert_eq!(cfg.data.path.unwrap(), PathBuf::from("/x/y/a.csv"));
    }

    #[test]
    fn round_trip_through_toml() {
        let mut cfg = PipelineConfig::default();
        cfg.reseed(11);
        cfg.train.critic_learning_rate = Some(0.01);
        let back = PipelineConfig::from_toml_str(&cfg.to_toml(), env(&[]), None).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn evaluate_rows_checks_alignment() {
        let labels = [false, true, true, false, false];
        let r = evaluate_rows(&[(1, true), (2, true), (3, false)], &labels, 0.5).unwrap();
        assert_eq!(r.taf1, 1.0);
        assert!(evaluate_rows(&[(1, true), (3, true)], &labels, 0.5).is_err());
        assert!(evaluate_rows(&[(4, true), (5, true)], &labels, 0.5).is_err());
    }
}
