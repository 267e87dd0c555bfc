//! Two-stage gated scoring.
//!
//! Stage one compares each observation with the generator's forecast band
//! `mu ± kappa·sigma`; only where that violation score clears its adaptive
//! threshold is the combined score `A(t)` (normalized top-k reconstruction
//! error plus normalized critic score) computed and thresholded in turn.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::segments_from_pointwise;
use crate::model::{Critic, CriticParams, Generator, GeneratorParams};
use crate::qsim::NoiseSpec;
use crate::rng::{standard_normal_vec, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Window centred on `t`, truncated at the series ends.
    #[default]
    CenteredOffline,
    /// Trailing window ending at `t`.
    CausalOnline,
}

/// Which signals make up `A(t)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Full,
    CriticOnly,
    ReconstructionOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub kappa: f64,
    pub k_top: usize,
    /// Threshold multiplier for the gate.
    pub k_sens: f64,
    /// Threshold multiplier for `A(t)`; `k_sens` when absent.
    pub k_sens_final: Option<f64>,
    pub threshold_window: usize,
    pub mode: ThresholdMode,
    pub score: ScoreMode,
    /// Score against a sampled `x̂` instead of `mu`.
    pub sample_eps: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            kappa: 2.0,
            k_top: 3,
            k_sens: 1.5,
            k_sens_final: None,
            threshold_window: 59,
            mode: ThresholdMode::CenteredOffline,
            score: ScoreMode::Full,
            sample_eps: false,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self, features: usize) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa {} must be positive", self.kappa)));
        }
        if self.k_top == 0 || self.k_top > features {
            return Err(Error::Config(format!(
                "k_top {} must lie in 1..={features}",
                self.k_top
            )));
        }
        if self.threshold_window < 3 || self.threshold_window % 2 == 0 {
            return Err(Error::Config(format!(
                "threshold_window {} must be odd and at least 3",
                self.threshold_window
            )));
        }
        let k_final = self.k_sens_final.unwrap_or(self.k_sens);
        if !(self.k_sens.is_finite() && k_final.is_finite()) {
            return Err(Error::Config("threshold multipliers must be finite".into()));
        }
        Ok(())
    }

    pub fn final_k_sens(&self) -> f64 {
        self.k_sens_final.unwrap_or(self.k_sens)
    }
}

fn top_k_mean(mut values: Vec<f64>, k: usize) -> Result<f64> {
    if k == 0 || k > values.len() {
        return Err(Error::Config(format!(
            "top-k of {k} over {} features",
            values.len()
        )));
    }
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values[..k].iter().sum::<f64>() / k as f64)
}

/// Mean of the `k_top` largest `max(0, |x − mu| − kappa·sigma)`.
pub fn interval_violation_score(x: &[f64], mu: &[f64], sigma: &[f64], kappa: f64, k_top: usize) -> Result<f64> {
    let v = x
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((x, m), s)| ((x - m).abs() - kappa * s).max(0.0))
        .collect();
    top_k_mean(v, k_top)
}

/// Mean of the `k_top` largest `(x − mu)²`.
pub fn topk_recon_error(x: &[f64], mu: &[f64], k_top: usize) -> Result<f64> {
    top_k_mean(x.iter().zip(mu).map(|(x, m)| (x - m).powi(2)).collect(), k_top)
}

/// `−D(window ∥ x̂)`.
pub fn critic_anomaly_score(
    critic: &Critic,
    params: &CriticParams,
    window: &[f64],
    x_hat: &[f64],
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<f64> {
    Ok(-critic.score(params, window, x_hat, noise, rng)?)
}

/// `mean + k · std` (population) of `segment`.
pub fn adaptive_threshold(segment: &[f64], k_sens: f64) -> Result<f64> {
    if segment.len() < 2 {
        return Err(Error::Input(format!(
            "adaptive threshold needs at least 2 scores, got {}",
            segment.len()
        )));
    }
    let n = segment.len() as f64;
    let mean = segment.iter().sum::<f64>() / n;
    let var = segment.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(mean + k_sens * var.sqrt())
}

/// Per-step thresholds over `scores`. A causal window holding a single score
/// (only at `t = 0`) yields `+∞`, so nothing is flagged there.
pub fn threshold_trace(scores: &[f64], window: usize, k_sens: f64, mode: ThresholdMode) -> Result<Vec<f64>> {
    let n = scores.len();
    let half = window / 2;
    (0..n)
        .map(|t| {
            let (lo, hi) = match mode {
                ThresholdMode::CenteredOffline => (t.saturating_sub(half), (t + half + 1).min(n)),
                ThresholdMode::CausalOnline => ((t + 1).saturating_sub(window), t + 1),
            };
            if hi - lo < 2 {
                if n < 2 {
                    return Err(Error::Input("score trace shorter than 2".into()));
                }
                return Ok(f64::INFINITY);
            }
            adaptive_threshold(&scores[lo..hi], k_sens)
        })
        .collect()
}

/// Validation-set ranges used to map raw scores onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationStats {
    pub topk_min: f64,
    pub topk_max: f64,
    pub critic_min: f64,
    pub critic_max: f64,
}

fn minmax_norm(v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        0.0
    } else {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

impl CalibrationStats {
    pub fn normalize_topk(&self, v: f64) -> f64 {
        minmax_norm(v, self.topk_min, self.topk_max)
    }

    pub fn normalize_critic(&self, v: f64) -> f64 {
        minmax_norm(v, self.critic_min, self.critic_max)
    }

    pub fn write_toml(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("calibration serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }
}

/// Per-step model outputs and unnormalized scores.
#[derive(Clone, Debug, PartialEq)]
pub struct RawScores {
    /// Series row of each entry.
    pub t: Vec<usize>,
    pub d: usize,
    pub s_iv: Vec<f64>,
    pub s_topk: Vec<f64>,
    pub s_critic: Vec<f64>,
    /// `len × d`.
    pub mu: Vec<f64>,
    /// `len × d`.
    pub logvar: Vec<f64>,
}

impl RawScores {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Entries `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> RawScores {
        let d = self.d;
        RawScores {
            t: self.t[start..end].to_vec(),
            d,
            s_iv: self.s_iv[start..end].to_vec(),
            s_topk: self.s_topk[start..end].to_vec(),
            s_critic: self.s_critic[start..end].to_vec(),
            mu: self.mu[start * d..end * d].to_vec(),
            logvar: self.logvar[start * d..end * d].to_vec(),
        }
    }

    /// Index of the first entry at or after series row `row`.
    pub fn position_of_row(&self, row: usize) -> usize {
        self.t.partition_point(|&t| t < row)
    }
}

pub fn calibrate(validation: &RawScores) -> Result<CalibrationStats> {
    if validation.is_empty() {
        return Err(Error::Input("empty validation trace".into()));
    }
    let range = |v: &[f64]| {
        v.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    };
    let (topk_min, topk_max) = range(&validation.s_topk);
    let (critic_min, critic_max) = range(&validation.s_critic);
    Ok(CalibrationStats {
        topk_min,
        topk_max,
        critic_min,
        critic_max,
    })
}

/// Trained networks used for scoring.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub generator: &'a Generator,
    pub generator_params: &'a GeneratorParams,
    pub critic: &'a Critic,
    pub critic_params: &'a CriticParams,
}

/// Scores every row `t ≥ w` of a `T × d` series from the `w` rows before it.
pub fn raw_scores(
    values: &[f64],
    d: usize,
    w: usize,
    models: Models<'_>,
    config: &DetectorConfig,
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<RawScores> {
    config.validate(d)?;
    if d != models.generator.features() {
        return Err(Error::Shape(format!(
            "series has {d} features, model expects {}",
            models.generator.features()
        )));
    }
    let t_len = values.len() / d;
    if t_len < w + 1 {
        return Err(Error::Input(format!(
            "series of length {t_len} is shorter than one window of {} rows",
            w + 1
        )));
    }
    let n = t_len - w;
    let mut out = RawScores {
        t: Vec::with_capacity(n),
        d,
        s_iv: Vec::with_capacity(n),
        s_topk: Vec::with_capacity(n),
        s_critic: Vec::with_capacity(n),
        mu: Vec::with_capacity(n * d),
        logvar: Vec::with_capacity(n * d),
    };
    let zeros = vec![0.0; d];
    for t in w..t_len {
        let window = &values[(t - w) * d..t * d];
        let x = &values[t * d..(t + 1) * d];
        let eps = if config.sample_eps {
            standard_normal_vec(rng, d)
        } else {
            zeros.clone()
        };
        let pass = models
            .generator
            .forward(models.generator_params, window, &eps, noise, rng)?;
        let sigma = pass.out.sigma();
        let s_iv = interval_violation_score(x, &pass.out.mu, &sigma, config.kappa, config.k_top)?;
        let s_topk = topk_recon_error(x, &pass.out.mu, config.k_top)?;
        let s_critic =
            critic_anomaly_score(models.critic, models.critic_params, window, &pass.x_hat, noise, rng)?;
        if !(s_iv.is_finite() && s_topk.is_finite() && s_critic.is_finite()) {
            return Err(Error::Numeric(format!("non-finite score at row {t}")));
        }
        out.t.push(t);
        out.s_iv.push(s_iv);
        out.s_topk.push(s_topk);
        out.s_critic.push(s_critic);
        out.mu.extend_from_slice(&pass.out.mu);
        out.logvar.extend_from_slice(&pass.out.logvar);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTrace {
    pub raw: RawScores,
    pub s_topk_norm: Vec<f64>,
    pub s_critic_norm: Vec<f64>,
    pub a: Vec<f64>,
    pub gate_threshold: Vec<f64>,
    pub a_threshold: Vec<f64>,
    pub gate: Vec<bool>,
    pub anomaly: Vec<bool>,
}

pub const TRACE_FIELDS: [&str; 10] = [
    "t",
    "s_iv",
    "s_topk_raw",
    "s_topk_norm",
    "s_critic_raw",
    "s_critic_norm",
    "a",
    "gate",
    "anomaly",
    "mean_logvar",
];

impl ScoreTrace {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn mean_logvar(&self, i: usize) -> f64 {
        let d = self.raw.d;
        self.raw.logvar[i * d..(i + 1) * d].iter().sum::<f64>() / d as f64
    }

    /// Point-wise flags over `rows` series rows; rows outside the trace are `false`.
    pub fn flags_over(&self, rows: usize) -> Vec<bool> {
        let mut flags = vec![false; rows];
        for (i, &t) in self.raw.t.iter().enumerate() {
            if t < rows {
                flags[t] = self.anomaly[i];
            }
        }
        flags
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = TRACE_FIELDS.join(",");
        text.push('\n');
        for i in 0..self.len() {
            writeln!(
                text,
                "{},{},{},{},{},{},{},{},{},{}",
                self.raw.t[i],
                self.raw.s_iv[i],
                self.raw.s_topk[i],
                self.s_topk_norm[i],
                self.raw.s_critic[i],
                self.s_critic_norm[i],
                self.a[i],
                u8::from(self.gate[i]),
                u8::from(self.anomaly[i]),
                self.mean_logvar(i),
            )
            .expect("writing to a String");
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Rows and anomaly flags read back from a trace CSV.
fn read_trace_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<String>>> {
    let section = path.display().to_string();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::parse(&section, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(&section, e.to_string()))?
        .clone();
    let cols = names
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::parse(&section, format!("missing column {name:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(&section, format!("row {}: {e}", i + 1)))?;
        out.push(cols.iter().map(|&c| rec[c].to_string()).collect());
    }
    Ok(out)
}

fn parse_cell<T: std::str::FromStr>(path: &Path, row: usize, name: &str, cell: &str) -> Result<T> {
    cell.parse()
        .map_err(|_| Error::parse(path.display().to_string(), format!("row {}: bad {name} {cell:?}", row + 1)))
}

/// `(t, anomaly)` pairs of a trace CSV.
pub fn read_trace_flags(path: &Path) -> Result<Vec<(usize, bool)>> {
    read_trace_columns(path, &["t", "anomaly"])?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let t = parse_cell(path, i, "t", &r[0])?;
            let flag = match r[1].as_str() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::parse(
                        path.display().to_string(),
                        format!("row {}: bad anomaly flag {other:?}", i + 1),
                    ))
                }
            };
            Ok((t, flag))
        })
        .collect()
}

/// The plotted columns of a trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TracePlot {
    pub t: Vec<usize>,
    pub a: Vec<f64>,
    pub mean_logvar: Vec<f64>,
}

impl TracePlot {
    pub fn from_trace(trace: &ScoreTrace) -> Self {
        Self {
            t: trace.raw.t.clone(),
            a: trace.a.clone(),
            mean_logvar: (0..trace.len()).map(|i| trace.mean_logvar(i)).collect(),
        }
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut plot = Self { t: vec![], a: vec![], mean_logvar: vec![] };
        for (i, r) in read_trace_columns(path, &["t", "a", "mean_logvar"])?.iter().enumerate() {
            plot.t.push(parse_cell(path, i, "t", &r[0])?);
            plot.a.push(parse_cell(path, i, "a", &r[1])?);
            plot.mean_logvar.push(parse_cell(path, i, "mean_logvar", &r[2])?);
        }
        Ok(plot)
    }
}

/// Thresholds, gates and combines a raw trace.
pub fn finalize(raw: RawScores, calib: &CalibrationStats, config: &DetectorConfig) -> Result<ScoreTrace> {
    let gate_threshold = threshold_trace(&raw.s_iv, config.threshold_window, config.k_sens, config.mode)?;
    let gate: Vec<bool> = raw
        .s_iv
        .iter()
        .zip(&gate_threshold)
        .map(|(s, th)| s > th)
        .collect();
    let s_topk_norm: Vec<f64> = raw.s_topk.iter().map(|&v| calib.normalize_topk(v)).collect();
    let s_critic_norm: Vec<f64> = raw.s_critic.iter().map(|&v| calib.normalize_critic(v)).collect();
    let a: Vec<f64> = (0..raw.len())
        .map(|i| {
            if !gate[i] {
                return 0.0;
            }
            match config.score {
                ScoreMode::Full => s_topk_norm[i] + s_critic_norm[i],
                ScoreMode::CriticOnly => s_critic_norm[i],
                ScoreMode::ReconstructionOnly => s_topk_norm[i],
            }
        })
        .collect();
    let a_threshold = threshold_trace(&a, config.threshold_window, config.final_k_sens(), config.mode)?;
    let anomaly = (0..raw.len())
        .map(|i| gate[i] && a[i] > a_threshold[i])
        .collect();
    Ok(ScoreTrace {
        raw,
        s_topk_norm,
        s_critic_norm,
        a,
        gate_threshold,
        a_threshold,
        gate,
        anomaly,
    })
}

/// [`raw_scores`] followed by [`finalize`].
#[allow(clippy::too_many_arguments)]
pub fn detect(
    values: &[f64],
    d: usize,
    w: usize,
    models: Models<'_>,
    config: &DetectorConfig,
    calib: &CalibrationStats,
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<ScoreTrace> {
    let raw = raw_scores(values, d, w, models, config, noise, rng)?;
    finalize(raw, calib, config)
}

/// Persistence forecast: each row is predicted by the previous one and
/// flagged when its top-k squared error clears the adaptive threshold.
/// Returns flags for every row (row 0 is never flagged).
pub fn last_timestep_baseline(values: &[f64], d: usize, config: &DetectorConfig) -> Result<Vec<bool>> {
    config.validate(d)?;
    let t_len = values.len() / d;
    if t_len < 2 {
        return Err(Error::Input("baseline needs at least 2 rows".into()));
    }
    let scores = (1..t_len)
        .map(|t| topk_recon_error(&values[t * d..(t + 1) * d], &values[(t - 1) * d..t * d], config.k_top))
        .collect::<Result<Vec<f64>>>()?;
    let th = threshold_trace(&scores, config.threshold_window, config.k_sens, config.mode)?;
    let mut flags = vec![false];
    flags.extend(scores.iter().zip(&th).map(|(s, t)| s > t));
    Ok(flags)
}

/// Two stacked panels, `A(t)` and mean log-variance, with shaded truth bands.
pub fn render_svg(plot: &TracePlot, labels: Option<&[bool]>) -> String {
    const W: f64 = 1000.0;
    const PANEL: f64 = 180.0;
    const PAD: f64 = 30.0;
    let t0 = plot.t.first().copied().unwrap_or(0) as f64;
    let t1 = plot.t.last().copied().unwrap_or(1) as f64;
    let span = (t1 - t0).max(1.0);
    let x_of = |t: usize| PAD + (t as f64 - t0) / span * (W - 2.0 * PAD);
    let mut svg = String::new();
    let height = 2.0 * PANEL + 3.0 * PAD;
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{height}" viewBox="0 0 {W} {height}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for (panel, (name, series)) in [("A(t)", &plot.a), ("mean log-variance", &plot.mean_logvar)].into_iter().enumerate() {
        let top = PAD + panel as f64 * (PANEL + PAD);
        if let Some(labels) = labels {
            for seg in &segments_from_pointwise(labels) {
                if (seg.end as f64) < t0 || (seg.start as f64) > t1 {
                    continue;
                }
                let a = x_of(seg.start.max(t0 as usize));
                let b = x_of(seg.end.min(t1 as usize));
                writeln!(
                    svg,
                    r##"<rect x="{a:.2}" y="{top:.2}" width="{:.2}" height="{PANEL}" fill="#f4a6a6" fill-opacity="0.5"/>"##,
                    (b - a).max(1.0)
                )
                .unwrap();
            }
        }
        let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = if hi > lo { hi - lo } else { 1.0 };
        let points: Vec<String> = series
            .iter()
            .zip(&plot.t)
            .map(|(v, &t)| format!("{:.2},{:.2}", x_of(t), top + PANEL - (v - lo) / range * PANEL))
            .collect();
        writeln!(
            svg,
            r##"<rect x="{PAD}" y="{top:.2}" width="{:.2}" height="{PANEL}" fill="none" stroke="#888"/>"##,
            W - 2.0 * PAD
        )
        .unwrap();
        writeln!(
            svg,
            r##"<polyline fill="none" stroke="#1f4e9c" stroke-width="1" points="{}"/>"##,
            points.join(" ")
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{PAD}" y="{:.2}" font-family="sans-serif" font-size="12">{name}</text>"#,
            top - 6.0
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::AnsatzConfig;
    use crate::model::ModelConfig;
    use crate::qsim::Encoding;
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn violation_examples() {
        assert_eq!(interval_violation_score(&[0.5], &[0.5], &[0.1], 2.0, 1).unwrap(), 0.0);
        let v = interval_violation_score(&[0.9], &[0.5], &[0.1], 2.0, 1).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
        // Violations 0, 0.1, 0.3, 0.5 with sigma 0.
        let x = [0.0, 0.1, 0.3, 0.5];
        let v = interval_violation_score(&x, &[0.0; 4], &[0.0; 4], 2.0, 3).unwrap();
        assert!((v - 0.3).abs() < 1e-15);
        assert!(matches!(interval_violation_score(&x, &x, &x, 2.0, 5), Err(Error::Config(_))));
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_recon_error(&[0.3, 0.2], &[0.3, 0.2], 2).unwrap(), 0.0);
        let x = [0.1, 0.2, 0.3, 0.4];
        let e = topk_recon_error(&x, &[0.0; 4], 3).unwrap();
        assert!((e - 0.29 / 3.0).abs() < 1e-15);
        let mse = x.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((topk_recon_error(&x, &[0.0; 4], 4).unwrap() - mse).abs() < 1e-15);
    }

    #[test]
    fn score_monotonicity() {
        let mut r = rng::seeded(2);
        for _ in 0..200 {
            let x: Vec<f64> = (0..4).map(|_| r.random()).collect();
            let mu: Vec<f64> = (0..4).map(|_| r.random()).collect();
            let s: Vec<f64> = (0..4).map(|_| r.random_range(0.01..0.2)).collect();
            let j = r.random_range(0..4);
            let mut further = x.clone();
            further[j] += (x[j] - mu[j]).signum() * r.random::<f64>();
            let base = interval_violation_score(&x, &mu, &s, 2.0, 2).unwrap();
            assert!(interval_violation_score(&further, &mu, &s, 2.0, 2).unwrap() >= base);
            assert!(interval_violation_score(&x, &mu, &s, 3.0, 2).unwrap() <= base);
            let errs: Vec<f64> = (1..=4).map(|k| topk_recon_error(&x, &mu, k).unwrap()).collect();
            assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        }
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(adaptive_threshold(&[0.7; 5], 1.5).unwrap(), 0.7);
        assert_eq!(adaptive_threshold(&[0.0, 2.0], 1.5).unwrap(), 2.5);
        assert!(matches!(adaptive_threshold(&[1.0], 1.5), Err(Error::Input(_))));

        let s = [0.0, 2.0, 4.0, 100.0, 100.0];
        let th = threshold_trace(&s, 3, 1.5, ThresholdMode::CenteredOffline).unwrap();
        assert_eq!(th[0], 2.5);
        assert_eq!(th[1], adaptive_threshold(&s[0..3], 1.5).unwrap());
        assert_eq!(th[4], 100.0);
        let causal = threshold_trace(&s, 3, 1.5, ThresholdMode::CausalOnline).unwrap();
        assert_eq!(causal[0], f64::INFINITY);
        assert_eq!(causal[1], 2.5);
        assert_eq!(causal[2], adaptive_threshold(&s[0..3], 1.5).unwrap());
    }

    #[test]
    fn calibration_rules() {
        let raw = RawScores {
            t: vec![3, 4],
            d: 1,
            s_iv: vec![0.0, 0.0],
            s_topk: vec![1.0, 3.0],
            s_critic: vec![5.0, 5.0],
            mu: vec![0.0, 0.0],
            logvar: vec![0.0, 0.0],
        };
        let c = calibrate(&raw).unwrap();
        assert_eq!((c.topk_min, c.topk_max), (1.0, 3.0));
        assert_eq!(c.normalize_topk(2.0), 0.5);
        assert_eq!(c.normalize_topk(9.0), 1.0);
        assert_eq!(c.normalize_critic(5.0), 0.0);
        assert_eq!(c.normalize_critic(7.0), 0.0);
        assert!(calibrate(&raw.slice(0, 0)).is_err());
    }

    fn raw_fixture(n: usize, seed: u64) -> RawScores {
        let mut r = rng::seeded(seed);
        let mut v = |s: f64| (0..n).map(|_| r.random::<f64>() * s).collect::<Vec<f64>>();
        RawScores {
            t: (0..n).collect(),
            d: 1,
            s_iv: v(1.0),
            s_topk: v(2.0),
            s_critic: v(3.0),
            mu: v(1.0),
            logvar: v(1.0),
        }
    }

    #[test]
    fn gate_contract() {
        for mode in [ThresholdMode::CenteredOffline, ThresholdMode::CausalOnline] {
            for score in [ScoreMode::Full, ScoreMode::CriticOnly, ScoreMode::ReconstructionOnly] {
                let raw = raw_fixture(300, 1);
                let calib = calibrate(&raw.slice(0, 100)).unwrap();
                let cfg = DetectorConfig {
                    k_top: 1,
                    threshold_window: 21,
                    mode,
                    score,
                    ..DetectorConfig::default()
                };
                let tr = finalize(raw, &calib, &cfg).unwrap();
                for i in 0..tr.len() {
                    assert!(!tr.anomaly[i] || tr.gate[i]);
                    if !tr.gate[i] {
                        assert_eq!(tr.a[i], 0.0);
                    }
                    assert!((0.0..=1.0).contains(&tr.s_topk_norm[i]));
                    assert!((0.0..=1.0).contains(&tr.s_critic_norm[i]));
                    assert!((0.0..=2.0).contains(&tr.a[i]));
                }
                assert!(tr.gate.iter().any(|&g| g));
            }
        }
    }

    #[test]
    fn critic_score_is_negated() {
        let model = ModelConfig::new(
            2,
            2,
            AnsatzConfig {
                n_qubits: 2,
                n_blocks: 2,
                injection_blocks: 1,
                encoding: Encoding::ArcTan,
            },
        );
        let critic = Critic::new(&model).unwrap();
        let p = critic.init_params(&mut rng::seeded(0));
        let noise = NoiseSpec::noiseless();
        let mut r = rng::seeded(1);
        for _ in 0..10 {
            let win: Vec<f64> = (0..4).map(|_| r.random()).collect();
            let x: Vec<f64> = (0..2).map(|_| r.random()).collect();
            let s = critic_anomaly_score(&critic, &p, &win, &x, &noise, &mut r).unwrap();
            let d = critic.score(&p, &win, &x, &noise, &mut r).unwrap();
            assert_eq!(s.to_bits(), (-d).to_bits());
        }
        let zero = critic.zero_params();
        let s = critic_anomaly_score(&critic, &zero, &[0.1, 0.2], &[0.3, 0.4], &noise, &mut r).unwrap();
        assert_eq!(s, -0.0);
    }

    #[test]
    fn detection_is_deterministic_and_checks_length() {
        let model = ModelConfig::new(
            1,
            2,
            AnsatzConfig {
                n_qubits: 2,
                n_blocks: 2,
                injection_blocks: 1,
                encoding: Encoding::ArcTan,
            },
        );
        let (g, c, gp, cp) = crate::trainer::init_models(&model, 0).unwrap();
        let models = Models {
            generator: &g,
            generator_params: &gp,
            critic: &c,
            critic_params: &cp,
        };
        let cfg = DetectorConfig {
            k_top: 1,
            threshold_window: 5,
            ..DetectorConfig::default()
        };
        let series: Vec<f64> = (0..40).map(|t| 0.5 + 0.2 * (t as f64 / 5.0).sin()).collect();
        let noise = NoiseSpec::noiseless();
        let raw = raw_scores(&series, 1, 3, models, &cfg, &noise, &mut rng::seeded(0)).unwrap();
        let again = raw_scores(&series, 1, 3, models, &cfg, &noise, &mut rng::seeded(9)).unwrap();
        assert_eq!(raw, again);
        assert_eq!(raw.t.first(), Some(&3));
        assert!(matches!(
            raw_scores(&series[..3], 1, 3, models, &cfg, &noise, &mut rng::seeded(0)),
            Err(Error::Input(_))
        ));
        let calib = calibrate(&raw).unwrap();
        let tr = finalize(raw, &calib, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        tr.write_csv(&p).unwrap();
        let back = read_trace_flags(&p).unwrap();
        assert_eq!(back.len(), tr.len());
        assert!(back.iter().zip(&tr.anomaly).all(|((_, a), b)| a == b));
        let svg = render_svg(&TracePlot::from_trace(&tr), Some(&vec![false; 40]));
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }

    #[test]
    fn baseline_flags_a_jump() {
        let mut series: Vec<f64> = (0..200).map(|t| 0.5 + 0.01 * ((t * 7) % 5) as f64).collect();
        series[120] += 0.5;
        let cfg = DetectorConfig {
            k_top: 1,
            threshold_window: 21,
            ..DetectorConfig::default()
        };
        let flags = last_timestep_baseline(&series, 1, &cfg).unwrap();
        assert_eq!(flags.len(), 200);
        assert!(flags[120]);
    }
}
