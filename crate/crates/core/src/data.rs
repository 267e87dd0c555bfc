//! Series ingestion and preprocessing: CSV tables, min-max scaling, windows,
//! K-means downsampling, Gini feature ranking, window-size estimation and a
//! synthetic ICS-style generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::segments_from_pointwise;
use crate::rng::{self, Rng};

/// Names recognised as the timestamp column (case-insensitive).
const TIMESTAMP_NAMES: [&str; 2] = ["timestamp", "time"];

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesTable {
    pub timestamps: Vec<f64>,
    /// `T × d`, row-major.
    pub values: Vec<f64>,
    pub feature_names: Vec<String>,
    /// `true` marks an attack step.
    pub labels: Option<Vec<bool>>,
}

impl TimeSeriesTable {
    pub fn new(
        timestamps: Vec<f64>,
        values: Vec<f64>,
        feature_names: Vec<String>,
        labels: Option<Vec<bool>>,
    ) -> Result<Self> {
        let d = feature_names.len();
        let t = timestamps.len();
        if d == 0 {
            return Err(Error::Input("table has no feature columns".into()));
        }
        if values.len() != t * d {
            return Err(Error::Shape(format!(
                "{} values for {t} rows of {d} features",
                values.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != t {
                return Err(Error::Shape(format!("{} labels for {t} rows", l.len())));
            }
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Input(format!(
                "timestamps not strictly increasing at row {}",
                i + 1
            )));
        }
        Ok(Self {
            timestamps,
            values,
            feature_names,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.n_features();
        &self.values[t * d..(t + 1) * d]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values
            .chunks_exact(self.n_features())
            .map(|r| r[j])
            .collect()
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> TimeSeriesTable {
        let d = self.n_features();
        TimeSeriesTable {
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values[start * d..end * d].to_vec(),
            feature_names: self.feature_names.clone(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
        }
    }

    /// Keeps only the named features, in the given order.
    pub fn select_features(&self, names: &[String]) -> Result<TimeSeriesTable> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.feature_names
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| Error::Input(format!("feature {n:?} not in table")))
            })
            .collect::<Result<_>>()?;
        let values = self
            .values
            .chunks_exact(self.n_features())
            .flat_map(|r| idx.iter().map(move |&j| r[j]))
            .collect();
        Ok(TimeSeriesTable {
            timestamps: self.timestamps.clone(),
            values,
            feature_names: names.to_vec(),
            labels: self.labels.clone(),
        })
    }

    /// Writes `timestamp,<features…>[,label]`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.feature_names.iter().cloned());
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for t in 0..self.len() {
            let mut rec = vec![fmt_f64(self.timestamps[t])];
            rec.extend(self.row(t).iter().map(|v| fmt_f64(*v)));
            if let Some(l) = &self.labels {
                rec.push(if l[t] { "1" } else { "0" }.into());
            }
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path.display().to_string(), format!("{other:?}")),
    }
}

fn parse_timestamp(cell: &str) -> Option<f64> {
    if let Ok(v) = cell.parse::<f64>() {
        return Some(v);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
        if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(cell, fmt) {
            let utc = dt.and_utc();
            return Some(utc.timestamp() as f64 + f64::from(utc.timestamp_subsec_nanos()) * 1e-9);
        }
    }
    None
}

/// Reads a headered numeric CSV. A `timestamp`/`time` column, when present,
/// supplies timestamps (numbers or `YYYY-MM-DD HH:MM:SS`); otherwise the row
/// index is used. `label_column`, when given, must hold 0/1 values.
pub fn load_csv(path: &Path, label_column: Option<&str>) -> Result<TimeSeriesTable> {
    let section = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_io(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let ts_col = headers
        .iter()
        .position(|h| TIMESTAMP_NAMES.contains(&h.to_ascii_lowercase().as_str()));
    let label_col = match label_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::parse(&section, format!("label column {name:?} not found in header"))
        })?),
        None => None,
    };
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| Some(c) != ts_col && Some(c) != label_col)
        .collect();
    let feature_names = feature_cols.iter().map(|&c| headers[c].clone()).collect();

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut labels = label_col.map(|_| Vec::new());
    for (i, rec) in reader.records().enumerate() {
        // Row numbers are 1-based data rows; the header is row 0.
        let row = i + 1;
        let rec = rec.map_err(|e| Error::parse(&section, format!("row {row}: {e}")))?;
        if rec.len() != headers.len() {
            return Err(Error::parse(
                &section,
                format!("row {row}: {} cells, header has {}", rec.len(), headers.len()),
            ));
        }
        let ts = match ts_col {
            Some(c) => parse_timestamp(&rec[c]).ok_or_else(|| {
                Error::parse(&section, format!("row {row}: bad timestamp {:?}", &rec[c]))
            })?,
            None => i as f64,
        };
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(Error::parse(
                    &section,
                    format!("row {row}: timestamp {ts} does not increase"),
                ));
            }
        }
        timestamps.push(ts);
        for &c in &feature_cols {
            let v: f64 = rec[c].parse().map_err(|_| {
                Error::parse(
                    &section,
                    format!("row {row}, column {:?}: non-numeric value {:?}", headers[c], &rec[c]),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::parse(
                    &section,
                    format!("row {row}, column {:?}: non-finite value", headers[c]),
                ));
            }
            values.push(v);
        }
        if let (Some(c), Some(l)) = (label_col, labels.as_mut()) {
            let flag = match rec[c].parse::<f64>() {
                Ok(v) if v == 0.0 => false,
                Ok(v) if v == 1.0 => true,
                _ => {
                    return Err(Error::parse(
                        &section,
                        format!("row {row}: label {:?} is not 0 or 1", &rec[c]),
                    ))
                }
            };
            l.push(flag);
        }
    }
    TimeSeriesTable::new(timestamps, values, feature_names, labels)
}

/// Per-feature training-set minimum and maximum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub features: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn minmax_fit(table: &TimeSeriesTable) -> Result<NormalizationStats> {
    if table.is_empty() {
        return Err(Error::Input("cannot fit normalization on an empty table".into()));
    }
    let d = table.n_features();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for r in table.values.chunks_exact(d) {
        for j in 0..d {
            min[j] = min[j].min(r[j]);
            max[j] = max[j].max(r[j]);
        }
    }
    Ok(NormalizationStats {
        features: table.feature_names.clone(),
        min,
        max,
    })
}

impl NormalizationStats {
    pub fn scale(&self, j: usize, v: f64) -> f64 {
        let span = self.max[j] - self.min[j];
        if span <= 0.0 {
            0.0
        } else {
            ((v - self.min[j]) / span).clamp(0.0, 1.0)
        }
    }
}

/// `(x − min)/(max − min)` clamped to `[0, 1]`; constant features map to 0.
pub fn minmax_apply(table: &TimeSeriesTable, stats: &NormalizationStats) -> Result<TimeSeriesTable> {
    let d = table.n_features();
    if stats.min.len() != d {
        return Err(Error::Shape(format!(
            "normalization stats cover {} features, table has {d}",
            stats.min.len()
        )));
    }
    let values = table
        .values
        .chunks_exact(d)
        .flat_map(|r| r.iter().enumerate().map(|(j, &v)| stats.scale(j, v)))
        .collect();
    Ok(TimeSeriesTable {
        values,
        ..table.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Raw,
    ClusterCentroids,
}

/// Windows of `w` conditioning steps plus one target step.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub w: usize,
    pub d: usize,
    pub stride: usize,
    pub provenance: Provenance,
    /// `N × (w+1) × d`, row-major.
    pub data: Vec<f64>,
    /// Table row of each window's target (raw windows only).
    pub targets: Vec<usize>,
}

impl WindowSet {
    pub fn from_windows(w: usize, d: usize, windows: Vec<Vec<f64>>) -> Self {
        Self {
            w,
            d,
            stride: w + 1,
            provenance: Provenance::Raw,
            data: windows.concat(),
            targets: Vec::new(),
        }
    }

    pub fn window_len(&self) -> usize {
        (self.w + 1) * self.d
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.window_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let l = self.window_len();
        &self.data[i * l..(i + 1) * l]
    }

    /// The `w` conditioning steps of window `i`.
    pub fn inputs(&self, i: usize) -> &[f64] {
        &self.window(i)[..self.w * self.d]
    }

    /// The target step of window `i`.
    pub fn target(&self, i: usize) -> &[f64] {
        &self.window(i)[self.w * self.d..]
    }
}

/// Cuts `table` into windows of `w + 1` rows advancing by `stride`.
pub fn make_windows(table: &TimeSeriesTable, w: usize, stride: usize) -> Result<WindowSet> {
    if w == 0 || stride == 0 {
        return Err(Error::Config("window size and stride must be positive".into()));
    }
    let t = table.len();
    if t < w + 1 {
        return Err(Error::Input(format!(
            "series of length {t} is shorter than one window of {} rows",
            w + 1
        )));
    }
    let d = table.n_features();
    let n = (t - (w + 1)) / stride + 1;
    let mut data = Vec::with_capacity(n * (w + 1) * d);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * stride;
        data.extend_from_slice(&table.values[start * d..(start + w + 1) * d]);
        targets.push(start + w);
    }
    Ok(WindowSet {
        w,
        d,
        stride,
        provenance: Provenance::Raw,
        data,
        targets,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    /// `k × (w+1)·d`, row-major.
    pub centroids: Vec<f64>,
    pub counts: Vec<usize>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITER: usize = 300;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm from distance-weighted seeding over flattened windows.
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64) -> Result<ClusterModel> {
    let n = points.len() / dim;
    if k == 0 || k > n {
        return Err(Error::Input(format!("cannot form {k} clusters from {n} points")));
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = rng::seeded(seed);

    // Seeding: first centre uniform, then proportional to squared distance.
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &v) in d2.iter().enumerate() {
                if v > 0.0 {
                    pick = Some(i);
                    if target < v {
                        break;
                    }
                    target -= v;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // All remaining points coincide with a centre; take the first unused index.
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(point(i), point(next)));
        }
    }
    let mut centroids: Vec<f64> = chosen.iter().flat_map(|&i| point(i).to_vec()).collect();

    let mut assign = vec![usize::MAX; n];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    let mut counts = vec![0usize; k];
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut changed = false;
        for i in 0..n {
            let p = point(i);
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dist = sq_dist(p, &centroids[c * dim..(c + 1) * dim]);
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            if assign[i] != best.1 {
                assign[i] = best.1;
                changed = true;
            }
        }
        let mut sums = vec![0.0; k * dim];
        counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        inertia.push(
            (0..n)
                .map(|i| sq_dist(point(i), &centroids[assign[i] * dim..(assign[i] + 1) * dim]))
                .sum(),
        );
        if !changed {
            break;
        }
    }
    Ok(ClusterModel {
        k,
        centroids,
        counts,
        inertia,
        iterations,
    })
}

/// Replaces `windows` by `n` K-means centroids.
pub fn kmeans_downsample(windows: &WindowSet, n: usize, seed: u64) -> Result<(WindowSet, ClusterModel)> {
    let model = kmeans(&windows.data, windows.window_len(), n, seed)?;
    let set = WindowSet {
        w: windows.w,
        d: windows.d,
        stride: windows.stride,
        provenance: Provenance::ClusterCentroids,
        data: model.centroids.clone(),
        targets: Vec::new(),
    };
    Ok((set, model))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Features tried per split; `None` means `⌈√d⌉`.
    pub max_features: Option<usize>,
    /// Bootstrap sample size; `None` means the number of rows.
    pub bootstrap_size: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 8,
            max_features: None,
            bootstrap_size: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub importance: f64,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct TreeBuilder<'a> {
    x: &'a [f64],
    y: &'a [bool],
    d: usize,
    mtry: usize,
    max_depth: usize,
    n_total: f64,
    importance: Vec<f64>,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut Rng) {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        if depth >= self.max_depth || n < 2 || pos == 0 || pos == n {
            return;
        }
        let parent = gini(pos, n);
        let mut features: Vec<usize> = (0..self.d).collect();
        features.shuffle(rng);
        let mut best: Option<(f64, usize, f64)> = None;
        for &f in &features[..self.mtry] {
            idx.sort_by(|&a, &b| self.x[a * self.d + f].total_cmp(&self.x[b * self.d + f]));
            let mut left_pos = 0;
            for s in 1..n {
                if self.y[idx[s - 1]] {
                    left_pos += 1;
                }
                let lo = self.x[idx[s - 1] * self.d + f];
                let hi = self.x[idx[s] * self.d + f];
                if lo == hi {
                    continue;
                }
                let child = (s as f64 * gini(left_pos, s)
                    + (n - s) as f64 * gini(pos - left_pos, n - s))
                    / n as f64;
                let gain = parent - child;
                if best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, 0.5 * (lo + hi)));
                }
            }
        }
        let Some((gain, f, threshold)) = best else {
            return;
        };
        if gain <= 0.0 {
            return;
        }
        self.importance[f] += gain * n as f64 / self.n_total;
        idx.sort_by(|&a, &b| self.x[a * self.d + f].total_cmp(&self.x[b * self.d + f]));
        let split = idx.partition_point(|&i| self.x[i * self.d + f] <= threshold);
        let (left, right) = idx.split_at_mut(split);
        self.grow(left, depth + 1, rng);
        self.grow(right, depth + 1, rng);
    }
}

/// Mean-decrease-in-impurity ranking from a random forest of Gini trees,
/// normalized to sum to 1 and sorted descending.
pub fn gini_feature_importance(
    table: &TimeSeriesTable,
    config: &ForestConfig,
) -> Result<Vec<FeatureImportance>> {
    let labels = table
        .labels
        .as_ref()
        .ok_or_else(|| Error::Input("feature ranking needs labels".into()))?;
    let n = table.len();
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == n {
        return Err(Error::Degenerate(
            "labels contain a single class; impurity ranking is undefined".into(),
        ));
    }
    let d = table.n_features();
    let mtry = config
        .max_features
        .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
        .clamp(1, d);
    let sample = config.bootstrap_size.unwrap_or(n).max(1);
    let mut rng = rng::seeded(config.seed);
    let mut total = vec![0.0; d];
    for _ in 0..config.n_trees {
        let mut idx: Vec<usize> = (0..sample).map(|_| rng.random_range(0..n)).collect();
        let mut builder = TreeBuilder {
            x: &table.values,
            y: labels,
            d,
            mtry,
            max_depth: config.max_depth,
            n_total: sample as f64,
            importance: vec![0.0; d],
        };
        builder.grow(&mut idx, 0, &mut rng);
        for (t, v) in total.iter_mut().zip(builder.importance) {
            *t += v;
        }
    }
    let sum: f64 = total.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Degenerate("no split reduced impurity".into()));
    }
    let mut ranking: Vec<FeatureImportance> = total
        .iter()
        .zip(&table.feature_names)
        .map(|(v, name)| FeatureImportance {
            feature: name.clone(),
            importance: v / sum,
        })
        .collect();
    ranking.sort_by(|a, b| b.importance.total_cmp(&a.importance));
    Ok(ranking)
}

/// Window size from label statistics: `w = μ_d^p · g^(1−p)` with `μ_d` the
/// mean attack length, `A` the attack count, `N` the series length,
/// `p = A·μ_d/N` and `g = N/A − μ_d`. Rounded and floored at 2.
pub fn estimate_window_size(labels: &[bool]) -> Result<usize> {
    let segments = segments_from_pointwise(labels);
    if segments.is_empty() {
        return Err(Error::Input(
            "no attack segments; supply the window size manually".into(),
        ));
    }
    let a = segments.len() as f64;
    let n = labels.len() as f64;
    let mu_d = segments.iter().map(|s| s.len() as f64).sum::<f64>() / a;
    let p = a * mu_d / n;
    let g = n / a - mu_d;
    if g <= 0.0 {
        return Err(Error::Input(
            "no normal gap between attacks; supply the window size manually".into(),
        ));
    }
    let w = mu_d.powf(p) * g.powf(1.0 - p);
    Ok((w.round() as usize).max(2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Set-point style step added to one feature.
    LevelJump,
    /// Control-output style override holding one feature at a fixed level.
    OverridePlateau,
    /// An earlier benign segment of one feature played back in place.
    Replay,
    /// Linear ramp from 0 to the magnitude on one feature.
    DriftRamp,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::LevelJump,
        AttackKind::OverridePlateau,
        AttackKind::Replay,
        AttackKind::DriftRamp,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Target feature; random when absent.
    #[serde(default)]
    pub feature: Option<usize>,
    /// Length in steps; drawn from the spec's range when absent.
    #[serde(default)]
    pub duration: Option<usize>,
    /// Jump/ramp height or plateau offset in raw units.
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub length: i64,
    pub features: usize,
    /// Number of attacks cycling through the four kinds, used when `attacks` is empty.
    pub attack_count: usize,
    pub attacks: Vec<AttackSpec>,
    pub magnitude: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Fraction of the series kept attack-free at the start.
    pub clean_prefix: f64,
    /// Minimum normal steps between attacks.
    pub min_gap: usize,
    pub noise_std: f64,
    pub ar_coeff: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            length: 5000,
            features: 4,
            attack_count: 6,
            attacks: Vec::new(),
            magnitude: 0.5,
            min_duration: 20,
            max_duration: 60,
            clean_prefix: 0.4,
            min_gap: 100,
            noise_std: 0.01,
            ar_coeff: 0.7,
            seed: 0,
        }
    }
}

/// Where and how one attack was injected.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InjectedAttack {
    pub kind: AttackKind,
    pub feature: usize,
    pub start: usize,
    pub end: usize,
}

/// Generates a labeled series: per-feature sinusoid mixtures plus AR(1)
/// noise, with attacks injected after the clean prefix.
pub fn synth_generate(spec: &SynthSpec) -> Result<TimeSeriesTable> {
    Ok(synth_generate_detailed(spec)?.0)
}

pub fn synth_generate_detailed(spec: &SynthSpec) -> Result<(TimeSeriesTable, Vec<InjectedAttack>)> {
    if spec.length <= 0 {
        return Err(Error::Config(format!("series length {} must be positive", spec.length)));
    }
    if spec.features == 0 {
        return Err(Error::Config("need at least one feature".into()));
    }
    if spec.min_duration == 0 || spec.min_duration > spec.max_duration {
        return Err(Error::Config(format!(
            "attack duration range {}..={} is invalid",
            spec.min_duration, spec.max_duration
        )));
    }
    if !(0.0..1.0).contains(&spec.clean_prefix) {
        return Err(Error::Config("clean_prefix must be in [0, 1)".into()));
    }
    let t_len = spec.length as usize;
    let d = spec.features;
    let mut rng = rng::seeded(spec.seed);

    // Baseline.
    let mut values = vec![0.0; t_len * d];
    for j in 0..d {
        let components: Vec<(f64, f64, f64)> = (0..3)
            .map(|c| {
                let period = rng.random_range(40.0..400.0) * (c as f64 + 1.0);
                let amp = rng.random_range(0.05..0.25) / (c as f64 + 1.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (period, amp, phase)
            })
            .collect();
        let offset = rng.random_range(0.3..0.7);
        let mut ar = 0.0;
        for t in 0..t_len {
            let innovation: f64 = rng.random_range(-1.0..1.0) * spec.noise_std * 3f64.sqrt();
            ar = spec.ar_coeff * ar + innovation;
            let s: f64 = components
                .iter()
                .map(|(p, a, ph)| a * (std::f64::consts::TAU * t as f64 / p + ph).sin())
                .sum();
            values[t * d + j] = offset + s + ar;
        }
    }

    let mut attacks: Vec<AttackSpec> = if spec.attacks.is_empty() {
        let mut kinds: Vec<AttackKind> = (0..spec.attack_count)
            .map(|i| AttackKind::ALL[i % AttackKind::ALL.len()])
            .collect();
        kinds.shuffle(&mut rng);
        kinds
            .into_iter()
            .map(|kind| AttackSpec {
                kind,
                feature: None,
                duration: None,
                magnitude: spec.magnitude,
            })
            .collect()
    } else {
        spec.attacks.clone()
    };
    for a in &mut attacks {
        if a.duration.is_none() {
            a.duration = Some(rng.random_range(spec.min_duration..=spec.max_duration));
        }
        if a.feature.is_none() {
            a.feature = Some(rng.random_range(0..d));
        }
        if a.feature.is_some_and(|f| f >= d) {
            return Err(Error::Config(format!("attack feature outside 0..{d}")));
        }
    }

    // Placement: attacks in order, separated by at least `min_gap`, with the
    // remaining slack spread randomly.
    let region_start = (spec.clean_prefix * t_len as f64).ceil() as usize;
    let region = t_len.saturating_sub(region_start);
    let busy: usize = attacks.iter().map(|a| a.duration.unwrap()).sum::<usize>()
        + (attacks.len() + 1) * spec.min_gap;
    if busy > region && !attacks.is_empty() {
        return Err(Error::Config(format!(
            "attacks need {busy} steps but only {region} are available after the clean prefix"
        )));
    }
    let slack = region.saturating_sub(busy);
    let weights: Vec<f64> = (0..=attacks.len()).map(|_| rng.random::<f64>()).collect();
    let wsum: f64 = weights.iter().sum();
    let mut labels = vec![false; t_len];
    let mut injected = Vec::with_capacity(attacks.len());
    let mut cursor = region_start;
    for (i, a) in attacks.iter().enumerate() {
        cursor += spec.min_gap + (slack as f64 * weights[i] / wsum).floor() as usize;
        let (start, dur, f) = (cursor, a.duration.unwrap(), a.feature.unwrap());
        let end = start + dur;
        match a.kind {
            AttackKind::LevelJump => {
                for t in start..end {
                    values[t * d + f] += a.magnitude;
                }
            }
            AttackKind::OverridePlateau => {
                let level = values[start * d + f] + a.magnitude;
                for t in start..end {
                    values[t * d + f] = level;
                }
            }
            AttackKind::Replay => {
                // Copy from an earlier stretch inside the clean prefix when possible.
                let src_max = start.saturating_sub(dur + 1).max(1);
                let src = rng.random_range(0..src_max);
                for k in 0..dur {
                    values[(start + k) * d + f] = values[(src + k) * d + f];
                }
            }
            AttackKind::DriftRamp => {
                for (k, t) in (start..end).enumerate() {
                    values[t * d + f] += a.magnitude * (k + 1) as f64 / dur as f64;
                }
            }
        }
        labels[start..end].iter_mut().for_each(|l| *l = true);
        injected.push(InjectedAttack {
            kind: a.kind,
            feature: f,
            start,
            end,
        });
        cursor = end;
    }

    let table = TimeSeriesTable::new(
        (0..t_len).map(|t| t as f64).collect(),
        values,
        (0..d).map(|j| format!("f{j}")).collect(),
        Some(labels),
    )?;
    Ok((table, injected))
}
