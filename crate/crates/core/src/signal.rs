//! Raw recordings to normalized feature vectors.
//!
//! A [`Recording`] is cut into overlapping [`SensorWindow`]s, each window is
//! summarised by a fixed set of handcrafted statistics, and the resulting
//! [`FeatureVector`]s are standardised with a [`Normalizer`] fitted on the
//! training split. Windows can also be resampled to a fixed length with the
//! Fourier method for models that consume raw signals.

use std::collections::BTreeSet;
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature values with a per-entry missing flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

impl FeatureVector {
    pub fn from_values(values: Vec<f64>) -> Self {
        let missing = vec![false; values.len()];
        FeatureVector { values, missing }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-sample activity of one label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTrack {
    pub name: String,
    pub active: Vec<bool>,
}

/// Multi-channel time series sampled at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub sample_rate_hz: f64,
    pub channels: Vec<String>,
    /// Row-major `[num_samples × num_channels]`.
    pub samples: Vec<f64>,
    pub labels: Vec<LabelTrack>,
}

impl Recording {
    pub fn new(
        sample_rate_hz: f64,
        channels: Vec<String>,
        samples: Vec<f64>,
        labels: Vec<LabelTrack>,
    ) -> Result<Self> {
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if channels.is_empty() || samples.is_empty() || !samples.len().is_multiple_of(channels.len()) {
            return Err(Error::Dimension(format!(
                "{} values do not form rows of {} channels",
                samples.len(),
                channels.len()
            )));
        }
        let n = samples.len() / channels.len();
        if let Some(bad) = labels.iter().find(|l| l.active.len() != n) {
            return Err(Error::Dimension(format!(
                "label track `{}` has {} entries for {n} samples",
                bad.name,
                bad.active.len()
            )));
        }
        Ok(Recording {
            sample_rate_hz,
            channels,
            samples,
            labels,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len() / self.channels.len()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate_hz
    }

    pub fn value(&self, sample: usize, channel: usize) -> f64 {
        self.samples[sample * self.channels.len() + channel]
    }
}

/// Reads a recording CSV: a `t` column in seconds, channel columns and
/// optional `y_` label columns with per-sample `0`/`1`. The sample rate is
/// taken from `sample_rate_hz` when given, otherwise estimated from `t`.
pub fn load_recording_csv(path: impl AsRef<Path>, sample_rate_hz: Option<f64>) -> Result<Recording> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let parse_err = |row: usize, column: &str, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };
    let headers = reader
        .headers()
        .map_err(|e| parse_err(0, "", e.to_string()))?
        .clone();
    if headers.get(0) != Some("t") {
        return Err(parse_err(0, "t", "first column must be `t`".into()));
    }
    let mut channel_cols = Vec::new();
    let mut label_cols = Vec::new();
    for (i, name) in headers.iter().enumerate().skip(1) {
        match name.strip_prefix("y_") {
            Some(label) => label_cols.push((i, label.to_string())),
            None => channel_cols.push((i, name.to_string())),
        }
    }
    if channel_cols.is_empty() {
        return Err(parse_err(0, "", "no channel columns".into()));
    }

    let mut times = Vec::new();
    let mut samples = Vec::new();
    let mut tracks: Vec<LabelTrack> = label_cols
        .iter()
        .map(|(_, name)| LabelTrack {
            name: name.clone(),
            active: Vec::new(),
        })
        .collect();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| parse_err(row, "", e.to_string()))?;
        let num = |col: usize, name: &str| -> Result<f64> {
            record[col]
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(row, name, format!("non-numeric value `{}`", &record[col])))
        };
        times.push(num(0, "t")?);
        for (col, name) in &channel_cols {
            samples.push(num(*col, name)?);
        }
        for ((col, name), track) in label_cols.iter().zip(tracks.iter_mut()) {
            match record[*col].trim() {
                "0" => track.active.push(false),
                "1" => track.active.push(true),
                other => {
                    return Err(parse_err(row, &format!("y_{name}"), format!("expected 0 or 1, got `{other}`")))
                }
            }
        }
    }
    if times.is_empty() {
        return Err(Error::format(path, "recording has no samples"));
    }
    let rate = match sample_rate_hz {
        Some(r) => r,
        None if times.len() >= 2 => {
            let span = times[times.len() - 1] - times[0];
            if span <= 0.0 {
                return Err(Error::format(path, "`t` must increase"));
            }
            (times.len() - 1) as f64 / span
        }
        None => return Err(Error::format(path, "cannot infer sample rate from one sample")),
    };
    Recording::new(
        rate,
        channel_cols.into_iter().map(|(_, n)| n).collect(),
        samples,
        tracks,
    )
}

/// A fixed-length segment of a recording, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorWindow {
    pub channels: Vec<String>,
    /// `data[c][t]`.
    pub data: Vec<Vec<f64>>,
    pub start_s: f64,
    pub labels: BTreeSet<String>,
}

impl SensorWindow {
    pub fn num_samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone)]
pub struct Windowing {
    pub windows: Vec<SensorWindow>,
    /// Set when the recording is shorter than one window.
    pub too_short: bool,
}

/// Cuts a recording into windows starting at `0, step, 2·step, …` while the
/// whole window fits. A window carries every label active in strictly more
/// than half of its samples.
pub fn sliding_windows(recording: &Recording, window_s: f64, step_s: f64) -> Result<Windowing> {
    if !(window_s > 0.0 && step_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "window and step must be positive, got {window_s} / {step_s}"
        )));
    }
    let width = (window_s * recording.sample_rate_hz).round() as usize;
    let step = (step_s * recording.sample_rate_hz).round() as usize;
    if width == 0 || step == 0 {
        return Err(Error::InvalidArgument(format!(
            "window of {window_s} s / step of {step_s} s is below one sample at {} Hz",
            recording.sample_rate_hz
        )));
    }
    let n = recording.num_samples();
    if n < width {
        return Ok(Windowing {
            windows: Vec::new(),
            too_short: true,
        });
    }
    let mut windows = Vec::new();
    let mut start = 0;
    while start + width <= n {
        let data = (0..recording.num_channels())
            .map(|c| (start..start + width).map(|t| recording.value(t, c)).collect())
            .collect();
        let labels = recording
            .labels
            .iter()
            .filter(|track| 2 * track.active[start..start + width].iter().filter(|&&a| a).count() > width)
            .map(|track| track.name.clone())
            .collect();
        windows.push(SensorWindow {
            channels: recording.channels.clone(),
            data,
            start_s: start as f64 / recording.sample_rate_hz,
            labels,
        });
        start += step;
    }
    Ok(Windowing {
        windows,
        too_short: false,
    })
}

/// Resamples one real channel to `k` samples by truncating or zero-padding
/// its spectrum. The Nyquist bin of an even-length spectrum is split or
/// folded so that the result stays real, and the amplitude is rescaled by
/// `k / t` so signal levels are preserved.
pub fn fourier_resample_channel(x: &[f64], k: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let t = x.len();
    let mut spec: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(t).process(&mut spec);

    let mut out = vec![Complex64::new(0.0, 0.0); k];
    let n = t.min(k);
    // bins 0..ceil(n/2) are copied as-is on both sides
    let half = n.div_ceil(2);
    out[..half].copy_from_slice(&spec[..half]);
    for j in 1..half {
        out[k - j] = spec[t - j];
    }
    if n.is_multiple_of(2) && n >= 2 {
        let m = n / 2;
        if k < t {
            // fold the two source bins at ±m into the new Nyquist bin
            out[m] = spec[m] + spec[t - m];
        } else if k > t {
            // split the old Nyquist bin between +m and -m
            out[m] = spec[m] * 0.5;
            out[k - m] = spec[m] * 0.5;
        } else {
            out[m] = spec[m];
        }
    }
    planner.plan_fft_inverse(k).process(&mut out);
    let scale = 1.0 / t as f64;
    out.iter().map(|c| c.re * scale).collect()
}

/// Fourier-method resampling of every channel to `k` samples.
pub fn fourier_resample(window: &SensorWindow, k: usize) -> Result<SensorWindow> {
    if k < 1 {
        return Err(Error::InvalidArgument("resampled length must be at least 1".into()));
    }
    if window.num_samples() < 2 {
        return Err(Error::InvalidArgument(format!(
            "window needs at least 2 samples, has {}",
            window.num_samples()
        )));
    }
    let mut planner = FftPlanner::new();
    let data = window
        .data
        .iter()
        .map(|ch| fourier_resample_channel(ch, k, &mut planner))
        .collect();
    Ok(SensorWindow {
        channels: window.channels.clone(),
        data,
        start_s: window.start_s,
        labels: window.labels.clone(),
    })
}

pub const CHANNEL_STATS: [&str; 10] = [
    "mean",
    "std",
    "min",
    "max",
    "median",
    "iqr",
    "rms",
    "zero_crossings",
    "dominant_freq",
    "spectral_energy",
];

pub const GROUP_STATS: [&str; 5] = ["mag_mean", "mag_std", "corr_xy", "corr_xz", "corr_yz"];

/// Tri-axial groups are consecutive channel triples; they exist only when
/// the channel count is a multiple of three.
pub fn tri_axial_groups(num_channels: usize) -> Vec<[usize; 3]> {
    if !num_channels.is_multiple_of(3) {
        return Vec::new();
    }
    (0..num_channels / 3).map(|g| [3 * g, 3 * g + 1, 3 * g + 2]).collect()
}

pub fn feature_names(channels: &[String]) -> Vec<String> {
    let mut names: Vec<String> = channels
        .iter()
        .flat_map(|c| CHANNEL_STATS.iter().map(move |s| format!("{c}_{s}")))
        .collect();
    for g in tri_axial_groups(channels.len()) {
        let prefix = format!("{}-{}", channels[g[0]], channels[g[2]]);
        names.extend(GROUP_STATS.iter().map(|s| format!("{prefix}_{s}")));
    }
    names
}

pub fn feature_len(num_channels: usize) -> usize {
    num_channels * CHANNEL_STATS.len() + tri_axial_groups(num_channels).len() * GROUP_STATS.len()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn population_std(x: &[f64], mu: f64) -> f64 {
    (x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Pearson correlation, 0 when either side has zero variance.
fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        0.0
    } else {
        (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
    }
}

fn channel_stats(x: &[f64], planner: &mut FftPlanner<f64>) -> [f64; 10] {
    let n = x.len();
    let mu = mean(x);
    let std = population_std(x, mu);
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let zero_crossings = x.windows(2).filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0)).count();

    let mut spec: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut spec);
    let mut dominant = 0usize;
    let mut best = 1e-12;
    for (k, c) in spec.iter().enumerate().take(n / 2 + 1).skip(1) {
        let mag = c.norm();
        if mag > best {
            best = mag;
            dominant = k;
        }
    }
    let energy = spec.iter().skip(1).map(|c| c.norm_sqr()).sum::<f64>() / n as f64;

    [
        mu,
        std,
        sorted[0],
        sorted[n - 1],
        quantile_sorted(&sorted, 0.5),
        quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25),
        rms,
        zero_crossings as f64,
        dominant as f64,
        energy,
    ]
}

/// Fixed-length handcrafted features of a window. Layout: ten statistics per
/// channel (see [`CHANNEL_STATS`]) followed by five per tri-axial group (see
/// [`GROUP_STATS`]).
pub fn extract_features(window: &SensorWindow) -> FeatureVector {
    let mut planner = FftPlanner::new();
    let mut values = Vec::with_capacity(feature_len(window.data.len()));
    if window.num_samples() == 0 {
        return FeatureVector::from_values(vec![0.0; feature_len(window.data.len())]);
    }
    for ch in &window.data {
        values.extend_from_slice(&channel_stats(ch, &mut planner));
    }
    for [x, y, z] in tri_axial_groups(window.data.len()) {
        let (dx, dy, dz) = (&window.data[x], &window.data[y], &window.data[z]);
        let mag: Vec<f64> = (0..dx.len())
            .map(|t| (dx[t] * dx[t] + dy[t] * dy[t] + dz[t] * dz[t]).sqrt())
            .collect();
        let mm = mean(&mag);
        values.push(mm);
        values.push(population_std(&mag, mm));
        values.push(correlation(dx, dy));
        values.push(correlation(dx, dz));
        values.push(correlation(dy, dz));
    }
    FeatureVector::from_values(values)
}

/// Per-feature standardisation fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_dim: usize,
    /// Kept feature indices into the original vector, strictly increasing.
    pub kept: Vec<usize>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

const CONSTANT_STD: f64 = 1e-12;

/// Fits means and population standard deviations over non-missing entries,
/// dropping features that are constant (or never observed) in training.
pub fn fit_normalizer(train: &[FeatureVector]) -> Result<Normalizer> {
    if train.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 training vectors, got {}",
            train.len()
        )));
    }
    let dim = train[0].len();
    if let Some(bad) = train.iter().find(|f| f.len() != dim) {
        return Err(Error::Dimension(format!(
            "feature vectors of length {} and {dim}",
            bad.len()
        )));
    }
    let mut norm = Normalizer {
        input_dim: dim,
        kept: Vec::new(),
        mean: Vec::new(),
        scale: Vec::new(),
    };
    for j in 0..dim {
        let observed: Vec<f64> = train
            .iter()
            .filter(|f| !f.missing[j])
            .map(|f| f.values[j])
            .collect();
        if observed.is_empty() {
            continue;
        }
        let mu = mean(&observed);
        let s = population_std(&observed, mu);
        if s >= CONSTANT_STD {
            norm.kept.push(j);
            norm.mean.push(mu);
            norm.scale.push(s);
        }
    }
    if norm.kept.is_empty() {
        return Err(Error::Numerical(
            "every feature is constant on the training set".into(),
        ));
    }
    Ok(norm)
}

impl Normalizer {
    pub fn output_dim(&self) -> usize {
        self.kept.len()
    }

    /// Standardises the kept features; missing entries become 0.
    pub fn apply(&self, features: &FeatureVector) -> Result<FeatureVector> {
        if features.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "normalizer expects {} features, got {}",
                self.input_dim,
                features.len()
            )));
        }
        let values = self
            .kept
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&j, (mu, s))| {
                if features.missing[j] {
                    0.0
                } else {
                    (features.values[j] - mu) / s
                }
            })
            .collect();
        Ok(FeatureVector::from_values(values))
    }

    pub fn kept_names(&self, names: &[String]) -> Vec<String> {
        self.kept.iter().map(|&j| names[j].clone()).collect()
    }
}

pub fn apply_normalizer(normalizer: &Normalizer, features: &FeatureVector) -> Result<FeatureVector> {
    normalizer.apply(features)
}
