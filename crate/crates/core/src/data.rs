//! Synthetic series generation, anomaly injection and CSV I/O.
//!
//! Synthetic channels are grouped into clusters: every channel of cluster
//! `k` is a sinusoid at the cluster's frequency with a small per-channel
//! phase offset, plus Gaussian noise. Channels are ordered cluster-major,
//! so channel `n` belongs to cluster `n / channels_per_cluster`.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::series::{DatasetSplit, MtsSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub clusters: usize,
    pub channels_per_cluster: usize,
    pub length: usize,
    /// Cycles over the whole series, one per cluster.
    pub base_frequencies: Vec<f64>,
    /// Per-channel phase offsets are uniform in `±phase_jitter` radians.
    pub phase_jitter: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn n_channels(&self) -> usize {
        self.clusters * self.channels_per_cluster
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.channels_per_cluster == 0 {
            return Err(invalid("clusters and channels_per_cluster must be positive"));
        }
        if self.length == 0 {
            return Err(invalid("length must be positive"));
        }
        if self.base_frequencies.len() != self.clusters {
            return Err(invalid(format!(
                "{} base frequencies for {} clusters",
                self.base_frequencies.len(),
                self.clusters
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid("noise_std must be finite and non-negative"));
        }
        if !(self.phase_jitter >= 0.0 && self.phase_jitter.is_finite()) {
            return Err(invalid("phase_jitter must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn cluster_of(&self, channel: usize) -> usize {
        channel / self.channels_per_cluster
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("validated non-negative std")
}

pub fn gen_synthetic<T: Scalar>(config: &SyntheticConfig) -> Result<MtsSeries<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_channels();
    let phases: Vec<f64> = (0..n)
        .map(|_| {
            if config.phase_jitter > 0.0 {
                rng.random_range(-config.phase_jitter..=config.phase_jitter)
            } else {
                0.0
            }
        })
        .collect();
    let noise = normal(config.noise_std);
    let len = config.length as f64;
    let mut values = Vec::with_capacity(config.length * n);
    for t in 0..config.length {
        for (ch, phase) in phases.iter().enumerate() {
            let f = config.base_frequencies[config.cluster_of(ch)];
            let clean = (2.0 * PI * f * t as f64 / len + phase).sin();
            let eps = if config.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            values.push(T::lit(clean + eps));
        }
    }
    let names = (0..n).map(|j| format!("c{j}")).collect();
    MtsSeries::new(values, names)?.with_labels(vec![0; config.length])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// `±magnitude` added at each affected timestep, random sign.
    Spike,
    /// Linear ramp from `magnitude / len` up to `magnitude` over the interval.
    Drift,
    /// Values replaced by independent noise with the channel's mean and variance.
    CorrelationBreak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub target_channels: Vec<usize>,
    /// Half-open `[start, end)` timestep intervals.
    pub intervals: Vec<(usize, usize)>,
    pub magnitude: f64,
}

impl AnomalySpec {
    fn validate(&self, len: usize, channels: usize) -> Result<()> {
        if let Some(&c) = self.target_channels.iter().find(|&&c| c >= channels) {
            return Err(Error::ChannelOutOfRange { index: c, channels });
        }
        let mut iv = self.intervals.clone();
        iv.sort_unstable();
        for &(s, e) in &iv {
            if s >= e || e > len {
                return Err(invalid(format!(
                    "anomaly interval {s}..{e} out of bounds for length {len}"
                )));
            }
        }
        if iv.windows(2).any(|p| p[1].0 < p[0].1) {
            return Err(invalid("anomaly intervals overlap"));
        }
        Ok(())
    }
}

/// Applies an anomaly and marks every affected timestep in the labels.
pub fn inject_anomalies<T: Scalar>(series: &MtsSeries<T>, spec: &AnomalySpec, seed: u64) -> Result<MtsSeries<T>> {
    let (len, n) = (series.len(), series.n_channels());
    spec.validate(len, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = series.values().to_vec();
    let mut labels = series.labels().map(<[u8]>::to_vec).unwrap_or_else(|| vec![0; len]);
    let magnitude = T::lit(spec.magnitude);

    for &ch in &spec.target_channels {
        let column = series.column(ch);
        let mean = column.iter().copied().sum::<T>() / T::from_usize_lossy(len);
        let var = column.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::from_usize_lossy(len);
        let noise = normal(var.sqrt().as_f64());
        for &(start, end) in &spec.intervals {
            let span = T::from_usize_lossy(end - start);
            for t in start..end {
                let cell = &mut values[t * n + ch];
                *cell = match spec.kind {
                    AnomalyKind::Spike => {
                        if rng.random::<bool>() {
                            *cell + magnitude
                        } else {
                            *cell - magnitude
                        }
                    }
                    AnomalyKind::Drift => *cell + magnitude * T::from_usize_lossy(t - start + 1) / span,
                    AnomalyKind::CorrelationBreak => mean + T::lit(noise.sample(&mut rng)),
                };
            }
        }
    }
    if !spec.target_channels.is_empty() {
        for &(start, end) in &spec.intervals {
            labels[start..end].fill(1);
        }
    }
    MtsSeries::new(values, series.channel_names().to_vec())?.with_labels(labels)
}

/// Seeded labeled benchmark for detection: a clean training split plus
/// validation and test splits with anomalies on a few channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySuiteConfig {
    pub clusters: usize,
    pub channels_per_cluster: usize,
    pub base_frequencies: Vec<f64>,
    pub phase_jitter: f64,
    pub noise_std: f64,
    pub train_len: usize,
    pub val_len: usize,
    pub test_len: usize,
    /// Number of channels corrupted in each labeled split.
    pub corrupted_channels: usize,
    /// Fraction of labeled timesteps that are anomalous.
    pub anomaly_fraction: f64,
    pub interval_len: usize,
    pub kind: AnomalyKind,
    pub magnitude: f64,
    pub seed: u64,
}

impl Default for AnomalySuiteConfig {
    fn default() -> Self {
        Self {
            clusters: 4,
            channels_per_cluster: 2,
            base_frequencies: vec![5.0, 11.0, 23.0, 37.0],
            phase_jitter: 0.5,
            noise_std: 0.05,
            train_len: 600,
            val_len: 400,
            test_len: 400,
            corrupted_channels: 2,
            anomaly_fraction: 0.05,
            interval_len: 10,
            kind: AnomalyKind::Spike,
            magnitude: 1.0,
            seed: 0,
        }
    }
}

/// Places `count` non-overlapping intervals of `len` steps in `[0, total)`,
/// each separated from the next by at least `gap` steps.
fn place_intervals(
    rng: &mut ChaCha8Rng,
    total: usize,
    len: usize,
    count: usize,
    gap: usize,
) -> Result<Vec<(usize, usize)>> {
    let slot = len + gap;
    let slots = total / slot;
    if slots < count {
        return Err(invalid("too many anomaly intervals for the split length"));
    }
    let mut chosen: Vec<usize> = sample(rng, slots, count).into_vec();
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .map(|s| {
            let start = s * slot + gap / 2;
            (start, start + len)
        })
        .collect())
}

pub fn gen_anomaly_suite<T: Scalar>(config: &AnomalySuiteConfig) -> Result<DatasetSplit<T>> {
    let total = config.train_len + config.val_len + config.test_len;
    let base = SyntheticConfig {
        clusters: config.clusters,
        channels_per_cluster: config.channels_per_cluster,
        length: total,
        base_frequencies: config.base_frequencies.clone(),
        phase_jitter: config.phase_jitter,
        noise_std: config.noise_std,
        seed: config.seed,
    };
    let series = gen_synthetic::<T>(&base)?;
    let n = base.n_channels();
    if config.corrupted_channels == 0 || config.corrupted_channels > n {
        return Err(invalid("corrupted_channels must be in 1..=N"));
    }
    if config.interval_len == 0 || !(0.0..1.0).contains(&config.anomaly_fraction) {
        return Err(invalid("interval_len must be positive and anomaly_fraction in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_a11a);
    let train = series.slice_rows(0, config.train_len)?;
    let corrupt = |split: MtsSeries<T>, rng: &mut ChaCha8Rng| -> Result<MtsSeries<T>> {
        let count = ((split.len() as f64 * config.anomaly_fraction) / config.interval_len as f64).round() as usize;
        let targets = sample(rng, n, config.corrupted_channels).into_vec();
        let intervals = place_intervals(rng, split.len(), config.interval_len, count, config.interval_len * 2)?;
        let spec = AnomalySpec {
            kind: config.kind,
            target_channels: targets,
            intervals,
            magnitude: config.magnitude,
        };
        inject_anomalies(&split, &spec, rng.random())
    };
    let val = corrupt(
        series.slice_rows(config.train_len, config.train_len + config.val_len)?,
        &mut rng,
    )?;
    let test = corrupt(series.slice_rows(config.train_len + config.val_len, total)?, &mut rng)?;
    DatasetSplit::new(train, val, test)
}

/// Seeded unlabeled benchmark for channel pruning, split chronologically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningSuiteConfig {
    pub clusters: usize,
    pub channels_per_cluster: usize,
    pub base_frequencies: Vec<f64>,
    pub phase_jitter: f64,
    pub noise_std: f64,
    pub train_len: usize,
    pub val_len: usize,
    pub test_len: usize,
    pub seed: u64,
}

impl Default for PruningSuiteConfig {
    fn default() -> Self {
        Self {
            clusters: 4,
            channels_per_cluster: 8,
            base_frequencies: vec![6.0, 14.0, 30.0, 55.0],
            phase_jitter: 0.3,
            noise_std: 0.02,
            train_len: 480,
            val_len: 240,
            test_len: 240,
            seed: 0,
        }
    }
}

pub fn gen_pruning_suite<T: Scalar>(config: &PruningSuiteConfig) -> Result<DatasetSplit<T>> {
    let total = config.train_len + config.val_len + config.test_len;
    let series = gen_synthetic::<T>(&SyntheticConfig {
        clusters: config.clusters,
        channels_per_cluster: config.channels_per_cluster,
        length: total,
        base_frequencies: config.base_frequencies.clone(),
        phase_jitter: config.phase_jitter,
        noise_std: config.noise_std,
        seed: config.seed,
    })?
    .without_labels();
    let a = config.train_len;
    let b = a + config.val_len;
    DatasetSplit::new(
        series.slice_rows(0, a)?,
        series.slice_rows(a, b)?,
        series.slice_rows(b, total)?,
    )
}

/// Reads a header of channel names followed by one row of values per timestep.
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>) -> Result<MtsSeries<T>> {
    let file = File::open(path.as_ref())?;
    read_csv(file)
}

pub fn read_csv<T: Scalar, R: std::io::Read>(reader: R) -> Result<MtsSeries<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(rec) => rec.map_err(|e| csv_error(&e))?,
        None => {
            return Err(Error::Csv {
                line: 1,
                msg: "missing header".into(),
            })
        }
    };
    let names: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    if names.iter().any(|n| n.is_empty() || n.parse::<f64>().is_ok()) {
        return Err(Error::Csv {
            line: 1,
            msg: "missing header: first line must name every channel".into(),
        });
    }
    let mut values = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(&e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() {
            return Err(Error::Csv {
                line,
                msg: format!("expected {} values, found {}", names.len(), rec.len()),
            });
        }
        for cell in rec.iter() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Csv {
                line,
                msg: format!("non-numeric value `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    line,
                    msg: format!("non-finite value `{cell}`"),
                });
            }
            values.push(T::lit(v));
        }
    }
    if values.is_empty() {
        return Err(Error::Csv {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    MtsSeries::new(values, names)
}

fn csv_error(e: &csv::Error) -> Error {
    Error::Csv {
        line: e.position().map_or(0, |p| p.line()),
        msg: e.to_string(),
    }
}

pub fn save_csv<T: Scalar>(series: &MtsSeries<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    write_csv(series, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Writes values in shortest round-trip decimal form, LF line endings.
pub fn write_csv<T: Scalar, W: Write>(series: &MtsSeries<T>, mut out: W) -> Result<()> {
    writeln!(out, "{}", series.channel_names().join(","))?;
    for t in 0..series.len() {
        let row: Vec<String> = series.row(t).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// One `0`/`1` per line.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut labels = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        match line.trim() {
            "0" => labels.push(0),
            "1" => labels.push(1),
            "" => continue,
            other => {
                return Err(Error::Csv {
                    line: i as u64 + 1,
                    msg: format!("label must be 0 or 1, found `{other}`"),
                })
            }
        }
    }
    Ok(labels)
}

pub fn save_labels(labels: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    for l in labels {
        writeln!(out, "{l}")?;
    }
    out.flush()?;
    Ok(())
}

/// Loads a series CSV and, when given, its companion label file.
pub fn load_labeled<T: Scalar>(values: impl AsRef<Path>, labels: Option<&Path>) -> Result<MtsSeries<T>> {
    let series = load_csv(values)?;
    match labels {
        Some(p) => series.with_labels(load_labels(p)?),
        None => Ok(series),
    }
}
