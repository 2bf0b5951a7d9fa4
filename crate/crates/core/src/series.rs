//! Multivariate time series containers, sliding windows and dataset splits.
//!
//! Values are stored time-major: row `t` holds the `N` channel observations
//! at timestep `t`.

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// A dense, regularly sampled multivariate series of shape `T_total × N`.
#[derive(Debug, Clone, PartialEq)]
pub struct MtsSeries<T> {
    values: Vec<T>,
    len: usize,
    channel_names: Vec<String>,
    labels: Option<Vec<u8>>,
}

impl<T: Scalar> MtsSeries<T> {
    /// Builds a series from row-major values. `values.len()` must be a
    /// multiple of the number of channel names.
    pub fn new(values: Vec<T>, channel_names: Vec<String>) -> Result<Self> {
        let n = channel_names.len();
        if n == 0 {
            return Err(invalid("series needs at least one channel"));
        }
        if values.is_empty() || !values.len().is_multiple_of(n) {
            return Err(invalid(format!(
                "{} values do not form whole rows of {n} channels",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "non-finite value at row {}, channel {}",
                pos / n,
                pos % n
            )));
        }
        Ok(Self {
            len: values.len() / n,
            values,
            channel_names,
            labels: None,
        })
    }

    /// Builds a series from rows, naming channels `c0..c{N-1}`.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(t) = rows.iter().position(|r| r.len() != n) {
            return Err(invalid(format!("row {t} has {} values, expected {n}", rows[t].len())));
        }
        let names = (0..n).map(|j| format!("c{j}")).collect();
        Self::new(rows.concat(), names)
    }

    /// Attaches per-timestep anomaly labels.
    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.len {
            return Err(invalid(format!(
                "label length {} does not match series length {}",
                labels.len(),
                self.len
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(invalid("labels must be 0 or 1"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, t: usize, j: usize) -> T {
        self.values[t * self.n_channels() + j]
    }

    pub fn row(&self, t: usize) -> &[T] {
        let n = self.n_channels();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.len).map(|t| self.get(t, j)).collect()
    }

    /// Keeps only the given channels, in the given order. Labels are kept.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        let n = self.n_channels();
        if channels.is_empty() {
            return Err(invalid("channel selection is empty"));
        }
        if let Some(&bad) = channels.iter().find(|&&c| c >= n) {
            return Err(Error::ChannelOutOfRange {
                index: bad,
                channels: n,
            });
        }
        let values = (0..self.len)
            .flat_map(|t| channels.iter().map(move |&c| self.get(t, c)))
            .collect();
        let names = channels.iter().map(|&c| self.channel_names[c].clone()).collect();
        Ok(Self {
            values,
            len: self.len,
            channel_names: names,
            labels: self.labels.clone(),
        })
    }

    /// Rows `[start, end)` as a new series (labels sliced alongside).
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len {
            return Err(invalid(format!(
                "row range {start}..{end} invalid for length {}",
                self.len
            )));
        }
        let n = self.n_channels();
        Ok(Self {
            values: self.values[start * n..end * n].to_vec(),
            len: end - start,
            channel_names: self.channel_names.clone(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
        })
    }
}

/// A contiguous `w × N` slice of a series; `origin_t` is the index of its
/// last timestep in the parent series.
#[derive(Debug, Clone, PartialEq)]
pub struct MtsWindow<T> {
    values: Vec<T>,
    len: usize,
    n_channels: usize,
    origin_t: usize,
}

impl<T: Scalar> MtsWindow<T> {
    /// Builds a window from row-major values.
    pub fn new(values: Vec<T>, n_channels: usize, origin_t: usize) -> Result<Self> {
        if n_channels == 0 || values.is_empty() || !values.len().is_multiple_of(n_channels) {
            return Err(invalid("window values do not form whole rows"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("window contains non-finite values"));
        }
        Ok(Self {
            len: values.len() / n_channels,
            values,
            n_channels,
            origin_t,
        })
    }

    pub fn from_rows(rows: &[Vec<T>], origin_t: usize) -> Result<Self> {
        let n = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != n) {
            return Err(invalid("ragged window rows"));
        }
        Self::new(rows.concat(), n, origin_t)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn origin_t(&self) -> usize {
        self.origin_t
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, t: usize, j: usize) -> T {
        self.values[t * self.n_channels + j]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.len).map(|t| self.get(t, j)).collect()
    }

    /// Channel-major copy of rows `[start, end)`: an `N × (end - start)`
    /// row-major buffer whose row `j` is channel `j`.
    pub(crate) fn channel_major(&self, start: usize, end: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_channels * (end - start));
        for j in 0..self.n_channels {
            out.extend((start..end).map(|t| self.get(t, j)));
        }
        out
    }
}

/// Slides a window of length `w` over `series` with the given stride.
pub fn make_windows<T: Scalar>(series: &MtsSeries<T>, w: usize, stride: usize) -> Result<Vec<MtsWindow<T>>> {
    if w == 0 || stride == 0 {
        return Err(invalid("window length and stride must be positive"));
    }
    if w > series.len() {
        return Err(Error::WindowTooLong {
            window: w,
            len: series.len(),
        });
    }
    let n = series.n_channels();
    let count = (series.len() - w) / stride + 1;
    Ok((0..count)
        .map(|k| {
            let start = k * stride;
            MtsWindow {
                values: series.values[start * n..(start + w) * n].to_vec(),
                len: w,
                n_channels: n,
                origin_t: start + w - 1,
            }
        })
        .collect())
}

/// Label of the window's last timestep.
pub fn window_label<T: Scalar>(window: &MtsWindow<T>, series: &MtsSeries<T>) -> Result<u8> {
    let labels = series.labels().ok_or(Error::MissingLabels)?;
    labels
        .get(window.origin_t)
        .copied()
        .ok_or_else(|| invalid(format!("window origin {} outside series", window.origin_t)))
}

/// Labels for a list of windows, in order.
pub fn window_labels<T: Scalar>(windows: &[MtsWindow<T>], series: &MtsSeries<T>) -> Result<Vec<u8>> {
    windows.iter().map(|w| window_label(w, series)).collect()
}

/// Train / validation / test partition sharing one channel layout.
#[derive(Debug, Clone)]
pub struct DatasetSplit<T> {
    pub train: MtsSeries<T>,
    pub val: MtsSeries<T>,
    pub test: MtsSeries<T>,
}

impl<T: Scalar> DatasetSplit<T> {
    pub fn new(train: MtsSeries<T>, val: MtsSeries<T>, test: MtsSeries<T>) -> Result<Self> {
        if train.channel_names() != val.channel_names() || train.channel_names() != test.channel_names() {
            return Err(invalid("splits must share channel names"));
        }
        if train.labels().is_some_and(|l| l.iter().any(|&x| x != 0)) {
            return Err(invalid("training split must not contain anomalies"));
        }
        Ok(Self { train, val, test })
    }

    pub fn n_channels(&self) -> usize {
        self.train.n_channels()
    }

    /// Restricts every split to the given channels.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        Ok(Self {
            train: self.train.select_channels(channels)?,
            val: self.val.select_channels(channels)?,
            test: self.test.select_channels(channels)?,
        })
    }
}
