//! Anomaly detection from channel-wise self-influence.
//!
//! A window is scored by the largest per-channel self-influence, the score
//! stream is normalized over time, and a threshold is chosen at the best F1
//! on a labeled selection split. Whole-window self-influence and plain
//! reconstruction error are provided as comparison scores.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::influence::{channel_sq_norms, resolve_eta};
use crate::models::{GradientSelector, ModelState};
use crate::scalar::Scalar;
use crate::series::{make_windows, window_labels, MtsSeries, MtsWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    /// Max over channels of `η‖∇L(c_i)‖²`.
    CifSelfInfluence,
    /// `η‖∇L(z)‖²` of the whole window.
    TracinSelfInfluence,
    /// Max over channels of the channel loss.
    ReconstructionError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    MeanStd,
    MedianIqr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationChoice {
    MeanStd,
    MedianIqr,
    /// Run both and keep the report with the higher F1.
    #[default]
    BestOfBoth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSplit {
    #[default]
    Validation,
    Test,
}

macro_rules! snake_case_str {
    ($($ty:ty),*) => {$(
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let v = serde_json::to_value(self).map_err(|_| fmt::Error)?;
                f.write_str(v.as_str().unwrap_or_default())
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                serde_json::from_value(serde_json::Value::String(s.to_string()))
                    .map_err(|_| invalid(format!("unknown {} `{s}`", stringify!($ty))))
            }
        }
    )*};
}

snake_case_str!(ScoreMethod, Normalization, NormalizationChoice, ThresholdSplit);

/// One score per window, indexed by the window's last timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries<T> {
    pub scores: Vec<T>,
    pub origins: Vec<usize>,
    pub method: ScoreMethod,
}

/// Per-window score streams before the channel max: one value per channel
/// for per-channel methods, a single value for whole-window self-influence.
pub fn channel_scores<T: Scalar>(
    state: &ModelState<T>,
    windows: &[MtsWindow<T>],
    method: ScoreMethod,
    eta: Option<T>,
    selector: &GradientSelector,
) -> Result<Vec<Vec<T>>> {
    if windows.is_empty() {
        return Err(invalid("no windows to score"));
    }
    match method {
        ScoreMethod::ReconstructionError => windows.par_iter().map(|w| state.channel_losses(w)).collect(),
        ScoreMethod::CifSelfInfluence => {
            let eta = resolve_eta(state, eta)?;
            let subset = selector.resolve(state)?;
            windows
                .par_iter()
                .map(|w| {
                    Ok(channel_sq_norms(state, w, &subset)?
                        .into_iter()
                        .map(|s| eta * s)
                        .collect())
                })
                .collect()
        }
        ScoreMethod::TracinSelfInfluence => {
            let eta = resolve_eta(state, eta)?;
            let subset = selector.resolve(state)?;
            windows
                .par_iter()
                .map(|w| Ok(vec![eta * state.window_gradient(w, &subset)?.sq_norm()]))
                .collect()
        }
    }
}

fn max_of<T: Scalar>(values: &[T]) -> T {
    values.iter().copied().fold(T::neg_infinity(), T::max)
}

/// Scores each window with the given method.
pub fn score_windows<T: Scalar>(
    state: &ModelState<T>,
    windows: &[MtsWindow<T>],
    method: ScoreMethod,
    eta: Option<T>,
    selector: &GradientSelector,
) -> Result<ScoreSeries<T>> {
    let streams = channel_scores(state, windows, method, eta, selector)?;
    Ok(ScoreSeries {
        scores: streams.iter().map(|s| max_of(s)).collect(),
        origins: windows.iter().map(MtsWindow::origin_t).collect(),
        method,
    })
}

fn sorted<T: Scalar>(values: &[T]) -> Vec<T> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    v
}

/// Linear-interpolation quantile at fractional index `(n - 1)·p`.
pub fn quantile<T: Scalar>(sorted: &[T], p: f64) -> T {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Centers and scales a score stream over time.
pub fn normalize_values<T: Scalar>(values: &[T], mode: Normalization) -> Result<Vec<T>> {
    if values.len() < 2 {
        return Err(invalid("normalization needs at least two scores"));
    }
    let n = T::from_usize_lossy(values.len());
    let (center, spread) = match mode {
        Normalization::MeanStd => {
            let mean = values.iter().copied().sum::<T>() / n;
            let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            (mean, var.sqrt())
        }
        Normalization::MedianIqr => {
            let s = sorted(values);
            (quantile(&s, 0.5), quantile(&s, 0.75) - quantile(&s, 0.25))
        }
    };
    let spread = spread.max(T::lit(1e-12));
    Ok(values.iter().map(|&v| (v - center) / spread).collect())
}

pub fn normalize_scores<T: Scalar>(series: &ScoreSeries<T>, mode: Normalization) -> Result<ScoreSeries<T>> {
    Ok(ScoreSeries {
        scores: normalize_values(&series.scores, mode)?,
        ..series.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics<T> {
    pub precision: T,
    pub recall: T,
    pub f1: T,
}

/// Precision, recall and F1 from confusion counts. Empty denominators give 0.
pub fn metrics_from_counts<T: Scalar>(tp: usize, fp: usize, fn_: usize) -> Metrics<T> {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            T::zero()
        } else {
            T::from_usize_lossy(num) / T::from_usize_lossy(den)
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == T::zero() {
        T::zero()
    } else {
        T::lit(2.0) * precision * recall / (precision + recall)
    };
    Metrics { precision, recall, f1 }
}

pub fn prf1<T: Scalar>(predictions: &[u8], labels: &[u8]) -> Result<Metrics<T>> {
    if predictions.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fn_ += 1,
            _ => {}
        }
    }
    Ok(metrics_from_counts(tp, fp, fn_))
}

/// Threshold separating two adjacent distinct scores `lo < hi`: their
/// midpoint, or `lo` when rounding pushes the midpoint onto `hi`.
pub fn split_point<T: Scalar>(lo: T, hi: T) -> T {
    let mid = (lo + hi) / T::lit(2.0);
    if mid < hi {
        mid
    } else {
        lo
    }
}

/// Every candidate threshold: `-∞`, the split points of consecutive distinct
/// sorted scores, and `+∞`, ascending.
pub fn candidate_thresholds<T: Scalar>(scores: &[T]) -> Vec<T> {
    let mut distinct = sorted(scores);
    distinct.dedup();
    let mut out = Vec::with_capacity(distinct.len() + 1);
    out.push(T::neg_infinity());
    out.extend(distinct.windows(2).map(|p| split_point(p[0], p[1])));
    out.push(T::infinity());
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdChoice<T> {
    pub threshold: T,
    pub f1: T,
}

/// Exact comparison of `2tp / (2tp + fp + fn)` between two confusion counts,
/// so equal F1 values never differ by rounding.
fn f1_exceeds(a: (usize, usize, usize), b: (usize, usize, usize)) -> bool {
    let num = |c: (usize, usize, usize)| 2 * c.0 as u128;
    let den = |c: (usize, usize, usize)| (2 * c.0 + c.1 + c.2) as u128;
    num(a) * den(b) > num(b) * den(a)
}

/// Threshold with the best F1 of `score > h`; ties keep the smallest `h`.
pub fn select_threshold<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<ThresholdChoice<T>> {
    if scores.len() != labels.len() {
        return Err(invalid("scores and labels differ in length"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::F1Undefined);
    }
    let mut pairs: Vec<(T, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));

    // Threshold -inf: everything predicted positive.
    let (mut tp, mut fp) = (positives, labels.len() - positives);
    let mut best_threshold = T::neg_infinity();
    let mut best_counts = (tp, fp, 0);
    let mut i = 0;
    while i < pairs.len() {
        let value = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == value {
            if pairs[i].1 == 1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        let counts = (tp, fp, positives - tp);
        if f1_exceeds(counts, best_counts) {
            best_counts = counts;
            best_threshold = match pairs.get(i) {
                Some(&(next, _)) => split_point(value, next),
                None => T::infinity(),
            };
        }
    }
    let (tp, fp, fn_) = best_counts;
    let best = ThresholdChoice {
        threshold: best_threshold,
        f1: metrics_from_counts::<T>(tp, fp, fn_).f1,
    };
    Ok(best)
}

/// Area under the ROC curve via the rank-sum statistic, ties at mid-rank.
pub fn auroc<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid("scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(invalid("AUROC needs both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid_rank * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    pub method: ScoreMethod,
    pub normalization: NormalizationChoice,
    pub threshold_split: ThresholdSplit,
    pub eta: Option<f64>,
    pub selector: GradientSelector,
    pub stride: usize,
    /// Normalize each channel's stream before taking the max.
    pub per_channel_normalization: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            method: ScoreMethod::CifSelfInfluence,
            normalization: NormalizationChoice::BestOfBoth,
            threshold_split: ThresholdSplit::Validation,
            eta: None,
            selector: GradientSelector::LastLayer,
            stride: 1,
            per_channel_normalization: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport<T> {
    pub raw_scores: ScoreSeries<T>,
    pub normalized_scores: ScoreSeries<T>,
    pub normalization: Normalization,
    pub threshold: T,
    pub labels: Vec<u8>,
    pub predictions: Vec<u8>,
    pub precision: T,
    pub recall: T,
    pub f1: T,
}

/// JSON summary of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectSummary {
    pub method: ScoreMethod,
    pub normalization: Normalization,
    /// A number, or `"inf"` / `"-inf"` for the sentinels.
    pub threshold: serde_json::Value,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl<T: Scalar> AnomalyReport<T> {
    pub fn summary(&self) -> DetectSummary {
        let h = self.threshold.as_f64();
        let threshold = if h.is_finite() {
            serde_json::json!(h)
        } else if h > 0.0 {
            serde_json::json!("inf")
        } else {
            serde_json::json!("-inf")
        };
        DetectSummary {
            method: self.raw_scores.method,
            normalization: self.normalization,
            threshold,
            precision: self.precision.as_f64(),
            recall: self.recall.as_f64(),
            f1: self.f1.as_f64(),
        }
    }

    /// Per-window rows: `origin_t,raw_score,normalized_score,prediction,label`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "origin_t,raw_score,normalized_score,prediction,label")?;
        for k in 0..self.predictions.len() {
            writeln!(
                out,
                "{},{},{},{},{}",
                self.raw_scores.origins[k],
                self.raw_scores.scores[k],
                self.normalized_scores.scores[k],
                self.predictions[k],
                self.labels[k]
            )?;
        }
        Ok(())
    }
}

struct Scored<T> {
    streams: Vec<Vec<T>>,
    raw: ScoreSeries<T>,
    labels: Vec<u8>,
}

fn score_series<T: Scalar>(state: &ModelState<T>, series: &MtsSeries<T>, config: &DetectConfig) -> Result<Scored<T>> {
    let windows = make_windows(series, state.spec.sample_len(), config.stride)?;
    let labels = window_labels(&windows, series)?;
    let eta = config.eta.map(T::lit);
    let streams = channel_scores(state, &windows, config.method, eta, &config.selector)?;
    let raw = ScoreSeries {
        scores: streams.iter().map(|s| max_of(s)).collect(),
        origins: windows.iter().map(MtsWindow::origin_t).collect(),
        method: config.method,
    };
    Ok(Scored { streams, raw, labels })
}

fn normalized<T: Scalar>(scored: &Scored<T>, mode: Normalization, per_channel: bool) -> Result<Vec<T>> {
    if !per_channel || scored.streams[0].len() == 1 {
        return normalize_values(&scored.raw.scores, mode);
    }
    let channels = scored.streams[0].len();
    let mut columns = Vec::with_capacity(channels);
    for j in 0..channels {
        let col: Vec<T> = scored.streams.iter().map(|s| s[j]).collect();
        columns.push(normalize_values(&col, mode)?);
    }
    Ok((0..scored.streams.len())
        .map(|k| columns.iter().map(|c| c[k]).fold(T::neg_infinity(), T::max))
        .collect())
}

fn report_for<T: Scalar>(
    test: &Scored<T>,
    selection: Option<&Scored<T>>,
    mode: Normalization,
    per_channel: bool,
) -> Result<AnomalyReport<T>> {
    let test_norm = normalized(test, mode, per_channel)?;
    let choice = match selection {
        Some(sel) => select_threshold(&normalized(sel, mode, per_channel)?, &sel.labels)?,
        None => select_threshold(&test_norm, &test.labels)?,
    };
    let predictions: Vec<u8> = test_norm.iter().map(|&s| u8::from(s > choice.threshold)).collect();
    let m = prf1::<T>(&predictions, &test.labels)?;
    Ok(AnomalyReport {
        raw_scores: test.raw.clone(),
        normalized_scores: ScoreSeries {
            scores: test_norm,
            ..test.raw.clone()
        },
        normalization: mode,
        threshold: choice.threshold,
        labels: test.labels.clone(),
        predictions,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
    })
}

/// Scores, normalizes, thresholds and evaluates a labeled test series.
///
/// With [`ThresholdSplit::Validation`] the threshold is chosen on the
/// normalized scores of `val`, which must be labeled with both classes.
pub fn detect<T: Scalar>(
    state: &ModelState<T>,
    test: &MtsSeries<T>,
    val: Option<&MtsSeries<T>>,
    config: &DetectConfig,
) -> Result<AnomalyReport<T>> {
    let test_scored = score_series(state, test, config)?;
    let val_scored = match config.threshold_split {
        ThresholdSplit::Validation => {
            let val = val.ok_or_else(|| invalid("threshold selection on validation needs a validation series"))?;
            Some(score_series(state, val, config)?)
        }
        ThresholdSplit::Test => None,
    };
    let per_channel = config.per_channel_normalization;
    let run = |mode| report_for(&test_scored, val_scored.as_ref(), mode, per_channel);
    match config.normalization {
        NormalizationChoice::MeanStd => run(Normalization::MeanStd),
        NormalizationChoice::MedianIqr => run(Normalization::MedianIqr),
        NormalizationChoice::BestOfBoth => {
            let a = run(Normalization::MeanStd)?;
            let b = run(Normalization::MedianIqr)?;
            Ok(if b.f1 > a.f1 { b } else { a })
        }
    }
}
