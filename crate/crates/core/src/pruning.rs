//! Channel pruning by self-influence.
//!
//! A reference model trained on every channel scores each channel by its
//! self-influence accumulated over the validation windows. Channels are
//! sorted ascending and an evenly spaced subset of the ranking is kept; a
//! fresh model trained on that subset should generalize to all channels
//! about as well as the reference.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSubset, Tensor};
use crate::error::{invalid, Error, Result};
use crate::influence::{channel_sq_norms, resolve_eta};
use crate::models::{
    init_params, train, train_params, Architecture, GradientSelector, ModelSpec, ModelState, TrainConfig, MIX_WEIGHT,
};
use crate::scalar::Scalar;
use crate::series::{make_windows, DatasetSplit, MtsWindow};

/// Accumulated self-influence per channel and the ascending ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScoreTable<T> {
    pub scores: Vec<T>,
    /// Channel indices sorted by ascending score, ties by index.
    pub ranking: Vec<usize>,
}

impl<T: Scalar> ChannelScoreTable<T> {
    pub fn from_scores(scores: Vec<T>) -> Result<Self> {
        if scores.is_empty() || scores.iter().any(|s| !s.is_finite()) {
            return Err(invalid("channel scores must be non-empty and finite"));
        }
        let mut ranking: Vec<usize> = (0..scores.len()).collect();
        ranking.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite").then(a.cmp(&b)));
        Ok(Self { scores, ranking })
    }

    pub fn n_channels(&self) -> usize {
        self.scores.len()
    }
}

/// Sums per-channel self-influence over `windows`.
///
/// Squared norms are summed first and scaled by `η` once, so the ranking
/// does not depend on `η` even at the last bit.
pub fn accumulate_channel_scores<T: Scalar>(
    state: &ModelState<T>,
    windows: &[MtsWindow<T>],
    eta: Option<T>,
    selector: &GradientSelector,
) -> Result<ChannelScoreTable<T>> {
    let eta = resolve_eta(state, eta)?;
    let sums = accumulate_sq_norms(state, windows, &selector.resolve(state)?)?;
    ChannelScoreTable::from_scores(sums.into_iter().map(|s| eta * s).collect())
}

fn accumulate_sq_norms<T: Scalar>(
    state: &ModelState<T>,
    windows: &[MtsWindow<T>],
    subset: &ParamSubset,
) -> Result<Vec<T>> {
    if windows.is_empty() {
        return Err(invalid("no validation windows"));
    }
    let per_window: Vec<Vec<T>> = windows
        .par_iter()
        .map(|w| channel_sq_norms(state, w, subset))
        .collect::<Result<_>>()?;
    let mut sums = vec![T::zero(); state.spec.channels];
    for row in &per_window {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s = *s + v;
        }
    }
    Ok(sums)
}

fn check_m(m: usize, n: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(invalid(format!("subset size {m} must be in 1..={n}")));
    }
    Ok(())
}

/// Ranked positions `⌊k·N/m⌋`, `k = 0..m`, mapped back to channel indices
/// and returned sorted.
pub fn equidistant_select<T: Scalar>(table: &ChannelScoreTable<T>, m: usize) -> Result<Vec<usize>> {
    let n = table.n_channels();
    check_m(m, n)?;
    let mut out: Vec<usize> = (0..m).map(|k| table.ranking[k * n / m]).collect();
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    InfluenceEquidistant,
    Random,
    Continuous,
    MostInfluence,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::InfluenceEquidistant,
        Strategy::Random,
        Strategy::Continuous,
        Strategy::MostInfluence,
    ];

    pub fn needs_scores(self) -> bool {
        matches!(self, Strategy::InfluenceEquidistant | Strategy::MostInfluence)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::InfluenceEquidistant => "influence_equidistant",
            Strategy::Random => "random",
            Strategy::Continuous => "continuous",
            Strategy::MostInfluence => "most_influence",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| invalid(format!("unknown strategy `{s}`")))
    }
}

/// Comparison selections: the first `m` channels, `m` uniformly random
/// channels, or the `m` highest scores. Returned sorted.
pub fn baseline_select<T: Scalar>(
    table: &ChannelScoreTable<T>,
    m: usize,
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = table.n_channels();
    check_m(m, n)?;
    let mut out = match strategy {
        Strategy::Continuous => (0..m).collect(),
        Strategy::Random => sample(&mut ChaCha8Rng::seed_from_u64(seed), n, m).into_vec(),
        Strategy::MostInfluence => table.ranking[n - m..].to_vec(),
        Strategy::InfluenceEquidistant => return equidistant_select(table, m),
    };
    out.sort_unstable();
    Ok(out)
}

fn select_without_scores(n: usize, m: usize, strategy: Strategy, seed: u64) -> Result<Vec<usize>> {
    check_m(m, n)?;
    let mut out = match strategy {
        Strategy::Continuous => (0..m).collect(),
        Strategy::Random => sample(&mut ChaCha8Rng::seed_from_u64(seed), n, m).into_vec(),
        _ => return Err(Error::Untrained),
    };
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningResult {
    pub strategy: Strategy,
    pub m: usize,
    pub seed: u64,
    pub selected: Vec<usize>,
    pub mse_selected: f64,
    pub mse_full: f64,
    /// The subset model's mixing layer was refit on all channels before evaluation.
    pub refit: bool,
}

impl PruningResult {
    pub const CSV_HEADER: &'static str = "strategy,m,seed,mse_selected,mse_full,refit";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.strategy, self.m, self.seed, self.mse_selected, self.mse_full, self.refit
        )
    }
}

pub fn write_results_csv<W: Write>(results: &[PruningResult], mut out: W) -> Result<()> {
    writeln!(out, "{}", PruningResult::CSV_HEADER)?;
    for r in results {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOptions {
    pub stride: usize,
    pub eta: Option<f64>,
    pub selector: GradientSelector,
}

impl Default for PruneOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            eta: None,
            selector: GradientSelector::LastLayer,
        }
    }
}

/// Reference model, its channel scores and the data, reused across
/// strategies and subset sizes.
#[derive(Debug, Clone)]
pub struct PruningBench<T> {
    data: DatasetSplit<T>,
    spec: ModelSpec,
    train_config: TrainConfig,
    options: PruneOptions,
    reference: ModelState<T>,
    table: Option<ChannelScoreTable<T>>,
    test_windows: Vec<MtsWindow<T>>,
    mse_full: T,
}

impl<T: Scalar> PruningBench<T> {
    /// Trains the full-channel reference model and scores its channels.
    pub fn new(
        data: DatasetSplit<T>,
        spec: &ModelSpec,
        train_config: &TrainConfig,
        options: PruneOptions,
    ) -> Result<Self> {
        let spec = ModelSpec {
            channels: data.n_channels(),
            ..spec.clone()
        };
        if spec.horizon.is_none() {
            return Err(invalid("channel pruning evaluates forecasting models; set a horizon"));
        }
        let windows = make_windows(&data.train, spec.sample_len(), options.stride)?;
        let reference = train(&init_params(&spec, train_config.seed)?, &windows, train_config)?;
        Self::from_reference(data, reference, train_config, options)
    }

    /// Uses an existing full-channel model. An untrained state yields no
    /// score table, so score-based strategies fail with [`Error::Untrained`].
    pub fn from_reference(
        data: DatasetSplit<T>,
        reference: ModelState<T>,
        train_config: &TrainConfig,
        options: PruneOptions,
    ) -> Result<Self> {
        if reference.spec.channels != data.n_channels() {
            return Err(invalid("reference model channel count differs from the data"));
        }
        let spec = reference.spec.clone();
        let table = match reference.trained_lr {
            Some(_) => {
                let val = make_windows(&data.val, spec.sample_len(), options.stride)?;
                Some(accumulate_channel_scores(
                    &reference,
                    &val,
                    options.eta.map(T::lit),
                    &options.selector,
                )?)
            }
            None => None,
        };
        let test_windows = make_windows(&data.test, spec.sample_len(), options.stride)?;
        let mse_full = reference.mean_squared_error(&test_windows)?;
        Ok(Self {
            data,
            spec,
            train_config: train_config.clone(),
            options,
            reference,
            table,
            test_windows,
            mse_full,
        })
    }

    pub fn table(&self) -> Option<&ChannelScoreTable<T>> {
        self.table.as_ref()
    }

    pub fn reference(&self) -> &ModelState<T> {
        &self.reference
    }

    pub fn select(&self, m: usize, strategy: Strategy, seed: u64) -> Result<Vec<usize>> {
        match &self.table {
            Some(t) => baseline_select(t, m, strategy, seed),
            None => select_without_scores(self.data.n_channels(), m, strategy, seed),
        }
    }

    /// Retrains from scratch on `selected` channels and evaluates on all channels.
    pub fn evaluate_subset(&self, selected: &[usize]) -> Result<(T, bool)> {
        let n = self.data.n_channels();
        let subset = self.data.train.select_channels(selected)?;
        let sub_spec = ModelSpec {
            channels: selected.len(),
            ..self.spec.clone()
        };
        let windows = make_windows(&subset, sub_spec.sample_len(), self.options.stride)?;
        let trained = train(
            &init_params(&sub_spec, self.train_config.seed)?,
            &windows,
            &self.train_config,
        )?;
        let (full, refit) = if selected.len() == n {
            (trained, false)
        } else if trained.spec.architecture.is_channel_independent() {
            (trained.with_channels(n)?, false)
        } else {
            (self.refit_mixing(&trained)?, true)
        };
        Ok((full.mean_squared_error(&self.test_windows)?, refit))
    }

    /// Keeps the subset model's per-channel map, installs an identity
    /// `N × N` mixing layer and trains only that layer on all channels.
    fn refit_mixing(&self, trained: &ModelState<T>) -> Result<ModelState<T>> {
        debug_assert_eq!(trained.spec.architecture, Architecture::MlpMix);
        let n = self.data.n_channels();
        let mut state = trained.clone();
        state.spec.channels = n;
        state.params.insert(MIX_WEIGHT, Tensor::identity(n));
        let windows = make_windows(&self.data.train, state.spec.sample_len(), self.options.stride)?;
        let mix_only = ParamSubset::new("mix", vec![MIX_WEIGHT.to_string()]);
        train_params(&state, &windows, &self.train_config, &mix_only)
    }

    pub fn run(&self, m: usize, strategy: Strategy, seed: u64) -> Result<PruningResult> {
        let selected = self.select(m, strategy, seed)?;
        let (mse, refit) = self.evaluate_subset(&selected)?;
        Ok(PruningResult {
            strategy,
            m,
            seed,
            selected,
            mse_selected: mse.as_f64(),
            mse_full: self.mse_full.as_f64(),
            refit,
        })
    }
}

/// Trains the reference, selects `m` channels with `strategy`, retrains on
/// them and reports both models' forecasting MSE on every test channel.
pub fn prune_and_eval<T: Scalar>(
    data: &DatasetSplit<T>,
    spec: &ModelSpec,
    train_config: &TrainConfig,
    m: usize,
    strategy: Strategy,
    options: &PruneOptions,
) -> Result<PruningResult> {
    PruningBench::new(data.clone(), spec, train_config, options.clone())?.run(m, strategy, train_config.seed)
}
