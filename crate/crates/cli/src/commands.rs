use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use chanfluence::anomaly::{detect, DetectConfig};
use chanfluence::data::{
    gen_anomaly_suite, gen_pruning_suite, load_labeled, save_csv, save_labels, AnomalySuiteConfig, PruningSuiteConfig,
};
use chanfluence::influence::{influence_matrix, resolve_eta, self_influence_batch, tracin};
use chanfluence::models::{init_params, train};
use chanfluence::pruning::{write_results_csv, PruneOptions, PruningBench, PruningResult, Strategy};
use chanfluence::series::make_windows;
use chanfluence::{DatasetSplit, ModelState, MtsSeries};
use serde::Serialize;

use crate::config::{
    DetectCommandConfig, InfluenceCommandConfig, InfluenceMode, PruneCommandConfig, Suite, SynthConfig,
    TrainCommandConfig,
};

pub const SYNTHETIC: &str = "synthetic";

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))
}

#[derive(Serialize)]
struct Manifest<'a, C> {
    command: &'a str,
    version: &'a str,
    config: &'a C,
}

/// Records the resolved config next to the outputs.
pub fn write_manifest<C: Serialize>(command: &str, out: &Path, config: &C) -> Result<()> {
    prepare_out(out)?;
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
        },
    )
}

fn read_series(path: &Path, labels: Option<&Path>) -> Result<MtsSeries> {
    for p in std::iter::once(path).chain(labels) {
        if !p.is_file() {
            bail!("missing input file {}", p.display());
        }
    }
    load_labeled(path, labels).with_context(|| format!("cannot load {}", path.display()))
}

fn read_split(dir: &Path, labeled: bool) -> Result<DatasetSplit> {
    let labels = |name: &str| labeled.then(|| dir.join(format!("{name}_labels.csv")));
    let train = read_series(&dir.join("train.csv"), None)?;
    let val = read_series(&dir.join("val.csv"), labels("val").as_deref())?;
    let test = read_series(&dir.join("test.csv"), labels("test").as_deref())?;
    Ok(DatasetSplit::new(train, val, test)?)
}

fn write_split(dir: &Path, split: &DatasetSplit) -> Result<()> {
    for (name, series) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        save_csv(series, dir.join(format!("{name}.csv")))?;
        if name != "train" {
            if let Some(labels) = series.labels() {
                save_labels(labels, dir.join(format!("{name}_labels.csv")))?;
            }
        }
    }
    Ok(())
}

pub fn synth(config: &SynthConfig) -> Result<()> {
    prepare_out(&config.out)?;
    let split = match config.suite {
        Suite::Anomaly => {
            let d = AnomalySuiteConfig::default();
            gen_anomaly_suite(&AnomalySuiteConfig {
                clusters: config.clusters.unwrap_or(d.clusters),
                channels_per_cluster: config.channels_per_cluster.unwrap_or(d.channels_per_cluster),
                base_frequencies: config.base_frequencies.clone().unwrap_or(d.base_frequencies),
                phase_jitter: config.phase_jitter.unwrap_or(d.phase_jitter),
                noise_std: config.noise_std.unwrap_or(d.noise_std),
                train_len: config.train_len.unwrap_or(d.train_len),
                val_len: config.val_len.unwrap_or(d.val_len),
                test_len: config.test_len.unwrap_or(d.test_len),
                corrupted_channels: config.corrupted_channels.unwrap_or(d.corrupted_channels),
                anomaly_fraction: config.anomaly_fraction.unwrap_or(d.anomaly_fraction),
                interval_len: config.interval_len.unwrap_or(d.interval_len),
                kind: config.anomaly_kind.unwrap_or(d.kind),
                magnitude: config.magnitude.unwrap_or(d.magnitude),
                seed: config.seed,
            })?
        }
        Suite::Pruning => {
            let d = PruningSuiteConfig::default();
            gen_pruning_suite(&PruningSuiteConfig {
                clusters: config.clusters.unwrap_or(d.clusters),
                channels_per_cluster: config.channels_per_cluster.unwrap_or(d.channels_per_cluster),
                base_frequencies: config.base_frequencies.clone().unwrap_or(d.base_frequencies),
                phase_jitter: config.phase_jitter.unwrap_or(d.phase_jitter),
                noise_std: config.noise_std.unwrap_or(d.noise_std),
                train_len: config.train_len.unwrap_or(d.train_len),
                val_len: config.val_len.unwrap_or(d.val_len),
                test_len: config.test_len.unwrap_or(d.test_len),
                seed: config.seed,
            })?
        }
    };
    write_split(&config.out, &split)?;
    write_manifest("synth", &config.out, config)
}

pub fn train_cmd(config: &TrainCommandConfig) -> Result<()> {
    prepare_out(&config.out)?;
    let series = read_series(&config.data.join("train.csv"), None)?;
    let model = config.model();
    let spec = model.spec(series.n_channels());
    let windows = make_windows(&series, spec.sample_len(), config.stride)?;
    let state = train(
        &init_params(&spec, config.seed)?,
        &windows,
        &model.train_config(config.seed),
    )?;
    state.save(config.out.join("model.json"))?;
    write_manifest("train", &config.out, config)
}

fn load_checkpoint(path: &Path) -> Result<ModelState> {
    if !path.is_file() {
        bail!("missing checkpoint {}", path.display());
    }
    ModelState::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

#[derive(Serialize)]
struct InfluenceSummary {
    src_origin_t: usize,
    dst_origin_t: usize,
    eta: f64,
    selector: String,
    total: f64,
    tracin: f64,
}

pub fn influence_cmd(config: &InfluenceCommandConfig) -> Result<()> {
    prepare_out(&config.out)?;
    let state = load_checkpoint(&config.checkpoint)?;
    let series = read_series(&config.series, None)?;
    let windows = make_windows(&series, state.spec.sample_len(), config.stride)?;
    let eta = resolve_eta(&state, config.eta)?;
    match config.mode {
        InfluenceMode::Matrix => {
            let dst_index = config.dst_window.unwrap_or(config.src_window);
            let pick = |k: usize| {
                windows
                    .get(k)
                    .with_context(|| format!("window index {k} out of range ({} windows)", windows.len()))
            };
            let (src, dst) = (pick(config.src_window)?, pick(dst_index)?);
            let matrix = influence_matrix(&state, src, dst, eta, &config.selector)?;
            let mut out = create(&config.out.join("influence.csv"))?;
            matrix.write_csv(&mut out, series.channel_names())?;
            out.flush()?;
            write_json(
                &config.out.join("influence.json"),
                &InfluenceSummary {
                    src_origin_t: src.origin_t(),
                    dst_origin_t: dst.origin_t(),
                    eta,
                    selector: config.selector.to_string(),
                    total: matrix.total(),
                    tracin: tracin(&state, src, dst, eta, &config.selector)?,
                },
            )?;
        }
        InfluenceMode::SelfInfluence => {
            let rows = self_influence_batch(&state, &windows, eta, &config.selector)?;
            let mut out = create(&config.out.join("self_influence.csv"))?;
            writeln!(out, "origin_t,{}", series.channel_names().join(","))?;
            for (w, row) in windows.iter().zip(&rows) {
                let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                writeln!(out, "{},{}", w.origin_t(), cells.join(","))?;
            }
            out.flush()?;
        }
    }
    write_manifest("influence", &config.out, config)
}

pub fn detect_cmd(config: &DetectCommandConfig) -> Result<()> {
    prepare_out(&config.out)?;
    let data = if config.data == SYNTHETIC {
        gen_anomaly_suite(&AnomalySuiteConfig {
            seed: config.seed,
            ..Default::default()
        })?
    } else {
        read_split(Path::new(&config.data), true)?
    };
    let state = match &config.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let model = config.model();
            let spec = model.spec(data.n_channels());
            let windows = make_windows(&data.train, spec.sample_len(), config.stride)?;
            let state = train(
                &init_params(&spec, config.seed)?,
                &windows,
                &model.train_config(config.seed),
            )?;
            state.save(config.out.join("model.json"))?;
            state
        }
    };
    let report = detect(
        &state,
        &data.test,
        Some(&data.val),
        &DetectConfig {
            method: config.method,
            normalization: config.normalization,
            threshold_split: config.threshold_split,
            eta: config.eta,
            selector: config.selector.clone(),
            stride: config.stride,
            per_channel_normalization: config.per_channel_normalization,
        },
    )?;
    write_json(&config.out.join("summary.json"), &report.summary())?;
    let mut out = create(&config.out.join("scores.csv"))?;
    report.write_csv(&mut out)?;
    out.flush()?;
    write_manifest("detect", &config.out, config)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

fn write_prune_summary(path: &Path, results: &[PruningResult], ms: &[usize], strategies: &[Strategy]) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "strategy,m,runs,mean_mse_selected,mean_mse_full")?;
    for &m in ms {
        for &s in strategies {
            let rows: Vec<&PruningResult> = results.iter().filter(|r| r.m == m && r.strategy == s).collect();
            writeln!(
                out,
                "{s},{m},{},{},{}",
                rows.len(),
                mean(rows.iter().map(|r| r.mse_selected)),
                mean(rows.iter().map(|r| r.mse_full))
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn prune_cmd(config: &PruneCommandConfig) -> Result<()> {
    prepare_out(&config.out)?;
    let model = config.model();
    let options = PruneOptions {
        stride: config.stride,
        eta: config.eta,
        selector: config.selector.clone(),
    };
    let fixed = if config.data == SYNTHETIC {
        None
    } else {
        Some(read_split(Path::new(&config.data), false)?)
    };
    let mut results = Vec::new();
    for seed in config.seed..config.seed + config.repeats {
        let data = match &fixed {
            Some(d) => d.clone(),
            None => gen_pruning_suite(&PruningSuiteConfig {
                seed,
                ..Default::default()
            })?,
        };
        let spec = model.spec(data.n_channels());
        let bench = PruningBench::new(data, &spec, &model.train_config(seed), options.clone())?;
        for &m in &config.m {
            for &strategy in &config.strategies {
                results.push(bench.run(m, strategy, seed)?);
            }
        }
    }
    let mut out = create(&config.out.join("pruning.csv"))?;
    write_results_csv(&results, &mut out)?;
    out.flush()?;
    write_prune_summary(
        &config.out.join("pruning_summary.csv"),
        &results,
        &config.m,
        &config.strategies,
    )?;
    write_manifest("prune", &config.out, config)
}
