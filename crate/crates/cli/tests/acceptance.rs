//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use chanfluence::anomaly::{
    auroc, detect, normalize_values, prf1, score_windows, select_threshold, DetectConfig, Normalization, ScoreMethod,
};
use chanfluence::autodiff::finite_difference_gradient;
use chanfluence::data::{gen_anomaly_suite, gen_pruning_suite, AnomalySuiteConfig, PruningSuiteConfig};
use chanfluence::influence::{influence_matrix, tracin};
use chanfluence::models::{init_params, train, Activation, Architecture, GradientSelector, ModelSpec, TrainConfig};
use chanfluence::pruning::{accumulate_channel_scores, PruneOptions, PruningBench, Strategy};
use chanfluence::series::{make_windows, window_labels};
use chanfluence::{DatasetSplit, ModelState, MtsWindow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const ARCHS: [Architecture; 3] = [Architecture::LinearCi, Architecture::MlpCi, Architecture::MlpMix];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_spec(rng: &mut ChaCha8Rng, arch: Architecture) -> ModelSpec {
    let window = rng.random_range(3..10);
    let channels = rng.random_range(2..6);
    let hidden = rng.random_range(2..7);
    let spec = if rng.random_bool(0.5) {
        ModelSpec::forecasting(arch, window, rng.random_range(1..4), channels, hidden)
    } else {
        ModelSpec::reconstruction(arch, window, channels, hidden)
    };
    let activation = if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Tanh
    };
    spec.with_activation(activation)
}

fn random_window(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> MtsWindow {
    let len = spec.sample_len();
    let values = (0..len * spec.channels).map(|_| rng.random_range(-2.0..2.0)).collect();
    MtsWindow::new(values, spec.channels, len - 1).unwrap()
}

fn random_state(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> ModelState {
    let mut state = init_params(spec, rng.random()).unwrap();
    state.trained_lr = Some(1e-2);
    state
}

fn decomposition_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let selectors = [GradientSelector::LastLayer, GradientSelector::All];
    let mut worst: f64 = 0.0;
    let cases = 120;
    for case in 0..cases {
        let spec = random_spec(&mut rng, ARCHS[case % 3]);
        let selector = &selectors[(case / 3) % 2];
        let state = random_state(&mut rng, &spec);
        let (a, b) = (random_window(&mut rng, &spec), random_window(&mut rng, &spec));
        let eta = 10f64.powf(rng.random_range(-4.0..0.0));
        let total = influence_matrix(&state, &a, &b, eta, selector).unwrap().total();
        let whole = tracin(&state, &a, &b, eta, selector).unwrap();
        worst = worst.max((total - whole).abs() / (whole.abs() + 1e-12));
    }
    outcome(worst <= 1e-9, format!("{cases} cases, worst relative gap {worst:.2e}"))
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let cases = 120;
    for case in 0..cases {
        let spec = random_spec(&mut rng, ARCHS[case % 3]);
        let state = random_state(&mut rng, &spec);
        let window = random_window(&mut rng, &spec);
        let j = rng.random_range(0..spec.channels);
        let subset = GradientSelector::All.resolve(&state).unwrap();
        let analytic = state.channel_gradient(&window, j, &GradientSelector::All).unwrap();
        let numeric = finite_difference_gradient(
            |p| {
                let probe = ModelState {
                    params: p.clone(),
                    ..state.clone()
                };
                probe.channel_loss(&window, j)
            },
            &state.params,
            &subset,
            1e-5,
        )
        .unwrap();
        let scale = numeric.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let err = analytic
            .values
            .iter()
            .zip(&numeric.values)
            .fold(0.0f64, |m, (a, f)| m.max((a - f).abs()));
        worst = worst.max(err / scale);
    }
    outcome(
        worst <= 1e-4,
        format!("{cases} cases, worst normwise relative error {worst:.2e}"),
    )
}

fn self_influence_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let selectors = [GradientSelector::LastLayer, GradientSelector::All];
    let (mut negative, mut asymmetric) = (0, 0);
    let mut dup_gap: f64 = 0.0;
    let cases = 120;
    for case in 0..cases {
        let spec = random_spec(&mut rng, ARCHS[case % 3]);
        let selector = &selectors[(case / 3) % 2];
        let state = random_state(&mut rng, &spec);
        let z = random_window(&mut rng, &spec);
        let m = influence_matrix(&state, &z, &z, 1e-2, selector).unwrap();
        let n = spec.channels;
        negative += m.diagonal().iter().filter(|&&d| d < 0.0).count();
        for i in 0..n {
            for k in 0..n {
                if m.get(i, k) != m.get(k, i) {
                    asymmetric += 1;
                }
            }
        }
        if spec.architecture.is_channel_independent() {
            // Overwrite the last channel with a copy of the first.
            let mut values = z.values().to_vec();
            for t in 0..z.len() {
                values[t * n + n - 1] = values[t * n];
            }
            let dup = MtsWindow::new(values, n, z.origin_t()).unwrap();
            let d = influence_matrix(&state, &dup, &dup, 1e-2, selector).unwrap().diagonal();
            dup_gap = dup_gap.max((d[0] - d[n - 1]).abs() / d[0].abs().max(1e-300));
        }
    }
    outcome(
        negative == 0 && asymmetric == 0 && dup_gap <= 1e-12,
        format!("{cases} cases: {negative} negative diagonal entries, {asymmetric} asymmetric pairs, duplicate-channel gap {dup_gap:.2e}"),
    )
}

fn anomaly_spec(channels: usize) -> (ModelSpec, TrainConfig) {
    (
        ModelSpec::reconstruction(Architecture::MlpCi, 10, channels, 8),
        TrainConfig {
            epochs: 200,
            ..Default::default()
        },
    )
}

fn trained_anomaly_model(seed: u64) -> (DatasetSplit, ModelState) {
    let data = gen_anomaly_suite::<f64>(&AnomalySuiteConfig {
        seed,
        ..Default::default()
    })
    .unwrap();
    let (spec, config) = anomaly_spec(data.n_channels());
    let windows = make_windows(&data.train, spec.sample_len(), 1).unwrap();
    let state = train(
        &init_params(&spec, seed).unwrap(),
        &windows,
        &TrainConfig { seed, ..config },
    )
    .unwrap();
    (data, state)
}

fn eta_invariance() -> Outcome {
    let (data, state) = trained_anomaly_model(0);
    let test = make_windows(&data.test, 10, 1).unwrap();
    let labels = window_labels(&test, &data.test).unwrap();
    let val = make_windows(&data.val, 10, 1).unwrap();
    let selector = GradientSelector::LastLayer;
    let results: Vec<(Vec<usize>, f64, f64)> = [1e-4, 1e-2, 1.0]
        .iter()
        .map(|&eta| {
            let ranking = accumulate_channel_scores(&state, &val, Some(eta), &selector)
                .unwrap()
                .ranking;
            let scores = score_windows(&state, &test, ScoreMethod::CifSelfInfluence, Some(eta), &selector)
                .unwrap()
                .scores;
            (
                ranking,
                auroc(&scores, &labels).unwrap(),
                select_threshold(&scores, &labels).unwrap().f1,
            )
        })
        .collect();
    let same = results.windows(2).all(|p| p[0] == p[1]);
    let (_, auc, f1) = &results[0];
    outcome(
        same,
        format!("eta in {{1e-4, 1e-2, 1}}: rankings, AUROC {auc:.4} and best F1 {f1:.4} identical: {same}"),
    )
}

fn anomaly_ordering() -> Outcome {
    let methods = [
        ScoreMethod::CifSelfInfluence,
        ScoreMethod::ReconstructionError,
        ScoreMethod::TracinSelfInfluence,
    ];
    let per_seed: Vec<([f64; 3], f64)> = (0..5u64)
        .into_par_iter()
        .map(|seed| {
            let (data, state) = trained_anomaly_model(seed);
            let mut f1 = [0.0; 3];
            let mut cif_auc = 0.0;
            for (k, &method) in methods.iter().enumerate() {
                let config = DetectConfig {
                    method,
                    ..Default::default()
                };
                let report = detect(&state, &data.test, Some(&data.val), &config).unwrap();
                f1[k] = report.f1;
                if k == 0 {
                    cif_auc = auroc(&report.raw_scores.scores, &report.labels).unwrap();
                }
            }
            (f1, cif_auc)
        })
        .collect();
    let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / xs.len() as f64;
    let column = |k: usize| mean(per_seed.iter().map(|r| r.0[k]).collect());
    let (cif, recon, tr) = (column(0), column(1), column(2));
    let auc = mean(per_seed.iter().map(|r| r.1).collect());
    let min_auc = per_seed.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    outcome(
        cif >= recon && cif >= tr && auc >= 0.95,
        format!("mean F1 cif {cif:.4}, reconstruction {recon:.4}, tracin {tr:.4}; mean AUROC(cif) {auc:.4} (min {min_auc:.4})"),
    )
}

/// Exhaustive search over midpoints and both sentinels, F1 as exact fractions.
fn brute_force_threshold(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let mut distinct = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    candidates.extend(distinct.windows(2).map(|p| (p[0] + p[1]) / 2.0));
    candidates.push(f64::INFINITY);
    let mut best: Option<(f64, u64, u64)> = None;
    for h in candidates {
        let (mut tp, mut wrong) = (0u64, 0u64);
        for (&s, &l) in scores.iter().zip(labels) {
            match (s > h, l == 1) {
                (true, true) => tp += 1,
                (true, false) | (false, true) => wrong += 1,
                _ => {}
            }
        }
        let (num, den) = (2 * tp, 2 * tp + wrong);
        if best.is_none_or(|(_, bn, bd)| num * bd > bn * den) {
            best = Some((h, num, den));
        }
    }
    let (h, ..) = best.unwrap();
    let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s > h)).collect();
    (h, prf1::<f64>(&pred, labels).unwrap().f1)
}

fn threshold_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let cases = 1000;
    for case in 0..cases {
        let n = rng.random_range(2..80);
        let scores: Vec<f64> = if case % 2 == 0 {
            (0..n).map(|_| rng.random_range(0..12) as f64 / 7.0).collect()
        } else {
            (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
        };
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        labels[0] = 0;
        labels[1] = 1;
        let got = select_threshold(&scores, &labels).unwrap();
        let (h, f1) = brute_force_threshold(&scores, &labels);
        if got.threshold.to_bits() != h.to_bits() || got.f1.to_bits() != f1.to_bits() {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{cases} random cases, {mismatches} mismatches"),
    )
}

fn normalization_examples() -> Outcome {
    let iqr = normalize_values(&[2.0, 4.0, 6.0, 8.0, 10.0], Normalization::MedianIqr).unwrap();
    let std = normalize_values(&[0.0, 10.0], Normalization::MeanStd).unwrap();
    let constant = [Normalization::MeanStd, Normalization::MedianIqr]
        .iter()
        .all(|&m| normalize_values(&[3.5; 6], m).unwrap() == vec![0.0; 6]);
    let pass = iqr == vec![-1.0, -0.5, 0.0, 0.5, 1.0] && std == vec![-1.0, 1.0] && constant;
    outcome(
        pass,
        format!("median_iqr {iqr:?}, mean_std {std:?}, constant -> zeros: {constant}"),
    )
}

fn pruning_bench(seed: u64, arch: Architecture, epochs: usize) -> PruningBench<f64> {
    let data = gen_pruning_suite::<f64>(&PruningSuiteConfig {
        seed,
        ..Default::default()
    })
    .unwrap();
    let spec = ModelSpec::forecasting(arch, 48, 12, data.n_channels(), 16);
    let config = TrainConfig {
        epochs,
        seed,
        ..Default::default()
    };
    PruningBench::new(data, &spec, &config, PruneOptions::default()).unwrap()
}

fn pruning_ordering() -> Outcome {
    let ms = [4usize, 8];
    let cluster_size = PruningSuiteConfig::default().channels_per_cluster;
    let clusters = PruningSuiteConfig::default().clusters;
    // Per seed, per m: MSE for each strategy and whether every cluster is covered.
    let runs: Vec<Vec<([f64; 4], bool)>> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let bench = pruning_bench(seed, Architecture::LinearCi, 50);
            ms.iter()
                .map(|&m| {
                    let mut mse = [0.0; 4];
                    let mut covered = false;
                    for (k, &s) in Strategy::ALL.iter().enumerate() {
                        let r = bench.run(m, s, seed).unwrap();
                        mse[k] = r.mse_selected;
                        if s == Strategy::InfluenceEquidistant {
                            let mut hit: Vec<usize> = r.selected.iter().map(|c| c / cluster_size).collect();
                            hit.dedup();
                            covered = hit.len() == clusters;
                        }
                    }
                    (mse, covered)
                })
                .collect()
        })
        .collect();
    let mut pass = true;
    let mut detail = Vec::new();
    for (mi, m) in ms.iter().enumerate() {
        let mut mean = [0.0; 4];
        for run in &runs {
            for (acc, v) in mean.iter_mut().zip(run[mi].0) {
                *acc += v / runs.len() as f64;
            }
        }
        let covered = runs.iter().filter(|run| run[mi].1).count();
        let [eq, random, cont, most] = mean;
        pass &= eq <= random && random <= cont && eq <= most && covered >= 9;
        detail.push(format!(
            "m={m}: equidistant {eq:.4}, random {random:.4}, continuous {cont:.4}, most_influence {most:.4}, coverage {covered}/10"
        ));
    }
    outcome(pass, detail.join("; "))
}

fn identity_pruning() -> Outcome {
    let mut pairs = Vec::new();
    for arch in [Architecture::LinearCi, Architecture::MlpMix] {
        let bench = pruning_bench(0, arch, 10);
        for s in Strategy::ALL {
            let r = bench.run(32, s, 0).unwrap();
            pairs.push((r.mse_selected, r.mse_full));
        }
    }
    let equal = pairs.iter().filter(|(a, b)| a.to_bits() == b.to_bits()).count();
    outcome(
        equal == pairs.len(),
        format!(
            "{equal}/{} runs with m = N reproduce the full-model MSE bit for bit",
            pairs.len()
        ),
    )
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn cli_reproducibility() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_chanfluence");
    let scenarios = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let tmp = tempfile::tempdir().unwrap();
    let commands: [(&str, Vec<String>); 2] = [
        (
            "detect",
            vec![
                "--config".into(),
                scenarios.join("detect_synthetic.json").display().to_string(),
            ],
        ),
        (
            "prune",
            vec![
                "--config".into(),
                scenarios.join("prune_synthetic.json").display().to_string(),
                "--set".into(),
                "repeats=2".into(),
            ],
        ),
    ];
    let mut detail = Vec::new();
    let mut pass = true;
    for (cmd, args) in &commands {
        let out = tmp.path().join(cmd);
        let mut snaps = Vec::new();
        for _ in 0..2 {
            let status = Command::new(bin)
                .arg(cmd)
                .args(args)
                .arg("--out")
                .arg(&out)
                .status()
                .unwrap();
            pass &= status.success();
            snaps.push(snapshot(&out));
            fs::remove_dir_all(&out).unwrap();
        }
        let same = snaps[0] == snaps[1];
        pass &= same;
        detail.push(format!("{cmd}: {} files identical: {same}", snaps[0].len()));
    }
    outcome(pass, detail.join("; "))
}

type Criterion = (u8, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (
            1,
            "decomposition identity",
            Duration::from_secs(10),
            decomposition_identity,
        ),
        (2, "gradient check", Duration::from_secs(30), gradient_check),
        (3, "self-influence structure", Duration::MAX, self_influence_structure),
        (4, "eta invariance", Duration::MAX, eta_invariance),
        (5, "anomaly ordering", Duration::from_secs(120), anomaly_ordering),
        (6, "threshold oracle", Duration::MAX, threshold_oracle),
        (7, "normalization arithmetic", Duration::MAX, normalization_examples),
        (8, "pruning ordering", Duration::from_secs(300), pruning_ordering),
        (9, "identity pruning", Duration::MAX, identity_pruning),
        (10, "end-to-end reproducibility", Duration::MAX, cli_reproducibility),
    ];
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let pass = result.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget_note = if budget == Duration::MAX {
            String::new()
        } else {
            format!(", budget {}s", budget.as_secs())
        };
        println!(
            "criterion {id:>2} {} {name}: {} [{:.2}s{budget_note}]",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
