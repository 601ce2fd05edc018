//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{bits, random_instance, row_softmax};
use dive::dataset::Dataset;
use dive::estep::{compute_data_fit, update_posteriors};
use dive::eval::{run_comparison, simulate_covariate, ComparisonConfig, ComparisonReport, Covariate, Link};
use dive::fast::audit_equivalence;
use dive::gem::{gem_fit, gem_fit_from, FitMode, FitReport};
use dive::io::{load_dataset_dir, load_model, save_dataset, save_model, ModelCheckpoint};
use dive::metrics::{baseline_dps_of, center_errors, dps_alignment, dps_error, label_agreement, match_labels, pearson};
use dive::mstep::{initialize, update_sigma, FitConfig, SIGMA_FLOOR};
use dive::objective::{penalized_objective, renormalize_dps};
use dive::priors::Priors;
use dive::synthetic::{generate_dataset, GroundTruth, ScenarioConfig, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: String) -> Self {
        Self { passed, detail }
    }
}

/// Per-seed results of one preset.
struct PresetRun {
    agreement: Vec<f64>,
    correlation: Vec<f64>,
    dps_error: Vec<f64>,
    center_error: Vec<f64>,
    /// Worst ratio of per-cluster centre error to its bound.
    worst_center_ratio: f64,
    elapsed: Duration,
}

#[derive(Default)]
struct Ledger {
    fits: usize,
    violations: usize,
}

impl Ledger {
    fn record(&mut self, report: &FitReport) {
        self.fits += 1;
        self.violations += report.monotonicity_violations.len();
    }

    fn record_comparison(&mut self, report: &ComparisonReport) {
        for m in &report.models {
            self.fits += report.folds_used.len();
            self.violations += m.monotonicity_violations;
        }
    }
}

fn sigmoid(s: f64, a: f64, b: f64, c: f64, d: f64) -> f64 {
    d + a / (1.0 + (-b * (s - c)).exp())
}

fn random_grid(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let w = rng.random_range(1..=5usize);
    let h = rng.random_range(1..=10 / w);
    (w, h)
}

fn posteriors_match_direct_evaluation() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst, mut worst_softmax) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        let (w, h) = random_grid(&mut rng);
        let k = rng.random_range(1..=3);
        let (data, model) = random_instance(seed, w, h, k, rng.random_range(2..6));
        let dfit = compute_data_fit(&data, &model).unwrap();
        let lambda = rng.random_range(0.0..3.0);
        let z_prev = model.posteriors.clone();
        let z = update_posteriors(&dfit, &z_prev, data.adjacency(), lambda).unwrap();

        // product of exp(D) and neighbour sums of Ψ, in linear space
        let psi = |a: usize, b: usize| if a == b { lambda.exp() } else { (-lambda * lambda).exp() };
        for l in 0..data.n_vertices() {
            let top = (0..k).map(|c| dfit.d[[l, c]]).fold(f64::NEG_INFINITY, f64::max);
            let raw: Vec<f64> = (0..k)
                .map(|c| {
                    let mut w = (dfit.d[[l, c]] - top).exp();
                    for &m in data.adjacency().neighbors(l) {
                        w *= (0..k).map(|c2| z_prev[[m, c2]] * psi(c, c2)).sum::<f64>();
                    }
                    w
                })
                .collect();
            let total: f64 = raw.iter().sum();
            for c in 0..k {
                worst = worst.max((z[[l, c]] - raw[c] / total).abs());
            }
        }

        let flat = update_posteriors(&dfit, &z_prev, data.adjacency(), 0.0).unwrap();
        let soft = row_softmax(&dfit.d);
        for (a, b) in flat.iter().zip(soft.iter()) {
            worst_softmax = worst_softmax.max((a - b).abs());
        }
    }
    let elapsed = started.elapsed();
    Outcome::new(
        worst <= 1e-12 && worst_softmax <= 1e-12 && elapsed < Duration::from_secs(1),
        format!("max |z - direct| = {worst:.2e}, max |z(λ=0) - softmax| = {worst_softmax:.2e}, {elapsed:.2?}"),
    )
}

fn sigma_matches_brute_force() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (mut worst, mut worst_stationary) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        let (w, h) = random_grid(&mut rng);
        let k = rng.random_range(1..=3);
        let (data, model) = random_instance(1000 + seed, w, h, k, rng.random_range(2..6));
        let rows = data.n_rows();
        for (c, t) in model.trajectories.iter().enumerate() {
            let sigma = update_sigma(c, &data, &model.posteriors, &model.stages, t);
            let (mut num, mut mass) = (0.0, 0.0);
            for l in 0..data.n_vertices() {
                let z = model.posteriors[[l, c]];
                mass += z;
                for r in 0..rows {
                    let st = model.stages[data.subject_of_row(r)];
                    let s = st.alpha * data.age(r) + st.beta;
                    let e = data.values()[[r, l]] - sigmoid(s, t.a, t.b, t.c, t.d);
                    num += z * e * e;
                }
            }
            let expected = (num / (rows as f64 * mass)).sqrt().max(SIGMA_FLOOR);
            worst = worst.max((sigma - expected).abs() / expected.max(1.0));
            if sigma > SIGMA_FLOOR {
                // d/dσ of Σ_l z_lk Σ_r log N(e; 0, σ²), scaled by its size
                let deriv = |sg: f64| -> f64 { -(rows as f64) * mass / sg + num / sg.powi(3) };
                let h = 1e-5 * sigma;
                let loglik = |sg: f64| -> f64 { -(rows as f64) * mass * sg.ln() - num / (2.0 * sg * sg) };
                let fd = (loglik(sigma + h) - loglik(sigma - h)) / (2.0 * h);
                let scale = rows as f64 * mass / sigma;
                worst_stationary = worst_stationary.max(fd.abs() / scale).max(deriv(sigma).abs() / scale);
            }
        }
    }
    let elapsed = started.elapsed();
    Outcome::new(
        worst <= 1e-12 && worst_stationary <= 1e-6 && elapsed < Duration::from_secs(1),
        format!("max relative σ deviation = {worst:.2e}, max scaled derivative = {worst_stationary:.2e}, {elapsed:.2?}"),
    )
}

fn fast_path_matches_slow(ledger: &mut Ledger) -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut failed_audits = 0;
    let mut worst_audit = 0.0f64;
    for seed in 0..50 {
        let k = rng.random_range(1..=3);
        let (data, model) = random_instance(2000 + seed, rng.random_range(2..5), 3, k, 6);
        let report = audit_equivalence(&data, &model, 1e-8);
        worst_audit = worst_audit.max(report.max_theta_deviation).max(report.max_stage_deviation);
        if !report.passed {
            failed_audits += 1;
        }
    }

    let mut worst_rms = 0.0f64;
    for seed in 0..3 {
        let scenario = ScenarioConfig {
            k: 2,
            vertices: 100,
            subjects: 20,
            topology: Topology::Grid { width: 10 },
            ..ScenarioConfig::default()
        }
        .with_seed(seed);
        let (data, _) = generate_dataset(&scenario).unwrap();
        let fast = FitConfig {
            seed,
            ..FitConfig::with_k(2)
        };
        let slow = FitConfig { fast: false, ..fast.clone() };
        let init = initialize(&data, &fast).unwrap();
        let (a, ra) = gem_fit_from(&data, init.clone(), &fast, &Priors::uniform(), &FitMode::Full).unwrap();
        let (b, rb) = gem_fit_from(&data, init, &slow, &Priors::uniform(), &FitMode::Full).unwrap();
        ledger.record(&ra);
        ledger.record(&rb);
        let sq: f64 = (0..data.n_rows())
            .map(|r| {
                let i = data.subject_of_row(r);
                (a.stages[i].dps(data.age(r)) - b.stages[i].dps(data.age(r))).powi(2)
            })
            .sum();
        worst_rms = worst_rms.max((sq / data.n_rows() as f64).sqrt());
    }
    let elapsed = started.elapsed();
    Outcome::new(
        failed_audits == 0 && worst_rms < 1e-3 && elapsed < Duration::from_secs(120),
        format!(
            "audits failed {failed_audits}/50 (max deviation {worst_audit:.2e}), max fast/slow DPS RMS = {worst_rms:.2e}, {elapsed:.2?}"
        ),
    )
}

fn run_preset(name: &str, ledger: &mut Ledger) -> PresetRun {
    let started = Instant::now();
    let mut run = PresetRun {
        agreement: Vec::new(),
        correlation: Vec::new(),
        dps_error: Vec::new(),
        center_error: Vec::new(),
        worst_center_ratio: 0.0,
        elapsed: Duration::ZERO,
    };
    for seed in 0..SEEDS {
        let scenario = ScenarioConfig::preset(name).unwrap().with_seed(seed);
        let (data, truth) = generate_dataset(&scenario).unwrap();
        let config = FitConfig {
            k: scenario.k,
            seed,
            ..FitConfig::default()
        };
        let (model, report) = gem_fit(&data, &config, &Priors::uniform(), &FitMode::Full).unwrap();
        ledger.record(&report);
        score(&data, &truth, &model, &mut run);
    }
    run.elapsed = started.elapsed();
    run
}

fn score(data: &Dataset, truth: &GroundTruth, model: &dive::model::ModelState, run: &mut PresetRun) {
    let perm = match_labels(&model.posteriors, &truth.labels, model.k()).unwrap();
    run.agreement.push(label_agreement(model, &truth.labels, &perm));
    let est = baseline_dps_of(data, &model.stages);
    let tru = baseline_dps_of(data, &truth.stages);
    run.correlation.push(pearson(&est, &tru).unwrap());
    run.dps_error.push(dps_error(data, &model.stages, &truth.stages));
    let alignment = dps_alignment(data, &model.stages, &truth.stages);
    let errors = center_errors(&model.trajectories, &truth.trajectories, &perm, &alignment);
    run.center_error.push(errors.iter().sum());
    let true_dps = truth.row_dps(data);
    let lo = true_dps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = true_dps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bound = (0.1 * (hi - lo)).powi(2);
    for e in errors {
        run.worst_center_ratio = run.worst_center_ratio.max(e / bound);
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn easy_recovery(easy: &PresetRun) -> Outcome {
    let agreement = median(&easy.agreement);
    let min_rho = easy.correlation.iter().copied().fold(f64::INFINITY, f64::min);
    Outcome::new(
        agreement >= 0.9
            && min_rho >= 0.95
            && easy.worst_center_ratio <= 1.0
            && easy.elapsed < Duration::from_secs(600),
        format!(
            "median agreement = {agreement:.4}, min DPS correlation = {min_rho:.4}, worst centre error / bound = {:.4}, {:.2?}",
            easy.worst_center_ratio, easy.elapsed
        ),
    )
}

fn difficulty_ordering(runs: &[(&str, &PresetRun)]) -> Outcome {
    let dps: Vec<f64> = runs.iter().map(|(_, r)| mean(&r.dps_error)).collect();
    let centre: Vec<f64> = runs.iter().map(|(_, r)| mean(&r.center_error)).collect();
    let ordered = |v: &[f64]| v.windows(2).all(|w| w[0] <= w[1]);
    let detail = runs
        .iter()
        .zip(dps.iter().zip(&centre))
        .map(|((name, _), (d, c))| format!("{name}: dps_error {d:.4} center_error {c:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(ordered(&dps) && ordered(&centre), detail)
}

fn comparison_data(noise: f64, seed: u64) -> (Dataset, GroundTruth, Vec<Covariate>) {
    let scenario = ScenarioConfig {
        vertices: 225,
        subjects: 100,
        noise,
        topology: Topology::Grid { width: 15 },
        ..ScenarioConfig::default()
    }
    .with_seed(seed);
    let (data, truth) = generate_dataset(&scenario).unwrap();
    let dps = truth.row_dps(&data);
    let covariates = vec![
        simulate_covariate("linear", &data, &dps, Link::Linear, 1.0, seed + 100).unwrap(),
        simulate_covariate("logistic", &data, &dps, Link::Logistic, 0.05, seed + 101).unwrap(),
    ];
    (data, truth, covariates)
}

fn staging_beats_baselines(ledger: &mut Ledger) -> Outcome {
    let started = Instant::now();
    let (data, truth, covariates) = comparison_data(0.1, 6);
    let config = ComparisonConfig::new(FitConfig { seed: 6, ..FitConfig::default() }, truth.labels.clone());
    let report = run_comparison(&data, &covariates, &config).unwrap();
    ledger.record_comparison(&report);
    let full = report.model("full").unwrap();
    let none = report.model("no_staging").unwrap();
    let mut wins = Vec::new();
    for c in 0..covariates.len() {
        let w = full.correlations[c]
            .per_fold
            .iter()
            .zip(&none.correlations[c].per_fold)
            .filter(|(f, n)| f > n)
            .count();
        wins.push(w);
    }
    let folds = report.folds_used.len();
    let rmse_ok = none.rmse.mean > full.rmse.mean;

    let (data0, truth0, covariates0) = comparison_data(0.0, 7);
    let config0 = ComparisonConfig::new(FitConfig { seed: 7, ..FitConfig::default() }, truth0.labels.clone());
    let report0 = run_comparison(&data0, &covariates0, &config0).unwrap();
    ledger.record_comparison(&report0);
    let f0 = report0.model("full").unwrap();
    let r0 = report0.model("roi").unwrap();
    let gap = (0..covariates0.len())
        .map(|c| (f0.correlations[c].mean - r0.correlations[c].mean).abs())
        .fold(0.0, f64::max);

    let elapsed = started.elapsed();
    Outcome::new(
        folds == 10
            && wins.iter().all(|&w| w >= 9)
            && rmse_ok
            && report0.folds_used.len() == 10
            && gap <= 0.01
            && elapsed < Duration::from_secs(900),
        format!(
            "full beats no_staging on {wins:?} of {folds} folds, RMSE full {:.4} vs no_staging {:.4}, zero-noise |ρ_full - ρ_roi| = {gap:.4}, {elapsed:.2?}",
            full.rmse.mean, none.rmse.mean
        ),
    )
}

fn invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut worst_affine = 0.0f64;
    let mut worst_idempotent = 0.0f64;
    for seed in 0..50 {
        let (data, model) = random_instance(3000 + seed, 4, 3, 3, 6);
        let (scale, shift) = (rng.random_range(0.2..5.0), rng.random_range(-10.0..10.0));
        let mut moved = model.clone();
        for s in &mut moved.stages {
            s.alpha *= scale;
            s.beta = scale * s.beta + shift;
        }
        for t in &mut moved.trajectories {
            t.c = scale * t.c + shift;
            t.b /= scale;
        }
        let a = penalized_objective(&data, &model, &Priors::uniform()).unwrap();
        let b = penalized_objective(&data, &moved, &Priors::uniform()).unwrap();
        worst_affine = worst_affine.max((a - b).abs() / a.abs().max(1.0));

        let once = renormalize_dps(&model, &data).unwrap();
        let twice = renormalize_dps(&once, &data).unwrap();
        let pairs = once
            .stages
            .iter()
            .zip(&twice.stages)
            .flat_map(|(x, y)| [(x.alpha, y.alpha), (x.beta, y.beta)])
            .chain(
                once.trajectories
                    .iter()
                    .zip(&twice.trajectories)
                    .flat_map(|(x, y)| [(x.b, y.b), (x.c, y.c)]),
            );
        for (x, y) in pairs {
            worst_idempotent = worst_idempotent.max((x - y).abs() / x.abs().max(1.0));
        }
    }

    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut broken = 0;
    for seed in 0..2 {
        let (data, _) = generate_dataset(&common::small_scenario(seed, 0.3)).unwrap();
        let cfg = FitConfig {
            max_outer_iters: 5,
            kmeans_restarts: 2,
            theta_starts: 2,
            seed,
            ..FitConfig::default()
        };
        let init = initialize(&data, &cfg).unwrap();
        let (base, _) = gem_fit_from(&data, init.clone(), &cfg, &Priors::uniform(), &FitMode::Full).unwrap();
        for perm in perms {
            let (b, _) = gem_fit_from(&data, init.permute_clusters(&perm), &cfg, &Priors::uniform(), &FitMode::Full).unwrap();
            if bits(&base.permute_clusters(&perm)) != bits(&b) {
                broken += 1;
            }
        }
    }
    Outcome::new(
        worst_affine <= 1e-9 && worst_idempotent <= 1e-12 && broken == 0,
        format!(
            "max affine objective change = {worst_affine:.2e}, max renormalize drift = {worst_idempotent:.2e}, non-equivariant relabellings = {broken}/12"
        ),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn dive(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_dive"))
        .args(args)
        .env_remove("DIVE_THREADS")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn reproducible_io() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    let (data, _) = generate_dataset(&ScenarioConfig::preset("medium").unwrap().with_seed(9)).unwrap();
    let data_dir = root.join("roundtrip");
    save_dataset(&data_dir, &data).unwrap();
    let back = load_dataset_dir(&data_dir).unwrap();
    let same_data = back.values().iter().zip(data.values().iter()).all(|(a, b)| a.to_bits() == b.to_bits())
        && back.values().dim() == data.values().dim()
        && back.rows() == data.rows()
        && back.adjacency().edges() == data.adjacency().edges();

    let (_, model) = random_instance(9, 4, 4, 3, 6);
    let (small, _) = random_instance(9, 4, 4, 3, 6);
    let path = root.join("model.json");
    let cp = ModelCheckpoint::new(model, &small, "full");
    save_model(&path, &cp).unwrap();
    let loaded = load_model(&path).unwrap();
    let same_model = bits(&loaded.model) == bits(&cp.model) && loaded.verify(&small).is_ok();

    let cfg = root.join("scenario.toml");
    fs::write(&cfg, "vertices = 100\nsubjects = 20\n[topology]\nkind = \"grid\"\nwidth = 10\n").unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let mut runs = Vec::new();
    let mut cli_ok = true;
    for tag in ["a", "b"] {
        let sim = root.join(format!("sim_{tag}"));
        let fit = root.join(format!("fit_{tag}"));
        cli_ok &= dive(&["simulate", "--config", &s(&cfg), "--seed", "4", "--out", &s(&sim)]);
        cli_ok &= dive(&["fit", "--data", &s(&sim), "--seed", "4", "--threads", "1", "--out", &s(&fit)]);
        runs.push((dir_bytes(&sim), dir_bytes(&fit)));
    }
    let same_cli = cli_ok && runs[0] == runs[1];
    let files = runs[0].0.len() + runs[0].1.len();

    Outcome::new(
        same_data && same_model && same_cli,
        format!("dataset bitwise {same_data}, checkpoint bitwise {same_model}, CLI outputs identical {same_cli} ({files} files)"),
    )
}

fn report(n: usize, name: &str, outcome: &Outcome, failures: &mut usize) {
    let tag = if outcome.passed { "PASS" } else { "FAIL" };
    println!("criterion {n}: {tag} {name}: {}", outcome.detail);
    if !outcome.passed {
        *failures += 1;
    }
}

/// Criteria named on the command line, or all of them. Criterion 7 needs
/// the fits of 3 to 6.
fn selected() -> Vec<usize> {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if picked.is_empty() {
        (1..=9).collect()
    } else {
        picked
    }
}

fn main() {
    let run = selected();
    let wants = |n: usize| run.contains(&n);
    let mut failures = 0;
    let mut ledger = Ledger::default();

    if wants(1) {
        report(1, "E-step", &posteriors_match_direct_evaluation(), &mut failures);
    }
    if wants(2) {
        report(2, "noise update", &sigma_matches_brute_force(), &mut failures);
    }
    if wants(3) {
        report(3, "fast path", &fast_path_matches_slow(&mut ledger), &mut failures);
    }
    if wants(4) || wants(5) {
        let easy = run_preset("easy", &mut ledger);
        if wants(4) {
            report(4, "easy recovery", &easy_recovery(&easy), &mut failures);
        }
        if wants(5) {
            let medium = run_preset("medium", &mut ledger);
            let hard = run_preset("hard", &mut ledger);
            report(
                5,
                "difficulty ordering",
                &difficulty_ordering(&[("easy", &easy), ("medium", &medium), ("hard", &hard)]),
                &mut failures,
            );
        }
    }
    if wants(6) {
        report(6, "staging comparison", &staging_beats_baselines(&mut ledger), &mut failures);
    }
    if wants(7) {
        let monotone = Outcome::new(
            ledger.violations == 0 && ledger.fits > 0,
            format!("{} violations over {} fits", ledger.violations, ledger.fits),
        );
        report(7, "monotonicity", &monotone, &mut failures);
    }
    if wants(8) {
        report(8, "invariances", &invariances(), &mut failures);
    }
    if wants(9) {
        report(9, "reproducible I/O", &reproducible_io(), &mut failures);
    }

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all selected criteria passed");
}
