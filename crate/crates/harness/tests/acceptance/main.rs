//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails or overruns its time budget.
//!
//! `cargo test -p loracomp-harness --test acceptance [-- N ...]` runs all
//! criteria or only the numbered ones.

mod oracle;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use loracomp::composer::{
    compose_conditional_with, compose_step, compose_unconditional, guided_score, softmin_gate,
    topk_mask,
};
use loracomp::models::{ConditionEmbeddings, Modulation};
use loracomp::schedule::build_vp_schedule;
use loracomp::tensor::cosine_similarity;
use loracomp::{
    ConditionId, GaussianComponent, GaussianScoreModel, GridShape, GuidanceConfig, LatentGrid,
    LowRankAdapter, NoiseSchedule, ScoreModel, TemperatureRule, WeightMatrix,
};
use loracomp_harness::artifacts::{sha256_hex, MANIFEST_NAME};
use loracomp_harness::experiments::{MetricRow, RunResults};
use loracomp_harness::{run_experiment, ExperimentConfig, ExperimentKind, RunOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn criteria() -> Vec<Criterion> {
    let secs = Duration::from_secs;
    vec![
        Criterion { id: 1, name: "gating algebra", budget: secs(5), run: gating_algebra },
        Criterion { id: 2, name: "pipeline oracle equivalence", budget: secs(10), run: pipeline_oracle },
        Criterion { id: 3, name: "re-centering limits", budget: secs(5), run: recentering_limits },
        Criterion { id: 4, name: "orthogonal-input invariance", budget: secs(10), run: orthogonal_inputs },
        Criterion { id: 5, name: "in- vs out-of-distribution similarity", budget: secs(30), run: observation_two },
        Criterion { id: 6, name: "unconditional similarity below 1", budget: secs(10), run: observation_one },
        Criterion { id: 7, name: "sampler moment recovery", budget: secs(120), run: moment_recovery },
        Criterion { id: 8, name: "composition benefit", budget: secs(180), run: composition_benefit },
        Criterion { id: 9, name: "dynamic selection vs merge", budget: secs(180), run: dynamic_selection },
        Criterion { id: 10, name: "determinism and artifact integrity", budget: secs(60), run: determinism },
        Criterion { id: 11, name: "ablation sweep grid", budget: secs(300), run: ablation_sweep },
    ]
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let wanted: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria() {
        if !wanted.is_empty() && !wanted.contains(&c.id) {
            continue;
        }
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let (status, detail) = match result {
            Ok(d) if elapsed <= c.budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over time budget")),
            Err(e) => ("FAIL", e),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "[{status}] criterion {:>2} {:<38} {:>7.2}s / {:>3}s  {detail}",
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run_config(name: &str, kind: ExperimentKind) -> Result<RunResults, String> {
    let path = config_path(name);
    let config = ok(ExperimentConfig::from_path(&path))?;
    let dir = ok(tempfile::tempdir())?;
    let opts = RunOptions {
        out_dir: dir.path().to_path_buf(),
        seed: None,
        jobs: 0,
        record_timings: false,
    };
    let report = ok(run_experiment(kind, &config, &path.display().to_string(), &opts))?;
    Ok(report.results)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn random_grid(rng: &mut ChaCha8Rng, shape: GridShape, scale: f64) -> LatentGrid<f64> {
    LatentGrid::from_vec(shape, normal_vec(rng, shape.len(), scale)).unwrap()
}

// ---------------------------------------------------------------- 1

fn gating_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut sum_err, mut shift_err, mut cold_err, mut hot_err) = (0f64, 0f64, 0f64, 0f64);
    let mut one_hot_columns = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..=8);
        let p = rng.random_range(1..=16);
        let values: Vec<f64> = (0..n * p).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let omega = ok(WeightMatrix::new(n, p, values.clone()))?;
        let tau = 10f64.powf(rng.random_range(-3.0..1.0));
        let gated = ok(softmin_gate(&omega, tau))?;

        for j in 0..p {
            let s: f64 = gated.column(j).iter().sum();
            sum_err = sum_err.max((s - 1.0).abs());
        }

        let shift = rng.random_range(-5.0..5.0);
        let shifted = ok(WeightMatrix::new(n, p, values.iter().map(|v| v + shift).collect()))?;
        let gated_shifted = ok(softmin_gate(&shifted, tau))?;
        for (a, b) in gated.as_slice().iter().zip(gated_shifted.as_slice()) {
            shift_err = shift_err.max((a - b).abs());
        }

        let full = ok(topk_mask(&omega, n))?;
        ensure!(full == omega, "top-k with k = N changed the matrix");
        ensure!(
            ok(softmin_gate(&full, tau))? == gated,
            "top-k with k = N changed the gated weights"
        );

        let cold = ok(softmin_gate(&omega, 1e-6))?;
        let hot = ok(softmin_gate(&omega, 1e6))?;
        for j in 0..p {
            let col = omega.column(j);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap());
            // One-hot comparison needs a clear winner: gap / tau >= 100.
            if n == 1 || col[order[1]] - col[order[0]] >= 1e-4 {
                one_hot_columns += 1;
                for i in 0..n {
                    let want = if i == order[0] { 1.0 } else { 0.0 };
                    cold_err = cold_err.max((cold.get(i, j) - want).abs());
                }
            }
            for i in 0..n {
                hot_err = hot_err.max((hot.get(i, j) - 1.0 / n as f64).abs());
            }
        }
    }
    ensure!(sum_err < 1e-9, "column sum off by {sum_err:e}");
    ensure!(shift_err < 1e-12, "shift changed weights by {shift_err:e}");
    ensure!(cold_err < 1e-6, "tau -> 0 deviates from one-hot by {cold_err:e}");
    ensure!(hot_err < 1e-6, "tau -> inf deviates from uniform by {hot_err:e}");
    Ok(format!(
        "500 matrices: |sum-1| {sum_err:.1e}, shift {shift_err:.1e}, one-hot {cold_err:.1e} ({one_hot_columns} cols), uniform {hot_err:.1e}"
    ))
}

// ---------------------------------------------------------------- 2

struct AnalyticPair {
    base: Arc<dyn ScoreModel<f64>>,
    adapters: Vec<LowRankAdapter<f64>>,
    shape: GridShape,
}

fn analytic_pair(seed: u64, steps: usize) -> AnalyticPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = GridShape::new(4, 4, 2).unwrap();
    let dim = shape.len();
    let schedule: NoiseSchedule<f64> = build_vp_schedule(steps, 1e-3, 0.2).unwrap();
    let base: Arc<dyn ScoreModel<f64>> = Arc::new(
        GaussianScoreModel::new(
            shape,
            schedule,
            vec![
                GaussianComponent {
                    condition: ConditionId(0),
                    mean: normal_vec(&mut rng, dim, 1.0),
                    variance: 0.7,
                    weight: 0.4,
                },
                GaussianComponent {
                    condition: ConditionId(1),
                    mean: normal_vec(&mut rng, dim, 1.0),
                    variance: 1.3,
                    weight: 0.6,
                },
            ],
        )
        .unwrap(),
    );
    let mut emb = ConditionEmbeddings::new();
    emb.insert(ConditionId(0), normal_vec(&mut rng, dim, 1.0));
    emb.insert(ConditionId(1), normal_vec(&mut rng, dim, 1.0));
    let emb = Arc::new(emb);
    let modulations = [
        Modulation::Unit,
        Modulation::Retarget {
            base_variance: 1.0,
            target_variance: 0.2,
        },
    ];
    let adapters = modulations
        .into_iter()
        .map(|m| {
            let down = (0..2).map(|_| normal_vec(&mut rng, dim, 0.3)).collect();
            let up = (0..2).map(|_| normal_vec(&mut rng, dim, 0.3)).collect();
            LowRankAdapter::new(base.clone(), down, up)
                .unwrap()
                .with_trained_conditions([ConditionId(0)])
                .with_modulation(m)
                .unwrap()
                .with_embeddings(emb.clone())
                .unwrap()
        })
        .collect();
    AnalyticPair {
        base,
        adapters,
        shape,
    }
}

fn pipeline_oracle() -> Outcome {
    let steps = 50;
    let pair = analytic_pair(21, steps);
    let refs: Vec<&dyn ScoreModel<f64>> =
        pair.adapters.iter().map(|a| a as &dyn ScoreModel<f64>).collect();
    let cfg = GuidanceConfig {
        guidance_scale: 7.0,
        recenter_lambda: 0.5,
        patch_size: 2,
        ..GuidanceConfig::default()
    };
    let ocfg = oracle::OracleConfig {
        scale: 7.0,
        lambda: 0.5,
        patch: 2,
        total_steps: steps,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0f64;
    for k in 0..10 {
        let t = if k == 0 { 25 } else { rng.random_range(1..=steps) };
        let z = random_grid(&mut rng, pair.shape, 1.5);
        let got = ok(compose_step(pair.base.as_ref(), &refs, &z, t, ConditionId(0), &cfg))?;
        let want = oracle::gated_step(pair.base.as_ref(), &refs, &z, t, ConditionId(0), &ocfg);
        for (g, w) in got.eps.as_slice().iter().zip(&want) {
            worst = worst.max((g - w).abs() / w.abs().max(1.0));
        }
    }
    ensure!(worst <= 1e-10, "max deviation from the scripted oracle {worst:e}");
    Ok(format!("10 points, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

/// Delegates to `inner` but shifts every unconditional prediction.
struct ShiftedUncond<'a> {
    inner: &'a dyn ScoreModel<f64>,
    offset: f64,
}

impl ScoreModel<f64> for ShiftedUncond<'_> {
    fn shape(&self) -> GridShape {
        self.inner.shape()
    }
    fn schedule(&self) -> &NoiseSchedule<f64> {
        self.inner.schedule()
    }
    fn predict_noise(
        &self,
        z: &LatentGrid<f64>,
        t: usize,
        condition: Option<ConditionId>,
    ) -> loracomp::Result<LatentGrid<f64>> {
        let eps = self.inner.predict_noise(z, t, condition)?;
        Ok(match condition {
            Some(_) => eps,
            None => eps.map(|v| v + self.offset),
        })
    }
}

fn recentering_limits() -> Outcome {
    let steps = 40;
    let pair = analytic_pair(31, steps);
    let refs: Vec<&dyn ScoreModel<f64>> =
        pair.adapters.iter().map(|a| a as &dyn ScoreModel<f64>).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let layout_cfg = GuidanceConfig::<f64>::default();
    let layout = layout_cfg.layout(pair.shape.height, pair.shape.width);
    for _ in 0..20 {
        let t = rng.random_range(1..=steps);
        let z = random_grid(&mut rng, pair.shape, 1.5);

        // lambda = 0: the unconditional aggregate is the base prediction.
        let base_u = random_grid(&mut rng, pair.shape, 1.0);
        let a_u: Vec<_> = (0..2).map(|_| random_grid(&mut rng, pair.shape, 1.0)).collect();
        let w: Vec<f64> = (0..2 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gated = ok(softmin_gate(&ok(WeightMatrix::new(2, 4, w))?, 0.3))?;
        let u = ok(compose_unconditional(&base_u, &[&a_u[0], &a_u[1]], &gated, 0.0, 2))?;
        ensure!(u == base_u, "lambda = 0 did not return the base unconditional");

        // lambda = 1: perturbing the base unconditional leaves eps-hat unchanged.
        let cfg = GuidanceConfig {
            guidance_scale: 7.0,
            recenter_lambda: 1.0,
            ..GuidanceConfig::default()
        };
        let shifted = ShiftedUncond {
            inner: pair.base.as_ref(),
            offset: rng.random_range(-3.0..3.0),
        };
        let a = ok(compose_step(pair.base.as_ref(), &refs, &z, t, ConditionId(0), &cfg))?;
        let b = ok(compose_step(&shifted, &refs, &z, t, ConditionId(0), &cfg))?;
        ensure!(a.eps == b.eps, "lambda = 1 output depends on the base unconditional");

        // s = 1: eps-hat is the conditional aggregate.
        let cfg = GuidanceConfig {
            guidance_scale: 1.0,
            recenter_lambda: 0.5,
            ..GuidanceConfig::default()
        };
        let out = ok(compose_step(pair.base.as_ref(), &refs, &z, t, ConditionId(0), &cfg))?;
        let conds: Vec<_> = refs
            .iter()
            .map(|m| m.predict_noise(&z, t, Some(ConditionId(0))).unwrap())
            .collect();
        let cond_agg = ok(compose_conditional_with(
            &[&conds[0], &conds[1]],
            out.omega_gated.as_ref().unwrap(),
            layout,
        ))?;
        ensure!(out.eps == cond_agg, "s = 1 output differs from the conditional aggregate");
        ensure!(
            ok(guided_score(&conds[0], &conds[1], 1.0))? == conds[0],
            "guided_score at s = 1 is not the conditional input"
        );
    }
    Ok("20 points, all three limits bit-exact".into())
}

// ---------------------------------------------------------------- 4

fn orthonormal_basis(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut u = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
                u.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(u.into_iter().map(|x| x / n).collect());
    }
    basis
}

fn orthogonal_inputs() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let shape = GridShape::new(8, 8, 2).unwrap();
    let dim = shape.len();
    let steps = 100;
    let base: Arc<dyn ScoreModel<f64>> = Arc::new(
        GaussianScoreModel::new(
            shape,
            build_vp_schedule(steps, 1e-4, 0.02).unwrap(),
            vec![
                GaussianComponent {
                    condition: ConditionId(0),
                    mean: normal_vec(&mut rng, dim, 1.0),
                    variance: 0.8,
                    weight: 0.5,
                },
                GaussianComponent {
                    condition: ConditionId(1),
                    mean: normal_vec(&mut rng, dim, 1.0),
                    variance: 1.2,
                    weight: 0.5,
                },
            ],
        )
        .unwrap(),
    );
    let (mut worst_norm, mut worst_cos) = (0f64, 0f64);
    for k in 0..100 {
        let rank = [1, 2, 4][k % 3];
        let down: Vec<Vec<f64>> = (0..rank).map(|_| normal_vec(&mut rng, dim, 1.0)).collect();
        let up: Vec<Vec<f64>> = (0..rank).map(|_| normal_vec(&mut rng, dim, 1.0)).collect();
        let strength = rng.random_range(0.1..=1.0);
        let adapter = ok(LowRankAdapter::new(base.clone(), down.clone(), up))?
            .with_strength(strength)
            .map_err(|e| e.to_string())?
            .with_trained_conditions([ConditionId(0)]);

        let q = orthonormal_basis(&down);
        let mut z = normal_vec(&mut rng, dim, 2.0);
        for _ in 0..2 {
            for b in &q {
                let p: f64 = z.iter().zip(b).map(|(x, y)| x * y).sum();
                z.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let z = ok(LatentGrid::from_vec(shape, z))?;
        let t = rng.random_range(1..=steps);
        for c in [Some(ConditionId(0)), None] {
            let a = ok(adapter.predict_noise(&z, t, c))?;
            let b = ok(base.predict_noise(&z, t, c))?;
            let diff = a
                .as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            worst_norm = worst_norm.max(diff);
            let cos = ok(cosine_similarity(a.as_slice(), b.as_slice()))?;
            worst_cos = worst_cos.max((cos - 1.0).abs());
        }
    }
    ensure!(worst_norm < 1e-10, "adapter moved an orthogonal input by {worst_norm:e}");
    ensure!(worst_cos <= 1e-12, "cosine to base off by {worst_cos:e}");
    Ok(format!(
        "100 adapters (r = 1, 2, 4; dim {dim}): max |delta| {worst_norm:.1e}, max |cos - 1| {worst_cos:.1e}"
    ))
}

// ---------------------------------------------------------------- 5, 6

fn observation_two() -> Outcome {
    let results = run_config("standard.toml", ExperimentKind::SimilarityProbe)?;
    let mut per_adapter: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for row in &results.similarity {
        if row.condition.is_none() {
            continue;
        }
        let entry = per_adapter.entry(&row.adapter).or_default();
        if row.in_distribution {
            entry.0.push(row.mean_similarity);
        } else {
            entry.1.push(row.mean_similarity);
        }
    }
    ensure!(per_adapter.len() == 3, "expected 3 adapters, got {}", per_adapter.len());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut parts = Vec::new();
    for (name, (ind, ood)) in &per_adapter {
        ensure!(!ind.is_empty() && !ood.is_empty(), "adapter {name} lacks a condition group");
        let (i, o) = (mean(ind), mean(ood));
        ensure!(o - i >= 0.05, "adapter {name}: in {i:.4} vs out {o:.4}, margin below 0.05");
        parts.push(format!("{name} {i:.3}<{o:.3}"));
    }
    Ok(parts.join(", "))
}

fn observation_one() -> Outcome {
    let path = config_path("standard.toml");
    let config = ok(ExperimentConfig::from_path(&path))?;
    let results = run_config("standard.toml", ExperimentKind::SimilarityProbe)?;
    let mut parts = Vec::new();
    for row in results.similarity.iter().filter(|r| r.condition.is_none()) {
        let spec = config
            .adapters
            .iter()
            .find(|a| a.name == row.adapter)
            .ok_or_else(|| format!("adapter {} not in config", row.adapter))?;
        if spec.strength == 0.0 {
            continue;
        }
        ensure!(
            row.mean_similarity < 0.999,
            "adapter {} unconditional similarity {:.5}",
            row.adapter,
            row.mean_similarity
        );
        parts.push(format!("{} {:.4}", row.adapter, row.mean_similarity));
    }
    ensure!(parts.len() == 3, "expected 3 nonzero-strength adapters");
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------- 7, 8, 9

fn metric<'a>(rows: &'a [MetricRow], method: &str, seed: u64) -> Result<&'a MetricRow, String> {
    rows.iter()
        .find(|r| r.method == method && r.seed == seed)
        .ok_or_else(|| format!("no {method} row for seed {seed}"))
}

fn moment_recovery() -> Outcome {
    let results = run_config("single-gaussian.toml", ExperimentKind::ComposeRun)?;
    ensure!(results.metrics.len() == 1, "expected one metrics row");
    let m = &results.metrics[0];
    ensure!(m.mean_error < 0.02, "mean error {:.4}", m.mean_error);
    ensure!(m.cov_error < 0.05, "covariance error {:.4}", m.cov_error);
    Ok(format!(
        "10000 trajectories: mean {:.4}, covariance {:.4}",
        m.mean_error, m.cov_error
    ))
}

fn composition_benefit() -> Outcome {
    let results = run_config("two-block.toml", ExperimentKind::ComposeRun)?;
    let mut parts = Vec::new();
    for seed in [1, 2, 3] {
        let gated = metric(&results.metrics, "gated", seed)?.mean_error;
        let naive = metric(&results.metrics, "naive", seed)?.mean_error;
        ensure!(gated <= naive, "seed {seed}: gated {gated:.4} > naive {naive:.4}");
        parts.push(format!("seed {seed}: {gated:.4} <= {naive:.4}"));
    }
    Ok(parts.join(", "))
}

fn dynamic_selection() -> Outcome {
    let results = run_config("dynamic.toml", ExperimentKind::DynamicSelect)?;
    let mut parts = Vec::new();
    for seed in [1, 2, 3] {
        let topk = metric(&results.metrics, "top-k", seed)?.mean_error;
        let merge = metric(&results.metrics, "merge", seed)?.mean_error;
        let fixed = metric(&results.metrics, "static", seed)?.mean_error;
        ensure!(
            merge >= 2.0 * topk,
            "seed {seed}: merge {merge:.4} is not 2x top-k {topk:.4}"
        );
        let rel = (topk - fixed).abs() / fixed;
        ensure!(
            rel <= 0.2,
            "seed {seed}: top-k {topk:.4} is {:.0}% from static {fixed:.4}",
            100.0 * rel
        );
        parts.push(format!(
            "seed {seed}: merge/top-k {:.1}x, top-k vs static {:+.1}%",
            merge / topk,
            100.0 * (topk - fixed) / fixed
        ));
    }
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------- 10

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) -> Result<(), String> {
    for entry in ok(std::fs::read_dir(dir))? {
        let path = ok(entry)?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            out.insert(rel, ok(std::fs::read(&path))?);
        }
    }
    Ok(())
}

fn cli_run(out: &Path, jobs: usize) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let status = ok(Command::new(env!("CARGO_BIN_EXE_loracomp"))
        .args(["compose-run", "--config"])
        .arg(config_path("standard.toml"))
        .args(["--seed", "17", "--jobs", &jobs.to_string(), "--out"])
        .arg(out)
        .env_remove("LORACOMP_OUT")
        .output())?;
    ensure!(
        status.status.success(),
        "CLI failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    let mut files = BTreeMap::new();
    collect_files(out, out, &mut files)?;
    Ok(files)
}

fn determinism() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let a = cli_run(&dir.path().join("a"), 1)?;
    let b = cli_run(&dir.path().join("b"), 1)?;
    let c = cli_run(&dir.path().join("c"), 8)?;
    ensure!(a == b, "repeated run differs");
    ensure!(a == c, "--jobs 1 and --jobs 8 differ");

    let manifest: serde_json::Value =
        ok(serde_json::from_slice(a.get(MANIFEST_NAME).ok_or("no manifest")?))?;
    let listed = manifest["files"].as_array().ok_or("manifest has no file list")?;
    ensure!(listed.len() + 1 == a.len(), "inventory lists {} of {} files", listed.len(), a.len() - 1);
    for f in listed {
        let path = f["path"].as_str().unwrap_or_default();
        let bytes = a.get(path).ok_or_else(|| format!("listed file {path} missing"))?;
        ensure!(
            f["sha256"].as_str() == Some(sha256_hex(bytes).as_str()),
            "hash mismatch for {path}"
        );
    }
    let pgm = a.keys().filter(|k| k.ends_with(".pgm")).count();
    let traces = a.keys().filter(|k| k.starts_with("traces/")).count();
    ensure!(pgm > 0 && traces > 0, "run produced no graymaps or traces");
    Ok(format!(
        "{} files ({pgm} graymaps, {traces} traces) identical across 3 runs; hashes verified",
        a.len()
    ))
}

// ---------------------------------------------------------------- 11

fn ablation_sweep() -> Outcome {
    let path = config_path("sweep.toml");
    let config = ok(ExperimentConfig::from_path(&path))?;
    let grid = config.sweep.clone().ok_or("sweep.toml has no [sweep] section")?;
    ensure!(grid.patch_sizes == [2, 4, 8, 16], "patch sizes {:?}", grid.patch_sizes);
    ensure!(grid.global_mode.len() == 2 && grid.lambdas.len() == 2, "grid axes incomplete");
    ensure!(
        grid.temperatures.iter().any(|t| t.to_rule() == TemperatureRule::Adaptive)
            && grid.temperatures.iter().any(|t| t.to_rule() != TemperatureRule::Adaptive),
        "temperature axis lacks the adaptive/fixed pair"
    );

    let dir = ok(tempfile::tempdir())?;
    let opts = RunOptions {
        out_dir: dir.path().to_path_buf(),
        seed: None,
        jobs: 0,
        record_timings: false,
    };
    let report = ok(run_experiment(
        ExperimentKind::Sweep,
        &config,
        &path.display().to_string(),
        &opts,
    ))?;
    let rows = &report.results.sweep;
    let cells = grid.patch_sizes.len() * grid.global_mode.len() * grid.temperatures.len() * grid.lambdas.len();
    ensure!(rows.len() == cells, "{} rows for {cells} cells", rows.len());
    let mut seen = std::collections::BTreeSet::new();
    for r in rows {
        ensure!(
            r.mean_error.is_finite() && r.cov_error.is_finite(),
            "non-finite metrics in cell d={} global={} tau={} lambda={}",
            r.patch_size,
            r.global_mode,
            r.temperature,
            r.lambda
        );
        ensure!(
            seen.insert((r.patch_size, r.global_mode, r.temperature.clone(), r.lambda.to_bits())),
            "duplicate cell"
        );
    }
    let csv = ok(std::fs::read_to_string(dir.path().join("sweep.csv")))?;
    let lines: Vec<&str> = csv.lines().collect();
    ensure!(lines.len() == cells + 1, "sweep.csv has {} lines", lines.len());
    ensure!(
        lines.iter().all(|l| l.split(',').count() == 7),
        "sweep.csv has ragged rows"
    );
    ensure!(csv.ends_with('\n'), "sweep.csv is not newline-terminated");
    let best = rows
        .iter()
        .min_by(|a, b| a.mean_error.total_cmp(&b.mean_error))
        .unwrap();
    Ok(format!(
        "{cells} cells, one row each; best d={} global={} tau={} lambda={} ({:.4})",
        best.patch_size, best.global_mode, best.temperature, best.lambda, best.mean_error
    ))
}
