//! The four experiment kinds behind the CLI subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use loracomp::sampler::{sample_batch, standard_normal_grid, trajectory_rng};
use loracomp::{
    CompositionMethod, ConditionId, Ensemble, GuidanceConfig, LatentGrid, MergedAdapters,
    SamplerConfig, ScoreModel,
};
use rand::Rng;
use serde::Serialize;

use crate::artifacts::{emit_set, Emitter, RunManifest, TrajectorySet};
use crate::config::{ExperimentConfig, ExperimentKind, MethodSpec, Testbed};
use crate::error::HarnessError;
use crate::metrics::moment_metrics;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Replaces the configured seed list (and the probe seed).
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub record_timings: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub experiment: String,
    pub method: String,
    pub seed: u64,
    pub mean_error: f64,
    pub cov_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityRow {
    pub adapter: String,
    /// `None` for the unconditional prediction.
    pub condition: Option<u32>,
    pub in_distribution: bool,
    pub mean_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub patch_size: usize,
    pub global_mode: bool,
    pub temperature: String,
    pub lambda: f64,
    pub seeds: usize,
    /// Averages over seeds.
    pub mean_error: f64,
    pub cov_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct RunResults {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<MetricRow>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub similarity: Vec<SimilarityRow>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepRow>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub manifest: RunManifest,
    pub results: RunResults,
}

struct Timer {
    enabled: bool,
    phases: BTreeMap<String, f64>,
}

impl Timer {
    fn time<R>(&mut self, phase: String, f: impl FnOnce() -> R) -> R {
        let start = Instant::now();
        let out = f();
        if self.enabled {
            *self.phases.entry(phase).or_insert(0.0) += start.elapsed().as_secs_f64();
        }
        out
    }
}

/// Runs one experiment and writes its artifacts into `opts.out_dir`.
pub fn run_experiment(
    kind: ExperimentKind,
    config: &ExperimentConfig,
    origin: &str,
    opts: &RunOptions,
) -> Result<RunReport, HarnessError> {
    if let Some(declared) = config.experiment.kind {
        if declared != kind {
            return Err(HarnessError::Config {
                path: origin.into(),
                message: format!(
                    "config declares a {} experiment, not {}",
                    declared.as_str(),
                    kind.as_str()
                ),
            });
        }
    }
    let mut config = config.clone();
    if let Some(seed) = opts.seed {
        config.sampler.seeds = vec![seed];
        if let Some(p) = config.probe.as_mut() {
            p.seed = seed;
        }
    }
    match kind {
        ExperimentKind::SimilarityProbe if config.probe.is_none() => {
            return Err(HarnessError::Config {
                path: origin.into(),
                message: "similarity-probe needs a [probe] section".into(),
            })
        }
        ExperimentKind::DynamicSelect if config.dynamic.is_none() => {
            return Err(HarnessError::Config {
                path: origin.into(),
                message: "dynamic-select needs a [dynamic] section".into(),
            })
        }
        _ => {}
    }
    let testbed = config.build(origin)?;

    let mut timer = Timer {
        enabled: opts.record_timings,
        phases: BTreeMap::new(),
    };
    let mut emitter = Emitter::create(&opts.out_dir)?;
    let results = match kind {
        ExperimentKind::ComposeRun => compose_run(&config, &testbed, opts, &mut emitter, &mut timer)?,
        ExperimentKind::SimilarityProbe => similarity(&config, &testbed, &mut emitter, &mut timer)?,
        ExperimentKind::Sweep => sweep(&config, &testbed, opts, &mut emitter, &mut timer)?,
        ExperimentKind::DynamicSelect => dynamic(&config, &testbed, opts, &mut emitter, &mut timer)?,
    };

    let mut manifest = RunManifest::new(kind.as_str(), &config.experiment.name);
    manifest.config = serde_json::to_value(&config).expect("config serializes to JSON");
    manifest.results = serde_json::to_value(&results).expect("results serialize to JSON");
    manifest.timings = opts.record_timings.then_some(timer.phases);
    let manifest = emitter.finish(manifest)?;
    Ok(RunReport { manifest, results })
}

/// Samples one method for one seed: all final latents plus the traced prefix.
#[allow(clippy::too_many_arguments)]
fn run_method(
    config: &ExperimentConfig,
    testbed: &Testbed,
    base: &dyn ScoreModel<f64>,
    adapters: &[&dyn ScoreModel<f64>],
    method: CompositionMethod,
    guidance: &GuidanceConfig<f64>,
    seed: u64,
    jobs: usize,
    trace: bool,
) -> Result<(Vec<LatentGrid<f64>>, Vec<loracomp::Trajectory<f64>>), HarnessError> {
    let ensemble = Ensemble {
        base,
        adapters,
        condition: testbed.condition,
        method,
        guidance,
    };
    let mut scfg = SamplerConfig::new(testbed.schedule.clone(), seed);
    scfg.mode = config.sampler.mode();
    let finals = sample_batch(&ensemble, &scfg, config.sampler.trajectories, jobs)?
        .into_iter()
        .map(|t| t.final_latent)
        .collect();
    let traced = if trace && method == CompositionMethod::Gated {
        scfg.record_weights = true;
        let n = config.sampler.trace_trajectories.min(config.sampler.trajectories);
        sample_batch(&ensemble, &scfg, n, jobs)?
    } else {
        Vec::new()
    };
    Ok((finals, traced))
}

fn composition_method(m: MethodSpec) -> CompositionMethod {
    match m {
        MethodSpec::BaseOnly => CompositionMethod::BaseOnly,
        MethodSpec::Naive => CompositionMethod::Naive,
        MethodSpec::Gated => CompositionMethod::Gated,
    }
}

fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("experiment,method,seed,mean_error,cov_error\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.experiment, r.method, r.seed, r.mean_error, r.cov_error
        );
    }
    out
}

fn compose_run(
    config: &ExperimentConfig,
    testbed: &Testbed,
    opts: &RunOptions,
    emitter: &mut Emitter,
    timer: &mut Timer,
) -> Result<RunResults, HarnessError> {
    let guidance = config.guidance.to_config();
    let adapters = testbed.adapter_refs();
    let layout = guidance.layout(testbed.shape.height, testbed.shape.width);
    let mut rows = Vec::new();
    for &seed in &config.sampler.seeds {
        for &method in &config.experiment.methods {
            let (finals, traced) = timer.time(format!("sample/{}", method.as_str()), || {
                run_method(
                    config,
                    testbed,
                    testbed.base.as_ref(),
                    &adapters,
                    composition_method(method),
                    &guidance,
                    seed,
                    opts.jobs,
                    true,
                )
            })?;
            let m = moment_metrics(&finals, &testbed.target, testbed.condition)?;
            rows.push(MetricRow {
                experiment: config.experiment.name.clone(),
                method: method.as_str().into(),
                seed,
                mean_error: m.mean_error,
                cov_error: m.cov_error,
            });
            let set = TrajectorySet {
                label: format!("{}_seed{seed}", method.as_str()),
                finals,
                traced,
                layout: Some(layout),
            };
            timer.time("emit".into(), || {
                emit_set(
                    emitter,
                    &set,
                    config.output.weight_map_stride,
                    config.output.write_latents,
                )
            })?;
        }
    }
    emitter.write_text("metrics.csv", &metrics_csv(&rows))?;
    Ok(RunResults {
        metrics: rows,
        ..RunResults::default()
    })
}

/// Latents `z_t` drawn from the base model's diffused marginal at timestep `t`.
pub fn probe_latents(testbed: &Testbed, t: usize, count: usize, seed: u64) -> Result<Vec<LatentGrid<f64>>, HarnessError> {
    let ab = testbed.schedule.alpha_bar(t)?;
    let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
    let comps = testbed.gaussian.components();
    (0..count as u64)
        .map(|k| {
            let mut rng = trajectory_rng(seed, k);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let comp = comps
                .iter()
                .find(|c| {
                    acc += c.weight;
                    u < acc
                })
                .unwrap_or(&comps[comps.len() - 1]);
            let x0: LatentGrid<f64> = standard_normal_grid(testbed.shape, &mut rng);
            let noise: LatentGrid<f64> = standard_normal_grid(testbed.shape, &mut rng);
            let sd = comp.variance.sqrt();
            let data = x0
                .as_slice()
                .iter()
                .zip(&comp.mean)
                .zip(noise.as_slice())
                .map(|((&x, &m), &n)| sa * (m + sd * x) + s1a * n)
                .collect();
            Ok(LatentGrid::from_vec(testbed.shape, data)?)
        })
        .collect()
}

fn similarity(
    config: &ExperimentConfig,
    testbed: &Testbed,
    emitter: &mut Emitter,
    timer: &mut Timer,
) -> Result<RunResults, HarnessError> {
    let probe = config.probe.as_ref().expect("checked by run_experiment");
    let conditions: Vec<ConditionId> = if probe.conditions.is_empty() {
        testbed.gaussian.components().iter().map(|c| c.condition).collect()
    } else {
        probe.conditions.iter().map(|&c| ConditionId(c)).collect()
    };
    let latents = probe_latents(testbed, probe.timestep, probe.samples, probe.seed)?;
    let adapters = testbed.adapter_refs();
    let table = timer.time("probe".into(), || {
        loracomp::models::similarity_probe(
            testbed.base.as_ref(),
            &adapters,
            &conditions,
            &latents,
            probe.timestep,
        )
    })?;

    let mut rows = Vec::new();
    for (i, named) in testbed.adapters.iter().enumerate() {
        let trained = named.adapter.trained_conditions();
        for (j, &c) in conditions.iter().enumerate() {
            rows.push(SimilarityRow {
                adapter: named.name.clone(),
                condition: Some(c.0),
                in_distribution: trained.contains(&c),
                mean_similarity: table.conditional[i][j],
            });
        }
        rows.push(SimilarityRow {
            adapter: named.name.clone(),
            condition: None,
            in_distribution: false,
            mean_similarity: table.unconditional[i],
        });
    }

    let mut csv = String::from("adapter,condition,in_distribution,mean_similarity\n");
    for r in &rows {
        let cond = r.condition.map_or("uncond".to_string(), |c| c.to_string());
        let _ = writeln!(
            csv,
            "{},{cond},{},{}",
            r.adapter, r.in_distribution, r.mean_similarity
        );
    }
    emitter.write_text("similarity.csv", &csv)?;
    Ok(RunResults {
        similarity: rows,
        ..RunResults::default()
    })
}

fn sweep(
    config: &ExperimentConfig,
    testbed: &Testbed,
    opts: &RunOptions,
    emitter: &mut Emitter,
    timer: &mut Timer,
) -> Result<RunResults, HarnessError> {
    let grid = config.sweep.clone().unwrap_or_default();
    let adapters = testbed.adapter_refs();
    let mut rows = Vec::new();
    for &patch_size in &grid.patch_sizes {
        for &global_mode in &grid.global_mode {
            for &temperature in &grid.temperatures {
                for &lambda in &grid.lambdas {
                    let mut section = config.guidance.clone();
                    section.patch_size = patch_size;
                    section.global_mode = global_mode;
                    section.temperature = temperature;
                    section.lambda = lambda;
                    let guidance = section.to_config();
                    let (mut mean_error, mut cov_error) = (0.0, 0.0);
                    for &seed in &config.sampler.seeds {
                        let (finals, _) = timer.time("sample/gated".into(), || {
                            run_method(
                                config,
                                testbed,
                                testbed.base.as_ref(),
                                &adapters,
                                CompositionMethod::Gated,
                                &guidance,
                                seed,
                                opts.jobs,
                                false,
                            )
                        })?;
                        let m = moment_metrics(&finals, &testbed.target, testbed.condition)?;
                        mean_error += m.mean_error;
                        cov_error += m.cov_error;
                    }
                    let n = config.sampler.seeds.len();
                    rows.push(SweepRow {
                        patch_size,
                        global_mode,
                        temperature: temperature.label(),
                        lambda,
                        seeds: n,
                        mean_error: mean_error / n as f64,
                        cov_error: cov_error / n as f64,
                    });
                }
            }
        }
    }
    let mut csv =
        String::from("patch_size,global_mode,temperature,lambda,seeds,mean_error,cov_error\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.patch_size, r.global_mode, r.temperature, r.lambda, r.seeds, r.mean_error, r.cov_error
        );
    }
    emitter.write_text("sweep.csv", &csv)?;
    Ok(RunResults {
        sweep: rows,
        ..RunResults::default()
    })
}

fn dynamic(
    config: &ExperimentConfig,
    testbed: &Testbed,
    opts: &RunOptions,
    emitter: &mut Emitter,
    timer: &mut Timer,
) -> Result<RunResults, HarnessError> {
    let dynamic = config.dynamic.as_ref().expect("checked by run_experiment");
    let all = testbed.adapter_refs();
    let static_refs: Vec<&dyn ScoreModel<f64>> = dynamic
        .static_adapters
        .iter()
        .map(|name| {
            let i = testbed.adapter_index(name).expect("validated by build");
            &testbed.adapters[i].adapter as &dyn ScoreModel<f64>
        })
        .collect();
    let merged = MergedAdapters::new(
        testbed.adapters.iter().map(|a| a.adapter.clone()).collect(),
        Some(dynamic.merge_strength),
    )?;

    let mut topk = config.guidance.clone();
    topk.top_k = Some(dynamic.top_k);
    let topk = topk.to_config();
    let mut plain = config.guidance.clone();
    plain.top_k = None;
    let plain = plain.to_config();

    let layout = plain.layout(testbed.shape.height, testbed.shape.width);
    let mut runs: Vec<(&str, &dyn ScoreModel<f64>, &[&dyn ScoreModel<f64>], CompositionMethod, &GuidanceConfig<f64>)> = vec![
        ("top-k", testbed.base.as_ref(), &all, CompositionMethod::Gated, &topk),
        ("merge", &merged, &[], CompositionMethod::BaseOnly, &plain),
        ("naive-all", testbed.base.as_ref(), &all, CompositionMethod::Naive, &plain),
    ];
    if !static_refs.is_empty() {
        runs.push(("static", testbed.base.as_ref(), &static_refs, CompositionMethod::Gated, &plain));
    }

    let mut rows = Vec::new();
    for &seed in &config.sampler.seeds {
        for &(label, base, adapters, method, guidance) in &runs {
            let (finals, traced) = timer.time(format!("sample/{label}"), || {
                run_method(config, testbed, base, adapters, method, guidance, seed, opts.jobs, true)
            })?;
            let m = moment_metrics(&finals, &testbed.target, testbed.condition)?;
            rows.push(MetricRow {
                experiment: config.experiment.name.clone(),
                method: label.into(),
                seed,
                mean_error: m.mean_error,
                cov_error: m.cov_error,
            });
            let set = TrajectorySet {
                label: format!("{label}_seed{seed}"),
                finals,
                traced,
                layout: Some(layout),
            };
            timer.time("emit".into(), || {
                emit_set(
                    emitter,
                    &set,
                    config.output.weight_map_stride,
                    config.output.write_latents,
                )
            })?;
        }
    }
    emitter.write_text("metrics.csv", &metrics_csv(&rows))?;
    Ok(RunResults {
        metrics: rows,
        ..RunResults::default()
    })
}
