//! Experiment configuration documents.
//!
//! A config is a TOML document whose sections mirror the testbed: the latent
//! grid, the noise schedule, a Gaussian base model, condition embeddings,
//! low-rank adapters (listed one by one or generated in seeded pools), the
//! guidance settings, the sampler and per-experiment sections.
//!
//! Vectors in latent coordinates are written as lists of terms that are
//! summed, e.g. `[{ kind = "constant", value = 0.5 }, { kind = "region", rows
//! = [0, 4], cols = [0, 8], value = 2.0 }]`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use loracomp::composer::{TemperatureRule, TopKScope};
use loracomp::models::{ConditionEmbeddings, GaussianComponent, Modulation};
use loracomp::schedule::build_vp_schedule;
use loracomp::{
    ConditionId, GaussianScoreModel, GridShape, GuidanceConfig, LowRankAdapter, NoiseSchedule,
    SamplerMode, ScoreModel,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ComposeRun,
    SimilarityProbe,
    #[serde(alias = "ablation-sweep")]
    Sweep,
    DynamicSelect,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::ComposeRun => "compose-run",
            ExperimentKind::SimilarityProbe => "similarity-probe",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::DynamicSelect => "dynamic-select",
        }
    }
}

/// Sampling method named in configs and result tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodSpec {
    BaseOnly,
    Naive,
    Gated,
}

impl MethodSpec {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodSpec::BaseOnly => "base-only",
            MethodSpec::Naive => "naive",
            MethodSpec::Gated => "gated",
        }
    }
}

fn default_name() -> String {
    "experiment".into()
}

fn default_methods() -> Vec<MethodSpec> {
    vec![MethodSpec::Naive, MethodSpec::Gated]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    /// Condition (prompt) every sampling experiment generates for.
    #[serde(default)]
    pub condition: u32,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodSpec>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: default_name(),
            kind: None,
            condition: 0,
            methods: default_methods(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

fn default_beta_start() -> f64 {
    1e-4
}

fn default_beta_end() -> f64 {
    0.02
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
}

/// One summand of a latent-space vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum VectorTerm {
    Constant {
        value: f64,
    },
    /// `value` on rows `[r0, r1)`, columns `[c0, c1)` and, if given, channels `[k0, k1)`.
    Region {
        rows: [usize; 2],
        cols: [usize; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channels: Option<[usize; 2]>,
        value: f64,
    },
    /// Seeded i.i.d. standard normal entries times `scale`.
    Random {
        seed: u64,
        #[serde(default = "one")]
        scale: f64,
    },
    Values {
        values: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}

pub type VectorSpec = Vec<VectorTerm>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub condition: u32,
    #[serde(default)]
    pub mean: VectorSpec,
    #[serde(default = "one")]
    pub variance: f64,
    /// Mixture weight; components without one share the remaining mass equally.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSection {
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSpec {
    pub condition: u32,
    pub vector: VectorSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModulationSpec {
    #[default]
    Unit,
    Retarget {
        base_variance: f64,
        target_variance: f64,
    },
}

impl ModulationSpec {
    fn to_modulation(self) -> Modulation<f64> {
        match self {
            ModulationSpec::Unit => Modulation::Unit,
            ModulationSpec::Retarget {
                base_variance,
                target_variance,
            } => Modulation::Retarget {
                base_variance,
                target_variance,
            },
        }
    }
}

fn default_strength() -> f64 {
    loracomp::models::DEFAULT_STRENGTH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub name: String,
    /// Spanning directions of the responsive subspace; orthonormalized, `U = V`.
    pub directions: Vec<VectorSpec>,
    #[serde(default = "default_strength")]
    pub strength: f64,
    #[serde(default)]
    pub trained_conditions: Vec<u32>,
    #[serde(default)]
    pub ood_decay: f64,
    #[serde(default)]
    pub modulation: ModulationSpec,
}

fn default_pool_prefix() -> String {
    "pool".into()
}

fn default_pool_count() -> usize {
    10
}

fn default_rank() -> usize {
    2
}

/// Seeded adapters with random orthonormal subspaces, named `{prefix}{index}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterPoolSpec {
    #[serde(default = "default_pool_prefix")]
    pub prefix: String,
    #[serde(default = "default_pool_count")]
    pub count: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    pub seed: u64,
    #[serde(default = "default_strength")]
    pub strength: f64,
    #[serde(default)]
    pub trained_conditions: Vec<u32>,
    #[serde(default)]
    pub ood_decay: f64,
    #[serde(default)]
    pub modulation: ModulationSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TemperatureSpec {
    #[default]
    Adaptive,
    Constant {
        value: f64,
    },
}

impl TemperatureSpec {
    pub fn to_rule(self) -> TemperatureRule<f64> {
        match self {
            TemperatureSpec::Adaptive => TemperatureRule::Adaptive,
            TemperatureSpec::Constant { value } => TemperatureRule::Constant(value),
        }
    }

    pub fn label(self) -> String {
        match self {
            TemperatureSpec::Adaptive => "adaptive".into(),
            TemperatureSpec::Constant { value } => format!("constant-{value}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TopKScopeSpec {
    #[default]
    PerPatch,
    WholeImage,
}

fn default_scale() -> f64 {
    7.0
}

fn default_lambda() -> f64 {
    0.5
}

fn default_patch() -> usize {
    2
}

fn default_floor() -> f64 {
    loracomp::composer::DEFAULT_TAU_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default)]
    pub temperature: TemperatureSpec,
    #[serde(default = "default_floor")]
    pub temperature_floor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub top_k_scope: TopKScopeSpec,
    #[serde(default)]
    pub global_mode: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub naive_weights: Option<Vec<f64>>,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            scale: default_scale(),
            lambda: default_lambda(),
            patch_size: default_patch(),
            temperature: TemperatureSpec::Adaptive,
            temperature_floor: default_floor(),
            top_k: None,
            top_k_scope: TopKScopeSpec::PerPatch,
            global_mode: false,
            naive_weights: None,
        }
    }
}

impl GuidanceSection {
    pub fn to_config(&self) -> GuidanceConfig<f64> {
        GuidanceConfig {
            guidance_scale: self.scale,
            recenter_lambda: self.lambda,
            patch_size: self.patch_size,
            temperature: self.temperature.to_rule(),
            temperature_floor: self.temperature_floor,
            top_k: self.top_k,
            top_k_scope: match self.top_k_scope {
                TopKScopeSpec::PerPatch => TopKScope::PerPatch,
                TopKScopeSpec::WholeImage => TopKScope::WholeImage,
            },
            global_mode: self.global_mode,
            naive_weights: self.naive_weights.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerModeSpec {
    #[default]
    Deterministic,
    Ancestral,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_trajectories() -> usize {
    100
}

fn default_trace_trajectories() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default)]
    pub mode: SamplerModeSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    /// Leading trajectories per seed whose weight matrices feed the traces and maps.
    #[serde(default = "default_trace_trajectories")]
    pub trace_trajectories: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            mode: SamplerModeSpec::Deterministic,
            seeds: default_seeds(),
            trajectories: default_trajectories(),
            trace_trajectories: default_trace_trajectories(),
        }
    }
}

impl SamplerSection {
    pub fn mode(&self) -> SamplerMode {
        match self.mode {
            SamplerModeSpec::Deterministic => SamplerMode::Deterministic,
            SamplerModeSpec::Ancestral => SamplerMode::Ancestral,
        }
    }
}

/// Reference distribution for moment metrics; defaults to the base component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub mean: VectorSpec,
    #[serde(default = "one")]
    pub variance: f64,
}

fn default_probe_samples() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    /// Conditions to probe; every base condition when empty.
    #[serde(default)]
    pub conditions: Vec<u32>,
    #[serde(default = "default_probe_samples")]
    pub samples: usize,
    pub timestep: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_patch_sizes() -> Vec<usize> {
    vec![2, 4, 8, 16]
}

fn default_global_modes() -> Vec<bool> {
    vec![false, true]
}

fn default_temperatures() -> Vec<TemperatureSpec> {
    vec![
        TemperatureSpec::Adaptive,
        TemperatureSpec::Constant { value: 1.0 },
    ]
}

fn default_lambdas() -> Vec<f64> {
    vec![0.5, 1.0]
}

/// Grid of guidance settings; every cell runs gated sampling once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_patch_sizes")]
    pub patch_sizes: Vec<usize>,
    #[serde(default = "default_global_modes")]
    pub global_mode: Vec<bool>,
    #[serde(default = "default_temperatures")]
    pub temperatures: Vec<TemperatureSpec>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            patch_sizes: default_patch_sizes(),
            global_mode: default_global_modes(),
            temperatures: default_temperatures(),
            lambdas: default_lambdas(),
        }
    }
}

fn default_top_k() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicSection {
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Strength every delta is merged at.
    #[serde(default = "one")]
    pub merge_strength: f64,
    /// Adapters of the static reference run (gated, no top-k).
    #[serde(default)]
    pub static_adapters: Vec<String>,
}

fn default_map_stride() -> usize {
    10
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Every n-th step (counted from `t = T`) gets weight maps; 0 disables them.
    #[serde(default = "default_map_stride")]
    pub weight_map_stride: usize,
    #[serde(default = "default_true")]
    pub write_latents: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            weight_map_stride: default_map_stride(),
            write_latents: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentSection,
    pub grid: GridSection,
    pub schedule: ScheduleSection,
    pub base: BaseSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub embeddings: Vec<EmbeddingSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adapters: Vec<AdapterSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adapter_pools: Vec<AdapterPoolSpec>,
    #[serde(default)]
    pub guidance: GuidanceSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamic: Option<DynamicSection>,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config {
            path: path.display().to_string(),
            message: format!("cannot read config: {e}"),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses a document; `origin` labels errors.
    pub fn parse(text: &str, origin: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config {
            path: origin.into(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config {
            path: "<serialize>".into(),
            message: e.to_string(),
        })
    }
}

/// A named adapter of a built testbed.
#[derive(Debug, Clone)]
pub struct NamedAdapter {
    pub name: String,
    pub adapter: LowRankAdapter<f64>,
}

/// Models built from a config.
#[derive(Clone)]
pub struct Testbed {
    pub shape: GridShape,
    pub schedule: NoiseSchedule<f64>,
    pub base: Arc<dyn ScoreModel<f64>>,
    pub gaussian: Arc<GaussianScoreModel<f64>>,
    pub adapters: Vec<NamedAdapter>,
    pub condition: ConditionId,
    pub target: GaussianScoreModel<f64>,
}

impl Testbed {
    pub fn adapter_refs(&self) -> Vec<&dyn ScoreModel<f64>> {
        self.adapters
            .iter()
            .map(|a| &a.adapter as &dyn ScoreModel<f64>)
            .collect()
    }

    pub fn adapter_index(&self, name: &str) -> Option<usize> {
        self.adapters.iter().position(|a| a.name == name)
    }
}

struct Ctx<'a> {
    origin: &'a str,
}

impl Ctx<'_> {
    fn err(&self, message: impl Into<String>) -> HarnessError {
        HarnessError::Config {
            path: self.origin.into(),
            message: message.into(),
        }
    }
}

/// Evaluates a vector spec on the grid.
pub fn eval_vector(spec: &[VectorTerm], shape: GridShape) -> Result<Vec<f64>, String> {
    let mut out = vec![0.0; shape.len()];
    for term in spec {
        match term {
            VectorTerm::Constant { value } => out.iter_mut().for_each(|v| *v += value),
            VectorTerm::Region {
                rows,
                cols,
                channels,
                value,
            } => {
                let chans = channels.unwrap_or([0, shape.channels]);
                let bad = |r: [usize; 2], n: usize| r[0] >= r[1] || r[1] > n;
                if bad(*rows, shape.height) || bad(*cols, shape.width) || bad(chans, shape.channels)
                {
                    return Err(format!(
                        "region rows {rows:?} cols {cols:?} channels {chans:?} outside a {}x{}x{} grid",
                        shape.height, shape.width, shape.channels
                    ));
                }
                for h in rows[0]..rows[1] {
                    for w in cols[0]..cols[1] {
                        for c in chans[0]..chans[1] {
                            out[shape.index(h, w, c)] += value;
                        }
                    }
                }
            }
            VectorTerm::Random { seed, scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                for v in out.iter_mut() {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    *v += scale * x;
                }
            }
            VectorTerm::Values { values } => {
                if values.len() != out.len() {
                    return Err(format!(
                        "{} explicit values for a latent of length {}",
                        values.len(),
                        out.len()
                    ));
                }
                out.iter_mut().zip(values).for_each(|(v, x)| *v += x);
            }
        }
    }
    Ok(out)
}

fn random_directions(seed: u64, rank: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rank)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

impl ExperimentConfig {
    /// Validates cross-references and builds every model. `origin` labels errors.
    pub fn build(&self, origin: &str) -> Result<Testbed, HarnessError> {
        let ctx = Ctx { origin };
        let g = self.grid;
        let shape = GridShape::new(g.height, g.width, g.channels)
            .map_err(|e| ctx.err(format!("[grid]: {e}")))?;
        let schedule = build_vp_schedule(
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )
        .map_err(|e| ctx.err(format!("[schedule]: {e}")))?;

        let gaussian = Arc::new(self.build_base(&ctx, shape, &schedule)?);
        let known: BTreeSet<u32> = self.base.components.iter().map(|c| c.condition).collect();
        let check_known = |c: u32, section: &str| {
            if known.contains(&c) {
                Ok(ConditionId(c))
            } else {
                Err(ctx.err(format!(
                    "{section}: condition {c} is not a base model condition"
                )))
            }
        };
        let condition = check_known(self.experiment.condition, "[experiment]")?;

        let mut embeddings = ConditionEmbeddings::new();
        for e in &self.embeddings {
            let id = check_known(e.condition, "[[embeddings]]")?;
            let v = eval_vector(&e.vector, shape)
                .map_err(|m| ctx.err(format!("[[embeddings]] {id}: {m}")))?;
            if embeddings.insert(id, v).is_some() {
                return Err(ctx.err(format!("[[embeddings]]: {id} listed twice")));
            }
        }
        let embeddings = Arc::new(embeddings);

        let base: Arc<dyn ScoreModel<f64>> = gaussian.clone();
        let mut adapters = Vec::new();
        for spec in &self.adapters {
            let section = format!("adapter '{}'", spec.name);
            let directions = spec
                .directions
                .iter()
                .map(|d| eval_vector(d, shape))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|m| ctx.err(format!("{section}: {m}")))?;
            let trained = spec
                .trained_conditions
                .iter()
                .map(|&c| check_known(c, &section))
                .collect::<Result<Vec<_>, _>>()?;
            let adapter = finish_adapter(
                LowRankAdapter::symmetric(base.clone(), directions),
                spec.strength,
                trained,
                spec.ood_decay,
                spec.modulation,
                &embeddings,
            )
            .map_err(|e| ctx.err(format!("{section}: {e}")))?;
            adapters.push(NamedAdapter {
                name: spec.name.clone(),
                adapter,
            });
        }
        for pool in &self.adapter_pools {
            let section = format!("adapter pool '{}'", pool.prefix);
            let trained = pool
                .trained_conditions
                .iter()
                .map(|&c| check_known(c, &section))
                .collect::<Result<Vec<_>, _>>()?;
            for i in 0..pool.count {
                let directions =
                    random_directions(pool.seed.wrapping_add(i as u64), pool.rank, shape.len());
                let adapter = finish_adapter(
                    LowRankAdapter::symmetric(base.clone(), directions),
                    pool.strength,
                    trained.clone(),
                    pool.ood_decay,
                    pool.modulation,
                    &embeddings,
                )
                .map_err(|e| ctx.err(format!("{section}: {e}")))?;
                adapters.push(NamedAdapter {
                    name: format!("{}{i}", pool.prefix),
                    adapter,
                });
            }
        }
        let mut names = BTreeSet::new();
        for a in &adapters {
            if !names.insert(a.name.as_str()) {
                return Err(ctx.err(format!("adapter name '{}' is used twice", a.name)));
            }
        }

        let target = match &self.target {
            Some(t) => {
                let mean = eval_vector(&t.mean, shape).map_err(|m| ctx.err(format!("[target]: {m}")))?;
                GaussianScoreModel::single(shape, schedule.clone(), condition, mean, t.variance)
                    .map_err(|e| ctx.err(format!("[target]: {e}")))?
            }
            None => {
                let comp = gaussian
                    .component(condition)
                    .map_err(|e| ctx.err(format!("[experiment]: {e}")))?;
                GaussianScoreModel::single(
                    shape,
                    schedule.clone(),
                    condition,
                    comp.mean.clone(),
                    comp.variance,
                )
                .map_err(|e| ctx.err(format!("[target]: {e}")))?
            }
        };

        self.guidance
            .to_config()
            .validate(adapters.len().max(1))
            .map_err(|e| ctx.err(format!("[guidance]: {e}")))?;
        if self.sampler.seeds.is_empty() {
            return Err(ctx.err("[sampler]: at least one seed is required"));
        }
        if self.sampler.trajectories == 0 {
            return Err(ctx.err("[sampler]: trajectories must be positive"));
        }
        if let Some(p) = &self.probe {
            for &c in &p.conditions {
                check_known(c, "[probe]")?;
            }
            if p.samples == 0 {
                return Err(ctx.err("[probe]: samples must be positive"));
            }
            if p.timestep == 0 || p.timestep > self.schedule.steps {
                return Err(ctx.err(format!(
                    "[probe]: timestep {} outside 1..={}",
                    p.timestep, self.schedule.steps
                )));
            }
        }
        if let Some(d) = &self.dynamic {
            for name in &d.static_adapters {
                if !names.contains(name.as_str()) {
                    return Err(ctx.err(format!("[dynamic]: unknown adapter '{name}'")));
                }
            }
            if d.top_k == 0 || d.top_k > adapters.len() {
                return Err(ctx.err(format!(
                    "[dynamic]: top_k {} outside 1..={}",
                    d.top_k,
                    adapters.len()
                )));
            }
        }

        Ok(Testbed {
            shape,
            schedule,
            base,
            gaussian,
            adapters,
            condition,
            target,
        })
    }

    fn build_base(
        &self,
        ctx: &Ctx<'_>,
        shape: GridShape,
        schedule: &NoiseSchedule<f64>,
    ) -> Result<GaussianScoreModel<f64>, HarnessError> {
        let comps = &self.base.components;
        if comps.is_empty() {
            return Err(ctx.err("[base]: at least one component is required"));
        }
        let fixed: f64 = comps.iter().filter_map(|c| c.weight).sum();
        let free = comps.iter().filter(|c| c.weight.is_none()).count();
        let share = if free > 0 {
            (1.0 - fixed) / free as f64
        } else {
            0.0
        };
        let mut seen = BTreeMap::new();
        let mut components = Vec::with_capacity(comps.len());
        for c in comps {
            if seen.insert(c.condition, ()).is_some() {
                return Err(ctx.err(format!("[base]: condition {} listed twice", c.condition)));
            }
            let mean = eval_vector(&c.mean, shape)
                .map_err(|m| ctx.err(format!("[base] condition {}: {m}", c.condition)))?;
            components.push(GaussianComponent {
                condition: ConditionId(c.condition),
                mean,
                variance: c.variance,
                weight: c.weight.unwrap_or(share),
            });
        }
        GaussianScoreModel::new(shape, schedule.clone(), components)
            .map_err(|e| ctx.err(format!("[base]: {e}")))
    }
}

fn finish_adapter(
    adapter: loracomp::Result<LowRankAdapter<f64>>,
    strength: f64,
    trained: Vec<ConditionId>,
    ood_decay: f64,
    modulation: ModulationSpec,
    embeddings: &Arc<ConditionEmbeddings<f64>>,
) -> loracomp::Result<LowRankAdapter<f64>> {
    let mut adapter = adapter?
        .with_strength(strength)?
        .with_trained_conditions(trained)
        .with_ood_decay(ood_decay)?
        .with_modulation(modulation.to_modulation())?;
    if !embeddings.is_empty() {
        adapter = adapter.with_embeddings(embeddings.clone())?;
    }
    Ok(adapter)
}
