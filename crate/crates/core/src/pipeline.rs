//! Experiment stages and their on-disk artifacts.
//!
//! Every stage reads its inputs from a run directory, checks them against
//! the hashes recorded by the stage that produced them, and writes JSON
//! artifacts plus a manifest. Artifacts are pure functions of the resolved
//! configuration and seeds, so a rerun reproduces every artifact hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{sample_disturbance, DisturbanceSet, DisturbanceSignal};
use crate::environments::{
    funnel_collision_cost, sample_environment_with, Environment, EnvironmentConfig, EnvironmentKind, HighwayConfig,
    ObstacleFieldConfig,
};
use crate::error::{Error, Result};
use crate::learning::{
    build_cost_matrix, optimize_posterior, train_prior, GaussianPolicyDist, PacCertificate, TrainingConfig, TrainingLog,
};
use crate::policy::{run_episode, Architecture, EpisodeContext, EpisodeMode, PolicyParams};
use crate::primitives::{
    build_highway_library_with, build_surrogate_library_with, HighwayPrimitiveConfig, PrimitiveLibrary,
    SurrogatePrimitiveConfig,
};
use crate::reachability::{verify_funnel_monte_carlo, Arm, FunnelLibrary, FunnelOptions, InletSearch, ViolationReport};
use crate::seed::{self, tag};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerificationConfig {
    pub samples: usize,
    pub segment_duration: f64,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            segment_duration: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSizes {
    pub prior: usize,
    pub certify: usize,
    pub test: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        Self {
            prior: 200,
            certify: 500,
            test: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Hidden layer widths; the input and output widths follow the task.
    pub hidden: Option<Vec<usize>>,
    pub init_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            init_std: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyConfig {
    pub policies: usize,
    pub delta: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            policies: 20,
            delta: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub disturbance_draws: usize,
    pub segment_duration: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            disturbance_draws: 5,
            segment_duration: 0.1,
        }
    }
}

/// Whole-experiment configuration, read from one TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: EnvironmentKind,
    pub arm: Arm,
    pub seed: u64,
    /// Nominal and rollout integration step.
    pub dt: f64,
    /// Disturbance half-widths; the task default when absent.
    pub disturbance: Option<Vec<f64>>,
    pub highway_primitives: HighwayPrimitiveConfig,
    pub surrogate_primitives: SurrogatePrimitiveConfig,
    pub funnel: FunnelOptions,
    pub inlet_search: InletSearch,
    pub verification: VerificationConfig,
    pub highway: HighwayConfig,
    pub obstacle_field: ObstacleFieldConfig,
    pub datasets: DatasetSizes,
    pub policy: PolicyConfig,
    pub training: TrainingConfig,
    pub certify: CertifyConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: EnvironmentKind::Highway,
            arm: Arm::Funnel,
            seed: 0,
            dt: 0.01,
            disturbance: None,
            highway_primitives: HighwayPrimitiveConfig::default(),
            surrogate_primitives: SurrogatePrimitiveConfig::default(),
            funnel: FunnelOptions::default(),
            inlet_search: InletSearch::default(),
            verification: VerificationConfig::default(),
            highway: HighwayConfig::default(),
            obstacle_field: ObstacleFieldConfig::default(),
            datasets: DatasetSizes::default(),
            policy: PolicyConfig::default(),
            training: TrainingConfig::default(),
            certify: CertifyConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Fills task-dependent defaults so the snapshot in each manifest is
    /// complete.
    pub fn resolved(mut self) -> Self {
        if self.disturbance.is_none() {
            self.disturbance = Some(match self.kind {
                EnvironmentKind::Highway => vec![0.5, 1.0, 0.25],
                EnvironmentKind::ObstacleField => vec![0.1, 0.1],
            });
        }
        if self.policy.hidden.is_none() {
            self.policy.hidden = Some(match self.kind {
                EnvironmentKind::Highway => vec![16, 16, 16],
                EnvironmentKind::ObstacleField => vec![24, 16],
            });
        }
        self
    }

    pub fn disturbance_set(&self) -> Result<DisturbanceSet> {
        let bounds = self
            .clone()
            .resolved()
            .disturbance
            .expect("resolved config has a disturbance box");
        DisturbanceSet::symmetric(&bounds)
    }

    pub fn primitive_library(&self) -> Result<PrimitiveLibrary> {
        match self.kind {
            EnvironmentKind::Highway => build_highway_library_with(&self.highway_primitives, self.dt),
            EnvironmentKind::ObstacleField => build_surrogate_library_with(&self.surrogate_primitives, self.dt),
        }
    }

    pub fn environment_config(&self) -> EnvironmentConfig {
        match self.kind {
            EnvironmentKind::Highway => EnvironmentConfig::Highway(self.highway.clone()),
            EnvironmentKind::ObstacleField => EnvironmentConfig::ObstacleField(self.obstacle_field.clone()),
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let (input, output) = match self.kind {
            EnvironmentKind::Highway => (2 * self.highway.observed_vehicles, 3),
            EnvironmentKind::ObstacleField => (self.obstacle_field.rays, 7),
        };
        let hidden = self
            .clone()
            .resolved()
            .policy
            .hidden
            .expect("resolved config has hidden widths");
        let mut widths = vec![input];
        widths.extend(hidden);
        widths.push(output);
        Architecture::new(widths)
    }
}

/// Stage names, which double as manifest file stems.
pub mod stage {
    pub const BUILD_LIBRARY: &str = "build-library";
    pub const SAMPLE_ENVS: &str = "sample-envs";
    pub const TRAIN_PRIOR: &str = "train-prior";
    pub const CERTIFY: &str = "certify";
    pub const EVALUATE: &str = "evaluate";
    pub const VERIFY_FUNNELS: &str = "verify-funnels";
}

pub mod file {
    pub const LIBRARY: &str = "library.json";
    pub const VERIFICATION: &str = "verification.json";
    pub const ENVS_PRIOR: &str = "envs_prior.json";
    pub const ENVS_CERTIFY: &str = "envs_certify.json";
    pub const ENVS_TEST: &str = "envs_test.json";
    pub const PRIOR: &str = "prior.json";
    pub const COST_MATRIX: &str = "cost_matrix.json";
    pub const POSTERIOR: &str = "posterior.json";
    pub const CERTIFICATE: &str = "certificate.json";
    pub const REPORT: &str = "report.json";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub schema_version: u32,
    /// Manifest of the stage that wrote this artifact.
    pub manifest: String,
    pub body: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub stage: String,
    pub config: ExperimentConfig,
    /// Input artifact file name → SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub duration_seconds: f64,
}

pub fn manifest_name(stage: &str) -> String {
    format!("{stage}.manifest.json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    fs::write(path, text.as_bytes()).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn read_artifact<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<T> {
    let path = dir.join(name);
    let a: Artifact<T> = read_json(&path)?;
    if a.schema_version != SCHEMA_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("schema version {} (expected {SCHEMA_VERSION})", a.schema_version),
        });
    }
    Ok(a.body)
}

pub fn read_manifest(dir: &Path, stage: &str) -> Result<RunManifest> {
    read_json(&dir.join(manifest_name(stage)))
}

/// Collects outputs for one stage and writes its manifest last.
struct StageWriter<'a> {
    dir: &'a Path,
    stage: &'static str,
    config: &'a ExperimentConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
    started: Instant,
}

impl<'a> StageWriter<'a> {
    fn new(dir: &'a Path, stage: &'static str, config: &'a ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(StageWriter {
            dir,
            stage,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seeds: BTreeMap::from([("base".to_string(), config.seed)]),
            started: Instant::now(),
        })
    }

    /// Verifies `name` against the manifest of `producer` and records it.
    fn input(&mut self, producer: &str, name: &str) -> Result<()> {
        let manifest = read_manifest(self.dir, producer)?;
        let expected = manifest.outputs.get(name).ok_or_else(|| Error::StaleArtifact {
            path: name.to_string(),
            expected: format!("an output of {producer}"),
            found: "not listed".to_string(),
        })?;
        let found = sha256_file(&self.dir.join(name))?;
        if &found != expected {
            return Err(Error::StaleArtifact {
                path: name.to_string(),
                expected: expected.clone(),
                found,
            });
        }
        self.inputs.insert(name.to_string(), found);
        Ok(())
    }

    fn output<T: Serialize>(&mut self, name: &str, body: &T) -> Result<String> {
        let artifact = Artifact {
            schema_version: SCHEMA_VERSION,
            manifest: manifest_name(self.stage),
            body,
        };
        let hash = write_json(&self.dir.join(name), &artifact)?;
        self.outputs.insert(name.to_string(), hash.clone());
        Ok(hash)
    }

    fn finish(self) -> Result<RunManifest> {
        let m = RunManifest {
            schema_version: SCHEMA_VERSION,
            stage: self.stage.to_string(),
            config: self.config.clone(),
            inputs: self.inputs,
            outputs: self.outputs,
            seeds: self.seeds,
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        write_json(&self.dir.join(manifest_name(self.stage)), &m)?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryArtifact {
    pub kind: EnvironmentKind,
    pub primitives: PrimitiveLibrary,
    pub funnels: FunnelLibrary,
}

impl LibraryArtifact {
    pub fn context(&self) -> Result<EpisodeContext> {
        EpisodeContext::new(self.primitives.clone(), self.funnels.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationArtifact {
    pub reports: Vec<ViolationReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Prior,
    Certify,
    Test,
}

impl DatasetRole {
    pub const ALL: [DatasetRole; 3] = [DatasetRole::Prior, DatasetRole::Certify, DatasetRole::Test];

    pub fn file(self) -> &'static str {
        match self {
            DatasetRole::Prior => file::ENVS_PRIOR,
            DatasetRole::Certify => file::ENVS_CERTIFY,
            DatasetRole::Test => file::ENVS_TEST,
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for DatasetRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(DatasetRole::Prior),
            "certify" => Ok(DatasetRole::Certify),
            "test" => Ok(DatasetRole::Test),
            other => Err(Error::invalid(format!("unknown dataset role {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: EnvironmentKind,
    pub role: DatasetRole,
    pub environments: Vec<Environment>,
}

impl Dataset {
    pub fn seeds(&self) -> Vec<u64> {
        self.environments.iter().map(Environment::seed).collect()
    }
}

/// Environments for one role, seeded by `(base seed, role, index)`.
pub fn sample_dataset(cfg: &ExperimentConfig, role: DatasetRole, count: usize) -> Result<Dataset> {
    let env_cfg = cfg.environment_config();
    let environments = (0..count)
        .into_par_iter()
        .map(|i| {
            sample_environment_with(
                &env_cfg,
                seed::derive(cfg.seed, &[tag::ENVIRONMENT, role.index(), i as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        kind: cfg.kind,
        role,
        environments,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorArtifact {
    pub prior: GaussianPolicyDist,
    pub log: TrainingLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedPolicy {
    pub probability: f64,
    pub policy: PolicyParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorArtifact {
    pub policies: Vec<WeightedPolicy>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub standard_error: f64,
    /// Independent units behind the standard error.
    pub n: usize,
}

impl CostEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        CostEstimate {
            mean,
            standard_error: (var / n as f64).sqrt(),
            n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub kind: EnvironmentKind,
    pub arm: Arm,
    pub c_pac: f64,
    pub c_s: f64,
    /// Funnel-sequence cost of the deployed policies on the test set.
    pub funnel_cost: CostEstimate,
    pub undisturbed: CostEstimate,
    /// Per-environment means over the disturbance draws.
    pub disturbed: CostEstimate,
    pub disturbance_draws: usize,
}

fn library_for(cfg: &ExperimentConfig) -> Result<LibraryArtifact> {
    let primitives = cfg.primitive_library()?;
    let funnels = match cfg.arm {
        Arm::Funnel => FunnelLibrary::build(&primitives, &cfg.disturbance_set()?, &cfg.funnel, &cfg.inlet_search)?,
        Arm::Nominal => FunnelLibrary::nominal(&primitives, cfg.funnel.dt)?,
    };
    Ok(LibraryArtifact {
        kind: cfg.kind,
        primitives,
        funnels,
    })
}

/// Monte Carlo falsification of every funnel in the library.
pub fn verify_library(
    lib: &LibraryArtifact,
    ws: &DisturbanceSet,
    v: &VerificationConfig,
    seed: u64,
) -> Result<Vec<ViolationReport>> {
    if lib.funnels.arm == Arm::Nominal {
        return Ok(Vec::new());
    }
    let model = lib.primitives.model;
    lib.funnels
        .funnels
        .iter()
        .map(|f| {
            let prim = lib.primitives.get(f.primitive_id);
            let zero = vec![0.0; model.state_dim()];
            verify_funnel_monte_carlo(
                f,
                |x0, w, dt| prim.simulate(&model, x0, &zero, w, 0.0, dt),
                ws,
                v.segment_duration,
                v.samples,
                seed,
            )
        })
        .collect()
}

fn check_reports(reports: &[ViolationReport]) -> Result<()> {
    if let Some(r) = reports.iter().find(|r| r.violations > 0) {
        return Err(Error::Soundness {
            step: 0,
            t: 0.0,
            detail: format!(
                "funnel {} violated by {} of {} samples",
                r.primitive_id, r.violations, r.samples
            ),
        });
    }
    Ok(())
}

pub fn cmd_build_library(cfg: &ExperimentConfig, dir: &Path) -> Result<RunManifest> {
    let cfg = cfg.clone().resolved();
    let mut w = StageWriter::new(dir, stage::BUILD_LIBRARY, &cfg)?;
    let lib = library_for(&cfg)?;
    let reports = verify_library(&lib, &cfg.disturbance_set()?, &cfg.verification, cfg.seed)?;
    check_reports(&reports)?;
    w.output(file::LIBRARY, &lib)?;
    w.output(file::VERIFICATION, &VerificationArtifact { reports })?;
    w.finish()
}

/// Re-runs falsification on an existing library with `samples` draws.
pub fn cmd_verify_funnels(cfg: &ExperimentConfig, dir: &Path) -> Result<RunManifest> {
    let cfg = cfg.clone().resolved();
    let mut w = StageWriter::new(dir, stage::VERIFY_FUNNELS, &cfg)?;
    w.input(stage::BUILD_LIBRARY, file::LIBRARY)?;
    let lib: LibraryArtifact = read_artifact(dir, file::LIBRARY)?;
    let reports = verify_library(&lib, &cfg.disturbance_set()?, &cfg.verification, cfg.seed)?;
    w.output(
        "verification_rerun.json",
        &VerificationArtifact {
            reports: reports.clone(),
        },
    )?;
    let m = w.finish()?;
    check_reports(&reports)?;
    Ok(m)
}

/// Samples the requested datasets (all three when `roles` is empty) and
/// checks that no environment seed appears in two of them.
pub fn cmd_sample_envs(cfg: &ExperimentConfig, dir: &Path, roles: &[(DatasetRole, usize)]) -> Result<RunManifest> {
    let cfg = cfg.clone().resolved();
    let mut w = StageWriter::new(dir, stage::SAMPLE_ENVS, &cfg)?;
    let all: Vec<(DatasetRole, usize)> = if roles.is_empty() {
        vec![
            (DatasetRole::Prior, cfg.datasets.prior),
            (DatasetRole::Certify, cfg.datasets.certify),
            (DatasetRole::Test, cfg.datasets.test),
        ]
    } else {
        roles.to_vec()
    };
    let sets = all
        .iter()
        .map(|&(role, n)| sample_dataset(&cfg, role, n))
        .collect::<Result<Vec<_>>>()?;
    check_disjoint(&sets)?;
    for d in &sets {
        w.output(d.role.file(), d)?;
    }
    w.finish()
}

pub fn check_disjoint(sets: &[Dataset]) -> Result<()> {
    let mut seen = std::collections::HashMap::new();
    for d in sets {
        for s in d.seeds() {
            if let Some(prev) = seen.insert(s, d.role) {
                if prev != d.role {
                    return Err(Error::ContractViolation(format!(
                        "environment seed {s} appears in both {prev:?} and {:?} datasets",
                        d.role
                    )));
                }
            }
        }
    }
    Ok(())
}

fn load_datasets(w: &mut StageWriter<'_>, roles: &[DatasetRole]) -> Result<Vec<Dataset>> {
    let mut out = Vec::new();
    for &r in roles {
        w.input(stage::SAMPLE_ENVS, r.file())?;
        out.push(read_artifact::<Dataset>(w.dir, r.file())?);
    }
    Ok(out)
}

pub fn cmd_train_prior(cfg: &ExperimentConfig, dir: &Path) -> Result<RunManifest> {
    let cfg = cfg.clone().resolved();
    let mut w = StageWriter::new(dir, stage::TRAIN_PRIOR, &cfg)?;
    w.input(stage::BUILD_LIBRARY, file::LIBRARY)?;
    let lib: LibraryArtifact = read_artifact(dir, file::LIBRARY)?;
    let envs = load_datasets(&mut w, &[DatasetRole::Prior])?.remove(0);
    let ctx = lib.context()?;
    let init = GaussianPolicyDist::initialize(cfg.architecture()?, cfg.policy.init_std, cfg.seed)?;
    let training = TrainingConfig {
        seed: seed::derive(cfg.seed, &[tag::ES_ITERATION, cfg.training.seed]),
        ..cfg.training
    };
    let (prior, log) = train_prior(init, &envs.environments, &ctx, &training)?;
    w.seeds.insert("training".into(), training.seed);
    w.output(file::PRIOR, &PriorArtifact { prior, log })?;
    w.finish()
}

pub fn cmd_certify(cfg: &ExperimentConfig, dir: &Path) -> Result<RunManifest> {
    let cfg = cfg.clone().resolved();
    let mut w = StageWriter::new(dir, stage::CERTIFY, &cfg)?;
    w.input(stage::BUILD_LIBRARY, file::LIBRARY)?;
    w.input(stage::TRAIN_PRIOR, file::PRIOR)?;
    let lib: LibraryArtifact = read_artifact(dir, file::LIBRARY)?;
    let prior: PriorArtifact = read_artifact(dir, file::PRIOR)?;
    let sets = load_datasets(&mut w, &[DatasetRole::Prior, DatasetRole::Certify])?;
    check_disjoint(&sets)?;
    let dataset_hash = w.inputs[file::ENVS_CERTIFY].clone();
    let ctx = lib.context()?;
    let policy_seed = seed::derive(cfg.seed, &[tag::POLICY_SAMPLE]);
    w.seeds.insert("policies".into(), policy_seed);
    let matrix = build_cost_matrix(
        &prior.prior,
        cfg.certify.policies,
        &sets[1].environments,
        &ctx,
        policy_seed,
    )?;
    let (posterior, mut cert) = optimize_posterior(&matrix, cfg.certify.delta)?;
    cert.dataset_hash = Some(dataset_hash);
    let policies = matrix
        .policy_seeds
        .iter()
        .zip(&posterior.p)
        .map(|(&s, &p)| WeightedPolicy {
            probability: p,
            policy: prior.prior.sample(s),
        })
        .collect();
    w.output(file::COST_MATRIX, &matrix)?;
    w.output(file::POSTERIOR, &PosteriorArtifact { policies })?;
    w.output(file::CERTIFICATE, &cert)?;
    w.finish()
}

/// Deployed costs of `posterior` on `envs`: one sampled policy per
/// environment, rolled out without disturbance and under `draws` sampled
/// disturbance signals.
pub fn evaluate_posterior(
    posterior: &PosteriorArtifact,
    envs: &[Environment],
    ctx: &EpisodeContext,
    ws: &DisturbanceSet,
    ev: &EvaluateConfig,
    seed_base: u64,
) -> Result<(CostEstimate, CostEstimate, CostEstimate)> {
    use rand::Rng as _;
    if envs.is_empty() || ev.disturbance_draws == 0 {
        return Err(Error::invalid(
            "evaluation needs environments and at least one disturbance draw",
        ));
    }
    let dist = crate::learning::DiscretePosterior {
        p: posterior.policies.iter().map(|w| w.probability).collect(),
        p0: vec![1.0 / posterior.policies.len() as f64; posterior.policies.len()],
    };
    let per_env = envs
        .par_iter()
        .enumerate()
        .map(|(l, env)| {
            let mut rng = seed::rng(seed::derive(seed_base, &[tag::DEPLOY_CHOICE, l as u64]));
            let policy = &posterior.policies[dist.pick(rng.random::<f64>())].policy;
            let zero = DisturbanceSignal::zero(ws.dim());
            let clean = run_episode(env, ctx, policy, &EpisodeMode::Rollout { w: &zero, x0: None })?;
            let funnel = funnel_collision_cost(
                env,
                &run_episode(env, ctx, policy, &EpisodeMode::Funnel)?.placed_funnels(&ctx.funnels),
                &ctx.funnels,
            )?;
            let horizon = env.horizon() as f64 * env.interval();
            let mut disturbed = 0.0;
            for d in 0..ev.disturbance_draws {
                let s = seed::derive(seed_base, &[tag::DISTURBANCE, l as u64, d as u64]);
                let w = sample_disturbance(ws, horizon, ev.segment_duration, s)?;
                disturbed += run_episode(env, ctx, policy, &EpisodeMode::Rollout { w: &w, x0: None })?
                    .cost
                    .cost;
            }
            Ok((funnel.cost, clean.cost.cost, disturbed / ev.disturbance_draws as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&(f64, f64, f64)) -> f64| per_env.iter().map(f).collect::<Vec<_>>();
    Ok((
        CostEstimate::from_samples(&col(|r| r.0)),
        CostEstimate::from_samples(&col(|r| r.1)),
        CostEstimate::from_samples(&col(|r| r.2)),
    ))
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, dir: &Path) -> Result<RunManifest> {
    let cfg = cfg.clone().resolved();
    let mut w = StageWriter::new(dir, stage::EVALUATE, &cfg)?;
    w.input(stage::BUILD_LIBRARY, file::LIBRARY)?;
    w.input(stage::CERTIFY, file::POSTERIOR)?;
    w.input(stage::CERTIFY, file::CERTIFICATE)?;
    let lib: LibraryArtifact = read_artifact(dir, file::LIBRARY)?;
    let posterior: PosteriorArtifact = read_artifact(dir, file::POSTERIOR)?;
    let cert: PacCertificate = read_artifact(dir, file::CERTIFICATE)?;
    let test = load_datasets(&mut w, &[DatasetRole::Test])?.remove(0);
    let ctx = lib.context()?;
    let eval_seed = seed::derive(cfg.seed, &[tag::DEPLOY_CHOICE]);
    w.seeds.insert("evaluation".into(), eval_seed);
    let (funnel_cost, undisturbed, disturbed) = evaluate_posterior(
        &posterior,
        &test.environments,
        &ctx,
        &cfg.disturbance_set()?,
        &cfg.evaluate,
        eval_seed,
    )?;
    let report = EvaluationReport {
        kind: cfg.kind,
        arm: lib.funnels.arm,
        c_pac: cert.c_pac,
        c_s: cert.c_s,
        funnel_cost,
        undisturbed,
        disturbed,
        disturbance_draws: cfg.evaluate.disturbance_draws,
    };
    w.output(file::REPORT, &report)?;
    w.finish()
}

/// Runs every stage in order.
pub fn run_all(cfg: &ExperimentConfig, dir: &Path) -> Result<EvaluationReport> {
    cmd_build_library(cfg, dir)?;
    cmd_sample_envs(cfg, dir, &[])?;
    cmd_train_prior(cfg, dir)?;
    cmd_certify(cfg, dir)?;
    cmd_evaluate(cfg, dir)?;
    read_artifact(dir, file::REPORT)
}

/// Writes plot-ready CSV files into `out` and returns their paths.
///
/// * `funnel_<id>.csv`: one row per grid time with the lower and upper
///   bound of every state coordinate.
/// * `training_curve.csv`: one row per ES iteration.
/// * `bars.csv`: one row per report with bound, undisturbed and disturbed
///   costs.
pub fn cmd_plot_data(dir: &Path, reports: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut written = Vec::new();
    let mut emit = |name: String, header: Vec<String>, rows: Vec<Vec<String>>| -> Result<()> {
        let p = out.join(name);
        let csv_err = |e: csv::Error| Error::Format {
            path: p.display().to_string(),
            detail: e.to_string(),
        };
        let mut w = csv::Writer::from_path(&p).map_err(csv_err)?;
        w.write_record(&header).map_err(csv_err)?;
        for row in &rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush().map_err(io_err(&p))?;
        written.push(p);
        Ok(())
    };
    if dir.join(file::LIBRARY).exists() {
        let lib: LibraryArtifact = read_artifact(dir, file::LIBRARY)?;
        for f in &lib.funnels.funnels {
            let mut header = vec!["t".to_string()];
            for i in 0..f.dim() {
                header.push(format!("x{i}_lo"));
                header.push(format!("x{i}_hi"));
            }
            let rows = f
                .times
                .iter()
                .zip(&f.boxes)
                .map(|(t, b)| {
                    std::iter::once(t.to_string())
                        .chain(b.0.iter().flat_map(|iv| [iv.lo().to_string(), iv.hi().to_string()]))
                        .collect()
                })
                .collect();
            emit(format!("funnel_{}.csv", f.primitive_id), header, rows)?;
        }
    }
    if dir.join(file::PRIOR).exists() {
        let prior: PriorArtifact = read_artifact(dir, file::PRIOR)?;
        let rows = prior
            .log
            .costs
            .iter()
            .enumerate()
            .map(|(i, c)| vec![i.to_string(), c.to_string()])
            .collect();
        emit(
            "training_curve.csv".into(),
            vec!["iteration".into(), "cost".into()],
            rows,
        )?;
    }
    let mut report_paths: Vec<PathBuf> = reports.to_vec();
    if report_paths.is_empty() && dir.join(file::REPORT).exists() {
        report_paths.push(dir.join(file::REPORT));
    }
    if !report_paths.is_empty() {
        let mut rows = Vec::new();
        for p in &report_paths {
            let r = read_json::<Artifact<EvaluationReport>>(p)?.body;
            let arm = match r.arm {
                Arm::Funnel => "funnel",
                Arm::Nominal => "nominal",
            };
            rows.push(vec![
                arm.to_string(),
                r.c_pac.to_string(),
                r.undisturbed.mean.to_string(),
                r.disturbed.mean.to_string(),
            ]);
        }
        let header = ["arm", "bound", "no_dist", "dist"].map(String::from).to_vec();
        emit("bars.csv".into(), header, rows)?;
    }
    Ok(written)
}
