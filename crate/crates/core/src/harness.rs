//! Experiment orchestration: configuration, test sets, evaluation, metrics
//! tables, plot data and the artifact manifest.
//!
//! Everything a command writes goes under one output directory and is
//! recorded in `manifest.json` together with the hash of the configuration
//! that produced it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::baseline::ShedConfig;
use crate::env::{
    default_holdout, default_training_menu, run_episode, sample_scenario, Controller, CurtailmentEnv, EpisodeOptions,
    EpisodeTrace, Normalizer, PolicyMode, Scenario, StepRecord, DEFAULT_BAND, DEFAULT_THRESHOLD_MW,
};
use crate::error::{Error, Result};
use crate::grid::{builtin_case, load_network, Network};
use crate::neural::Mlp;
use crate::ppo::{Checkpoint, Learner, PpoConfig, TrainOptions, MOVING_AVERAGE_WINDOW};
use crate::seeding;
use crate::sim::Disturbance;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";
pub const TESTSET_DIR: &str = "testsets";
pub const TRACE_DIR: &str = "traces";
pub const PLOT_DIR: &str = "plots";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
/// Test-set names in report order.
pub const TEST_SET_NAMES: [&str; 3] = ["set1", "set2", "set3"];

/// Where the grid comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSource {
    Builtin(String),
    File(PathBuf),
}

impl NetworkSource {
    pub fn load(&self) -> Result<Network> {
        match self {
            NetworkSource::Builtin(name) => builtin_case(name),
            NetworkSource::File(path) => load_network(path),
        }
    }
}

/// Controller evaluated on a test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Drl,
    DrlThresholded,
    Baseline,
    None,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Drl, Method::DrlThresholded, Method::Baseline, Method::None];

    pub fn name(self) -> &'static str {
        match self {
            Method::Drl => "drl",
            Method::DrlThresholded => "drl_thresholded",
            Method::Baseline => "baseline",
            Method::None => "none",
        }
    }

    pub fn needs_policy(self) -> bool {
        matches!(self, Method::Drl | Method::DrlThresholded)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected drl, drl_thresholded, baseline or none)")))
    }
}

/// Everything that defines an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub network: NetworkSource,
    /// Load-multiplier band of training and test sets 1 and 3.
    pub band: (f64, f64),
    /// Band of test set 2.
    pub widened_band: (f64, f64),
    pub training_menu: Vec<Disturbance>,
    /// Disturbance of test set 3; never used in training.
    pub holdout: Disturbance,
    pub ppo: PpoConfig,
    pub episodes: u64,
    /// Checkpoint interval in episodes (0 disables intermediate checkpoints).
    pub checkpoint_every: u64,
    pub test_set_size: usize,
    /// Methods run by `evaluate`.
    pub methods: Vec<Method>,
    pub threshold_mw: f64,
    pub shed: ShedConfig,
    /// Master seed of training.
    pub seed: u64,
    /// Master seed of test-set construction.
    pub testset_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            network: NetworkSource::Builtin("ltvs5".into()),
            band: DEFAULT_BAND,
            widened_band: (0.90, 1.10),
            training_menu: default_training_menu(),
            holdout: default_holdout(),
            ppo: PpoConfig::default(),
            episodes: 12_800,
            checkpoint_every: 640,
            test_set_size: 100,
            methods: Method::ALL.to_vec(),
            threshold_mw: DEFAULT_THRESHOLD_MW,
            shed: ShedConfig::default(),
            seed: 1,
            testset_seed: 20_250_101,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_err(context: &str, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        context: context.to_string(),
        message: e.to_string(),
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| parse_err(context, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }

    /// Applies `path=value` overrides, where `path` is a dotted field path
    /// (`ppo.actor_lr`, `band.0`) and `value` is JSON, or a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not of the form path=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let slot = path
                .split('.')
                .try_fold(&mut doc, |node, key| match node {
                    Value::Object(map) => map.get_mut(key),
                    Value::Array(items) => key.parse::<usize>().ok().and_then(move |i| items.get_mut(i)),
                    _ => None,
                })
                .ok_or_else(|| Error::Config(format!("unknown configuration field {path:?}")))?;
            *slot = value;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("override: {e}")))
    }

    /// Checks the configuration against itself and the network it names.
    pub fn validate(&self) -> Result<Network> {
        let net = self.network.load()?;
        let band_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi;
        if !band_ok(self.band) || !band_ok(self.widened_band) {
            return Err(Error::Config("multiplier bands must satisfy 0 < lo <= hi".into()));
        }
        if self.training_menu.is_empty() {
            return Err(Error::Config("training disturbance menu is empty".into()));
        }
        for d in self.training_menu.iter().chain(std::iter::once(&self.holdout)) {
            d.validate(&net)?;
        }
        if self.training_menu.contains(&self.holdout) {
            return Err(Error::Config(format!(
                "holdout disturbance {} also appears in the training menu",
                self.holdout
            )));
        }
        self.ppo.validate()?;
        let n = self.ppo.batch_episodes as u64;
        if self.episodes == 0 || !self.episodes.is_multiple_of(n) {
            return Err(Error::Config(format!(
                "episode budget {} must be a positive multiple of the batch size {n}",
                self.episodes
            )));
        }
        if !self.checkpoint_every.is_multiple_of(n) {
            return Err(Error::Config(format!(
                "checkpoint interval {} must be a multiple of the batch size {n}",
                self.checkpoint_every
            )));
        }
        if self.test_set_size == 0 {
            return Err(Error::Config("test sets must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no evaluation methods selected".into()));
        }
        if !(self.threshold_mw >= 0.0 && self.threshold_mw.is_finite()) {
            return Err(Error::Config("threshold_mw must be a non-negative number".into()));
        }
        self.shed.validate()?;
        Ok(net)
    }

    /// SHA-256 (hex) of the compact JSON form, excluding the output
    /// directory so that relocating a run does not change its identity.
    pub fn hash(&self) -> String {
        let identity = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let text = serde_json::to_string(&identity).expect("config always serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn env(&self, net: Network) -> CurtailmentEnv {
        CurtailmentEnv::new(net, self.band, self.training_menu.clone())
    }
}

/// Records every artifact written under an output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub command: String,
    pub config_hash: String,
    pub sha256: String,
}

impl Manifest {
    pub fn load_or_default(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| parse_err(&path.display().to_string(), e))
    }

    /// Hashes the listed files (paths relative to `out`) and saves the
    /// manifest.
    pub fn record(out: &Path, command: &str, config_hash: &str, files: &[PathBuf]) -> Result<Self> {
        let mut m = Self::load_or_default(out)?;
        for rel in files {
            let path = out.join(rel);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            m.artifacts.insert(
                rel.to_string_lossy().replace('\\', "/"),
                ArtifactEntry {
                    command: command.to_string(),
                    config_hash: config_hash.to_string(),
                    sha256: hex::encode(Sha256::digest(&bytes)),
                },
            );
        }
        let text = serde_json::to_string_pretty(&m).expect("manifest always serializes");
        write_file(&out.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(m)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains (or resumes) a learner, writing checkpoints and the training log
/// under `cfg.out_dir`. Returns the learner and the files written.
pub fn run_training(
    cfg: &ExperimentConfig,
    resume: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<(Learner<Normalizer>, Vec<PathBuf>)> {
    let net = cfg.validate()?;
    let env = cfg.env(net);
    let mut learner = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.master_seed != cfg.seed || ckpt.config != cfg.ppo {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different seed or PPO configuration",
                    path.display()
                )));
            }
            Learner::from_checkpoint(ckpt)?
        }
        None => Learner::new(&env, cfg.ppo.clone(), cfg.seed)?,
    };
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let opts = TrainOptions {
        total_episodes: cfg.episodes,
        checkpoint_every: (cfg.checkpoint_every > 0).then_some(cfg.checkpoint_every),
        checkpoint_path: Some(ckpt_path.clone()),
        stop_after,
    };
    let result = learner.train(&env, &opts);
    // Whatever happened, leave a consistent checkpoint and log behind.
    learner.checkpoint().save(&ckpt_path)?;
    learner.write_log(&out.join(TRAINING_LOG_FILE))?;
    let files = vec![PathBuf::from(CHECKPOINT_FILE), PathBuf::from(TRAINING_LOG_FILE)];
    Manifest::record(out, "train", &cfg.hash(), &files)?;
    result.map(|_| (learner, files))
}

/// A named, reproducible list of evaluation scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub name: String,
    pub master_seed: u64,
    pub band: (f64, f64),
    pub disturbances: Vec<Disturbance>,
    pub scenarios: Vec<Scenario>,
}

impl TestSet {
    /// Draws `size` scenarios; scenario `i` uses stream `testset-<name>`,
    /// index `i`, of `master_seed`.
    pub fn generate(
        net: &Network,
        name: &str,
        master_seed: u64,
        band: (f64, f64),
        disturbances: Vec<Disturbance>,
        size: usize,
    ) -> Result<Self> {
        let stream = format!("testset-{name}");
        let scenarios = (0..size as u64)
            .map(|i| {
                let mut rng = seeding::stream(master_seed, &stream, i);
                sample_scenario(net, &mut rng, band, &disturbances, i)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            master_seed,
            band,
            disturbances,
            scenarios,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("test set always serializes");
        write_file(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| parse_err(&path.display().to_string(), e))
    }
}

/// Set 1: training distribution. Set 2: widened band. Set 3: holdout
/// disturbance only.
pub fn make_test_sets(cfg: &ExperimentConfig, net: &Network) -> Result<Vec<TestSet>> {
    let specs = [
        (cfg.band, cfg.training_menu.clone()),
        (cfg.widened_band, cfg.training_menu.clone()),
        (cfg.band, vec![cfg.holdout.clone()]),
    ];
    TEST_SET_NAMES
        .iter()
        .zip(specs)
        .map(|(name, (band, menu))| TestSet::generate(net, name, cfg.testset_seed, band, menu, cfg.test_set_size))
        .collect()
}

pub fn test_set_path(out: &Path, name: &str) -> PathBuf {
    out.join(TESTSET_DIR).join(format!("{name}.json"))
}

/// Writes the three test sets under `cfg.out_dir`.
pub fn write_test_sets(cfg: &ExperimentConfig) -> Result<(Vec<TestSet>, Vec<PathBuf>)> {
    let net = cfg.validate()?;
    let sets = make_test_sets(cfg, &net)?;
    let mut files = Vec::new();
    for s in &sets {
        s.save(&test_set_path(&cfg.out_dir, &s.name))?;
        files.push(Path::new(TESTSET_DIR).join(format!("{}.json", s.name)));
    }
    Manifest::record(&cfg.out_dir, "make-testsets", &cfg.hash(), &files)?;
    Ok((sets, files))
}

pub fn load_test_sets(dir: &Path) -> Result<Vec<TestSet>> {
    TEST_SET_NAMES
        .iter()
        .map(|name| {
            let path = dir.join(format!("{name}.json"));
            if !path.exists() {
                return Err(Error::Config(format!("missing test set {}", path.display())));
            }
            TestSet::load(&path)
        })
        .collect()
}

/// A trained policy together with the frozen observation statistics.
#[derive(Debug, Clone, Copy)]
pub struct Policy<'a> {
    pub actor: &'a Mlp<f64>,
    pub normalizer: &'a Normalizer,
}

/// Runs one scenario under one method without touching `policy`.
pub fn run_method(
    net: &Network,
    scenario: &Scenario,
    method: Method,
    policy: Option<Policy<'_>>,
    threshold_mw: f64,
    shed: &ShedConfig,
) -> Result<EpisodeTrace> {
    let missing = || Error::Config(format!("method {} needs a trained policy", method.name()));
    let controller = match method {
        Method::Drl => Controller::Agent {
            actor: policy.ok_or_else(missing)?.actor,
            mode: PolicyMode::Deterministic,
        },
        Method::DrlThresholded => Controller::Agent {
            actor: policy.ok_or_else(missing)?.actor,
            mode: PolicyMode::DeterministicThresholded { threshold_mw },
        },
        Method::Baseline => Controller::Baseline(shed),
        Method::None => Controller::Uncontrolled,
    };
    let mut normalizer = match policy {
        Some(p) => p.normalizer.clone(),
        None => Normalizer::new(net.observation_len()),
    };
    // Deterministic controllers never draw; the generator only satisfies the signature.
    let mut rng = seeding::stream(0, seeding::POLICY_SAMPLING, scenario.id);
    run_episode(net, scenario, controller, &mut normalizer, &EpisodeOptions::default(), &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub scenarios: usize,
    pub mean_reward: f64,
    pub mean_curtailment_mw: f64,
    pub stabilized: usize,
    pub unstable: usize,
    pub stabilization_rate: f64,
}

impl MethodMetrics {
    pub fn from_traces(method: Method, traces: &[EpisodeTrace]) -> Self {
        let n = traces.len();
        let unstable = traces.iter().filter(|t| t.crashed).count();
        let mean = |f: &dyn Fn(&EpisodeTrace) -> f64| {
            if n == 0 {
                0.0
            } else {
                traces.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            method,
            scenarios: n,
            mean_reward: mean(&|t| t.total_reward),
            mean_curtailment_mw: mean(&|t| t.curtailed_mw),
            stabilized: n - unstable,
            unstable,
            stabilization_rate: if n == 0 { 0.0 } else { (n - unstable) as f64 / n as f64 },
        }
    }
}

/// `(other − reference)/|reference|` in percent.
pub fn relative_difference_pct(other: f64, reference: f64) -> f64 {
    (other - reference) / reference.abs() * 100.0
}

/// Percent differences of a method relative to the unthresholded policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeDifference {
    pub method: Method,
    pub reward_pct: f64,
    pub curtailment_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub set: String,
    pub methods: Vec<MethodMetrics>,
    /// Baseline and thresholded policy relative to `drl`, when present.
    pub relative_to_drl: Vec<RelativeDifference>,
}

impl SetReport {
    pub fn metrics(&self, method: Method) -> Option<&MethodMetrics> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn relative(&self, method: Method) -> Option<&RelativeDifference> {
        self.relative_to_drl.iter().find(|r| r.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub checkpoint_episodes: Option<u64>,
    pub sets: Vec<SetReport>,
}

impl MetricsReport {
    pub fn set(&self, name: &str) -> Option<&SetReport> {
        self.sets.iter().find(|s| s.set == name)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serializes")
    }

    /// One row per (set, method).
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "set,method,scenarios,mean_reward,mean_curtailment_mw,stabilized,unstable,stabilization_rate,reward_rel_drl_pct,curtailment_rel_drl_pct"
        )?;
        for s in &self.sets {
            for m in &s.methods {
                let (r, c) = match s.relative(m.method) {
                    Some(d) => (d.reward_pct.to_string(), d.curtailment_pct.to_string()),
                    None => (String::new(), String::new()),
                };
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{}",
                    s.set,
                    m.method.name(),
                    m.scenarios,
                    m.mean_reward,
                    m.mean_curtailment_mw,
                    m.stabilized,
                    m.unstable,
                    m.stabilization_rate,
                    r,
                    c
                )?;
            }
        }
        Ok(())
    }
}

/// Traces of one test set, indexed `[method][scenario]` in `methods` order.
#[derive(Debug, Clone)]
pub struct SetTraces {
    pub set: String,
    pub methods: Vec<Method>,
    pub traces: Vec<Vec<EpisodeTrace>>,
}

/// Runs every (scenario × method), scenarios in parallel, and assembles the
/// report in set/method/scenario order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    net: &Network,
    sets: &[TestSet],
    methods: &[Method],
    policy: Option<Policy<'_>>,
    threshold_mw: f64,
    shed: &ShedConfig,
    config_hash: &str,
    checkpoint_episodes: Option<u64>,
) -> Result<(MetricsReport, Vec<SetTraces>)> {
    if let Some(p) = policy {
        let want = 2 * net.observation_len();
        if p.actor.input_dim() != want || p.normalizer.dim() != net.observation_len() {
            return Err(Error::Dimension {
                expected: want,
                actual: p.actor.input_dim(),
            });
        }
    }
    if methods.iter().any(|m| m.needs_policy()) && policy.is_none() {
        return Err(Error::Config("policy methods selected without a checkpoint".into()));
    }
    let mut report = MetricsReport {
        config_hash: config_hash.to_string(),
        checkpoint_episodes,
        sets: Vec::new(),
    };
    let mut all = Vec::new();
    for set in sets {
        let mut per_method = Vec::new();
        let mut metrics = Vec::new();
        for &method in methods {
            let traces = set
                .scenarios
                .par_iter()
                .map(|sc| run_method(net, sc, method, policy, threshold_mw, shed))
                .collect::<Result<Vec<_>>>()?;
            metrics.push(MethodMetrics::from_traces(method, &traces));
            per_method.push(traces);
        }
        let drl = metrics.iter().find(|m| m.method == Method::Drl).cloned();
        let relative_to_drl = match drl {
            Some(d) => metrics
                .iter()
                .filter(|m| matches!(m.method, Method::Baseline | Method::DrlThresholded))
                .map(|m| RelativeDifference {
                    method: m.method,
                    reward_pct: relative_difference_pct(m.mean_reward, d.mean_reward),
                    curtailment_pct: relative_difference_pct(m.mean_curtailment_mw, d.mean_curtailment_mw),
                })
                .collect(),
            None => Vec::new(),
        };
        report.sets.push(SetReport {
            set: set.name.clone(),
            methods: metrics,
            relative_to_drl,
        });
        all.push(SetTraces {
            set: set.name.clone(),
            methods: methods.to_vec(),
            traces: per_method,
        });
    }
    Ok((report, all))
}

pub fn trace_path(out: &Path, set: &str, method: Method, scenario: u64) -> PathBuf {
    out.join(TRACE_DIR)
        .join(set)
        .join(format!("{scenario:03}_{}.jsonl", method.name()))
}

/// Loads a policy checkpoint; a missing file is a configuration error.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint<Normalizer>> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path)
}

/// Loads, evaluates and writes metrics and traces under `cfg.out_dir`.
pub fn run_evaluation(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    testsets: &Path,
) -> Result<(MetricsReport, Vec<PathBuf>)> {
    let net = cfg.validate()?;
    let sets = load_test_sets(testsets)?;
    let ckpt = match checkpoint {
        Some(path) => Some(load_checkpoint(path)?),
        None if cfg.methods.iter().any(|m| m.needs_policy()) => Some(load_checkpoint(&cfg.out_dir.join(CHECKPOINT_FILE))?),
        None => None,
    };
    let policy = ckpt.as_ref().map(|c| Policy {
        actor: &c.actor,
        normalizer: &c.normalizer,
    });
    let (report, traces) = evaluate(
        &net,
        &sets,
        &cfg.methods,
        policy,
        cfg.threshold_mw,
        &cfg.shed,
        &cfg.hash(),
        ckpt.as_ref().map(|c| c.episodes_done),
    )?;
    let out = &cfg.out_dir;
    let mut files = vec![PathBuf::from(METRICS_JSON_FILE), PathBuf::from(METRICS_CSV_FILE)];
    write_file(&out.join(METRICS_JSON_FILE), report.to_json_pretty().as_bytes())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(|e| Error::io(out.join(METRICS_CSV_FILE), e))?;
    write_file(&out.join(METRICS_CSV_FILE), &csv)?;
    for st in &traces {
        for (mi, method) in st.methods.iter().enumerate() {
            for trace in &st.traces[mi] {
                let path = trace_path(out, &st.set, *method, trace.scenario_id);
                let mut buf = Vec::new();
                trace.write_jsonl(&mut buf)?;
                write_file(&path, &buf)?;
                files.push(path.strip_prefix(out).expect("under out").to_path_buf());
            }
        }
    }
    Manifest::record(out, "evaluate", &cfg.hash(), &files)?;
    Ok((report, files))
}

/// Reads a JSONL trace written by `evaluate`.
pub fn load_trace(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| parse_err(&path.display().to_string(), e)))
        .collect()
}

/// Transmission bus with the lowest base-case voltage: the bus whose
/// voltage the figures follow.
pub fn monitored_bus(net: &Network) -> Result<u32> {
    let oc = crate::sim::OperatingCondition::uniform(net, 1.0);
    let state = crate::sim::SimulationState::init(net, &oc)?;
    net.transmission_positions()
        .into_iter()
        .min_by(|&a, &b| state.last_solution.v_mag[a].total_cmp(&state.last_solution.v_mag[b]))
        .map(|p| net.buses[p].id)
        .ok_or_else(|| Error::Validation("network has no transmission buses".into()))
}

/// Series sharing a time column; shorter series leave trailing cells empty.
fn write_aligned_csv<W: Write>(mut w: W, header: &[String], columns: &[Vec<(f64, f64)>]) -> std::io::Result<()> {
    writeln!(w, "time_s,{}", header.join(","))?;
    let rows = columns.iter().map(Vec::len).max().unwrap_or(0);
    let time_of = |k: usize| columns.iter().find_map(|c| c.get(k).map(|p| p.0));
    for k in 0..rows {
        let cells: Vec<String> = columns
            .iter()
            .map(|c| c.get(k).map(|p| p.1.to_string()).unwrap_or_default())
            .collect();
        writeln!(w, "{},{}", time_of(k).unwrap_or(f64::NAN), cells.join(","))?;
    }
    Ok(())
}

/// Voltage-vs-time CSV: one time column and one column per method.
pub fn voltage_csv(net: &Network, bus: u32, traces: &[(Method, Vec<StepRecord>)]) -> Result<Vec<u8>> {
    let pos = net
        .bus_position(bus)
        .ok_or_else(|| Error::Config(format!("unknown bus {bus}")))?;
    let header: Vec<String> = traces.iter().map(|(m, _)| m.name().to_string()).collect();
    let columns: Vec<Vec<(f64, f64)>> = traces
        .iter()
        .map(|(_, steps)| steps.iter().map(|s| (s.time_s, s.bus_v[pos])).collect())
        .collect();
    let mut buf = Vec::new();
    write_aligned_csv(&mut buf, &header, &columns).map_err(|e| Error::io("<voltage csv>", e))?;
    Ok(buf)
}

/// Load-vs-time CSV: one column per (method, curtailment bus).
pub fn load_csv(net: &Network, traces: &[(Method, Vec<StepRecord>)]) -> Result<Vec<u8>> {
    let mut header = Vec::new();
    let mut columns = Vec::new();
    for (m, steps) in traces {
        for (k, bus) in net.curtailment_buses.iter().enumerate() {
            header.push(format!("{}_bus_{bus}", m.name()));
            columns.push(steps.iter().map(|s| (s.time_s, s.load_mw[k])).collect());
        }
    }
    let mut buf = Vec::new();
    write_aligned_csv(&mut buf, &header, &columns).map_err(|e| Error::io("<load csv>", e))?;
    Ok(buf)
}

/// Training curves: per-episode reward and crash flag with their moving
/// averages.
pub fn training_curves_csv(log_csv: &str) -> Result<Vec<u8>> {
    let mut lines = log_csv.lines();
    let header = lines.next().unwrap_or_default();
    let cols: Vec<&str> = header.split(',').collect();
    let idx = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| parse_err("training log", format!("missing column {name}")))
    };
    let pick = [
        idx("episode")?,
        idx("total_reward")?,
        idx("crashed")?,
        idx(&format!("ma{MOVING_AVERAGE_WINDOW}_reward"))?,
        idx(&format!("ma{MOVING_AVERAGE_WINDOW}_crash"))?,
    ];
    let mut out = Vec::new();
    let names: Vec<&str> = pick.iter().map(|&i| cols[i]).collect();
    writeln!(out, "{}", names.join(",")).expect("vec write");
    for line in lines.filter(|l| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(parse_err("training log", format!("malformed row {line:?}")));
        }
        let row: Vec<&str> = pick.iter().map(|&i| cells[i]).collect();
        writeln!(out, "{}", row.join(",")).expect("vec write");
    }
    Ok(out)
}

/// Writes the figure CSVs for one scenario of one set (and the training
/// curves, when the log exists) under `cfg.out_dir/plots`.
pub fn export_plots(cfg: &ExperimentConfig, set: &str, scenario: u64) -> Result<Vec<PathBuf>> {
    let net = cfg.network.load()?;
    let out = &cfg.out_dir;
    let mut traces = Vec::new();
    for method in Method::ALL {
        let path = trace_path(out, set, method, scenario);
        if path.exists() {
            traces.push((method, load_trace(&path)?));
        }
    }
    if traces.is_empty() {
        return Err(Error::Config(format!(
            "no traces for {set} scenario {scenario} under {}",
            out.join(TRACE_DIR).display()
        )));
    }
    let bus = monitored_bus(&net)?;
    let plots = Path::new(PLOT_DIR);
    let mut files = Vec::new();
    let v = plots.join(format!("voltage_{set}_{scenario:03}.csv"));
    write_file(&out.join(&v), &voltage_csv(&net, bus, &traces)?)?;
    files.push(v);
    let l = plots.join(format!("load_{set}_{scenario:03}.csv"));
    write_file(&out.join(&l), &load_csv(&net, &traces)?)?;
    files.push(l);
    let log = out.join(TRAINING_LOG_FILE);
    if log.exists() {
        let text = std::fs::read_to_string(&log).map_err(|e| Error::io(&log, e))?;
        let t = plots.join("training_curves.csv");
        write_file(&out.join(&t), &training_curves_csv(&text)?)?;
        files.push(t);
    }
    Manifest::record(out, "export-plots", &cfg.hash(), &files)?;
    Ok(files)
}
