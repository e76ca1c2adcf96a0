//! Experiment orchestration: configuration, evaluation runs, success@N curves,
//! scaling studies, metrics tables and plot output.
//!
//! Every stage is a pure function of `(config, seed)`: evaluation scenes,
//! baseline draws and training batches all come from derived seed streams, and
//! scene results are sorted by id before they are tallied.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::dataset::{generate_dataset, generate_objects, read_dataset, split_indices, write_dataset, Dataset, DatasetError, SceneRecord};
use crate::model::{init_params, ArchConfig, ModelError, ModelParams};
use crate::nn::Real;
use crate::objectgen::GenParams;
use crate::planner::{baseline_grasp, plan_grasp, BaselineKind};
use crate::rng::{derive_seed, stream_rng};
use crate::simworld::{apply_depth_noise, evaluate_grasp, DepthImage, Scene, SimConfig};
use crate::training::{
    evaluator_examples, load_checkpoint, save_checkpoint, train_evaluator, train_planner, Checkpoint, OptState, TrainConfig,
    TrainError,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    ArOnly,
    Centroid,
    Random,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Full, Method::ArOnly, Method::Centroid, Method::Random];

    pub fn key(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::ArOnly => "ar_only",
            Method::Centroid => "centroid",
            Method::Random => "random",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Full => "Full Algorithm",
            Method::ArOnly => "Autoregressive-Only",
            Method::Centroid => "Centroid",
            Method::Random => "Random",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.key() == s)
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Method::Full | Method::ArOnly)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    /// Training seeds; results are averaged over them.
    pub seeds: Vec<u64>,
    pub dtype: Dtype,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![1, 2, 3],
            dtype: Dtype::F32,
        }
    }
}

/// Paths are resolved against the `--out` directory unless absolute.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            dataset: "dataset".into(),
            checkpoints: "checkpoints".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    /// Object and scene seed of the dataset; held-out evaluation objects come from
    /// the same generator stream.
    pub seed: u64,
    pub objects: usize,
    pub attempts: usize,
    /// Training-set label; defaults to `random-{objects}`.
    pub name: Option<String>,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            seed: 0,
            objects: 2000,
            attempts: 200,
            name: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub planner_steps: u64,
    pub planner_lr: f64,
    pub planner_batch: usize,
    pub evaluator_steps: u64,
    pub evaluator_lr: f64,
    pub evaluator_batch: usize,
    /// Steps between checkpoints written during training; the final state is always saved.
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            planner_steps: 3000,
            planner_lr: 1e-4,
            planner_batch: 32,
            evaluator_steps: 8000,
            evaluator_lr: 1e-3,
            evaluator_batch: 64,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub scenes: usize,
    /// `heldout` (objects never used for training) and/or `train`.
    pub sets: Vec<String>,
    pub methods: Vec<Method>,
    pub candidates: usize,
    pub beam_width: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 300,
            sets: vec!["heldout".into()],
            methods: Method::ALL.to_vec(),
            candidates: 20,
            beam_width: 20,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingSection {
    pub counts: Vec<usize>,
}

impl Default for ScalingSection {
    fn default() -> Self {
        Self {
            counts: vec![100, 500, 2000],
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub paths: PathsSection,
    pub generate: GenerateSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub scaling: ScalingSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.experiment.seeds.is_empty() {
            return bad("experiment.seeds must not be empty");
        }
        if self.generate.objects == 0 || self.generate.attempts == 0 {
            return bad("generate.objects and generate.attempts must be positive");
        }
        if self.eval.sets.is_empty() || self.eval.methods.is_empty() {
            return bad("eval.sets and eval.methods must not be empty");
        }
        for s in &self.eval.sets {
            if s != "heldout" && s != "train" {
                return Err(HarnessError::Config(format!("unknown eval set {s:?} (expected heldout or train)")));
            }
        }
        if self.eval.candidates == 0 || self.eval.candidates > self.eval.beam_width {
            return bad("eval.candidates must be in 1..=eval.beam_width");
        }
        if self.scaling.counts.is_empty() {
            return bad("scaling.counts must not be empty");
        }
        Ok(())
    }

    /// Replaces the generator seed and the training seed list with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.generate.seed = seed;
        self.experiment.seeds = vec![seed];
        self
    }

    pub fn train_set_name(&self) -> String {
        self.generate.name.clone().unwrap_or_else(|| format!("random-{}", self.generate.objects))
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            candidates: self.eval.candidates,
            beam_width: self.eval.beam_width,
        }
    }

    pub fn planner_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.train.planner_lr,
            batch_size: self.train.planner_batch,
            steps: self.train.planner_steps,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn evaluator_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.train.evaluator_lr,
            batch_size: self.train.evaluator_batch,
            steps: self.train.evaluator_steps,
            seed,
            ..TrainConfig::default()
        }
    }
}

fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

/// Network shapes matching the simulator's cameras and grasp space.
pub fn arch_for(sim: &SimConfig) -> ArchConfig {
    ArchConfig {
        grasp: sim.grasp,
        scene_resolution: sim.scene_resolution,
        hand_resolution: sim.hand_resolution,
        ..ArchConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone)]
pub struct EvalScene {
    pub id: String,
    pub scene: Scene,
    /// Noised scene-camera observations given to the planner.
    pub observations: Vec<DepthImage>,
}

#[derive(Debug, Clone)]
pub struct EvalSet {
    pub name: String,
    pub scenes: Vec<EvalScene>,
}

/// `n_scenes` objects from the held-out (or training) side of the split of
/// generator seed `data_seed`, each placed once at a random yaw.
pub fn build_eval_set(
    name: &str,
    held_out: bool,
    data_seed: u64,
    n_scenes: usize,
    eval_seed: u64,
    gen: &GenParams,
    sim: &SimConfig,
) -> Result<EvalSet, HarnessError> {
    if n_scenes == 0 {
        return Err(HarnessError::Config("evaluation needs at least one scene".into()));
    }
    let indices = split_indices(data_seed, n_scenes, held_out);
    let objects = generate_objects(data_seed, &indices, gen)?;
    let base = derive_seed(eval_seed, &format!("eval-scenes-{name}"));
    let mut scenes: Vec<EvalScene> = objects
        .par_iter()
        .enumerate()
        .map(|(k, obj)| {
            let mut rng = stream_rng(base, k as u64);
            let scene = Scene::place(obj, rng.random_range(0.0..2.0 * PI));
            let obs = apply_depth_noise(&sim.render_scene(&scene), &sim.noise, &mut rng);
            EvalScene {
                id: format!("{}-eval", obj.id),
                scene,
                observations: vec![obs],
            }
        })
        .collect();
    scenes.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(EvalSet {
        name: name.to_string(),
        scenes,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub candidates: usize,
    pub beam_width: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            candidates: 20,
            beam_width: 20,
        }
    }
}

/// Oracle outcomes of one scene under each requested method.
#[derive(Debug, Clone)]
pub struct SceneResult {
    pub id: String,
    pub success: BTreeMap<Method, bool>,
    /// 1-based rank of the first oracle-successful beam candidate.
    pub first_success_rank: Option<usize>,
}

/// Tallies of one seed's evaluation over a scene set.
#[derive(Debug, Clone)]
pub struct SeedEvaluation {
    pub seed: u64,
    pub scenes: usize,
    pub successes: BTreeMap<Method, usize>,
    /// `hits[j-1]` = scenes with an oracle success among beam ranks `1..=j`.
    pub hits: Vec<usize>,
}

impl SeedEvaluation {
    pub fn rate(&self, m: Method) -> Option<f64> {
        self.successes.get(&m).map(|&s| s as f64 / self.scenes as f64)
    }

    pub fn curve(&self) -> Vec<f64> {
        self.hits.iter().map(|&h| h as f64 / self.scenes as f64).collect()
    }
}

fn evaluate_scene<F: Real>(
    params: Option<&ModelParams<F>>,
    es: &EvalScene,
    index: usize,
    seed: u64,
    methods: &[Method],
    opts: &EvalOptions,
    sim: &SimConfig,
) -> Result<SceneResult, HarnessError> {
    let mut success = BTreeMap::new();
    let mut first_success_rank = None;
    if let Some(params) = params.filter(|_| methods.iter().any(|m| m.needs_model())) {
        let plan = plan_grasp(&es.observations, params, opts.candidates, opts.beam_width, &es.scene, sim)?;
        let outcomes: Vec<bool> = plan
            .candidates
            .iter()
            .map(|c| evaluate_grasp(&es.scene, &c.grasp, sim).success)
            .collect();
        first_success_rank = outcomes.iter().position(|&s| s).map(|i| i + 1);
        for &m in methods {
            match m {
                Method::Full => success.insert(m, outcomes[plan.chosen]),
                Method::ArOnly => success.insert(m, outcomes[0]),
                _ => None,
            };
        }
    }
    for &m in methods {
        let kind = match m {
            Method::Centroid => BaselineKind::Centroid,
            Method::Random => BaselineKind::Random,
            _ => continue,
        };
        let mut rng = stream_rng(derive_seed(seed, &format!("baseline-{}", m.key())), index as u64);
        let g = baseline_grasp(kind, &es.scene, sim, &mut rng);
        success.insert(m, evaluate_grasp(&es.scene, &g, sim).success);
    }
    Ok(SceneResult {
        id: es.id.clone(),
        success,
        first_success_rank,
    })
}

/// Runs every method in `methods` on every scene of `set`. Learned methods need
/// `params`; baselines draw from streams keyed by `seed` and the scene index.
/// Observations are noised, oracle labels use the clean scene geometry.
pub fn evaluate_methods<F: Real>(
    params: Option<&ModelParams<F>>,
    set: &EvalSet,
    seed: u64,
    methods: &[Method],
    opts: &EvalOptions,
    sim: &SimConfig,
) -> Result<SeedEvaluation, HarnessError> {
    if set.scenes.is_empty() {
        return Err(HarnessError::Config(format!("eval set {} has no scenes", set.name)));
    }
    if params.is_none() && methods.iter().any(|m| m.needs_model()) {
        return Err(HarnessError::Config("learned methods need trained parameters".into()));
    }
    let mut results: Vec<SceneResult> = set
        .scenes
        .par_iter()
        .enumerate()
        .map(|(i, es)| evaluate_scene(params, es, i, seed, methods, opts, sim))
        .collect::<Result<_, _>>()?;
    results.sort_by(|a, b| a.id.cmp(&b.id));
    let mut successes: BTreeMap<Method, usize> = methods.iter().map(|&m| (m, 0)).collect();
    let depth = if params.is_some() && methods.iter().any(|m| m.needs_model()) {
        opts.candidates
    } else {
        0
    };
    let mut hits = vec![0usize; depth];
    for r in &results {
        for (m, &ok) in &r.success {
            *successes.get_mut(m).expect("requested method") += ok as usize;
        }
        if let Some(rank) = r.first_success_rank {
            for h in &mut hits[rank - 1..] {
                *h += 1;
            }
        }
    }
    Ok(SeedEvaluation {
        seed,
        scenes: results.len(),
        successes,
        hits,
    })
}

/// Success count of a single method on `set`.
pub fn run_evaluation<F: Real>(
    params: Option<&ModelParams<F>>,
    set: &EvalSet,
    seed: u64,
    method: Method,
    opts: &EvalOptions,
    sim: &SimConfig,
) -> Result<usize, HarnessError> {
    Ok(evaluate_methods(params, set, seed, &[method], opts, sim)?.successes[&method])
}

/// Fraction of scenes with an oracle success among the top `j` beam candidates,
/// for `j = 1..=n`.
pub fn success_at_n<F: Real>(
    params: &ModelParams<F>,
    set: &EvalSet,
    n: usize,
    beam_width: usize,
    sim: &SimConfig,
) -> Result<Vec<f64>, HarnessError> {
    let opts = EvalOptions {
        candidates: n,
        beam_width,
    };
    Ok(evaluate_methods(Some(params), set, 0, &[Method::ArOnly], &opts, sim)?.curve())
}

// ---------------------------------------------------------------------------
// Training

/// Trained parameters with their optimizer states.
pub struct TrainedModel<F> {
    pub params: ModelParams<F>,
    pub planner_opt: OptState<F>,
    pub evaluator_opt: OptState<F>,
}

pub fn init_model<F: Real>(arch: &ArchConfig, seed: u64) -> Result<ModelParams<F>, HarnessError> {
    Ok(init_params(arch, &mut stream_rng(derive_seed(seed, "init"), 0))?)
}

/// Trains planner and evaluator for one seed on `records`.
pub fn train_model<F: Real>(
    records: &[SceneRecord],
    arch: &ArchConfig,
    planner_cfg: &TrainConfig,
    evaluator_cfg: &TrainConfig,
) -> Result<TrainedModel<F>, HarnessError> {
    let mut params = init_model::<F>(arch, planner_cfg.seed)?;
    let mut planner_opt = OptState::new(params.planner.len());
    train_planner(&mut params, &mut planner_opt, records, planner_cfg)?;
    let mut evaluator_opt = OptState::new(params.evaluator.len());
    let examples = evaluator_examples(records);
    train_evaluator(&mut params, &mut evaluator_opt, &examples, evaluator_cfg)?;
    Ok(TrainedModel {
        params,
        planner_opt,
        evaluator_opt,
    })
}

/// One model per (count, seed), trained on the first `count` scene records and
/// evaluated on `set`. Returns the metrics rows and a curve of mean success per
/// count for each learned method.
#[allow(clippy::too_many_arguments)]
pub fn scaling_study<F: Real>(
    records: &[SceneRecord],
    counts: &[usize],
    seeds: &[u64],
    set: &EvalSet,
    cfg: &ExperimentConfig,
    sim: &SimConfig,
) -> Result<(MetricsTable, CurveSet), HarnessError> {
    if let Some(&c) = counts.iter().find(|&&c| c == 0 || c > records.len()) {
        return Err(HarnessError::Config(format!(
            "scaling count {c} outside 1..={} available training objects",
            records.len()
        )));
    }
    let arch = arch_for(sim);
    let methods = [Method::Full, Method::ArOnly];
    let mut table = MetricsTable::default();
    for &count in counts {
        let mut evals = Vec::new();
        for &seed in seeds {
            let model = train_model::<F>(&records[..count], &arch, &cfg.planner_config(seed), &cfg.evaluator_config(seed))?;
            evals.push(evaluate_methods(Some(&model.params), set, seed, &methods, &cfg.eval_options(), sim)?);
            log::info!("scaling count {count} seed {seed} done");
        }
        table.extend_from(&format!("random-{count}"), &set.name, &methods, &evals);
    }
    let curves = CurveSet {
        title: "Success vs. training objects".into(),
        x_label: "training objects".into(),
        y_label: "success rate".into(),
        log_x: true,
        series: methods
            .iter()
            .map(|&m| CurveSeries {
                label: m.label().into(),
                points: counts
                    .iter()
                    .map(|&count| CurvePoint {
                        x: count as f64,
                        per_seed: table
                            .find(&format!("random-{count}"), &set.name, m)
                            .expect("row just added")
                            .per_seed
                            .iter()
                            .map(|s| (s.seed, s.successes as f64 / s.scenes as f64))
                            .collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    Ok((table, curves))
}

// ---------------------------------------------------------------------------
// Metrics tables

#[derive(Debug, Clone, PartialEq)]
pub struct SeedValue {
    pub seed: u64,
    pub scenes: usize,
    pub successes: usize,
}

impl SeedValue {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.scenes as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub train_set: String,
    pub eval_set: String,
    pub method: Method,
    pub per_seed: Vec<SeedValue>,
}

impl MetricsRow {
    /// Mean of the per-seed success rates, accumulated in stored order.
    pub fn mean(&self) -> f64 {
        self.per_seed.iter().map(SeedValue::rate).sum::<f64>() / self.per_seed.len() as f64
    }

    /// Sample standard deviation of the per-seed rates (0 for one seed).
    pub fn std(&self) -> f64 {
        std_dev(&self.per_seed.iter().map(SeedValue::rate).collect::<Vec<_>>())
    }

    pub fn scenes(&self) -> usize {
        self.per_seed.iter().map(|s| s.scenes).sum()
    }
}

fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

const METRICS_HEADER: &str = "train_set,eval_set,method,seed,scenes,successes";

impl MetricsTable {
    pub fn find(&self, train_set: &str, eval_set: &str, method: Method) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.train_set == train_set && r.eval_set == eval_set && r.method == method)
    }

    /// Adds one per-seed value to the row keyed by `(train_set, eval_set, method)`.
    pub fn push(&mut self, train_set: &str, eval_set: &str, method: Method, value: SeedValue) {
        match self
            .rows
            .iter_mut()
            .find(|r| r.train_set == train_set && r.eval_set == eval_set && r.method == method)
        {
            Some(row) => row.per_seed.push(value),
            None => self.rows.push(MetricsRow {
                train_set: train_set.into(),
                eval_set: eval_set.into(),
                method,
                per_seed: vec![value],
            }),
        }
    }

    pub fn extend_from(&mut self, train_set: &str, eval_set: &str, methods: &[Method], evals: &[SeedEvaluation]) {
        for &m in methods {
            for e in evals {
                if let Some(&successes) = e.successes.get(&m) {
                    self.push(
                        train_set,
                        eval_set,
                        m,
                        SeedValue {
                            seed: e.seed,
                            scenes: e.scenes,
                            successes,
                        },
                    );
                }
            }
        }
    }

    /// Long form: one line per (row, seed).
    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            for v in &r.per_seed {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    r.train_set,
                    r.eval_set,
                    r.method.key(),
                    v.seed,
                    v.scenes,
                    v.successes
                );
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(format!("expected header {METRICS_HEADER:?}"));
        }
        let mut table = MetricsTable::default();
        for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || format!("line {}: {line:?}", k + 2);
            if f.len() != 6 {
                return Err(bad());
            }
            let method = Method::parse(f[2]).ok_or_else(bad)?;
            let value = SeedValue {
                seed: f[3].parse().map_err(|_| bad())?,
                scenes: f[4].parse().map_err(|_| bad())?,
                successes: f[5].parse().map_err(|_| bad())?,
            };
            if value.scenes == 0 || value.successes > value.scenes {
                return Err(bad());
            }
            table.push(f[0], f[1], method, value);
        }
        Ok(table)
    }

    /// Aggregated CSV: one line per row with mean, std and per-seed rates.
    pub fn to_summary_csv(&self) -> String {
        let mut s = String::from("train_set,eval_set,method,seeds,scenes_per_seed,success,std,per_seed\n");
        for r in &self.rows {
            let per: Vec<String> = r.per_seed.iter().map(|v| format!("{}:{:.4}", v.seed, v.rate())).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.4},{:.4},{}",
                r.train_set,
                r.eval_set,
                r.method.key(),
                r.per_seed.len(),
                r.per_seed[0].scenes,
                r.mean(),
                r.std(),
                per.join(" ")
            );
        }
        s
    }

    fn ordered<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
        let mut out: Vec<T> = Vec::new();
        for i in items {
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }

    /// Aligned text: a training-set table of the full algorithm, one method table
    /// per training set (eval sets as columns) and a per-seed detail listing.
    pub fn to_text(&self) -> String {
        let trains = Self::ordered(self.rows.iter().map(|r| r.train_set.clone()));
        let evals = Self::ordered(self.rows.iter().map(|r| r.eval_set.clone()));
        let cell = |t: &str, e: &str, m: Method| self.find(t, e, m).map_or("-".to_string(), |r| format!("{:.3}", r.mean()));
        let mut header = vec!["Training set".to_string()];
        header.extend(evals.iter().cloned());
        let mut out = String::new();

        if self.rows.iter().any(|r| r.method == Method::Full) {
            let _ = writeln!(out, "Success rate of the full algorithm by training set");
            let mut rows = vec![header.clone()];
            for t in trains.iter().filter(|t| self.rows.iter().any(|r| &r.train_set == *t && r.method == Method::Full)) {
                let mut row = vec![t.clone()];
                row.extend(evals.iter().map(|e| cell(t, e, Method::Full)));
                rows.push(row);
            }
            out.push_str(&align(&rows));
            out.push('\n');
        }

        for t in &trains {
            let _ = writeln!(out, "Success rate by method (training set {t})");
            let mut hdr = vec!["Method".to_string()];
            hdr.extend(evals.iter().cloned());
            let mut rows = vec![hdr];
            let methods = Self::ordered(self.rows.iter().filter(|r| &r.train_set == t).map(|r| r.method));
            let mut methods = methods;
            methods.sort();
            for m in methods {
                let mut row = vec![m.label().to_string()];
                row.extend(evals.iter().map(|e| cell(t, e, m)));
                rows.push(row);
            }
            out.push_str(&align(&rows));
            out.push('\n');
        }

        let _ = writeln!(out, "Per-seed detail");
        let mut rows = vec![["Training set", "Eval set", "Method", "Scenes", "Mean", "Std", "Per seed"]
            .map(String::from)
            .to_vec()];
        for r in &self.rows {
            let per: Vec<String> = r
                .per_seed
                .iter()
                .map(|v| format!("{}:{}/{}", v.seed, v.successes, v.scenes))
                .collect();
            rows.push(vec![
                r.train_set.clone(),
                r.eval_set.clone(),
                r.method.label().into(),
                r.scenes().to_string(),
                format!("{:.3}", r.mean()),
                format!("{:.3}", r.std()),
                per.join(" "),
            ]);
        }
        out.push_str(&align(&rows));
        out
    }
}

/// Left-aligns the first column, right-aligns the rest, and rules off the header.
fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (k, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if k == 0 {
            let total = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Curves and plots

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub x: f64,
    pub per_seed: Vec<(u64, f64)>,
}

impl CurvePoint {
    pub fn mean(&self) -> f64 {
        self.per_seed.iter().map(|p| p.1).sum::<f64>() / self.per_seed.len() as f64
    }

    pub fn std(&self) -> f64 {
        std_dev(&self.per_seed.iter().map(|p| p.1).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveSeries {
    pub label: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<CurveSeries>,
}

const CURVE_HEADER: &str = "series,x,seed,value";

impl CurveSet {
    pub fn success_at_n(series: Vec<CurveSeries>) -> Self {
        Self {
            title: "Success within the top N beam candidates".into(),
            x_label: "candidates tried (N)".into(),
            y_label: "fraction of scenes".into(),
            log_x: false,
            series,
        }
    }

    /// Long form CSV, one line per (series, x, seed).
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CURVE_HEADER}\n");
        for ser in &self.series {
            for p in &ser.points {
                for (seed, v) in &p.per_seed {
                    let _ = writeln!(s, "{},{},{},{:?}", ser.label, p.x, seed, v);
                }
            }
        }
        s
    }

    /// Rebuilds the series of a CSV written by `to_csv`; titles come from `template`.
    pub fn from_csv(text: &str, template: CurveSet) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(CURVE_HEADER) {
            return Err(format!("expected header {CURVE_HEADER:?}"));
        }
        let mut set = CurveSet {
            series: Vec::new(),
            ..template
        };
        for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || format!("line {}: {line:?}", k + 2);
            if f.len() != 4 {
                return Err(bad());
            }
            let x: f64 = f[1].parse().map_err(|_| bad())?;
            let seed: u64 = f[2].parse().map_err(|_| bad())?;
            let v: f64 = f[3].parse().map_err(|_| bad())?;
            let ser = match set.series.iter().position(|s| s.label == f[0]) {
                Some(i) => &mut set.series[i],
                None => {
                    set.series.push(CurveSeries {
                        label: f[0].into(),
                        points: Vec::new(),
                    });
                    set.series.last_mut().expect("just pushed")
                }
            };
            match ser.points.iter_mut().find(|p| p.x == x) {
                Some(p) => p.per_seed.push((seed, v)),
                None => ser.points.push(CurvePoint { x, per_seed: vec![(seed, v)] }),
            }
        }
        Ok(set)
    }

    /// Aligned text listing of means and seed standard deviations.
    pub fn to_text(&self) -> String {
        let mut rows = vec![vec![self.x_label.clone()]];
        rows[0].extend(self.series.iter().map(|s| s.label.clone()));
        let mut xs: Vec<f64> = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.x)).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        for x in xs {
            let mut row = vec![fmt_x(x)];
            for s in &self.series {
                row.push(
                    s.points
                        .iter()
                        .find(|p| p.x == x)
                        .map_or("-".into(), |p| format!("{:.3} ± {:.3}", p.mean(), p.std())),
                );
            }
            rows.push(row);
        }
        format!("{}\n{}", self.title, align(&rows))
    }

    /// Line plot of per-point means with ±1 seed-std error bars; y spans [0, 1].
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 420.0;
        const L: f64 = 70.0;
        const R: f64 = 170.0;
        const T: f64 = 40.0;
        const B: f64 = 60.0;
        let xs: Vec<f64> = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.x)).collect();
        let tx = |x: f64| if self.log_x { x.max(1e-12).log10() } else { x };
        let (mut lo, mut hi) = xs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(tx(x)), b.max(tx(x))));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let px = |x: f64| L + (tx(x) - lo) / (hi - lo) * (W - L - R);
        let py = |y: f64| T + (1.0 - y.clamp(0.0, 1.0)) * (H - T - B);
        let colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            (L + W - R) / 2.0,
            xml_escape(&self.title)
        );
        // Axes, grid and ticks.
        let _ = writeln!(
            s,
            r#"<path d="M{L:.1},{T:.1} V{:.1} H{:.1}" fill="none" stroke="black"/>"#,
            H - B,
            W - R
        );
        for k in 0..=5 {
            let y = k as f64 / 5.0;
            let _ = writeln!(
                s,
                r##"<line x1="{L:.1}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#dddddd"/><text x="{2:.1}" y="{3:.1}" text-anchor="end">{y:.1}</text>"##,
                py(y),
                W - R,
                L - 6.0,
                py(y) + 4.0
            );
        }
        let mut ticks: Vec<f64> = xs.clone();
        ticks.sort_by(f64::total_cmp);
        ticks.dedup();
        if ticks.len() > 10 {
            let step = ticks.len().div_ceil(10);
            let last = *ticks.last().expect("nonempty");
            ticks = ticks.into_iter().step_by(step).collect();
            if ticks.last() != Some(&last) {
                ticks.push(last);
            }
        }
        for x in ticks {
            let _ = writeln!(
                s,
                r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="black"/><text x="{0:.1}" y="{3:.1}" text-anchor="middle">{4}</text>"#,
                px(x),
                H - B,
                H - B + 5.0,
                H - B + 18.0,
                fmt_x(x)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (L + W - R) / 2.0,
            H - 18.0,
            xml_escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{0:.1}" text-anchor="middle" transform="rotate(-90 18 {0:.1})">{1}</text>"#,
            (T + H - B) / 2.0,
            xml_escape(&self.y_label)
        );
        // Series.
        for (i, ser) in self.series.iter().enumerate() {
            let c = colors[i % colors.len()];
            let mut pts: Vec<&CurvePoint> = ser.points.iter().collect();
            pts.sort_by(|a, b| a.x.total_cmp(&b.x));
            let path: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", px(p.x), py(p.mean()))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, path.join(" "));
            for p in pts {
                let (m, d) = (p.mean(), p.std());
                if d > 0.0 {
                    let _ = writeln!(
                        s,
                        r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="{c}"/>"#,
                        px(p.x),
                        py(m - d),
                        py(m + d)
                    );
                }
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, px(p.x), py(m));
            }
            let ly = T + 10.0 + 18.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{0:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="{c}" stroke-width="2"/><text x="{3:.1}" y="{4:.1}">{5}</text>"#,
                W - R + 12.0,
                ly,
                W - R + 32.0,
                W - R + 38.0,
                ly + 4.0,
                xml_escape(&ser.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn fmt_x(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        format!("{x}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

// ---------------------------------------------------------------------------
// CLI stages

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUCCESS_CURVE_FILE: &str = "success_curve.csv";
pub const SCALING_FILE: &str = "scaling.csv";
pub const SCALING_METRICS_FILE: &str = "scaling_metrics.csv";
pub const REPORT_DIR: &str = "report";

pub fn dataset_dir(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    resolve(out, &cfg.paths.dataset)
}

pub fn planner_checkpoint(cfg: &ExperimentConfig, out: &Path, seed: u64) -> PathBuf {
    resolve(out, &cfg.paths.checkpoints).join(format!("planner-seed{seed}.gfck"))
}

pub fn evaluator_checkpoint(cfg: &ExperimentConfig, out: &Path, seed: u64) -> PathBuf {
    resolve(out, &cfg.paths.checkpoints).join(format!("evaluator-seed{seed}.gfck"))
}

fn require_exists(path: &Path, what: &str) -> Result<(), HarnessError> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn load_training_data(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset, HarnessError> {
    let dir = dataset_dir(cfg, out);
    require_exists(&dir.join("manifest.txt"), "dataset manifest")?;
    Ok(read_dataset(&dir)?)
}

/// Generates the training dataset and writes it to the configured path.
pub fn stage_generate(cfg: &ExperimentConfig, out: &Path, sim: &SimConfig) -> Result<PathBuf, HarnessError> {
    let g = &cfg.generate;
    let ds = generate_dataset(&cfg.train_set_name(), g.seed, g.objects, false, g.attempts, &GenParams::default(), sim)?;
    let dir = dataset_dir(cfg, out);
    write_dataset(&ds, &dir)?;
    Ok(dir)
}

fn log_path(out: &Path, name: &str) -> PathBuf {
    out.join("logs").join(name)
}

/// Trains one planner per seed and saves `planner-seed{seed}.gfck`.
pub fn stage_train_planner<F: Real>(cfg: &ExperimentConfig, out: &Path, sim: &SimConfig) -> Result<Vec<PathBuf>, HarnessError> {
    let ds = load_training_data(cfg, out)?;
    let arch = arch_for(sim);
    let mut written = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let path = planner_checkpoint(cfg, out, seed);
        fs::create_dir_all(path.parent().expect("file path")).map_err(io_err(&path))?;
        fs::create_dir_all(out.join("logs")).map_err(io_err(out))?;
        let mut tc = cfg.planner_config(seed);
        tc.metrics_log = Some(log_path(out, &format!("planner-seed{seed}.log")));
        if cfg.train.checkpoint_every > 0 {
            tc.checkpoint_every = cfg.train.checkpoint_every;
            tc.checkpoint_path = Some(path.clone());
        }
        let mut params = init_model::<F>(&arch, seed)?;
        let mut opt = OptState::new(params.planner.len());
        let hist = train_planner(&mut params, &mut opt, &ds.records, &tc)?;
        log::info!(
            "planner seed {seed}: {} steps in {:.1}s, final loss {:.4}",
            opt.t,
            hist.wall_time,
            hist.smoothed(100).last().copied().unwrap_or(f64::NAN)
        );
        save_checkpoint(
            &Checkpoint {
                params,
                planner_opt: Some(opt.clone()),
                evaluator_opt: None,
                seed,
                step: opt.t,
            },
            &path,
        )?;
        written.push(path);
    }
    Ok(written)
}

/// Trains one evaluator per seed and saves `evaluator-seed{seed}.gfck`.
pub fn stage_train_evaluator<F: Real>(cfg: &ExperimentConfig, out: &Path, sim: &SimConfig) -> Result<Vec<PathBuf>, HarnessError> {
    let ds = load_training_data(cfg, out)?;
    let examples = evaluator_examples(&ds.records);
    let arch = arch_for(sim);
    let mut written = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let path = evaluator_checkpoint(cfg, out, seed);
        fs::create_dir_all(path.parent().expect("file path")).map_err(io_err(&path))?;
        fs::create_dir_all(out.join("logs")).map_err(io_err(out))?;
        let mut tc = cfg.evaluator_config(seed);
        tc.metrics_log = Some(log_path(out, &format!("evaluator-seed{seed}.log")));
        if cfg.train.checkpoint_every > 0 {
            tc.checkpoint_every = cfg.train.checkpoint_every;
            tc.checkpoint_path = Some(path.clone());
        }
        let mut params = init_model::<F>(&arch, seed)?;
        let mut opt = OptState::new(params.evaluator.len());
        let hist = train_evaluator(&mut params, &mut opt, &examples, &tc)?;
        log::info!(
            "evaluator seed {seed}: {} steps in {:.1}s, held-out accuracy {:.3}",
            opt.t,
            hist.wall_time,
            hist.metric("heldout_accuracy").unwrap_or(f64::NAN)
        );
        save_checkpoint(
            &Checkpoint {
                params,
                planner_opt: None,
                evaluator_opt: Some(opt.clone()),
                seed,
                step: opt.t,
            },
            &path,
        )?;
        written.push(path);
    }
    Ok(written)
}

/// Combines the planner and evaluator checkpoints of `seed`.
pub fn load_model<F: Real>(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<ModelParams<F>, HarnessError> {
    let pp = planner_checkpoint(cfg, out, seed);
    let ep = evaluator_checkpoint(cfg, out, seed);
    require_exists(&pp, "planner checkpoint")?;
    require_exists(&ep, "evaluator checkpoint")?;
    let mut params = load_checkpoint::<F>(&pp)?.params;
    let evaluator = load_checkpoint::<F>(&ep)?.params;
    if evaluator.arch != params.arch {
        return Err(HarnessError::Config(format!(
            "{} and {} were trained with different architectures",
            pp.display(),
            ep.display()
        )));
    }
    params.evaluator = evaluator.evaluator;
    Ok(params)
}

fn eval_sets(cfg: &ExperimentConfig, sim: &SimConfig) -> Result<Vec<EvalSet>, HarnessError> {
    cfg.eval
        .sets
        .iter()
        .map(|name| {
            build_eval_set(
                name,
                name == "heldout",
                cfg.generate.seed,
                cfg.eval.scenes,
                cfg.eval.seed,
                &GenParams::default(),
                sim,
            )
        })
        .collect()
}

/// Evaluates every configured method for every seed and writes `metrics.csv`.
pub fn stage_eval<F: Real>(cfg: &ExperimentConfig, out: &Path, sim: &SimConfig) -> Result<MetricsTable, HarnessError> {
    let learned = cfg.eval.methods.iter().any(|m| m.needs_model());
    let models: Vec<(u64, Option<ModelParams<F>>)> = cfg
        .experiment
        .seeds
        .iter()
        .map(|&seed| Ok((seed, if learned { Some(load_model::<F>(cfg, out, seed)?) } else { None })))
        .collect::<Result<_, HarnessError>>()?;
    let sets = eval_sets(cfg, sim)?;
    let mut table = MetricsTable::default();
    for set in &sets {
        let evals: Vec<SeedEvaluation> = models
            .iter()
            .map(|(seed, p)| evaluate_methods(p.as_ref(), set, *seed, &cfg.eval.methods, &cfg.eval_options(), sim))
            .collect::<Result<_, _>>()?;
        table.extend_from(&cfg.train_set_name(), &set.name, &cfg.eval.methods, &evals);
    }
    write_file(&out.join(METRICS_FILE), &table.to_csv())?;
    Ok(table)
}

/// Success@N curve per eval set and seed; writes `success_curve.csv`.
pub fn stage_success_curve<F: Real>(cfg: &ExperimentConfig, out: &Path, sim: &SimConfig) -> Result<CurveSet, HarnessError> {
    let models: Vec<(u64, ModelParams<F>)> = cfg
        .experiment
        .seeds
        .iter()
        .map(|&seed| Ok((seed, load_model::<F>(cfg, out, seed)?)))
        .collect::<Result<_, HarnessError>>()?;
    let sets = eval_sets(cfg, sim)?;
    let mut series = Vec::new();
    for set in &sets {
        let mut points: Vec<CurvePoint> = (1..=cfg.eval.candidates)
            .map(|j| CurvePoint {
                x: j as f64,
                per_seed: Vec::new(),
            })
            .collect();
        for (seed, params) in &models {
            let curve = success_at_n(params, set, cfg.eval.candidates, cfg.eval.beam_width, sim)?;
            for (p, v) in points.iter_mut().zip(curve) {
                p.per_seed.push((*seed, v));
            }
        }
        series.push(CurveSeries {
            label: set.name.clone(),
            points,
        });
    }
    let curves = CurveSet::success_at_n(series);
    write_file(&out.join(SUCCESS_CURVE_FILE), &curves.to_csv())?;
    Ok(curves)
}

/// Trains on object-count subsets of the dataset and evaluates on the held-out set.
pub fn stage_scaling<F: Real>(cfg: &ExperimentConfig, out: &Path, sim: &SimConfig) -> Result<(MetricsTable, CurveSet), HarnessError> {
    let ds = load_training_data(cfg, out)?;
    let set = build_eval_set(
        "heldout",
        true,
        cfg.generate.seed,
        cfg.eval.scenes,
        cfg.eval.seed,
        &GenParams::default(),
        sim,
    )?;
    let (table, curves) = scaling_study::<F>(&ds.records, &cfg.scaling.counts, &cfg.experiment.seeds, &set, cfg, sim)?;
    write_file(&out.join(SCALING_METRICS_FILE), &table.to_csv())?;
    write_file(&out.join(SCALING_FILE), &curves.to_csv())?;
    Ok((table, curves))
}

fn scaling_template() -> CurveSet {
    CurveSet {
        title: "Success vs. training objects".into(),
        x_label: "training objects".into(),
        y_label: "success rate".into(),
        log_x: true,
        series: Vec::new(),
    }
}

/// Renders every stored table and curve under `out` into `out/report`.
pub fn stage_report(out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let report = out.join(REPORT_DIR);
    let mut written = Vec::new();
    let read = |name: &str| -> Result<Option<(PathBuf, String)>, HarnessError> {
        let p = out.join(name);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        Ok(Some((p, text)))
    };
    let fmt_err = |p: PathBuf| move |msg: String| HarnessError::Format { path: p, msg };
    for (name, stem) in [(METRICS_FILE, "tables"), (SCALING_METRICS_FILE, "scaling_tables")] {
        if let Some((p, text)) = read(name)? {
            let table = MetricsTable::from_csv(&text).map_err(fmt_err(p))?;
            for (path, body) in [
                (report.join(format!("{stem}.txt")), table.to_text()),
                (report.join(format!("{stem}.csv")), table.to_summary_csv()),
            ] {
                write_file(&path, &body)?;
                written.push(path);
            }
        }
    }
    for (name, stem, template) in [
        (SUCCESS_CURVE_FILE, "success_curve", CurveSet::success_at_n(Vec::new())),
        (SCALING_FILE, "scaling", scaling_template()),
    ] {
        if let Some((p, text)) = read(name)? {
            let curves = CurveSet::from_csv(&text, template).map_err(fmt_err(p))?;
            for (path, body) in [
                (report.join(format!("{stem}.svg")), curves.to_svg()),
                (report.join(format!("{stem}.txt")), curves.to_text()),
            ] {
                write_file(&path, &body)?;
                written.push(path);
            }
        }
    }
    if written.is_empty() {
        return Err(HarnessError::Config(format!(
            "no stored tables or curves under {}",
            out.display()
        )));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_parse() {
        let mut desk = ExperimentConfig::from_toml(include_str!("../../../configs/desk.toml")).unwrap();
        desk.experiment.name = ExperimentSection::default().name;
        desk.eval.sets.retain(|s| s == "heldout");
        assert_eq!(format!("{desk:?}"), format!("{:?}", ExperimentConfig::default()));
        ExperimentConfig::from_toml(include_str!("../../../configs/smoke.toml")).unwrap();
    }

    fn row(method: Method, seeds: &[(u64, usize)]) -> Vec<(Method, SeedValue)> {
        seeds
            .iter()
            .map(|&(seed, successes)| {
                (
                    method,
                    SeedValue {
                        seed,
                        scenes: 300,
                        successes,
                    },
                )
            })
            .collect()
    }

    fn sample_table() -> MetricsTable {
        let mut t = MetricsTable::default();
        for (m, v) in [
            row(Method::Full, &[(1, 140), (2, 133), (3, 150)]),
            row(Method::Random, &[(1, 27), (2, 30), (3, 25)]),
        ]
        .concat()
        {
            t.push("random-2000", "heldout", m, v);
        }
        t
    }

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg.experiment.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.eval.scenes, 300);
        assert_eq!(cfg.eval.beam_width, 20);
        let cfg = ExperimentConfig::from_toml(
            "[experiment]\nseeds = [4]\ndtype = \"f64\"\n[eval]\nmethods = [\"full\", \"ar_only\"]\nscenes = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.experiment.dtype, Dtype::F64);
        assert_eq!(cfg.eval.methods, vec![Method::Full, Method::ArOnly]);
        assert!(ExperimentConfig::from_toml("[experiment]\nseeds = []\n").is_err());
        assert!(ExperimentConfig::from_toml("[eval]\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[eval]\ncandidates = 30\n").is_err());
        assert_eq!(cfg.with_seed(9).generate.seed, 9);
    }

    #[test]
    fn table_means_are_exact_seed_means() {
        let t = sample_table();
        let full = t.find("random-2000", "heldout", Method::Full).unwrap();
        let rates: Vec<f64> = [140.0, 133.0, 150.0].iter().map(|s| s / 300.0).collect();
        assert_eq!(full.mean(), (rates[0] + rates[1] + rates[2]) / 3.0);
        assert_eq!(full.scenes(), 900);
        assert!(full.std() > 0.0);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let t = sample_table();
        assert_eq!(MetricsTable::from_csv(&t.to_csv()).unwrap(), t);
        assert!(MetricsTable::from_csv("nope\n").is_err());
        assert!(MetricsTable::from_csv(&format!("{METRICS_HEADER}\na,b,full,1,10,11\n")).is_err());
    }

    #[test]
    fn text_table_lists_methods_in_order() {
        let text = sample_table().to_text();
        let full = text.find("Full Algorithm").unwrap();
        let random = text.rfind("Random").unwrap();
        assert!(full < random);
        assert!(text.contains("0.470"));
    }

    #[test]
    fn curve_csv_round_trip_and_svg() {
        let set = CurveSet::success_at_n(vec![CurveSeries {
            label: "heldout".into(),
            points: (1..=3)
                .map(|j| CurvePoint {
                    x: j as f64,
                    per_seed: vec![(1, 0.1 * j as f64), (2, 0.15 * j as f64)],
                })
                .collect(),
        }]);
        let back = CurveSet::from_csv(&set.to_csv(), CurveSet::success_at_n(Vec::new())).unwrap();
        assert_eq!(back, set);
        let svg = set.to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 3);
    }

    #[test]
    fn zero_scenes_is_an_error() {
        let r = build_eval_set("heldout", true, 0, 0, 0, &GenParams::default(), &SimConfig::default());
        assert!(matches!(r, Err(HarnessError::Config(_))));
        let empty = EvalSet {
            name: "x".into(),
            scenes: Vec::new(),
        };
        let r = evaluate_methods::<f32>(None, &empty, 0, &[Method::Random], &EvalOptions::default(), &SimConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn baselines_are_deterministic_and_need_no_model() {
        let sim = SimConfig::default();
        let set = build_eval_set("heldout", true, 3, 12, 0, &GenParams::default(), &sim).unwrap();
        let methods = [Method::Centroid, Method::Random];
        let a = evaluate_methods::<f32>(None, &set, 5, &methods, &EvalOptions::default(), &sim).unwrap();
        let b = evaluate_methods::<f32>(None, &set, 5, &methods, &EvalOptions::default(), &sim).unwrap();
        assert_eq!(a.successes, b.successes);
        assert!(a.hits.is_empty());
        assert!(evaluate_methods::<f32>(None, &set, 5, &[Method::Full], &EvalOptions::default(), &sim).is_err());
        assert!(set.scenes.iter().all(|s| crate::dataset::is_held_out(s.id.trim_end_matches("-eval"))));
    }

    proptest::proptest! {
        #[test]
        fn table_arithmetic(seeds in proptest::collection::vec((1usize..400, 0.0f64..=1.0), 1..6)) {
            let mut t = MetricsTable::default();
            for (k, &(scenes, frac)) in seeds.iter().enumerate() {
                let successes = (scenes as f64 * frac).floor() as usize;
                t.push("a", "b", Method::Full, SeedValue { seed: k as u64, scenes, successes });
            }
            let back = MetricsTable::from_csv(&t.to_csv()).unwrap();
            proptest::prop_assert_eq!(&back, &t);
            let row = &back.rows[0];
            let rates: Vec<f64> = row.per_seed.iter().map(|v| v.successes as f64 / v.scenes as f64).collect();
            proptest::prop_assert_eq!(row.mean(), rates.iter().sum::<f64>() / rates.len() as f64);
            proptest::prop_assert!(row.per_seed.iter().all(|v| v.rate() >= 0.0 && v.rate() <= 1.0));
        }
    }
}
