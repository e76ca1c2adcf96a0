//! Masked stacked-batch likelihood training for the planner, binary training for
//! the evaluator, Adam, and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::dataset::{batch_from_eligible, DatasetError, SceneRecord, StackedBatch};
use crate::graspspace::GraspSpec;
use crate::model::{sigmoid, ArchConfig, ConvLayerSpec, ModelError, ModelParams, PlannerNet};
use crate::nn::{log_softmax_rows, Activation, Layout, Real};
use crate::rng::{derive_seed, stream_rng};
use crate::simworld::DepthImage;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite gradient at step {step}")]
    NonFinite { step: u64 },
    #[error("training diverged at step {step}: loss {loss} exceeds 10x the initial {initial}")]
    Diverged { step: u64, loss: f64, initial: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Scenes per planner batch, examples per evaluator batch.
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            steps: 20_000,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
            metrics_log: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("steps and batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(TrainError::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: u64,
}

impl<F: Real> OptState<F> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
    /// `(step, metric name, value)` evaluations.
    pub evals: Vec<(u64, String, f64)>,
    pub wall_time: f64,
}

impl TrainHistory {
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        self.losses
            .windows(window.min(self.losses.len()).max(1))
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect()
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.evals.iter().rev().find(|e| e.1 == name).map(|e| e.2)
    }
}

/// One row per real grasp: scene index and loss weight `-1 / (b·m_i)`.
fn real_rows<F: Real>(batch: &StackedBatch) -> (Vec<usize>, Vec<(usize, usize)>, Vec<F>) {
    let b = batch.len() as f64;
    let mut scene_of_row = Vec::new();
    let mut index = Vec::new();
    let mut weights = Vec::new();
    for i in 0..batch.len() {
        for j in 0..batch.m {
            if batch.is_real(i, j) {
                scene_of_row.push(i);
                index.push((i, j));
                weights.push(F::of(-1.0 / (b * batch.counts[i] as f64)));
            }
        }
    }
    (scene_of_row, index, weights)
}

fn check_batch(batch: &StackedBatch) -> Result<(), TrainError> {
    if batch.is_empty() || batch.mask.iter().all(|&v| v == 0) {
        return Err(DatasetError::EmptyBatch.into());
    }
    Ok(())
}

/// Loss and, optionally, its gradient for rows sharing one encoder pass.
fn stacked_pass<F: Real>(
    net: &PlannerNet,
    p: &[F],
    observations: &[&[DepthImage]],
    scene_of_row: &[usize],
    grasps: &[&[u8]],
    weights: &[F],
    grad: Option<&mut [F]>,
) -> Result<F, TrainError> {
    let (emb, enc_cache) = net.encode_batch(p, observations)?;
    let mut loss = F::zero();
    let mut ds = Array2::<F>::zeros(emb.raw_dim());
    let mut grad = grad;
    for head in 0..net.heads.len() {
        let prefixes: Vec<u8> = grasps.iter().flat_map(|g| g[..head].iter().copied()).collect();
        let (logits, cache) = net.head_forward(p, head, &emb, scene_of_row, &prefixes)?;
        let lp = log_softmax_rows(&logits);
        for (r, g) in grasps.iter().enumerate() {
            loss += weights[r] * lp[[r, g[head] as usize]];
        }
        if let Some(grad) = grad.as_deref_mut() {
            let mut d = lp.mapv(|v| v.exp());
            for (r, (mut row, g)) in d.rows_mut().into_iter().zip(grasps).enumerate() {
                row[g[head] as usize] -= F::one();
                // d/dlogit of w·log p[g] is w·(onehot - softmax).
                row.mapv_inplace(|v| -v * weights[r]);
            }
            net.head_backward(p, grad, &emb, &cache, d, &mut ds);
        }
    }
    if let Some(grad) = grad {
        net.encoder_backward(p, grad, &enc_cache, ds);
    }
    Ok(loss)
}

/// `-(1/b) Σ_i (1/m_i) Σ_j mask_ij · log p(g_ij | I_i)`.
pub fn nll_loss<F: Real>(params: &ModelParams<F>, batch: &StackedBatch) -> Result<f64, TrainError> {
    check_batch(batch)?;
    let (scene_of_row, index, weights) = real_rows::<F>(batch);
    let grasps: Vec<&[u8]> = index.iter().map(|&(i, j)| batch.grasp(i, j)).collect();
    let loss = stacked_pass(&params.planner_net, &params.planner, &batch.observations, &scene_of_row, &grasps, &weights, None)?;
    Ok(loss.f64())
}

/// Gradient with one encoder forward/backward per scene shared by all its grasps.
pub fn nll_gradient_stacked<F: Real>(params: &ModelParams<F>, batch: &StackedBatch) -> Result<(f64, Vec<F>), TrainError> {
    check_batch(batch)?;
    let (scene_of_row, index, weights) = real_rows::<F>(batch);
    let grasps: Vec<&[u8]> = index.iter().map(|&(i, j)| batch.grasp(i, j)).collect();
    let mut grad = vec![F::zero(); params.planner.len()];
    let loss = stacked_pass(
        &params.planner_net,
        &params.planner,
        &batch.observations,
        &scene_of_row,
        &grasps,
        &weights,
        Some(&mut grad),
    )?;
    Ok((loss.f64(), grad))
}

/// Reference gradient with a separate encoder pass for every grasp.
pub fn nll_gradient_naive<F: Real>(params: &ModelParams<F>, batch: &StackedBatch) -> Result<(f64, Vec<F>), TrainError> {
    check_batch(batch)?;
    let (_, index, weights) = real_rows::<F>(batch);
    let mut grad = vec![F::zero(); params.planner.len()];
    let mut loss = F::zero();
    for (&(i, j), &w) in index.iter().zip(&weights) {
        loss += stacked_pass(
            &params.planner_net,
            &params.planner,
            &[batch.observations[i]],
            &[0],
            &[batch.grasp(i, j)],
            &[w],
            Some(&mut grad),
        )?;
    }
    Ok((loss.f64(), grad))
}

/// Bias-corrected Adam update; rejects non-finite gradients before touching state.
pub fn adam_step<F: Real>(params: &mut [F], grad: &[F], opt: &mut OptState<F>, cfg: &TrainConfig) -> Result<(), TrainError> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite { step: opt.t + 1 });
    }
    opt.t += 1;
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let c1 = F::of(1.0 - cfg.beta1.powi(opt.t as i32));
    let c2 = F::of(1.0 - cfg.beta2.powi(opt.t as i32));
    let (lr, eps) = (F::of(cfg.lr), F::of(cfg.eps));
    for k in 0..params.len() {
        let g = grad[k];
        opt.m[k] = b1 * opt.m[k] + (F::one() - b1) * g;
        opt.v[k] = b2 * opt.v[k] + (F::one() - b2) * g * g;
        let m_hat = opt.m[k] / c1;
        let v_hat = opt.v[k] / c2;
        params[k] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

struct MetricsLog {
    file: Option<(PathBuf, fs::File)>,
    start: Instant,
}

impl MetricsLog {
    fn open(path: Option<&PathBuf>, resume: bool) -> Result<Self, TrainError> {
        let file = match path {
            Some(p) => {
                let f = fs::OpenOptions::new()
                    .create(true)
                    .append(resume)
                    .write(true)
                    .truncate(!resume)
                    .open(p)
                    .map_err(|source| TrainError::Io { path: p.clone(), source })?;
                Some((p.clone(), f))
            }
            None => None,
        };
        Ok(Self {
            file,
            start: Instant::now(),
        })
    }

    fn record(&mut self, step: u64, loss: f64) -> Result<(), TrainError> {
        if let Some((path, f)) = &mut self.file {
            writeln!(f, "{step} {loss:.6} {:.3}", self.start.elapsed().as_secs_f64())
                .map_err(|source| TrainError::Io { path: path.clone(), source })?;
        }
        Ok(())
    }
}

struct DivergenceGuard {
    initial: Option<f64>,
}

impl DivergenceGuard {
    fn check(&mut self, step: u64, loss: f64) -> Result<(), TrainError> {
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        let initial = *self.initial.get_or_insert(loss);
        if initial > 0.0 && loss > 10.0 * initial {
            return Err(TrainError::Diverged { step, loss, initial });
        }
        Ok(())
    }
}

/// Trains the planner from `opt.t` up to `cfg.steps`. Batches depend only on
/// `(cfg.seed, step)`, so an interrupted run resumed from a checkpoint follows the
/// same trajectory.
pub fn train_planner<F: Real>(
    params: &mut ModelParams<F>,
    opt: &mut OptState<F>,
    records: &[SceneRecord],
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    let eligible: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.success_count() > 0)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(DatasetError::EmptyBatch.into());
    }
    let batch_size = cfg.batch_size.min(eligible.len());
    let base = derive_seed(cfg.seed, "planner-batches");
    let mut log = MetricsLog::open(cfg.metrics_log.as_ref(), opt.t > 0)?;
    let mut guard = DivergenceGuard { initial: None };
    let mut history = TrainHistory::default();
    let start = Instant::now();
    while opt.t < cfg.steps {
        let step = opt.t;
        let mut rng = stream_rng(base, step);
        let batch = batch_from_eligible(records, &eligible, batch_size, &mut rng)?;
        let (loss, grad) = nll_gradient_stacked(params, &batch)?;
        guard.check(step + 1, loss)?;
        adam_step(&mut params.planner, &grad, opt, cfg)?;
        history.losses.push(loss);
        log.record(opt.t, loss)?;
        maybe_checkpoint(params, Some(&*opt), None, cfg, opt.t)?;
    }
    history.wall_time = start.elapsed().as_secs_f64();
    Ok(history)
}

fn maybe_checkpoint<F: Real>(
    params: &ModelParams<F>,
    planner_opt: Option<&OptState<F>>,
    evaluator_opt: Option<&OptState<F>>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(), TrainError> {
    let Some(path) = &cfg.checkpoint_path else {
        return Ok(());
    };
    if cfg.checkpoint_every == 0 || (step % cfg.checkpoint_every != 0 && step != cfg.steps) {
        return Ok(());
    }
    save_checkpoint(
        &Checkpoint {
            params: params.clone(),
            planner_opt: planner_opt.cloned(),
            evaluator_opt: evaluator_opt.cloned(),
            seed: cfg.seed,
            step,
        },
        path,
    )
}

/// Labeled hand images from every non-rejected attempt.
pub fn evaluator_examples(records: &[SceneRecord]) -> Vec<(&DepthImage, bool)> {
    records
        .iter()
        .flat_map(|r| r.attempts.iter())
        .filter_map(|a| a.hand.as_ref().map(|h| (h, a.label)))
        .collect()
}

/// Mean binary cross-entropy with logits and its gradient.
fn bce<F: Real>(logits: &[F], labels: &[bool]) -> (f64, Vec<F>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut d = Vec::with_capacity(logits.len());
    for (&l, &y) in logits.iter().zip(labels) {
        let x = l.f64();
        let t = if y { 1.0 } else { 0.0 };
        // softplus(x) - t·x, computed stably.
        loss += x.max(0.0) + (-x.abs()).exp().ln_1p() - t * x;
        d.push(F::of((sigmoid(x) - t) / n));
    }
    (loss / n, d)
}

pub fn evaluator_accuracy<F: Real>(params: &ModelParams<F>, examples: &[(&DepthImage, bool)]) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(256) {
        let imgs: Vec<&DepthImage> = chunk.iter().map(|e| e.0).collect();
        let scores = params.evaluate_scores(&imgs)?;
        correct += scores.iter().zip(chunk).filter(|(s, e)| (**s >= 0.5) == e.1).count();
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Splits labeled images into (train, held-out) with a seeded shuffle; 10% held out.
pub fn split_examples<'a>(examples: &[(&'a DepthImage, bool)], seed: u64) -> (Vec<(&'a DepthImage, bool)>, Vec<(&'a DepthImage, bool)>) {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut stream_rng(derive_seed(seed, "evaluator-split"), 0));
    let held = examples.len() / 10;
    let pick = |ix: &[usize]| ix.iter().map(|&i| examples[i]).collect::<Vec<_>>();
    (pick(&order[held..]), pick(&order[..held]))
}

/// Binary cross-entropy training of the evaluator on hand images; records the
/// held-out accuracy as metric `heldout_accuracy`.
pub fn train_evaluator<F: Real>(
    params: &mut ModelParams<F>,
    opt: &mut OptState<F>,
    examples: &[(&DepthImage, bool)],
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    let (train, held) = split_examples(examples, cfg.seed);
    if train.is_empty() {
        return Err(TrainError::Config("no hand images to train the evaluator on".into()));
    }
    let positives = train.iter().filter(|e| e.1).count();
    if positives == 0 || positives == train.len() {
        log::warn!("evaluator training set contains a single class ({positives}/{} positive)", train.len());
    }
    let base = derive_seed(cfg.seed, "evaluator-batches");
    let mut log = MetricsLog::open(cfg.metrics_log.as_ref(), opt.t > 0)?;
    let mut guard = DivergenceGuard { initial: None };
    let mut history = TrainHistory::default();
    let start = Instant::now();
    let batch = cfg.batch_size.min(train.len());
    while opt.t < cfg.steps {
        let step = opt.t;
        let mut rng = stream_rng(base, step);
        let picked: Vec<usize> = rand::seq::index::sample(&mut rng, train.len(), batch).into_vec();
        let imgs: Vec<&DepthImage> = picked.iter().map(|&i| train[i].0).collect();
        let labels: Vec<bool> = picked.iter().map(|&i| train[i].1).collect();
        let (logits, cache) = params.evaluator_net.forward(&params.evaluator, &imgs)?;
        let (loss, dlogits) = bce(&logits, &labels);
        guard.check(step + 1, loss)?;
        let mut grad = vec![F::zero(); params.evaluator.len()];
        params.evaluator_net.backward(&params.evaluator, &mut grad, &cache, &dlogits);
        adam_step(&mut params.evaluator, &grad, opt, cfg)?;
        history.losses.push(loss);
        log.record(opt.t, loss)?;
        maybe_checkpoint(params, None, Some(&*opt), cfg, opt.t)?;
    }
    history.wall_time = start.elapsed().as_secs_f64();
    let acc = evaluator_accuracy(params, &held)?;
    history.evals.push((opt.t, "heldout_accuracy".into(), acc));
    Ok(history)
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &[u8; 4] = b"GFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub params: ModelParams<F>,
    pub planner_opt: Option<OptState<F>>,
    pub evaluator_opt: Option<OptState<F>>,
    pub seed: u64,
    pub step: u64,
}

fn convs_text(convs: &[ConvLayerSpec]) -> String {
    convs
        .iter()
        .map(|c| format!("{}x{}s{}", c.channels, c.kernel, c.stride))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_convs(text: &str) -> Option<Vec<ConvLayerSpec>> {
    if text.is_empty() {
        return Some(Vec::new());
    }
    text.split(',')
        .map(|t| {
            let (ch, rest) = t.split_once('x')?;
            let (k, s) = rest.split_once('s')?;
            Some(ConvLayerSpec {
                channels: ch.parse().ok()?,
                kernel: k.parse().ok()?,
                stride: s.parse().ok()?,
            })
        })
        .collect()
}

fn widths_text(w: &[usize]) -> String {
    w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_widths(text: &str) -> Option<Vec<usize>> {
    if text.is_empty() {
        return Some(Vec::new());
    }
    text.split(',').map(|v| v.parse().ok()).collect()
}

/// `key=value` lines describing an architecture.
pub fn arch_to_text(arch: &ArchConfig) -> String {
    [
        format!("grasp.dims={}", arch.grasp.n()),
        format!("grasp.buckets={}", arch.grasp.buckets()),
        format!("scene_views={}", arch.scene_views),
        format!("scene_resolution={}", arch.scene_resolution),
        format!("hand_resolution={}", arch.hand_resolution),
        format!("encoder_convs={}", convs_text(&arch.encoder_convs)),
        format!("encoder_dense={}", widths_text(&arch.encoder_dense)),
        format!("head_hidden={}", widths_text(&arch.head_hidden)),
        format!("evaluator_convs={}", convs_text(&arch.evaluator_convs)),
        format!("evaluator_hidden={}", widths_text(&arch.evaluator_hidden)),
        format!("activation={}", arch.activation.name()),
        format!("scene_depth_offset={:?}", arch.scene_depth_offset),
        format!("hand_depth_offset={:?}", arch.hand_depth_offset),
        format!("depth_scale={:?}", arch.depth_scale),
    ]
    .join("\n")
}

pub fn arch_from_map(kv: &BTreeMap<String, String>) -> Result<ArchConfig, String> {
    let get = |k: &str| kv.get(k).cloned().ok_or_else(|| format!("missing key {k}"));
    let num = |k: &str| -> Result<usize, String> { get(k)?.parse().map_err(|_| format!("bad value for {k}")) };
    let real = |k: &str| -> Result<f64, String> { get(k)?.parse().map_err(|_| format!("bad value for {k}")) };
    let convs = |k: &str| parse_convs(&get(k)?).ok_or_else(|| format!("bad value for {k}"));
    let widths = |k: &str| parse_widths(&get(k)?).ok_or_else(|| format!("bad value for {k}"));
    let arch = ArchConfig {
        grasp: GraspSpec::new(num("grasp.dims")?, num("grasp.buckets")?).map_err(|e| e.to_string())?,
        scene_views: num("scene_views")?,
        scene_resolution: num("scene_resolution")?,
        hand_resolution: num("hand_resolution")?,
        encoder_convs: convs("encoder_convs")?,
        encoder_dense: widths("encoder_dense")?,
        head_hidden: widths("head_hidden")?,
        evaluator_convs: convs("evaluator_convs")?,
        evaluator_hidden: widths("evaluator_hidden")?,
        activation: Activation::parse(&get("activation")?).ok_or("bad activation")?,
        scene_depth_offset: real("scene_depth_offset")?,
        hand_depth_offset: real("hand_depth_offset")?,
        depth_scale: real("depth_scale")?,
    };
    arch.validate().map_err(|e| e.to_string())?;
    Ok(arch)
}

fn put_tensor<F: Real>(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[F]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(F::DTYPE);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

fn put_layout<F: Real>(out: &mut Vec<u8>, prefix: &str, layout: &Layout, data: &[F]) {
    for t in &layout.tensors {
        put_tensor(out, &format!("{prefix}{}", t.name), &t.shape, &data[t.offset..t.offset + t.len()]);
    }
}

pub fn encode_checkpoint<F: Real>(ck: &Checkpoint<F>) -> Vec<u8> {
    let mut manifest = arch_to_text(&ck.params.arch);
    manifest.push_str(&format!(
        "\nseed={}\nstep={}\ndtype={}\n",
        ck.seed,
        ck.step,
        if F::DTYPE == 1 { "f32" } else { "f64" }
    ));
    for (name, opt) in [("planner", &ck.planner_opt), ("evaluator", &ck.evaluator_opt)] {
        if let Some(o) = opt {
            manifest.push_str(&format!("opt.{name}.t={}\n", o.t));
        }
    }
    let mut tensors = Vec::new();
    let mut count = 0u32;
    let p = &ck.params;
    put_layout(&mut tensors, "", &p.planner_net.layout, &p.planner);
    put_layout(&mut tensors, "", &p.evaluator_net.layout, &p.evaluator);
    count += (p.planner_net.layout.tensors.len() + p.evaluator_net.layout.tensors.len()) as u32;
    for (name, opt) in [("planner", &ck.planner_opt), ("evaluator", &ck.evaluator_opt)] {
        if let Some(o) = opt {
            put_tensor(&mut tensors, &format!("adam_m.{name}"), &[o.m.len()], &o.m);
            put_tensor(&mut tensors, &format!("adam_v.{name}"), &[o.v.len()], &o.v);
            count += 2;
        }
    }
    let mut out = Vec::with_capacity(tensors.len() + manifest.len() + 20);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&tensors);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint<F: Real>(ck: &Checkpoint<F>, path: &Path) -> Result<(), TrainError> {
    let bytes = encode_checkpoint(ck);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|source| TrainError::Io { path: tmp.clone(), source })?;
    fs::rename(&tmp, path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>, TrainError> {
    let bytes = fs::read(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes).map_err(|msg| TrainError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn decode_checkpoint<F: Real>(bytes: &[u8]) -> Result<Checkpoint<F>, String> {
    if bytes.len() < 16 {
        return Err("truncated file".into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], String> {
        if pos + n > body.len() {
            return Err("truncated file".into());
        }
        pos += n;
        Ok(&body[pos - n..pos])
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_of(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(format!("version {version}, expected {CHECKPOINT_VERSION}"));
    }
    let mlen = u32_of(take(4)?) as usize;
    let manifest = std::str::from_utf8(take(mlen)?).map_err(|_| "manifest is not UTF-8")?;
    let kv: BTreeMap<String, String> = manifest
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let dtype = kv.get("dtype").map(String::as_str).unwrap_or("");
    let expected = if F::DTYPE == 1 { "f32" } else { "f64" };
    if dtype != expected {
        return Err(format!("stored dtype {dtype}, requested {expected}"));
    }
    let arch = arch_from_map(&kv)?;
    let count = u32_of(take(4)?) as usize;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<F>)> = BTreeMap::new();
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(nlen)?.to_vec()).map_err(|_| "tensor name is not UTF-8")?;
        let code = take(1)?[0];
        if code != F::DTYPE {
            return Err(format!("tensor {name} has dtype code {code}"));
        }
        let ndim = take(1)?[0] as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| take(4).map(|b| u32_of(b) as usize)).collect::<Result<_, _>>()?;
        let len: usize = dims.iter().product();
        let raw = take(len.checked_mul(F::BYTES).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
        tensors.insert(name, (dims, data));
    }
    if pos != body.len() {
        return Err("trailing bytes".into());
    }
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err("checksum mismatch".into());
    }
    let mut params = ModelParams::<F>::zeros(&arch).map_err(|e| e.to_string())?;
    let mut fill = |layout: &Layout, dst: &mut Vec<F>| -> Result<(), String> {
        for t in &layout.tensors {
            let (dims, data) = tensors.remove(&t.name).ok_or_else(|| format!("missing tensor {}", t.name))?;
            if dims != t.shape {
                return Err(format!("tensor {} has shape {dims:?}, expected {:?}", t.name, t.shape));
            }
            dst[t.offset..t.offset + t.len()].copy_from_slice(&data);
        }
        Ok(())
    };
    let (pl, el) = (params.planner_net.layout.clone(), params.evaluator_net.layout.clone());
    fill(&pl, &mut params.planner)?;
    fill(&el, &mut params.evaluator)?;
    let mut opt_of = |name: &str, len: usize| -> Result<Option<OptState<F>>, String> {
        let m = tensors.remove(&format!("adam_m.{name}"));
        let v = tensors.remove(&format!("adam_v.{name}"));
        match (m, v) {
            (Some((_, m)), Some((_, v))) if m.len() == len && v.len() == len => {
                let t = kv
                    .get(&format!("opt.{name}.t"))
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| format!("missing opt.{name}.t"))?;
                Ok(Some(OptState { m, v, t }))
            }
            (None, None) => Ok(None),
            _ => Err(format!("inconsistent optimizer state for {name}")),
        }
    };
    let planner_opt = opt_of("planner", params.planner.len())?;
    let evaluator_opt = opt_of("evaluator", params.evaluator.len())?;
    if let Some(extra) = tensors.keys().next() {
        return Err(format!("unexpected tensor {extra}"));
    }
    let num = |k: &str| kv.get(k).and_then(|v| v.parse::<u64>().ok()).ok_or_else(|| format!("missing {k}"));
    Ok(Checkpoint {
        params,
        planner_opt,
        evaluator_opt,
        seed: num("seed")?,
        step: num("step")?,
    })
}
