//! SGD over (scene, view) samples.
//!
//! Each step draws a batch of samples, augments every scene, predicts
//! per-Gaussian semantics, blends them into the sample view and sums the
//! three alignment terms. Per-sample gradients are computed in parallel and
//! reduced in batch order, so a run is a pure function of its seed, data and
//! configuration regardless of thread count.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{
    grad_check_many, AutodiffError, Checkpoint, CheckpointError, GradCheckOptions, GradCheckReport, Graph,
    SparseRowMap, Tensor, Var,
};
use crate::ccl::{
    cosine_graph, cross_entropy_graph, total_loss, CclError, ClassSubset, DecoderParams, DecoderVars, LossBreakdown,
    LossConfig,
};
use crate::data::{Dataset, Split};
use crate::gsr::{forward, AttentionMode, GsrConfig, GsrError, GsrParams, ParamVars, PointMapping, PreparedScene};
use crate::raster::{render, Channels, RasterConfig, RasterError};
use crate::scene::{
    augment, AugmentConfig, Camera, DenseTargetMap, Gaussian, GaussianScene, LabelVocabulary, SceneError,
    SEMANTIC_DIM,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("manifest has no training scene with cameras")]
    EmptyManifest,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Gsr(#[from] GsrError),
    #[error(transparent)]
    Ccl(#[from] CclError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many updates even if epochs remain.
    pub max_steps: Option<usize>,
    /// Heavy-ball coefficient; 0 is plain SGD.
    pub momentum: f64,
    pub seed: u64,
    /// Write `checkpoint-NNNNNN.sck` every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Include the dense cosine term when a sample has a target map.
    pub cosine: bool,
    /// Class names withheld from every training softmax.
    pub unseen: Vec<String>,
    pub gsr: GsrConfig,
    pub raster: RasterConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            batch_size: 3,
            epochs: 300,
            max_steps: None,
            momentum: 0.0,
            seed: 0,
            checkpoint_every: 0,
            cosine: true,
            unseen: Vec::new(),
            gsr: GsrConfig::default(),
            raster: RasterConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |s: &str| Err(TrainError::InvalidConfig(s.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.loss.temperature > 0.0 && self.loss.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        let (lo, hi) = self.augment.scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("augmentation scale range must satisfy 0 < lo <= hi");
        }
        self.gsr.validate()?;
        Ok(())
    }

    /// The vocabulary with this run's unseen classes marked.
    pub fn vocabulary(&self, vocab: &LabelVocabulary) -> Result<LabelVocabulary, TrainError> {
        let mut v = vocab.clone();
        let missing = v.set_unseen(&self.unseen);
        if !missing.is_empty() {
            return Err(TrainError::InvalidConfig(format!("unknown unseen classes {missing:?}")));
        }
        if v.seen_classes().is_empty() {
            return Err(TrainError::InvalidConfig("every class is unseen".into()));
        }
        Ok(v)
    }
}

/// SplitMix64 finalizer folded over `parts`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(seed), |h, &p| mix(h.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ p))
}

const TAG_INIT_GSR: u64 = 1;
const TAG_INIT_DECODER: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_VIEW: u64 = 4;
const TAG_AUGMENT: u64 = 5;

/// All trainable tensors: the semantic network and both decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub gsr: GsrParams,
    pub decoder: DecoderParams,
}

impl Model {
    pub fn init(cfg: &GsrConfig, embedding_dim: usize, seed: u64) -> Result<Self, TrainError> {
        Ok(Self {
            gsr: GsrParams::init(cfg, derive_seed(seed, &[TAG_INIT_GSR]))?,
            decoder: DecoderParams::init(embedding_dim, derive_seed(seed, &[TAG_INIT_DECODER])),
        })
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        self.gsr.iter().chain(self.decoder.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut Tensor)> {
        self.gsr.iter_mut().chain(self.decoder.iter_mut())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, TrainError> {
        let mut ck = Checkpoint::new();
        self.gsr.to_checkpoint(&mut ck)?;
        self.decoder.to_checkpoint(&mut ck)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &GsrConfig, embedding_dim: usize) -> Result<Self, TrainError> {
        Ok(Self {
            gsr: GsrParams::from_checkpoint(ck, cfg)?,
            decoder: DecoderParams::from_checkpoint(ck, embedding_dim)?,
        })
    }

    pub fn load(path: &Path, cfg: &GsrConfig, embedding_dim: usize) -> Result<Self, TrainError> {
        Self::from_checkpoint(&Checkpoint::load(path)?, cfg, embedding_dim)
    }
}

/// Geometry-only products of rendering one view; they do not depend on the
/// network, so they are computed once per (scene, camera).
#[derive(Debug, Clone)]
pub struct ViewCache {
    pub contrib: Arc<SparseRowMap>,
    pub labels: Arc<Vec<u16>>,
    pub alpha: Arc<Vec<f64>>,
}

impl ViewCache {
    pub fn new(scene: &GaussianScene, cam: &Camera, cfg: &RasterConfig) -> Result<Self, TrainError> {
        let channels = Channels {
            label: true,
            contrib: true,
            ..Channels::default()
        };
        let out = render(scene, cam, channels, cfg)?;
        Ok(Self {
            contrib: out.contrib.ok_or(RasterError::ContribNotRetained)?,
            labels: Arc::new(out.label_map.ok_or(RasterError::MissingLabels)?),
            alpha: Arc::new(out.alpha),
        })
    }
}

/// A scene paired with one of its views.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: Arc<GaussianScene>,
    pub camera: Camera,
    pub target: Option<Arc<DenseTargetMap>>,
    pub view: Arc<ViewCache>,
    /// Seeds this sample's augmentation.
    pub augment_seed: u64,
}

impl Sample {
    pub fn new(
        scene: Arc<GaussianScene>,
        camera: Camera,
        target: Option<Arc<DenseTargetMap>>,
        raster: &RasterConfig,
        augment_seed: u64,
    ) -> Result<Self, TrainError> {
        if let Some(t) = &target {
            t.check_camera(&camera)?;
        }
        let view = Arc::new(ViewCache::new(&scene, &camera, raster)?);
        Ok(Self {
            scene,
            camera,
            target,
            view,
            augment_seed,
        })
    }
}

/// Scene-side inputs of one objective evaluation.
pub struct ObjectiveInputs<'a> {
    pub prepared: &'a PreparedScene,
    pub labels: &'a [u16],
    pub view: &'a ViewCache,
    pub target: Option<&'a DenseTargetMap>,
}

/// Builds the summed objective for one sample. A cross-entropy term with no
/// usable label contributes 0, as does the cosine term without a target.
#[allow(clippy::too_many_arguments)]
pub fn objective_graph(
    g: &mut Graph,
    gv: &ParamVars,
    dv: &DecoderVars,
    inputs: &ObjectiveInputs<'_>,
    vocab: &LabelVocabulary,
    subset: &ClassSubset,
    gsr: &GsrConfig,
    loss: &LossConfig,
) -> Result<(Var, LossBreakdown), TrainError> {
    let s = forward(g, gv, inputs.prepared, gsr)?;
    let optional = |r: Result<(Var, usize), CclError>| match r {
        Ok(v) => Ok(Some(v)),
        Err(CclError::NoValidTargets) => Ok(None),
        Err(e) => Err(e),
    };
    let l3 = optional(cross_entropy_graph(g, dv, s, inputs.labels, vocab, subset, loss))?;
    let m = g.row_map(s, inputs.view.contrib.clone())?;
    let l2 = optional(cross_entropy_graph(g, dv, m, &inputs.view.labels, vocab, subset, loss))?;
    let lc = match inputs.target {
        Some(t) => Some(cosine_graph(g, dv, m, t, loss)?),
        None => None,
    };
    let value = |g: &Graph, t: Option<(Var, usize)>| t.map_or((0.0, 0), |(v, n)| (g.value(v).item(), n));
    let ((a, na), (b, nb), (c, nc)) = (value(g, l3), value(g, l2), value(g, lc));
    let breakdown = total_loss(a, b, c, (na, nb, nc))?;
    let parts: Vec<Var> = [l3, l2, lc].into_iter().flatten().map(|t| t.0).collect();
    let total = match parts.split_first() {
        None => g.constant(Tensor::scalar(0.0)),
        Some((&first, rest)) => {
            let mut acc = first;
            for &p in rest {
                acc = g.add(acc, p)?;
            }
            acc
        }
    };
    Ok((total, breakdown))
}

fn sample_gradients(
    model: &Model,
    sample: &Sample,
    vocab: &LabelVocabulary,
    subset: &ClassSubset,
    cfg: &TrainConfig,
    want_grads: bool,
) -> Result<(LossBreakdown, Vec<Tensor>), TrainError> {
    let scene = augment(&sample.scene, sample.augment_seed, &cfg.augment);
    let prepared = PreparedScene::new(&scene, &cfg.gsr)?;
    let labels = scene.labels();
    let target = if cfg.cosine { sample.target.as_deref() } else { None };
    let inputs = ObjectiveInputs {
        prepared: &prepared,
        labels: &labels,
        view: &sample.view,
        target,
    };
    let mut g = Graph::new();
    let gv = model.gsr.bind(&mut g, want_grads);
    let dv = model.decoder.bind(&mut g, want_grads);
    let (total, breakdown) = objective_graph(&mut g, &gv, &dv, &inputs, vocab, subset, &cfg.gsr, &cfg.loss)?;
    if !want_grads {
        return Ok((breakdown, Vec::new()));
    }
    let vars: Vec<Var> = gv.0.iter().chain(&dv.0).copied().collect();
    let shapes: Vec<Vec<usize>> = vars.iter().map(|&v| g.value(v).shape().to_vec()).collect();
    let mut grads = if g.requires_grad(total) {
        Some(g.backward(total)?)
    } else {
        None
    };
    let out = vars
        .iter()
        .zip(&shapes)
        .map(|(&v, s)| grads.as_mut().and_then(|gr| gr.take(v)).unwrap_or_else(|| Tensor::zeros(s)))
        .collect();
    Ok((breakdown, out))
}

/// Mean of per-sample breakdowns; counts are summed.
fn average(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let mut out = LossBreakdown::default();
    for p in parts {
        out.l_3d_text += p.l_3d_text;
        out.l_2d_text += p.l_2d_text;
        out.l_cosine += p.l_cosine;
        out.total += p.total;
        out.gaussians += p.gaussians;
        out.pixels += p.pixels;
        out.cosine_pixels += p.cosine_pixels;
    }
    out.l_3d_text /= n;
    out.l_2d_text /= n;
    out.l_cosine /= n;
    out.total /= n;
    out
}

fn evaluate_batch(
    model: &Model,
    batch: &[Sample],
    vocab: &LabelVocabulary,
    cfg: &TrainConfig,
    want_grads: bool,
) -> Result<Vec<(LossBreakdown, Vec<Tensor>)>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let subset = ClassSubset::training(vocab);
    batch
        .par_iter()
        .map(|s| sample_gradients(model, s, vocab, &subset, cfg, want_grads))
        .collect()
}

/// Batch-mean loss without updating anything.
pub fn batch_loss(
    model: &Model,
    batch: &[Sample],
    vocab: &LabelVocabulary,
    cfg: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    let parts = evaluate_batch(model, batch, vocab, cfg, false)?;
    Ok(average(&parts.iter().map(|p| p.0).collect::<Vec<_>>()))
}

/// Velocity buffers for momentum SGD, one per model tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Momentum(pub Vec<Tensor>);

/// One SGD update on `batch`. Returns the batch-mean loss measured before the
/// update. On a non-finite loss or gradient nothing is modified.
pub fn train_step(
    model: &mut Model,
    velocity: &mut Momentum,
    batch: &[Sample],
    vocab: &LabelVocabulary,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossBreakdown, TrainError> {
    let parts = evaluate_batch(model, batch, vocab, cfg, true).map_err(|e| match e {
        TrainError::Ccl(CclError::NonFinite(detail)) => TrainError::NonFinite { step, detail },
        e => e,
    })?;
    let n = parts.len() as f64;
    let mut grads: Vec<Tensor> = model.tensors().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    for (_, sample_grads) in &parts {
        for (acc, g) in grads.iter_mut().zip(sample_grads) {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    let names: Vec<&str> = model.tensors().map(|(n, _)| n).collect();
    for (g, name) in grads.iter_mut().zip(&names) {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
        if !g.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("gradient of {name}"),
            });
        }
    }
    if cfg.momentum > 0.0 {
        if velocity.0.is_empty() {
            velocity.0 = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for (v, g) in velocity.0.iter_mut().zip(&grads) {
            for (a, b) in v.data_mut().iter_mut().zip(g.data()) {
                *a = cfg.momentum * *a + b;
            }
        }
    }
    let updates = if cfg.momentum > 0.0 { &velocity.0 } else { &grads };
    for ((_, t), u) in model.tensors_mut().zip(updates) {
        for (p, d) in t.data_mut().iter_mut().zip(u.data()) {
            *p -= cfg.learning_rate * d;
        }
    }
    Ok(average(&parts.iter().map(|p| p.0).collect::<Vec<_>>()))
}

/// Which training entries and views make up each batch of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPlan {
    /// `(entry, view, augment_seed)` in visiting order.
    pub visits: Vec<(usize, usize, u64)>,
}

impl EpochPlan {
    /// Seeded shuffle of entries; one uniformly drawn view per occurrence.
    pub fn new(seed: u64, epoch: usize, views: &[usize]) -> Self {
        let mut order: Vec<usize> = (0..views.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SHUFFLE, epoch as u64])));
        let visits = order
            .into_iter()
            .enumerate()
            .map(|(pos, e)| {
                let key = [epoch as u64, pos as u64];
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_VIEW, key[0], key[1]]));
                let view = rng.gen_range(0..views[e]);
                (e, view, derive_seed(seed, &[TAG_AUGMENT, key[0], key[1]]))
            })
            .collect();
        Self { visits }
    }

    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = &[(usize, usize, u64)]> {
        self.visits.chunks(batch_size)
    }
}

/// Training entries with per-view render caches.
pub struct TrainingSet {
    entries: Vec<(Arc<GaussianScene>, Vec<(Camera, Option<Arc<DenseTargetMap>>, Arc<ViewCache>)>)>,
}

impl TrainingSet {
    pub fn new(dataset: &Dataset, raster: &RasterConfig) -> Result<Self, TrainError> {
        let mut entries = Vec::new();
        for e in dataset.split(Split::Train).filter(|e| !e.cameras.is_empty()) {
            let views = (0..e.cameras.len())
                .into_par_iter()
                .map(|v| {
                    let cache = ViewCache::new(&e.scene, &e.cameras[v], raster)?;
                    Ok((e.cameras[v].clone(), e.target(v).cloned(), Arc::new(cache)))
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            entries.push((e.scene.clone(), views));
        }
        if entries.is_empty() {
            return Err(TrainError::EmptyManifest);
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn view_counts(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.1.len()).collect()
    }

    pub fn sample(&self, entry: usize, view: usize, augment_seed: u64) -> Sample {
        let (scene, views) = &self.entries[entry];
        let (camera, target, cache) = &views[view];
        Sample {
            scene: scene.clone(),
            camera: camera.clone(),
            target: target.clone(),
            view: cache.clone(),
            augment_seed,
        }
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size)
    }
}

pub const LOG_FILE: &str = "loss.log";
pub const FINAL_CHECKPOINT: &str = "final.sck";

pub fn checkpoint_name(step: usize) -> String {
    format!("checkpoint-{step:06}.sck")
}

const STEP_KEY: &str = "meta.step";

fn momentum_key(name: &str) -> String {
    format!("momentum.{name}")
}

fn save_state(model: &Model, velocity: &Momentum, step: usize, path: &Path) -> Result<(), TrainError> {
    let mut ck = model.to_checkpoint()?;
    ck.push(STEP_KEY, Tensor::scalar(step as f64))?;
    for ((name, _), v) in model.tensors().zip(&velocity.0) {
        ck.push(momentum_key(name), v.clone())?;
    }
    ck.save(path)?;
    Ok(())
}

/// Model, optimizer state and completed step count stored in a checkpoint.
pub fn load_state(path: &Path, cfg: &TrainConfig, embedding_dim: usize) -> Result<(Model, Momentum, usize), TrainError> {
    let ck = Checkpoint::load(path)?;
    let model = Model::from_checkpoint(&ck, &cfg.gsr, embedding_dim)?;
    let step = ck.expect(STEP_KEY, &[])?.item();
    if !(step >= 0.0 && step.fract() == 0.0) {
        return Err(TrainError::InvalidConfig(format!("checkpoint step {step}")));
    }
    let mut velocity = Momentum::default();
    if cfg.momentum > 0.0 && ck.get(&momentum_key("embed.w")).is_some() {
        for (name, t) in model.tensors() {
            velocity.0.push(ck.expect(&momentum_key(name), t.shape())?.clone());
        }
    }
    Ok((model, velocity, step as usize))
}

pub fn log_line(step: usize, epoch: usize, l: &LossBreakdown) -> String {
    format!("{step} {epoch} {} {} {} {}", l.l_3d_text, l.l_2d_text, l.l_cosine, l.total)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Total completed updates, including any before a resume.
    pub steps: usize,
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    /// Per-step losses produced by this invocation.
    pub losses: Vec<LossBreakdown>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs the epoch loop, writing checkpoints and `loss.log` into `out_dir`.
///
/// With `resume`, training continues from the step stored in that checkpoint
/// and the log is cut back to that many lines; the remaining trajectory is
/// identical to an uninterrupted run.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let vocab = cfg.vocabulary(&dataset.vocabulary)?;
    let set = TrainingSet::new(dataset, &cfg.raster)?;
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let log_path = out_dir.join(LOG_FILE);

    let (mut model, mut velocity, start) = match resume {
        Some(p) => load_state(p, cfg, vocab.dim())?,
        None => (Model::init(&cfg.gsr, vocab.dim(), cfg.seed)?, Momentum::default(), 0),
    };
    let mut kept = String::new();
    if start > 0 {
        if let Ok(text) = std::fs::read_to_string(&log_path) {
            for line in text.lines().take(start) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    let mut log = std::fs::File::create(&log_path).map_err(io(&log_path))?;
    log.write_all(kept.as_bytes()).map_err(io(&log_path))?;

    let per_epoch = set.steps_per_epoch(cfg.batch_size);
    let mut total = cfg.epochs * per_epoch;
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }
    let views = set.view_counts();
    let mut losses = Vec::new();
    let mut plan: Option<(usize, EpochPlan)> = None;
    for step in start..total {
        let epoch = step / per_epoch;
        if plan.as_ref().is_none_or(|p| p.0 != epoch) {
            plan = Some((epoch, EpochPlan::new(cfg.seed, epoch, &views)));
        }
        let visits = plan.as_ref().map(|p| &p.1).expect("plan set above");
        let chunk = visits.batches(cfg.batch_size).nth(step % per_epoch).expect("step within epoch");
        let batch: Vec<Sample> = chunk.iter().map(|&(e, v, s)| set.sample(e, v, s)).collect();
        let l = train_step(&mut model, &mut velocity, &batch, &vocab, cfg, step)?;
        writeln!(log, "{}", log_line(step + 1, epoch, &l)).map_err(io(&log_path))?;
        losses.push(l);
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save_state(&model, &velocity, done, &out_dir.join(checkpoint_name(done)))?;
        }
    }
    log.flush().map_err(io(&log_path))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    let steps = total.max(start);
    save_state(&model, &velocity, steps, &final_checkpoint)?;
    Ok(TrainOutcome {
        model,
        steps,
        final_checkpoint,
        log: log_path,
        losses,
    })
}

/// Settings of the end-to-end gradient check.
#[derive(Debug, Clone)]
pub struct GradientSuite {
    pub gaussians_per_side: usize,
    pub width: u32,
    pub height: u32,
    pub classes: usize,
    pub embedding_dim: usize,
    pub check: GradCheckOptions,
}

impl Default for GradientSuite {
    fn default() -> Self {
        Self {
            gaussians_per_side: 4,
            width: 32,
            height: 24,
            classes: 4,
            embedding_dim: 24,
            check: GradCheckOptions {
                max_coords: Some(24),
                ..GradCheckOptions::default()
            },
        }
    }
}

/// A `k × k` sheet of Gaussians spaced just over one voxel apart in front of
/// a camera, with random appearance and labels.
pub fn gradient_fixture(suite: &GradientSuite, seed: u64) -> (GaussianScene, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = suite.gaussians_per_side;
    let mut gaussians = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            gaussians.push(Gaussian {
                position: [
                    (i as f64 - (k - 1) as f64 / 2.0) * 0.12 + rng.gen_range(-0.02..0.02),
                    (j as f64 - (k - 1) as f64 / 2.0) * 0.12 + rng.gen_range(-0.02..0.02),
                    rng.gen_range(-0.05..0.05),
                ],
                rotation: q.map(|v| v / n),
                scale: std::array::from_fn(|_| rng.gen_range(0.03..0.08)),
                opacity: rng.gen_range(0.4..0.9),
                color: std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
                semantic: [0.0; SEMANTIC_DIM],
                label: rng.gen_range(0..suite.classes as u16),
                instance: 0,
            });
        }
    }
    let mut scene = GaussianScene::new(gaussians);
    scene.has_labels = true;
    scene.scene_id = format!("gradcheck-{seed}");
    let cam = Camera::look_at([0.0, 0.0, -1.2], [0.0, 0.0, 0.0], suite.width, suite.height, 40.0);
    (scene, cam)
}

/// Central-difference check of the full objective (all three terms) with
/// respect to every network and decoder tensor, once with nearest mapping and
/// self attention and once with trilinear mapping and voxel-set attention.
pub fn gradient_suite(suite: &GradientSuite, seed: u64) -> Result<GradCheckReport, TrainError> {
    let (scene, cam) = gradient_fixture(suite, seed);
    let names: Vec<String> = (0..suite.classes).map(|c| format!("c{c}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let vocab = crate::data::random_vocabulary(&refs, suite.embedding_dim, derive_seed(seed, &[11]))?;
    let view = ViewCache::new(&scene, &cam, &RasterConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[12]));
    let target = DenseTargetMap::new(
        cam.height,
        cam.width,
        suite.embedding_dim as u32,
        (0..cam.pixel_count() * suite.embedding_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )?;
    let labels = scene.labels();
    let subset = ClassSubset::training(&vocab);
    let loss = LossConfig::default();
    let mut worst: Option<GradCheckReport> = None;
    for (mapping, attention) in [
        (PointMapping::Nearest, AttentionMode::SelfOnly),
        (PointMapping::Trilinear, AttentionMode::VoxelSet),
    ] {
        let gsr = GsrConfig {
            mapping,
            attention,
            ..GsrConfig::default()
        };
        let mut model = Model::init(&gsr, suite.embedding_dim, seed)?;
        // Non-zero biases so their gradients are exercised away from the init.
        for (name, t) in model.tensors_mut() {
            if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
        }
        let prepared = PreparedScene::new(&scene, &gsr)?;
        let inputs = ObjectiveInputs {
            prepared: &prepared,
            labels: &labels,
            view: &view,
            target: Some(&target),
        };
        let tensors: Vec<Tensor> = model.tensors().map(|(_, t)| t.clone()).collect();
        let split = model.gsr.iter().count();
        let f = |g: &mut Graph, vars: &[Var]| -> Result<Var, TrainError> {
            let gv = ParamVars(vars[..split].to_vec());
            let dv = DecoderVars(vars[split..].to_vec());
            Ok(objective_graph(g, &gv, &dv, &inputs, &vocab, &subset, &gsr, &loss)?.0)
        };
        let opts = GradCheckOptions {
            seed: derive_seed(suite.check.seed, &[seed]),
            ..suite.check.clone()
        };
        let report = grad_check_many(f, &tensors, &opts)?;
        worst = Some(match worst {
            None => report,
            Some(w) => GradCheckReport {
                max_rel_err: w.max_rel_err.max(report.max_rel_err),
                pass: w.pass && report.pass,
                checked: w.checked + report.checked,
                skipped_kinks: w.skipped_kinks + report.skipped_kinks,
                worst: if report.max_rel_err > w.max_rel_err { report.worst } else { w.worst },
            },
        });
    }
    Ok(worst.expect("two configurations checked"))
}
