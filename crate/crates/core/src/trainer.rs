//! Self-training with a mean teacher and ClassMix, optionally regularized by
//! the prior alignment loss, plus run bookkeeping (configs, checkpoints,
//! metric logs, resume).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::analysis::{self, argmax_labels, Metrics};
use crate::datagen::{Bundle, LabeledImage};
use crate::error::{Error, Result};
use crate::io::{self, KeyValues};
use crate::label::{LabelMap, CLASS_NAMES, IGNORE_ID, NUM_CLASSES};
use crate::mixing::{self, MixedSample};
use crate::model::{ema_update, param_group, ModelConfig, ModelState, ParamGroup};
use crate::priors::{self, EmbeddingSet, Interp, PriorKind};
use crate::rng::{self, Concern};
use crate::tensor::{poly_lr, Graph, Sgd, SgdConfig, Tensor, Var};

pub const METRICS_HEADER: &str = "step,l_seg,l_dap,l_overall,pseudo_acc,lr";

/// Every knob of a training run. Rendered to and parsed from `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the prior alignment loss.
    pub alpha: f64,
    /// EMA decay of the teacher.
    pub lambda: f64,
    pub lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub head_lr_multiplier: f64,
    /// Adaptation steps, after the warm-up.
    pub steps: usize,
    /// Source-only supervised steps that stand in for a pretrained backbone.
    /// The teacher is copied from the student when they end.
    pub warmup_steps: usize,
    /// Fit both projectors to detached source features during warm-up, so
    /// adaptation starts from fitted rather than random projectors.
    pub warmup_fits_projectors: bool,
    pub prior: PriorKind,
    /// Vector file for `prior = file`.
    pub vectors: Option<PathBuf>,
    /// Dimensionality of random priors.
    pub random_dim: usize,
    pub interp: Interp,
    pub seed: u64,
    pub dap_enabled: bool,
    pub jitter: f64,
    pub blur_sigma: f64,
    /// Share of present source classes pasted by ClassMix.
    pub subset_fraction: f64,
    pub proj_dim: usize,
    /// Multiplier on the projectors' initial weight scale.
    pub proj_init_gain: f64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Trailing source images held out for best-checkpoint selection; 0 disables it.
    pub holdout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda: 0.99,
            lr: 0.001,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            head_lr_multiplier: 10.0,
            steps: 2000,
            warmup_steps: 1000,
            warmup_fits_projectors: true,
            prior: PriorKind::OneHot,
            vectors: None,
            random_dim: 300,
            interp: Interp::Bilinear,
            seed: 0,
            dap_enabled: true,
            jitter: 0.2,
            blur_sigma: 1.0,
            subset_fraction: mixing::DEFAULT_SUBSET_FRACTION,
            proj_dim: 32,
            proj_init_gain: 1.0,
            checkpoint_every: 500,
            holdout: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.lr > 0.0) || self.momentum < 0.0 || self.weight_decay < 0.0 || self.head_lr_multiplier <= 0.0 {
            return Err(Error::invalid("lr, momentum, weight_decay and head_lr_multiplier must be non-negative (lr > 0)"));
        }
        if self.jitter < 0.0 || self.blur_sigma < 0.0 {
            return Err(Error::invalid("augmentation strengths must be >= 0"));
        }
        if self.prior == PriorKind::Loaded && self.vectors.is_none() {
            return Err(Error::invalid("prior = file needs a vectors path"));
        }
        Ok(())
    }

    /// Warm-up plus adaptation steps.
    pub fn total_steps(&self) -> usize {
        self.warmup_steps + self.steps
    }

    /// Whether the alignment loss can move any parameter.
    pub fn dap_active(&self) -> bool {
        self.dap_enabled && self.alpha > 0.0
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.push("alpha", self.alpha);
        kv.push("lambda", self.lambda);
        kv.push("lr", self.lr);
        kv.push("lr_power", self.lr_power);
        kv.push("momentum", self.momentum);
        kv.push("weight_decay", self.weight_decay);
        kv.push("head_lr_multiplier", self.head_lr_multiplier);
        kv.push("steps", self.steps);
        kv.push("warmup_steps", self.warmup_steps);
        kv.push("warmup_fits_projectors", self.warmup_fits_projectors);
        kv.push("prior", self.prior);
        kv.push("vectors", self.vectors.as_ref().map_or(String::new(), |p| p.display().to_string()));
        kv.push("random_dim", self.random_dim);
        kv.push("interp", self.interp);
        kv.push("seed", self.seed);
        kv.push("dap_enabled", self.dap_enabled);
        kv.push("jitter", self.jitter);
        kv.push("blur_sigma", self.blur_sigma);
        kv.push("subset_fraction", self.subset_fraction);
        kv.push("proj_dim", self.proj_dim);
        kv.push("proj_init_gain", self.proj_init_gain);
        kv.push("checkpoint_every", self.checkpoint_every);
        kv.push("holdout", self.holdout);
        kv
    }

    /// Overrides defaults with every recognised key in `kv`; unknown keys are errors.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        for (key, value) in kv.entries() {
            let v = value.as_str();
            let num = |v: &str| v.parse::<f64>().map_err(|_| Error::invalid(format!("{key}: not a number: {v:?}")));
            let int = |v: &str| v.parse::<usize>().map_err(|_| Error::invalid(format!("{key}: not an integer: {v:?}")));
            match key.as_str() {
                "alpha" => self.alpha = num(v)?,
                "lambda" => self.lambda = num(v)?,
                "lr" => self.lr = num(v)?,
                "lr_power" => self.lr_power = num(v)?,
                "momentum" => self.momentum = num(v)?,
                "weight_decay" => self.weight_decay = num(v)?,
                "head_lr_multiplier" => self.head_lr_multiplier = num(v)?,
                "steps" => self.steps = int(v)?,
                "warmup_steps" => self.warmup_steps = int(v)?,
                "warmup_fits_projectors" => {
                    self.warmup_fits_projectors =
                        v.parse().map_err(|_| Error::invalid(format!("warmup_fits_projectors: not a bool: {v:?}")))?
                }
                "prior" => self.prior = v.parse()?,
                "vectors" => self.vectors = (!v.is_empty()).then(|| PathBuf::from(v)),
                "random_dim" => self.random_dim = int(v)?,
                "interp" => self.interp = v.parse()?,
                "seed" => self.seed = v.parse().map_err(|_| Error::invalid(format!("seed: not an integer: {v:?}")))?,
                "dap_enabled" => {
                    self.dap_enabled = v.parse().map_err(|_| Error::invalid(format!("dap_enabled: not a bool: {v:?}")))?
                }
                "jitter" => self.jitter = num(v)?,
                "blur_sigma" => self.blur_sigma = num(v)?,
                "subset_fraction" => self.subset_fraction = num(v)?,
                "proj_dim" => self.proj_dim = int(v)?,
                "proj_init_gain" => self.proj_init_gain = num(v)?,
                "checkpoint_every" => self.checkpoint_every = int(v)?,
                "holdout" => self.holdout = int(v)?,
                other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(kv)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_kv().save(path)
    }

    /// The frozen class embeddings selected by `prior`.
    pub fn build_prior(&self) -> Result<EmbeddingSet> {
        match self.prior {
            PriorKind::OneHot => priors::build_one_hot(&CLASS_NAMES),
            PriorKind::Random => priors::build_random(&CLASS_NAMES, self.random_dim, self.seed),
            PriorKind::Loaded => {
                let path = self.vectors.as_ref().ok_or_else(|| Error::invalid("prior = file needs a vectors path"))?;
                priors::load_vectors(path, &CLASS_NAMES)
            }
        }
    }

    pub fn model_config(&self, prior_dim: usize) -> ModelConfig {
        ModelConfig { proj_dim: self.proj_dim, proj_init_gain: self.proj_init_gain, ..ModelConfig::desk(NUM_CLASSES, prior_dim) }
    }
}

/// Losses and schedule of one completed step (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l_seg: f64,
    pub l_dap: f64,
    pub l_overall: f64,
    /// Pseudo-label accuracy reported by an external audit, if one is attached.
    pub pseudo_acc: Option<f64>,
    pub lr: f64,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let acc = self.pseudo_acc.map_or(String::new(), |a| a.to_string());
        format!("{},{},{},{},{},{}", self.step, self.l_seg, self.l_dap, self.l_overall, acc, self.lr)
    }
}

/// Scores pseudo labels against labels the trainer cannot see. Implemented by
/// evaluation harnesses; the value is logged and never used for training.
pub trait PseudoAudit {
    fn accuracy(&self, target_index: usize, pseudo: &LabelMap) -> Option<f64>;
}

/// Audit backed by a separate copy of the target-train labels.
pub struct LabelAudit {
    labels: Vec<LabelMap>,
}

impl LabelAudit {
    pub fn new(labels: Vec<LabelMap>) -> Self {
        Self { labels }
    }

    /// Reads the sealed labels of an on-disk bundle.
    pub fn from_bundle_dir(root: &Path) -> Result<Self> {
        let hidden = Bundle::load_with_hidden(root)?;
        Ok(Self::new(hidden.target_train.iter().filter_map(|t| t.hidden_labels().cloned()).collect()))
    }
}

impl PseudoAudit for LabelAudit {
    fn accuracy(&self, target_index: usize, pseudo: &LabelMap) -> Option<f64> {
        let truth = self.labels.get(target_index)?;
        let (mut hit, mut total) = (0usize, 0usize);
        for (&t, &p) in truth.values().iter().zip(pseudo.values()) {
            if t != IGNORE_ID {
                total += 1;
                hit += usize::from(t == p);
            }
        }
        (total > 0).then(|| hit as f64 / total as f64)
    }
}

/// Per-pixel teacher argmax on one `[3, H, W]` image, without gradients.
pub fn pseudo_label(teacher: &ModelState, image: &Tensor) -> Result<LabelMap> {
    let batch = image.clone().reshape([&[1], image.shape()].concat())?;
    Ok(argmax_labels(&teacher.infer(&batch)?.logits)?.remove(0))
}

fn batch_of(image: &Tensor) -> Result<Tensor> {
    image.clone().reshape([&[1], image.shape()].concat())
}

/// Adds the alignment term for one input to `graph`: the mean squared channel
/// distance between `gvi(features)` and `gpr(down(proj(labels)))`.
pub fn dap_term(
    student: &ModelState,
    graph: &mut Graph,
    bound: &crate::model::Bound,
    projected: Var,
    labels: &LabelMap,
    prior: &EmbeddingSet,
    interp: Interp,
) -> Result<Var> {
    let (_, _, h, w) = graph.value(projected).dims4()?;
    let map = priors::downsample_embedding(&priors::proj(&[labels], prior)?, h, w, interp)?;
    let map = graph.leaf(map);
    let target = student.project_prior(graph, bound, map)?;
    graph.sum_squared_error(projected, target)
}

/// Alignment loss of a single image/label pair, as a value.
pub fn dap_loss(student: &ModelState, image: &Tensor, labels: &LabelMap, prior: &EmbeddingSet, interp: Interp) -> Result<f64> {
    let mut g = Graph::new();
    let bound = student.bind(&mut g, false)?;
    let x = g.leaf(batch_of(image)?);
    let out = student.forward(&mut g, &bound, x)?;
    let loss = dap_term(student, &mut g, &bound, out.projected, labels, prior, interp)?;
    g.value(loss).item()
}

/// Student, teacher, optimizer state and the number of completed steps.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: ModelState,
    pub teacher: ModelState,
    pub sgd: Sgd,
    pub step: usize,
}

impl TrainState {
    /// Fresh student from `seed`; the teacher starts as an exact copy.
    pub fn init(config: &TrainConfig, prior_dim: usize) -> Result<Self> {
        let student = ModelState::init(config.model_config(prior_dim), config.seed)?;
        let teacher = student.to_teacher();
        let sgd = Sgd::new(SgdConfig { momentum: config.momentum, weight_decay: config.weight_decay, nesterov: true });
        Ok(Self { student, teacher, sgd, step: 0 })
    }

    /// Teacher parameters, momentum buffers and the step counter.
    pub fn state_bytes(&self) -> Vec<u8> {
        let step = Tensor::scalar(self.step as f64);
        let mut records: Vec<(String, Tensor)> = vec![("step".into(), step)];
        for (name, t) in self.teacher.params() {
            records.push((format!("teacher.{name}"), t.clone()));
        }
        for (slot, (name, t)) in self.student.params().iter().enumerate() {
            if let Some(v) = self.sgd.velocity(slot).filter(|v| v.len() == t.numel()) {
                records.push((format!("momentum.{name}"), Tensor::new(t.shape().to_vec(), v.to_vec()).expect("shape")));
            }
        }
        io::encode_checkpoint(records.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn restore(&mut self, student: Vec<(String, Tensor)>, state: Vec<(String, Tensor)>) -> Result<()> {
        self.student.load_params(student)?;
        let mut teacher = Vec::new();
        let mut momentum = BTreeMap::new();
        let mut step = None;
        for (name, t) in state {
            if name == "step" {
                step = Some(t.item()? as usize);
            } else if let Some(n) = name.strip_prefix("teacher.") {
                teacher.push((n.to_string(), t));
            } else if let Some(n) = name.strip_prefix("momentum.") {
                momentum.insert(n.to_string(), t);
            } else {
                return Err(Error::Incompatible(format!("unexpected state record {name}")));
            }
        }
        self.teacher.load_params(teacher)?;
        for (slot, (name, _)) in self.student.params().iter().enumerate() {
            if let Some(v) = momentum.remove(name) {
                self.sgd.set_velocity(slot, v.into_data());
            }
        }
        if !momentum.is_empty() {
            return Err(Error::Incompatible("momentum for unknown parameters".into()));
        }
        self.step = step.ok_or_else(|| Error::Incompatible("state has no step record".into()))?;
        Ok(())
    }
}

/// Everything the loop computed in a step before the update.
struct StepOutcome {
    record: StepRecord,
    grads: Vec<Option<Vec<f64>>>,
}

/// Index pair `(source, target)` drawn for step `step` (0-based).
pub fn draw_pair(seed: u64, step: usize, n_source: usize, n_target: usize) -> (usize, usize) {
    let mut rng = rng::stream(seed, Concern::DataOrder, step as u64);
    (rng.random_range(0..n_source), rng.random_range(0..n_target))
}

/// Pseudo-label, subset sampling, ClassMix and augmentation for step `step`.
pub fn build_mixed(state: &TrainState, config: &TrainConfig, source: &LabeledImage, target_image: &Tensor) -> Result<(LabelMap, MixedSample)> {
    let pseudo = pseudo_label(&state.teacher, target_image)?;
    let step = state.step as u64;
    let subset = mixing::sample_class_subset_with(
        &source.labels,
        &mut rng::stream(config.seed, Concern::Subset, step),
        config.subset_fraction,
    )?;
    let mixed = mixing::classmix(source, target_image, &pseudo, &subset)?;
    let mixed = mixing::augment_mixed(&mixed, &mut rng::stream(config.seed, Concern::Augment, step), config.jitter, config.blur_sigma)?;
    Ok((pseudo, mixed))
}

fn compute_step(
    state: &TrainState,
    config: &TrainConfig,
    prior: &EmbeddingSet,
    source: &LabeledImage,
    mixed: &MixedSample,
) -> Result<StepOutcome> {
    let student = &state.student;
    let mut g = Graph::new();
    let bound = student.bind(&mut g, true)?;
    let xs = g.leaf(batch_of(&source.image)?);
    let xm = g.leaf(batch_of(&mixed.image)?);
    let out_s = student.forward(&mut g, &bound, xs)?;
    let out_m = student.forward(&mut g, &bound, xm)?;
    let ce_s = g.cross_entropy(out_s.logits, source.labels.values(), IGNORE_ID)?;
    let ce_m = g.cross_entropy(out_m.logits, mixed.labels.values(), IGNORE_ID)?;
    let l_seg = g.add(ce_s, ce_m)?;
    let (l_dap, overall) = if config.dap_enabled {
        let d_s = dap_term(student, &mut g, &bound, out_s.projected, &source.labels, prior, config.interp)?;
        let d_m = dap_term(student, &mut g, &bound, out_m.projected, &mixed.labels, prior, config.interp)?;
        let l_dap = g.add(d_s, d_m)?;
        let weighted = g.scale(l_dap, config.alpha)?;
        (Some(l_dap), g.add(l_seg, weighted)?)
    } else {
        (None, l_seg)
    };
    g.backward(overall)?;
    let grads = student.gradients(&g, &bound).into_iter().map(|o| o.map(<[f64]>::to_vec)).collect();
    let record = StepRecord {
        step: state.step + 1,
        l_seg: g.value(l_seg).item()?,
        l_dap: l_dap.map_or(Ok(0.0), |v| g.value(v).item())?,
        l_overall: g.value(overall).item()?,
        pseudo_acc: None,
        lr: poly_lr(config.lr, state.step, config.total_steps(), config.lr_power),
    };
    Ok(StepOutcome { record, grads })
}

fn compute_warmup_step(
    state: &TrainState,
    config: &TrainConfig,
    prior: &EmbeddingSet,
    source: &LabeledImage,
) -> Result<StepOutcome> {
    let student = &state.student;
    let mut g = Graph::new();
    let bound = student.bind(&mut g, true)?;
    let xs = g.leaf(batch_of(&source.image)?);
    let out = student.forward(&mut g, &bound, xs)?;
    let l_seg = g.cross_entropy(out.logits, source.labels.values(), IGNORE_ID)?;
    let (l_dap, overall) = if config.warmup_fits_projectors && config.dap_active() {
        // A detached copy of the features: only the projectors see this term.
        let features = g.leaf(g.value(out.features).clone());
        let projected = student.project_features(&mut g, &bound, features)?;
        let l_dap = dap_term(student, &mut g, &bound, projected, &source.labels, prior, config.interp)?;
        let weighted = g.scale(l_dap, config.alpha)?;
        (Some(l_dap), g.add(l_seg, weighted)?)
    } else {
        (None, l_seg)
    };
    g.backward(overall)?;
    let grads = student.gradients(&g, &bound).into_iter().map(|o| o.map(<[f64]>::to_vec)).collect();
    let record = StepRecord {
        step: state.step + 1,
        l_seg: g.value(l_seg).item()?,
        l_dap: l_dap.map_or(Ok(0.0), |v| g.value(v).item())?,
        l_overall: g.value(overall).item()?,
        pseudo_acc: None,
        lr: poly_lr(config.lr, state.step, config.total_steps(), config.lr_power),
    };
    Ok(StepOutcome { record, grads })
}

fn apply_gradients(state: &mut TrainState, config: &TrainConfig, record: &StepRecord, grads: &[Option<Vec<f64>>]) -> Result<()> {
    if !record.l_overall.is_finite() {
        return Err(Error::NonFinite(format!("overall loss at step {}", record.step)));
    }
    let dap_active = config.dap_active();
    for (slot, grad) in grads.iter().enumerate() {
        let name = state.student.params()[slot].0.clone();
        let group = param_group(&name);
        if group == ParamGroup::Projector && !dap_active {
            continue;
        }
        let Some(grad) = grad else { continue };
        let lr = if group == ParamGroup::Head { record.lr * config.head_lr_multiplier } else { record.lr };
        let param = state.student.param_mut(slot);
        state.sgd.step(slot, param.data_mut(), grad, lr);
        if !param.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name} after step {}", record.step)));
        }
    }
    Ok(())
}

/// One source-only supervised step of the warm-up phase. The teacher is
/// replaced by a copy of the student after the last warm-up step.
///
/// With `warmup_fits_projectors` the projectors are also fitted to the
/// alignment loss on detached source features. The backbone and head only
/// ever see the cross-entropy here.
pub fn warmup_step(
    state: &mut TrainState,
    config: &TrainConfig,
    prior: &EmbeddingSet,
    source: &LabeledImage,
) -> Result<StepRecord> {
    let StepOutcome { record, grads } = compute_warmup_step(state, config, prior, source)?;
    apply_gradients(state, config, &record, &grads)?;
    state.step += 1;
    if state.step == config.warmup_steps {
        state.teacher = state.student.to_teacher();
    }
    Ok(record)
}

/// One optimization step on a (source, target) pair: pseudo-label, mix,
/// augment, both losses, backward, SGD, EMA.
///
/// Projector parameters are left untouched unless the alignment loss is
/// active (`dap_enabled` and `alpha > 0`), so the baseline and the `alpha = 0`
/// run produce identical checkpoints.
pub fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    prior: &EmbeddingSet,
    source: &LabeledImage,
    target_image: &Tensor,
) -> Result<(StepRecord, LabelMap)> {
    let (pseudo, mixed) = build_mixed(state, config, source, target_image)?;
    let StepOutcome { record, grads } = compute_step(state, config, prior, source, &mixed)?;
    apply_gradients(state, config, &record, &grads)?;
    ema_update(&mut state.teacher, &state.student, config.lambda)?;
    state.step += 1;
    Ok((record, pseudo))
}

/// Knobs of [`run`] that are not part of the experiment definition.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Continue from `state.ckpt` in the output directory if present.
    pub resume: bool,
    /// Stop (after checkpointing) once this many steps are complete.
    pub stop_after: Option<usize>,
    pub audit: Option<&'a dyn PseudoAudit>,
    /// Skip the final evaluation on the target test split.
    pub skip_eval: bool,
}

/// What a run produced.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps_done: usize,
    pub records: Vec<StepRecord>,
    pub metrics: Option<Metrics>,
    pub best_holdout_miou: Option<f64>,
    pub artifacts: Vec<PathBuf>,
}

pub const STUDENT_CKPT: &str = "student.ckpt";
pub const STATE_CKPT: &str = "state.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const PRIOR_FILE: &str = "prior.txt";

fn write_checkpoints(state: &TrainState, out: &Path) -> Result<()> {
    state.student.save(&out.join(STUDENT_CKPT))?;
    io::write_bytes(&out.join(STATE_CKPT), &state.state_bytes())
}

/// Keeps the header and the rows with `step <= keep`.
fn truncate_metrics(path: &Path, keep: usize) -> Result<()> {
    let text = io::read_text(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let step = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
        if i == 0 || step.is_some_and(|s| s <= keep) {
            let _ = writeln!(out, "{line}");
        }
    }
    io::write_bytes(path, out.as_bytes())
}

fn dump_failure(out: &Path, step: usize, pair: (usize, usize), config: &TrainConfig, err: &Error, mixed: Option<&MixedSample>) {
    let dir = out.join("failure");
    let mut text = format!("step = {step}\nsource_index = {}\ntarget_index = {}\nerror = {err}\n", pair.0, pair.1);
    text.push_str(&config.to_kv().render());
    let _ = io::write_bytes(&dir.join(format!("step_{step:06}.txt")), text.as_bytes());
    if let Some(m) = mixed {
        let _ = mixing::dump_pixmaps(m, &dir, &format!("step_{step:06}"));
    }
}

/// Trains for `config.warmup_steps + config.steps` steps on `bundle`, writing under `out`:
/// `config.txt`, `prior.txt`, `metrics.csv`, `student.ckpt`, `state.ckpt`,
/// and after the last step `eval.csv` and `confusion.csv` for the target test split.
pub fn run(config: &TrainConfig, bundle: &Bundle, out: &Path, options: RunOptions<'_>) -> Result<RunSummary> {
    config.validate()?;
    if bundle.source.len() <= config.holdout || bundle.target_train.is_empty() {
        return Err(Error::invalid("bundle needs target images and more source images than the holdout"));
    }
    let prior = config.build_prior()?;
    let mut state = TrainState::init(config, prior.dim())?;
    let metrics_path = out.join(METRICS_FILE);
    let config_path = out.join(CONFIG_FILE);
    let rendered = config.to_kv().render();

    if options.resume && out.join(STATE_CKPT).exists() {
        let saved = io::read_text(&config_path)?;
        if saved != rendered {
            return Err(Error::Incompatible(format!("{} differs from the requested config", config_path.display())));
        }
        let student = io::read_checkpoint(&out.join(STUDENT_CKPT))?;
        let saved_state = io::read_checkpoint(&out.join(STATE_CKPT))?;
        state.restore(student, saved_state)?;
        truncate_metrics(&metrics_path, state.step)?;
    } else {
        io::write_bytes(&config_path, rendered.as_bytes())?;
        io::write_bytes(&metrics_path, format!("{METRICS_HEADER}\n").as_bytes())?;
    }
    prior.save(&out.join(PRIOR_FILE))?;

    let (train_source, holdout) = bundle.source.split_at(bundle.source.len() - config.holdout);
    let mut best: Option<f64> = None;
    let mut records = Vec::new();
    let total = config.total_steps();
    let stop = options.stop_after.unwrap_or(total).min(total);
    while state.step < stop {
        let step = state.step;
        let pair = draw_pair(config.seed, step, train_source.len(), bundle.target_train.len());
        let source = &train_source[pair.0];
        let record = if step < config.warmup_steps {
            warmup_step(&mut state, config, &prior, source).inspect_err(|e| dump_failure(out, step + 1, pair, config, e, None))?
        } else {
            let target_image = bundle.target_train[pair.1].image();
            let (mut record, pseudo) = match train_step(&mut state, config, &prior, source, target_image) {
                Ok(r) => r,
                Err(e) => {
                    let mixed = build_mixed(&state, config, source, target_image).ok().map(|m| m.1);
                    dump_failure(out, step + 1, pair, config, &e, mixed.as_ref());
                    return Err(e);
                }
            };
            record.pseudo_acc = options.audit.and_then(|a| a.accuracy(pair.1, &pseudo));
            record
        };
        io::append_line(&metrics_path, &record.csv_line())?;
        records.push(record);
        let at_checkpoint = config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0;
        if at_checkpoint {
            write_checkpoints(&state, out)?;
            if !holdout.is_empty() {
                let miou = analysis::evaluate(&state.student, holdout)?.miou;
                if best.is_none_or(|b| miou > b) {
                    best = Some(miou);
                    state.student.save(&out.join(BEST_CKPT))?;
                }
            }
        }
    }
    write_checkpoints(&state, out)?;

    let mut artifacts: Vec<PathBuf> =
        [CONFIG_FILE, PRIOR_FILE, METRICS_FILE, STUDENT_CKPT, STATE_CKPT].iter().map(|f| out.join(f)).collect();
    if best.is_some() {
        artifacts.push(out.join(BEST_CKPT));
    }
    let mut metrics = None;
    if state.step == total && !options.skip_eval && !bundle.target_test.is_empty() {
        let m = analysis::evaluate(&state.student, &bundle.target_test)?;
        let names: Vec<&str> = CLASS_NAMES.to_vec();
        io::write_bytes(&out.join(EVAL_FILE), analysis::metrics_csv(&m, &names).as_bytes())?;
        io::write_bytes(&out.join(CONFUSION_FILE), analysis::confusion_csv(&m).as_bytes())?;
        artifacts.push(out.join(EVAL_FILE));
        artifacts.push(out.join(CONFUSION_FILE));
        metrics = Some(m);
    }
    Ok(RunSummary { steps_done: state.step, records, metrics, best_holdout_miou: best, artifacts })
}

/// Reads the `metrics.csv` rows back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = io::read_text(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format { path: path.to_path_buf(), msg: "unexpected metrics header".into() });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |msg: &str| Error::Parse { line: i + 2, msg: msg.to_string() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            Ok(StepRecord {
                step: f[0].parse().map_err(|_| bad("bad step"))?,
                l_seg: num(f[1])?,
                l_dap: num(f[2])?,
                l_overall: num(f[3])?,
                pseudo_acc: if f[4].is_empty() { None } else { Some(num(f[4])?) },
                lr: num(f[5])?,
            })
        })
        .collect()
}
