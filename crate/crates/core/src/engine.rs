//! Optimizer, learning-rate schedule, checkpoints and the toy training loop.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::ModelConfig;
use crate::autograd::Tape;
use crate::distill::{distill_step, DistillConfig, DistillLosses, DistillSeeds, TeacherState};
use crate::error::{Error, Result};
use crate::geometry::{normalize_scene, SceneBundle};
use crate::io::{ensure_dir, read_f32, read_json, write_f32, write_json, MANIFEST};
use crate::losses::{
    build_pairs, total_loss, LossBreakdown, LossWeights, PairConfig, PatchPairSet,
};
use crate::metrics::point_error;
use crate::model::Model;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear warm-up to `peak_lr`, then cosine decay to zero at `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(peak_lr: f64, total_steps: usize) -> Self {
        Self {
            peak_lr,
            warmup_fraction: 0.05,
            total_steps,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.total_steps as f64).round() as usize).max(1)
    }

    pub fn lr(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.peak_lr * step as f64 / warm as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let progress = (step - warm) as f64 / (self.total_steps - warm) as f64;
        0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to weight matrices (names ending in `.w`).
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: 1.0,
        }
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: usize,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// Scales all gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = params.grad_norm().to_f64_lossy();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for (_, p) in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Clips, then applies one AdamW update with learning rate `lr` to every
/// trainable parameter. Frozen parameters are left bit-identical. Returns
/// the pre-clip gradient norm.
pub fn optimizer_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<f64> {
    for (name, p) in params.iter() {
        if let Some(bad) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of `{name}` at index {bad}"
            )));
        }
    }
    let norm = clip_grad_norm(params, cfg.clip_norm);
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (c1, c2) = (T::one() - b1.powi(t), T::one() - b2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(cfg.eps));
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let (m, v) = state.moments.entry(name.to_string()).or_insert_with(|| {
            (
                Tensor::zeros(p.value.rows(), p.value.cols()),
                Tensor::zeros(p.value.rows(), p.value.cols()),
            )
        });
        let decay = if name.ends_with(".w") {
            T::one() - lr * T::lit(cfg.weight_decay)
        } else {
            T::one()
        };
        let (m, v) = (m.data_mut(), v.data_mut());
        for (k, (x, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
            m[k] = b1 * m[k] + (T::one() - b1) * g;
            v[k] = b2 * v[k] + (T::one() - b2) * g * g;
            *x = *x * decay - lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
    }
    Ok(norm)
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_FORMAT: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub file: String,
    pub shape: [usize; 2],
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<CheckpointEntry>,
}

/// Writes `manifest.json` and one little-endian f32 blob per parameter.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, dir: &Path) -> Result<()> {
    ensure_dir(&dir.join("params"))?;
    let mut params = Vec::with_capacity(model.params.len());
    for (name, p) in model.params.iter() {
        let file = format!("params/{name}.f32");
        write_f32(
            &dir.join(&file),
            p.value
                .data()
                .iter()
                .map(|x| x.to_f32().unwrap_or(f32::NAN)),
        )?;
        params.push(CheckpointEntry {
            name: name.to_string(),
            file,
            shape: [p.value.rows(), p.value.cols()],
            trainable: p.trainable,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        config: model.config.clone(),
        params,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Model<T>> {
    let path = dir.join(MANIFEST);
    let manifest: CheckpointManifest = read_json(&path)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(
            &path,
            format!("format `{}` is not a checkpoint", manifest.format),
        ));
    }
    let mut model = Model::<T>::init(manifest.config, 0)?;
    let mut loaded = ParamStore::new();
    for e in &manifest.params {
        let values = read_f32(&dir.join(&e.file), e.shape[0] * e.shape[1])?;
        loaded.insert(
            e.name.clone(),
            Tensor::from_vec(
                e.shape[0],
                e.shape[1],
                values.into_iter().map(|x| T::lit(x as f64)).collect(),
            ),
        );
        loaded.get_mut(&e.name)?.trainable = e.trainable;
    }
    model
        .params
        .check_compatible(&loaded)
        .map_err(|err| Error::format(&path, err.to_string()))?;
    model.params = loaded;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub peak_lr: f64,
    pub seed: u64,
    /// Frames per step are drawn uniformly from `[min_frames, min(max_frames, N)]`.
    pub min_frames: usize,
    pub max_frames: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub pairs: PairConfig,
    /// Switches to the self-distillation phase when present.
    pub ssl: Option<DistillConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 200,
            peak_lr: 1e-3,
            seed: 0,
            min_frames: 1,
            max_frames: 4,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            pairs: PairConfig::default(),
            ssl: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::Config(format!(
                "frame range [{}, {}] is empty",
                self.min_frames, self.max_frames
            )));
        }
        if !(self.peak_lr >= 0.0) || !(self.adam.clip_norm > 0.0) {
            return Err(Error::Config(
                "learning rate must be non-negative and the clip norm positive".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub bundle: usize,
    pub frames: Vec<usize>,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillLosses>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub reason: String,
}

pub struct TrainOutcome<T> {
    /// Final parameters, or the last finite ones if training diverged.
    pub model: Model<T>,
    pub log: Vec<StepLog>,
    pub diverged: Option<Divergence>,
}

/// Draws a sorted frame subset; its first frame becomes the reference.
fn sample_frames(rng: &mut ChaCha8Rng, n: usize, cfg: &TrainConfig) -> Vec<usize> {
    let hi = cfg.max_frames.min(n);
    let lo = cfg.min_frames.min(hi);
    let k = rng.gen_range(lo..=hi);
    let mut frames = sample(rng, n, k).into_vec();
    frames.sort_unstable();
    frames
}

/// One supervised step on a normalized, labeled bundle. Gradients are left
/// in the parameter slots.
pub fn supervised_step<T: Scalar>(
    model: &mut Model<T>,
    bundle: &SceneBundle<T>,
    pairs: &PatchPairSet,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let out = model.forward(&tape, &bound, &bundle.images)?;
    let terms = total_loss(
        &out.depth,
        out.cameras,
        out.trunk.final_state.image_tokens(),
        bundle,
        pairs,
        weights,
    )?;
    let breakdown = terms.breakdown();
    if breakdown.total.is_finite() {
        let grads = tape.backward(terms.total)?;
        model.params.accumulate(&bound, &grads);
    }
    Ok(breakdown)
}

/// Trains `model` on `dataset`; every random choice comes from `cfg.seed`.
/// `on_step` sees each log line as it is produced.
pub fn train_toy<T: Scalar>(
    mut model: Model<T>,
    dataset: &[SceneBundle<T>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InsufficientData(
            "training needs at least one bundle".into(),
        ));
    }
    if model.config != cfg.model {
        return Err(Error::Config("model and training configs disagree".into()));
    }
    let ssl = cfg.ssl.as_ref();
    if ssl.is_none() && dataset.iter().any(|b| !b.is_labeled()) {
        return Err(Error::InsufficientData(
            "supervised training needs labeled bundles".into(),
        ));
    }
    let pair_cfg = PairConfig {
        patch_size: cfg.model.patch_size,
        ..cfg.pairs.clone()
    };
    let schedule = Schedule::new(cfg.peak_lr, cfg.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new();
    let mut teacher = ssl.map(|d| {
        model.set_heads_trainable(false);
        TeacherState::new(&model, d.ema_decay)
    });
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let index = rng.gen_range(0..dataset.len());
        let frames = sample_frames(&mut rng, dataset[index].num_frames(), cfg);
        let sub = dataset[index].select_frames(&frames);
        let lr = schedule.lr(step + 1);
        let last_good = model.clone();
        model.params.zero_grad();
        let (loss, distill, total) = match (ssl, teacher.as_mut()) {
            (Some(dcfg), Some(teacher)) => {
                let seeds = DistillSeeds {
                    shared: rng.gen(),
                    teacher: rng.gen(),
                    student: rng.gen(),
                };
                let l = distill_step(&mut model, &teacher.model, &sub, seeds, dcfg)?;
                let total = l.total;
                (None, Some(l), total)
            }
            _ => {
                let sub = normalize_scene(&sub)?;
                let pairs = if sub.num_frames() >= 2 {
                    build_pairs(&sub, &pair_cfg, &mut rng)?
                } else {
                    PatchPairSet::default()
                };
                let l = supervised_step(&mut model, &sub, &pairs, &cfg.weights)?;
                let total = l.total;
                (Some(l), None, total)
            }
        };
        let diverge = |reason: String, last_good: Model<T>, log: Vec<StepLog>| TrainOutcome {
            model: last_good,
            log,
            diverged: Some(Divergence { step, reason }),
        };
        if !total.is_finite() {
            return Ok(diverge(format!("loss is {total}"), last_good, log));
        }
        let grad_norm = match optimizer_step(&mut model.params, &mut adam, &cfg.adam, lr) {
            Ok(n) => n,
            Err(e) => return Ok(diverge(e.to_string(), last_good, log)),
        };
        if model
            .params
            .iter()
            .any(|(_, p)| p.value.data().iter().any(|x| !x.is_finite()))
        {
            return Ok(diverge(
                "parameters became non-finite".into(),
                last_good,
                log,
            ));
        }
        if let Some(t) = teacher.as_mut() {
            t.update(&model)?;
        }
        let entry = StepLog {
            step,
            bundle: index,
            frames,
            lr,
            grad_norm,
            loss,
            distill,
        };
        on_step(&entry);
        log.push(entry);
    }
    model.params.zero_grad();
    Ok(TrainOutcome {
        model,
        log,
        diverged: None,
    })
}

/// Point error of the model's predictions on a labeled bundle.
pub fn evaluate_point_error<T: Scalar>(model: &Model<T>, bundle: &SceneBundle<T>) -> Result<f64> {
    let pred = model.predict(&bundle.images)?.to_bundle(&bundle.images);
    point_error(&pred, bundle)
}
