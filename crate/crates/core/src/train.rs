//! Training loop: L1 loss, Adam with decoupled weight decay, cosine
//! annealing, paired augmentation, and per-scale orchestration.
//!
//! The four scale stacks have disjoint parameters and are trained in one
//! loop over shared batches, which is equivalent to four separate runs.
//! The whole loop is single-threaded and fully deterministic given the seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneError, FeatureVolume, ImageTensor};
use crate::config::ModelConfig;
use crate::elem::Elem;
use crate::model::{ModelError, MsfptModel};
use crate::nn::{
    init_params, save_checkpoint, CheckpointError, CheckpointMeta, NnError, ParamStore,
};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
}

/// Optimization hyperparameters. Defaults follow the published recipe:
/// Adam with lr 2e-4, weight decay 1e-5, betas (0.9, 0.999), batch 16,
/// cosine annealing to zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub total_steps: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_lr() -> f64 {
    2e-4
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    16
}
fn default_patch() -> usize {
    192
}
fn default_true() -> bool {
    true
}
fn default_log_every() -> usize {
    50
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::InvalidConfig("lr must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::InvalidConfig(format!("{name} must be in [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-parameter Adam moments plus the shared step counter.
pub struct AdamState<E: Elem> {
    t: u64,
    m: BTreeMap<String, Vec<E>>,
    v: BTreeMap<String, Vec<E>>,
}

impl<E: Elem> AdamState<E> {
    /// Fresh state with zero moments for every trainable parameter.
    pub fn new(store: &ParamStore<E>) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in store.trainable() {
            m.insert(name.clone(), vec![E::zero(); t.numel()]);
            v.insert(name.clone(), vec![E::zero(); t.numel()]);
        }
        AdamState { t: 0, m, v }
    }

    pub fn from_parts(t: u64, m: BTreeMap<String, Vec<E>>, v: BTreeMap<String, Vec<E>>) -> Self {
        AdamState { t, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moment_names(&self) -> impl Iterator<Item = &String> {
        self.m.keys()
    }

    pub fn moments(&self, name: &str) -> Option<(&Vec<E>, &Vec<E>)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }
}

/// Mean absolute error; the subgradient at exact equality is zero.
pub fn l1_loss<E: Elem>(pred: &Tensor<E>, target: &Tensor<E>) -> crate::tensor::Result<Tensor<E>> {
    if pred.shape() != target.shape() || pred.numel() == 0 {
        return Err(TensorError::Dimension {
            op: "l1_loss",
            detail: format!(
                "pred {:?} vs target {:?} (both must be non-empty and equal)",
                pred.shape(),
                target.shape()
            ),
        });
    }
    pred.sub(target)?.abs()?.mean()
}

/// Cosine annealing without restarts: `lr0 * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64, TrainError> {
    if total_steps == 0 {
        return Err(TrainError::InvalidConfig("total_steps must be > 0".into()));
    }
    debug_assert!(step <= total_steps);
    Ok(lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()) / 2.0)
}

/// One Adam sweep over the trainable parameters: decoupled weight decay,
/// then the bias-corrected update. Missing gradients count as zero; frozen
/// parameters are never touched.
pub fn adam_step<E: Elem>(
    store: &ParamStore<E>,
    state: &mut AdamState<E>,
    lr_t: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if lr_t < 0.0 {
        return Err(TrainError::InvalidConfig("lr_t must be >= 0".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let lr = E::from_f64(lr_t);
    let wd = E::from_f64(cfg.weight_decay);
    let b1 = E::from_f64(cfg.beta1);
    let b2 = E::from_f64(cfg.beta2);
    let eps = E::from_f64(cfg.eps);
    let one = E::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    for (name, p) in store.trainable() {
        let grad = p.grad();
        let m = state.m.get_mut(name).expect("moment for trainable param");
        let v = state.v.get_mut(name).expect("moment for trainable param");
        let mut data = p.to_vec();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(E::zero(), |g| g[i]);
            data[i] = data[i] - lr * wd * data[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.set_data(data)?;
    }
    Ok(())
}

/// Apply one shared geometric transform (crop, flips, k·90° rotation) to
/// both images of a pair. With augmentation off, a deterministic center
/// crop is used and the rng is untouched.
pub fn augment<E: Elem>(
    reference: &ImageTensor<E>,
    distorted: &ImageTensor<E>,
    patch: usize,
    enabled: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor<E>, ImageTensor<E>), TrainError> {
    let (h, w) = (reference.height(), reference.width());
    if distorted.height() != h || distorted.width() != w {
        return Err(TrainError::InvalidConfig(format!(
            "pair sizes differ: {h}x{w} vs {}x{}",
            distorted.height(),
            distorted.width()
        )));
    }
    if patch > h || patch > w {
        return Err(TrainError::InvalidConfig(format!(
            "image {h}x{w} smaller than patch {patch}"
        )));
    }
    if !enabled {
        let (y0, x0) = ((h - patch) / 2, (w - patch) / 2);
        return Ok((
            reference.crop(y0, x0, patch, patch)?,
            distorted.crop(y0, x0, patch, patch)?,
        ));
    }
    let y0 = rng.gen_range(0..=h - patch);
    let x0 = rng.gen_range(0..=w - patch);
    let hflip: bool = rng.gen();
    let vflip: bool = rng.gen();
    let quarter_turns: usize = rng.gen_range(0..4);
    let apply = |img: &ImageTensor<E>| -> Result<ImageTensor<E>, TrainError> {
        let mut out = img.crop(y0, x0, patch, patch)?;
        if hflip {
            out = out.flip_horizontal();
        }
        if vflip {
            out = out.flip_vertical();
        }
        if quarter_turns > 0 {
            out = out.rot90(quarter_turns)?;
        }
        Ok(out)
    };
    Ok((apply(reference)?, apply(distorted)?))
}

/// One training example: a reference/distorted pair with its raw MOS.
pub struct TrainPair<E: Elem> {
    pub reference: ImageTensor<E>,
    pub distorted: ImageTensor<E>,
    pub mos: f64,
}

/// Outcome of one optimization step.
pub struct StepInfo {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Cross-scale averaged predictions for the batch items.
    pub predictions: Vec<f64>,
    /// Normalized MOS targets for the batch items.
    pub targets: Vec<f64>,
}

type VolumeCache<E> = Vec<Vec<(FeatureVolume<E>, FeatureVolume<E>)>>;

/// Stateful training driver. [`train`] wraps it; callers that need custom
/// stopping conditions can drive [`Trainer::step`] directly.
pub struct Trainer<E: Elem> {
    model: MsfptModel<E>,
    pairs: Vec<TrainPair<E>>,
    cfg: TrainConfig,
    state: AdamState<E>,
    rng: ChaCha8Rng,
    step: usize,
    mos_min: f64,
    mos_max: f64,
    /// Canonical (ref, diff) volumes per pair and scale, precomputed when
    /// augmentation is off (the backbone is frozen, so they never change).
    cache: Option<VolumeCache<E>>,
    pub history: Vec<StepInfo>,
}

impl<E: Elem> Trainer<E> {
    pub fn new(
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        pairs: Vec<TrainPair<E>>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let store = init_params::<E>(&model_cfg, cfg.seed)?;
        Self::with_store(model_cfg, cfg, pairs, store)
    }

    pub fn with_store(
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        pairs: Vec<TrainPair<E>>,
        store: ParamStore<E>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let model = MsfptModel::new(model_cfg, &store)?;
        let state = AdamState::new(model.store());
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in &pairs {
            lo = lo.min(p.mos);
            hi = hi.max(p.mos);
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut trainer = Trainer {
            model,
            pairs,
            cfg,
            state,
            rng,
            step: 0,
            mos_min: lo,
            mos_max: hi,
            cache: None,
            history: Vec::new(),
        };
        if !trainer.cfg.augment {
            trainer.build_cache()?;
        }
        Ok(trainer)
    }

    fn build_cache(&mut self) -> Result<(), TrainError> {
        let mut rng = self.rng.clone();
        let mut cache = Vec::with_capacity(self.pairs.len());
        let scales = self.model.config().scales.clone();
        for pair in &self.pairs {
            let (r, d) = augment(
                &pair.reference,
                &pair.distorted,
                self.cfg.patch_size,
                false,
                &mut rng,
            )?;
            let mut per_scale = Vec::with_capacity(scales.len());
            for &s in &scales {
                per_scale.push(self.model.canonical_volumes(&r, &d, s)?);
            }
            cache.push(per_scale);
        }
        self.cache = Some(cache);
        Ok(())
    }

    pub fn model(&self) -> &MsfptModel<E> {
        &self.model
    }

    pub fn adam_state(&self) -> &AdamState<E> {
        &self.state
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn normalized_mos(&self, mos: f64) -> f64 {
        if self.mos_max > self.mos_min {
            (mos - self.mos_min) / (self.mos_max - self.mos_min)
        } else {
            mos
        }
    }

    /// Cross-scale averaged predictions for every training pair, using the
    /// cached feature volumes when augmentation is off.
    pub fn predict_all(&self) -> Result<Vec<f64>, TrainError> {
        let scales = self.model.config().scales.clone();
        let mut rng = self.rng.clone();
        let mut out = Vec::with_capacity(self.pairs.len());
        for (idx, pair) in self.pairs.iter().enumerate() {
            let mut acc = 0.0;
            match &self.cache {
                Some(cache) => {
                    for (si, &scale) in scales.iter().enumerate() {
                        let (f_ref, f_diff) = &cache[idx][si];
                        let s = self.model.score_scale_from_canonical(scale, f_ref, f_diff)?;
                        acc += s.item().to_f64();
                    }
                }
                None => {
                    let (r, d) = augment(
                        &pair.reference,
                        &pair.distorted,
                        self.cfg.patch_size,
                        false,
                        &mut rng,
                    )?;
                    for &scale in &scales {
                        let (f_ref, f_diff) = self.model.canonical_volumes(&r, &d, scale)?;
                        let s = self
                            .model
                            .score_scale_from_canonical(scale, &f_ref, &f_diff)?;
                        acc += s.item().to_f64();
                    }
                }
            }
            out.push(acc / scales.len() as f64);
        }
        Ok(out)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            model: self.model.config().clone(),
            patch_size: self.cfg.patch_size,
            mos_min: self.mos_min,
            mos_max: self.mos_max,
            seed: self.cfg.seed,
        }
    }

    /// Run one step: sample a batch, forward all scales, backprop the summed
    /// per-scale L1 losses, and apply Adam at the cosine-annealed rate.
    pub fn step(&mut self) -> Result<StepInfo, TrainError> {
        let lr = cosine_lr(self.step, self.cfg.total_steps, self.cfg.lr)?;
        let n = self.pairs.len();
        let batch: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| self.rng.gen_range(0..n))
            .collect();
        let scales = self.model.config().scales.clone();

        // scores[scale][item]
        let mut scores: Vec<Vec<Tensor<E>>> = vec![Vec::new(); scales.len()];
        for &idx in &batch {
            match &self.cache {
                Some(cache) => {
                    for (si, _) in scales.iter().enumerate() {
                        let (f_ref, f_diff) = &cache[idx][si];
                        let s = self
                            .model
                            .score_scale_from_canonical(scales[si], f_ref, f_diff)?;
                        scores[si].push(s);
                    }
                }
                None => {
                    let pair = &self.pairs[idx];
                    let (r, d) = augment(
                        &pair.reference,
                        &pair.distorted,
                        self.cfg.patch_size,
                        true,
                        &mut self.rng,
                    )?;
                    for (si, &scale) in scales.iter().enumerate() {
                        let (f_ref, f_diff) = self.model.canonical_volumes(&r, &d, scale)?;
                        let s = self
                            .model
                            .score_scale_from_canonical(scale, &f_ref, &f_diff)?;
                        scores[si].push(s);
                    }
                }
            }
        }

        let targets: Vec<f64> = batch
            .iter()
            .map(|&i| self.normalized_mos(self.pairs[i].mos))
            .collect();
        let target_t = Tensor::from_vec(
            vec![targets.len()],
            targets.iter().map(|&v| E::from_f64(v)).collect(),
        )?;

        let mut losses = Vec::with_capacity(scales.len());
        for per_item in &scores {
            let pred = Tensor::concat0(per_item)?;
            losses.push(l1_loss(&pred, &target_t)?);
        }
        let total_loss = Tensor::concat0(&losses)?.sum().map_err(|e| match e {
            TensorError::NonFinite { .. } => TrainError::NonFiniteLoss { step: self.step },
            other => other.into(),
        })?;
        let loss = total_loss.item().to_f64();
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: self.step });
        }

        self.model.store().zero_grads();
        total_loss.backward()?;
        adam_step(self.model.store(), &mut self.state, lr, &self.cfg)?;
        self.model.store().zero_grads();

        // Cross-scale averaged predictions, for logging and stop conditions.
        let mut predictions = vec![0.0; batch.len()];
        for per_item in &scores {
            for (i, s) in per_item.iter().enumerate() {
                predictions[i] += s.item().to_f64();
            }
        }
        for p in &mut predictions {
            *p /= scales.len() as f64;
        }

        let info = StepInfo {
            step: self.step,
            lr,
            loss,
            predictions,
            targets,
        };
        self.step += 1;
        Ok(info)
    }
}

/// Result of a full training run.
pub struct TrainResult {
    pub checkpoint_path: PathBuf,
    /// (step, lr, loss) triples for every executed step.
    pub history: Vec<(usize, f64, f64)>,
}

/// Full training run at f32: optimize for `total_steps`, emit
/// `step,lr,loss` CSV lines to `log` every `log_every` steps, and write the
/// final checkpoint (with optimizer state) to `out_path`.
pub fn train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    pairs: Vec<TrainPair<f32>>,
    out_path: &Path,
    log: &mut dyn Write,
) -> Result<TrainResult, TrainError> {
    if cfg.total_steps == 0 {
        // Checkpoint equals initialization.
        let trainer = Trainer::<f32>::new(model_cfg, cfg, pairs)?;
        let meta = trainer.meta();
        save_checkpoint(trainer.model.store(), &meta, Some(&trainer.state), out_path)?;
        return Ok(TrainResult {
            checkpoint_path: out_path.to_path_buf(),
            history: Vec::new(),
        });
    }
    let mut trainer = Trainer::<f32>::new(model_cfg, cfg.clone(), pairs)?;
    writeln!(log, "step,lr,loss")?;
    let mut history = Vec::with_capacity(cfg.total_steps);
    for _ in 0..cfg.total_steps {
        let info = trainer.step()?;
        if info.step % cfg.log_every.max(1) == 0 || info.step + 1 == cfg.total_steps {
            writeln!(log, "{},{},{}", info.step, info.lr, info.loss)?;
        }
        history.push((info.step, info.lr, info.loss));
    }
    let meta = trainer.meta();
    save_checkpoint(trainer.model.store(), &meta, Some(&trainer.state), out_path)?;
    Ok(TrainResult {
        checkpoint_path: out_path.to_path_buf(),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_closed_forms() {
        assert_eq!(cosine_lr(0, 100, 2e-4).unwrap(), 2e-4);
        assert!((cosine_lr(50, 100, 2e-4).unwrap() - 1e-4).abs() < 1e-19);
        assert!(cosine_lr(100, 100, 2e-4).unwrap().abs() < 1e-19);
        assert!(cosine_lr(1, 0, 1e-3).is_err());
    }

    #[test]
    fn cosine_schedule_monotone_non_increasing() {
        let mut prev = f64::INFINITY;
        for step in 0..=500 {
            let lr = cosine_lr(step, 500, 2e-4).unwrap();
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn l1_loss_values() {
        let p = Tensor::from_vec(vec![2], vec![0.0f64, 2.0]).unwrap();
        let t = Tensor::from_vec(vec![2], vec![1.0f64, 1.0]).unwrap();
        assert_eq!(l1_loss(&p, &t).unwrap().item(), 1.0);
        assert_eq!(l1_loss(&p, &p).unwrap().item(), 0.0);
    }

    #[test]
    fn l1_loss_gradient_is_scaled_sign() {
        let p = Tensor::leaf(vec![3], vec![0.0f64, 5.0, -2.0], true).unwrap();
        let t = Tensor::from_vec(vec![3], vec![1.0f64, 1.0, 1.0]).unwrap();
        l1_loss(&p, &t).unwrap().backward().unwrap();
        let g = p.grad().unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(g, vec![-third, third, -third]);
    }

    #[test]
    fn adam_zero_grad_no_decay_leaves_params() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            total_steps: 1,
            ..serde_json::from_str("{\"total_steps\":1}").unwrap()
        };
        let mut store = ParamStore::<f64>::new(0);
        let p = Tensor::leaf(vec![2], vec![1.5, -0.5], true).unwrap();
        store.insert("p", p.clone()).unwrap();
        let mut state = AdamState::new(&store);
        adam_step(&store, &mut state, 1e-3, &cfg).unwrap();
        assert_eq!(p.to_vec(), vec![1.5, -0.5]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let cfg: TrainConfig = serde_json::from_str("{\"total_steps\":1,\"weight_decay\":0}").unwrap();
        let mut store = ParamStore::<f64>::new(0);
        let p = Tensor::leaf(vec![1], vec![0.3], true).unwrap();
        store.insert("p", p.clone()).unwrap();
        p.accumulate_grad(&[1.0]);
        let mut state = AdamState::new(&store);
        let lr = 0.01;
        adam_step(&store, &mut state, lr, &cfg).unwrap();
        // Bias-corrected m_hat / sqrt(v_hat) = 1 exactly for a unit gradient.
        assert!((p.to_vec()[0] - (0.3 - lr)).abs() < 1e-9);
    }

    #[test]
    fn augment_shared_transform_keeps_pairs_equal() {
        use crate::tensor::Tensor;
        let data: Vec<f64> = (0..3 * 40 * 40).map(|i| (i % 255) as f64 / 255.0).collect();
        let img = ImageTensor::new(Tensor::from_vec(vec![3, 40, 40], data).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = augment(&img, &img, 32, true, &mut rng).unwrap();
        assert_eq!(a.tensor().to_vec(), b.tensor().to_vec());
        assert_eq!(a.height(), 32);
    }

    #[test]
    fn augment_disabled_is_center_crop() {
        let data: Vec<f64> = (0..3 * 40 * 40).map(|i| (i % 255) as f64 / 255.0).collect();
        let img = ImageTensor::new(Tensor::from_vec(vec![3, 40, 40], data).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = augment(&img, &img, 32, false, &mut rng).unwrap();
        let expect = img.crop(4, 4, 32, 32).unwrap();
        assert_eq!(a.tensor().to_vec(), expect.tensor().to_vec());
    }
}
