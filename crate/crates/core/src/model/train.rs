use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::UNetConfig;
use super::median::median_filter_3;
use super::net::{backward_from, forward, loss_l2, loss_l2_grad};
use super::ops::Mode;
use super::params::{build_params, Gradients, ModelParams};
use super::tensor::Tensor;
use super::ModelError;
use crate::detect::ScanLabel;
use crate::patch::{crop, sample_training_patches, Patch, SamplerConfig};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Leading epochs trained against median-smoothed targets.
    pub smoothing_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            smoothing_epochs: 5,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.smoothing_epochs > self.epochs {
            return Err(ModelError::InvalidConfig(format!(
                "smoothing epochs {} exceed epochs {}",
                self.smoothing_epochs, self.epochs
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(ModelError::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: Array2<f32>,
    pub target: Array2<f32>,
    /// Target cut from the median-filtered volume at the same location.
    pub smoothed_target: Option<Array2<f32>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub samples: Vec<TrainingSample>,
}

impl TrainingSet {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Patch, Patch)>) -> Self {
        TrainingSet {
            samples: pairs
                .into_iter()
                .map(|(x, y)| TrainingSample {
                    input: x.pixels,
                    target: y.pixels,
                    smoothed_target: None,
                })
                .collect(),
        }
    }

    /// Samples patch pairs from every scan of a volume pair that is intact
    /// according to `labels` (all scans when `None`). With `smooth`, the
    /// OCTA volume is median filtered once and co-located smoothed targets
    /// are attached.
    pub fn from_volumes(
        oct: &Volume,
        octa: &Volume,
        labels: Option<&[ScanLabel]>,
        sampler: &SamplerConfig,
        smooth: bool,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if oct.dims() != octa.dims() {
            return Err(ModelError::ShapeMismatch(format!(
                "OCT {:?} vs OCTA {:?}",
                oct.dims(),
                octa.dims()
            )));
        }
        let smoothed = smooth.then(|| median_filter_3(octa));
        let mut samples = Vec::new();
        for i in 0..oct.n_scans() {
            if labels.is_some_and(|l| l.get(i).is_some_and(|s| s.label.is_defect())) {
                continue;
            }
            let pairs = sample_training_patches(
                oct.bscan(i),
                octa.bscan(i),
                sampler,
                i,
                seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64),
            )?;
            for (x, y) in pairs {
                let smoothed_target = smoothed
                    .as_ref()
                    .map(|s| crop(s.bscan(i), x.origin, x.width(), i).pixels);
                samples.push(TrainingSample {
                    input: x.pixels,
                    target: y.pixels,
                    smoothed_target,
                });
            }
        }
        Ok(TrainingSet { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.samples.truncate(n);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub smoothed_targets: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ModelParams,
    pub log: Vec<EpochStats>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|e| e.mean_loss).collect()
    }

    /// `epoch,loss,smoothed` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,smoothed\n");
        for e in &self.log {
            s.push_str(&format!("{},{:.9},{}\n", e.epoch, e.mean_loss, e.smoothed_targets));
        }
        s
    }
}

/// Adaptive moment estimation over the learnable tensors.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Adam {
            lr: cfg.learning_rate as f32,
            beta1: cfg.beta1 as f32,
            beta2: cfg.beta2 as f32,
            eps: cfg.epsilon as f32,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients<f32>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
            if !p.learnable {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn check_dataset(data: &TrainingSet, ucfg: &UNetConfig) -> Result<(), ModelError> {
    let Some(first) = data.samples.first() else {
        return Err(ModelError::EmptyDataset);
    };
    let dim = first.input.dim();
    let d = ucfg.divisor();
    if dim.0 % d != 0 || dim.1 % d != 0 {
        return Err(ModelError::ShapeMismatch(format!(
            "patch {dim:?} not divisible by {d}"
        )));
    }
    for s in &data.samples {
        let same = s.input.dim() == dim
            && s.target.dim() == dim
            && s.smoothed_target.as_ref().is_none_or(|t| t.dim() == dim);
        if !same {
            return Err(ModelError::ShapeMismatch(format!(
                "training patches differ in shape ({:?} vs {dim:?})",
                s.input.dim()
            )));
        }
    }
    Ok(())
}

pub fn train(data: &TrainingSet, ucfg: &UNetConfig, tcfg: &TrainConfig) -> Result<TrainReport, ModelError> {
    train_with_progress(data, ucfg, tcfg, |_| {})
}

/// Trains from a fresh initialization seeded by `tcfg.seed`, reporting each epoch.
pub fn train_with_progress(
    data: &TrainingSet,
    ucfg: &UNetConfig,
    tcfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport, ModelError> {
    let params = build_params(ucfg, tcfg.seed)?;
    continue_training(params, data, tcfg, on_epoch)
}

pub fn continue_training(
    mut params: ModelParams,
    data: &TrainingSet,
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport, ModelError> {
    tcfg.validate()?;
    params.audit()?;
    if tcfg.epochs == 0 {
        return Ok(TrainReport { params, log: Vec::new() });
    }
    check_dataset(data, &params.config)?;

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5E_ED0F_0C7A);
    let mut adam = Adam::new(&params, tcfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let smoothed = epoch < tcfg.smoothing_epochs;
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for batch in order.chunks(tcfg.batch_size) {
            let inputs: Vec<_> = batch.iter().map(|&i| data.samples[i].input.view()).collect();
            let targets: Vec<_> = batch
                .iter()
                .map(|&i| {
                    let s = &data.samples[i];
                    match (&s.smoothed_target, smoothed) {
                        (Some(t), true) => t.view(),
                        _ => s.target.view(),
                    }
                })
                .collect();
            let x = Tensor::<f32>::from_images(&inputs);
            let y = Tensor::<f32>::from_images(&targets);
            let pass = forward(&params, &x, Mode::Train)?;
            let loss = loss_l2(&pass.output, &y)?;
            let grads = backward_from(&params, &pass, &loss_l2_grad(&pass.output, &y))?;
            pass.update_running_stats(&mut params);
            adam.step(&mut params, &grads);
            total += loss as f64 * batch.len() as f64;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: total / data.len() as f64,
            smoothed_targets: smoothed,
        };
        on_epoch(&stats);
        log.push(stats);
    }
    Ok(TrainReport { params, log })
}
