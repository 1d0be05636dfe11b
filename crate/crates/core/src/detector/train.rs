//! Teacher pretraining and the distillation training loop.

use serde::{Deserialize, Serialize};

use super::losses::{bce_term, DistillLoss, DistillLossRegistry};
use super::{DetectorArch, DetectorModel};
use crate::datagen::{augment, AugmentConfig, Normalizer};
use crate::error::{Error, Result};
use crate::forensics::{DireSample, LABEL_FAKE, LABEL_REAL};
use crate::numerics::{AdamHyper, AdamState, Array, Rng, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_kd: bool,
    pub distill_loss: String,
    pub augment: AugmentConfig,
    pub feature_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            lr: 1e-3,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            use_kd: true,
            distill_loss: "l2".into(),
            augment: AugmentConfig::default(),
            feature_width: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.epochs == 0 || !(self.lr > 0.0) || self.feature_width == 0 {
            return Err(Error::invalid(format!(
                "detector training needs positive batch/epochs/lr/width, got {}/{}/{}/{}",
                self.batch_size, self.epochs, self.lr, self.feature_width
            )));
        }
        if !(0.0..=1.0).contains(&self.augment.hflip_prob) {
            return Err(Error::invalid(format!("hflip_prob {} outside [0, 1]", self.augment.hflip_prob)));
        }
        Ok(())
    }
}

/// Mean losses over one epoch. `kd` is recorded even when it is not applied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub cls: f64,
    pub kd: f64,
    pub total: f64,
}

/// One model input with its label and, for distillation, the teacher's
/// feature vector for the matching reconstruction error.
#[derive(Clone, Debug)]
pub struct TrainingSample<T: Scalar = f32> {
    pub input: Array<T>,
    pub label: u8,
    pub teacher_features: Option<Array<T>>,
}

#[derive(Clone, Debug)]
pub struct ObjectiveValue<T: Scalar> {
    pub cls: f64,
    pub kd: f64,
    pub total: f64,
    /// Gradients of `total` in [`DetectorModel::params`] order.
    pub grads: Vec<Array<T>>,
}

/// Batch objective `cls + lambda·kd` and its exact gradient. With
/// `apply_kd == false` the distillation term is still evaluated (when teacher
/// features are present) but contributes neither to `total` nor to the
/// gradient.
pub fn batch_objective<T: Scalar>(
    model: &DetectorModel<T>,
    batch: &[TrainingSample<T>],
    lambda: f64,
    distill: &dyn DistillLoss,
    apply_kd: bool,
) -> Result<ObjectiveValue<T>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let n = batch.len() as f64;
    let mut cls = 0.0;
    let mut kd = 0.0;
    let mut acc: Option<Vec<Array<T>>> = None;
    for s in batch {
        if s.label > 1 {
            return Err(Error::invalid(format!("label {} is not 0/1", s.label)));
        }
        model.check_input(&s.input)?;
        let (f, ftape) = model.feature_net().forward_train(&s.input)?;
        let (p, htape) = model.head_net().forward_train(&f)?;
        let (v, dp) = bce_term(p.data()[0].as_f64(), s.label);
        cls += v;
        let (mut df, hgrads) = model
            .head_net()
            .backward(&htape, &Array::full(&[1], T::lit(dp / n)))?;
        if let Some(tf) = &s.teacher_features {
            f.expect_same_shape(tf, "student vs teacher features")?;
            let t64: Vec<f64> = tf.data().iter().map(|v| v.as_f64()).collect();
            let s64: Vec<f64> = f.data().iter().map(|v| v.as_f64()).collect();
            let (k, gk) = distill.term(&t64, &s64);
            kd += k;
            if apply_kd {
                for (d, g) in df.data_mut().iter_mut().zip(gk) {
                    *d = *d + T::lit(lambda * g / n);
                }
            }
        } else if apply_kd {
            return Err(Error::invalid("distillation requested but a sample has no teacher features"));
        }
        let (_, fgrads) = model.feature_net().backward(&ftape, &df)?;
        let grads: Vec<Array<T>> = fgrads.into_iter().chain(hgrads).collect();
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(a) => {
                for (dst, g) in a.iter_mut().zip(&grads) {
                    dst.axpy(T::one(), g)?;
                }
            }
        }
    }
    let (cls, kd) = (cls / n, kd / n);
    let total = if apply_kd { cls + lambda * kd } else { cls };
    Ok(ObjectiveValue {
        cls,
        kd,
        total,
        grads: acc.unwrap(),
    })
}

fn check_labels(samples: &[DireSample], need_both: bool) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let has = |l| samples.iter().any(|s| s.label == l);
    if need_both && !(has(LABEL_REAL) && has(LABEL_FAKE)) {
        return Err(Error::invalid("training corpus must contain both real and fake samples"));
    }
    Ok(())
}

/// Shared minibatch loop. `make` turns a sample into a training input under
/// the epoch's augmentation draw.
fn fit(
    model: &mut DetectorModel,
    samples: &[DireSample],
    cfg: &TrainConfig,
    distill: &dyn DistillLoss,
    apply_kd: bool,
    mut make: impl FnMut(&DireSample, &mut Rng) -> Result<TrainingSample>,
) -> Result<Vec<EpochStats>> {
    let mut opt = AdamState::new(model.params());
    let hyper = AdamHyper {
        lr: cfg.lr,
        ..AdamHyper::default()
    };
    let mut rng = Rng::new(cfg.seed, 1);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(samples.len());
        let (mut cls, mut kd, mut total) = (0.0, 0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let batch = idx
                .iter()
                .map(|&i| make(&samples[i], &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let obj = batch_objective(model, &batch, cfg.lambda, distill, apply_kd)?;
            if !obj.total.is_finite() {
                return Err(Error::Diverged(format!("detector loss is {} in epoch {epoch}", obj.total)));
            }
            let w = batch.len() as f64;
            cls += obj.cls * w;
            kd += obj.kd * w;
            total += obj.total * w;
            opt.step(model.params_mut()?, &obj.grads, &hyper)
                .map_err(|e| Error::Diverged(format!("epoch {epoch}: {e}")))?;
        }
        let n = samples.len() as f64;
        let stats = EpochStats {
            epoch,
            cls: cls / n,
            kd: kd / n,
            total: total / n,
        };
        log::debug!("detector epoch {epoch}: {stats:?}");
        history.push(stats);
    }
    Ok(history)
}

/// Trains a classifier on reconstruction errors and returns it frozen.
pub fn pretrain_teacher(
    samples: &[DireSample],
    norm: &Normalizer,
    cfg: &TrainConfig,
) -> Result<(DetectorModel, Vec<EpochStats>)> {
    cfg.validate()?;
    check_labels(samples, true)?;
    let arch = DetectorArch {
        in_channels: samples[0].dire.chw()?.0,
        feature_width: cfg.feature_width,
    };
    let mut model = DetectorModel::init(arch, &mut Rng::new(cfg.seed, 0))?;
    let registry = DistillLossRegistry::default();
    let history = fit(&mut model, samples, cfg, registry.get("l2")?, false, |s, rng| {
        let p = augment(s, &cfg.augment, norm, rng)?;
        Ok(TrainingSample {
            input: p.dire,
            label: p.label,
            teacher_features: None,
        })
    })?;
    model.freeze();
    Ok((model, history))
}

/// Teacher-input and student-input views of a sample under one shared
/// augmentation draw.
pub fn prepare_pair(
    s: &DireSample,
    augment_cfg: &AugmentConfig,
    norm: &Normalizer,
    rng: &mut Rng,
) -> Result<(Array, Array, u8)> {
    let p = augment(s, augment_cfg, norm, rng)?;
    let student = Array::concat_channels(&[&p.x0, &p.eps0])?;
    Ok((p.dire, student, p.label))
}

/// Trains a student on `[x0 ; eps0]` against a frozen teacher that sees the
/// matching reconstruction error.
pub fn train_student(
    samples: &[DireSample],
    teacher: &DetectorModel,
    norm: &Normalizer,
    cfg: &TrainConfig,
) -> Result<(DetectorModel, Vec<EpochStats>)> {
    cfg.validate()?;
    check_labels(samples, false)?;
    if !teacher.is_frozen() {
        return Err(Error::invalid("teacher must be frozen before distillation"));
    }
    if teacher.feature_width() != cfg.feature_width {
        return Err(Error::shape(format!(
            "teacher feature width {} vs student {}",
            teacher.feature_width(),
            cfg.feature_width
        )));
    }
    let (c, _, _) = samples[0].x0.chw()?;
    let arch = DetectorArch {
        in_channels: c + samples[0].eps0.chw()?.0,
        feature_width: cfg.feature_width,
    };
    let registry = DistillLossRegistry::default();
    let distill = registry.get(&cfg.distill_loss)?;
    let mut model = DetectorModel::init(arch, &mut Rng::new(cfg.seed, 0))?;
    let history = fit(&mut model, samples, cfg, distill, cfg.use_kd, |s, rng| {
        let (dire, input, label) = prepare_pair(s, &cfg.augment, norm, rng)?;
        Ok(TrainingSample {
            input,
            label,
            teacher_features: Some(teacher.features(&dire)?),
        })
    })?;
    Ok((model, history))
}
