//! Real/fake classifiers: a convolutional feature extractor ending in global
//! average pooling, followed by a dense + sigmoid head.

pub mod losses;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Array, Checkpoint, LayerKind, LayerSpec, Rng, Scalar, Sequential};

pub use losses::{
    bce_loss, bce_term, kd_loss, total_loss, DistillLoss, DistillLossRegistry, L2Distance, SquaredL2Distance, PROB_CLAMP,
};
pub use train::{
    batch_objective, prepare_pair, pretrain_teacher, train_student, EpochStats, ObjectiveValue, TrainConfig, TrainingSample,
};

/// Decision threshold; a probability equal to it is labelled fake.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorArch {
    pub in_channels: usize,
    pub feature_width: usize,
}

impl DetectorArch {
    /// Teacher: one reconstruction-error channel.
    pub fn teacher() -> Self {
        Self {
            in_channels: 1,
            feature_width: 32,
        }
    }

    /// Student: image channel plus first-step noise channel.
    pub fn student() -> Self {
        Self {
            in_channels: 2,
            feature_width: 32,
        }
    }

    pub fn feature_specs(&self) -> Vec<LayerSpec> {
        let d = self.feature_width;
        vec![
            LayerSpec::conv2d(self.in_channels, 8, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::conv2d(8, 16, 3, 2, 1),
            LayerSpec::relu(),
            LayerSpec::conv2d(16, 32, 3, 2, 1),
            LayerSpec::relu(),
            LayerSpec::conv2d(32, d, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::global_avg_pool(),
        ]
    }

    pub fn head_specs(&self) -> Vec<LayerSpec> {
        vec![LayerSpec::dense(self.feature_width, 1), LayerSpec::sigmoid()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub prob: f64,
    pub label: u8,
}

impl Prediction {
    pub fn from_prob(prob: f64) -> Self {
        let prob = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        Self {
            prob,
            label: u8::from(prob >= THRESHOLD),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel<T: Scalar = f32> {
    features: Sequential<T>,
    head: Sequential<T>,
    frozen: bool,
}

impl<T: Scalar> DetectorModel<T> {
    pub fn init(arch: DetectorArch, rng: &mut Rng) -> Result<Self> {
        if arch.in_channels == 0 || arch.feature_width == 0 {
            return Err(Error::invalid(format!("degenerate detector {arch:?}")));
        }
        Self::from_parts(
            Sequential::init(&arch.feature_specs(), rng)?,
            Sequential::init(&arch.head_specs(), rng)?,
        )
    }

    pub fn from_parts(features: Sequential<T>, head: Sequential<T>) -> Result<Self> {
        let specs = features.specs();
        if specs.last().map(|s| s.kind) != Some(LayerKind::GlobalAvgPool) {
            return Err(Error::invalid("feature extractor must end in global average pooling"));
        }
        let hs = head.specs();
        let ok_head = hs.len() == 2
            && hs[0].kind == LayerKind::Dense
            && hs[0].dims[1] == 1
            && hs[1].kind == LayerKind::Sigmoid;
        if !ok_head {
            return Err(Error::invalid("head must be dense(d -> 1) then sigmoid"));
        }
        let m = Self {
            features,
            head,
            frozen: false,
        };
        if m.feature_width() != hs[0].dims[0] as usize {
            return Err(Error::shape(format!(
                "feature width {} vs head input {}",
                m.feature_width(),
                hs[0].dims[0]
            )));
        }
        Ok(m)
    }

    pub fn in_channels(&self) -> usize {
        self.features.specs()[0].dims[0] as usize
    }

    pub fn feature_width(&self) -> usize {
        self.features
            .specs()
            .iter()
            .rev()
            .find(|s| s.kind == LayerKind::Conv2d)
            .map(|s| s.dims[1] as usize)
            .unwrap_or(0)
    }

    pub fn feature_net(&self) -> &Sequential<T> {
        &self.features
    }

    pub fn head_net(&self) -> &Sequential<T> {
        &self.head
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn params(&self) -> Vec<&Array<T>> {
        let mut p = self.features.params();
        p.extend(self.head.params());
        p
    }

    /// Mutable parameter access; refused once frozen.
    pub fn params_mut(&mut self) -> Result<Vec<&mut Array<T>>> {
        if self.frozen {
            return Err(Error::Frozen("parameter updates are disabled".into()));
        }
        let mut p = self.features.params_mut();
        p.extend(self.head.params_mut());
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.features.param_count() + self.head.param_count()
    }

    pub fn cast<U: Scalar>(&self) -> DetectorModel<U> {
        DetectorModel {
            features: self.features.cast(),
            head: self.head.cast(),
            frozen: self.frozen,
        }
    }

    fn check_input(&self, input: &Array<T>) -> Result<()> {
        let (c, _, _) = input.chw()?;
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "detector expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        Ok(())
    }

    /// Pooled feature vector taken before the head.
    pub fn features(&self, input: &Array<T>) -> Result<Array<T>> {
        self.check_input(input)?;
        self.features.forward(input)
    }

    pub fn prob(&self, input: &Array<T>) -> Result<f64> {
        let f = self.features(input)?;
        Ok(self.head.forward(&f)?.data()[0].as_f64())
    }

    pub fn predict(&self, input: &Array<T>) -> Result<Prediction> {
        Ok(Prediction::from_prob(self.prob(input)?))
    }
}

impl DetectorModel<f32> {
    /// Feature layers, then head layers. The frozen flag is not stored.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push_layers(self.features.layers());
        ck.push_layers(self.head.layers());
        ck
    }

    /// Splits the records after the pooling layer; the result is unfrozen.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let layers = ck
            .records
            .iter()
            .map(|r| r.to_layer())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::format(format!("not a detector checkpoint: {e}")))?;
        let split = layers
            .iter()
            .position(|l| l.spec().kind == LayerKind::GlobalAvgPool)
            .ok_or_else(|| Error::format("not a detector checkpoint: no pooling layer"))?;
        let mut layers = layers;
        let head = layers.split_off(split + 1);
        Self::from_parts(Sequential::new(layers), Sequential::new(head))
    }

    /// Content hash of the parameters.
    pub fn digest(&self) -> String {
        self.to_checkpoint().digest()
    }
}

/// Student decision for an image and its first-step noise.
pub fn predict(student: &DetectorModel, x0: &Array, eps0: &Array) -> Result<Prediction> {
    let input = crate::forensics::make_student_input(x0, eps0)?;
    student.predict(&input.channels)
}
