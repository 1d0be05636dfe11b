//! Analytic operation counts.
//!
//! Convolution `2·K·C·k²·H'·W'`, dense `2·n_in·n_out`, and one operation per
//! output element for activations, pooling, embeddings and bias broadcasts.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::numerics::{LayerKind, LayerSpec};

/// FLOPs of one layer and its output shape.
pub fn layer_flops(spec: &LayerSpec, input: &[usize]) -> Result<(u64, Vec<usize>)> {
    let out = spec.output_shape(input)?;
    let elems: u64 = out.iter().product::<usize>() as u64;
    let d = |i: usize| spec.dims[i] as u64;
    let flops = match spec.kind {
        LayerKind::Conv2d => 2 * d(1) * d(0) * d(2) * d(2) * (out[1] * out[2]) as u64,
        LayerKind::Dense => 2 * d(0) * d(1),
        LayerKind::Relu | LayerKind::Sigmoid | LayerKind::GlobalAvgPool | LayerKind::TimeEmbed => elems,
    };
    Ok((flops, out))
}

/// Total FLOPs of a layer sequence applied to `input`.
pub fn count_flops(specs: &[LayerSpec], input: &[usize]) -> Result<u64> {
    let mut shape = input.to_vec();
    let mut total = 0u64;
    for s in specs {
        let (f, out) = layer_flops(s, &shape)?;
        total = total
            .checked_add(f)
            .ok_or_else(|| Error::invalid("FLOP count overflow"))?;
        shape = out;
    }
    Ok(total)
}

/// One noise prediction on an image of shape `C×H×W`: time embedding, its
/// dense map, the per-channel time bias and the convolutional body.
pub fn denoiser_flops(d: &Denoiser, image: &[usize]) -> Result<u64> {
    let specs = d.specs();
    let (embed, dense, body) = (&specs[0], &specs[1], &specs[2..]);
    let (fe, e) = layer_flops(embed, &[1])?;
    let (fd, _) = layer_flops(dense, &e)?;
    let (f1, h) = layer_flops(&body[0], image)?;
    let bias = h.iter().product::<usize>() as u64;
    let rest = count_flops(&body[1..], &h)?;
    Ok(fe + fd + f1 + bias + rest)
}

pub fn detector_flops<T: crate::numerics::Scalar>(m: &DetectorModel<T>, input: &[usize]) -> Result<u64> {
    let feats = m.feature_net().specs();
    let mut all = feats.clone();
    all.extend(m.head_net().specs());
    count_flops(&all, input)
}

/// Per-stage counts and the two pipeline totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopModel {
    pub steps: usize,
    pub denoiser: u64,
    pub teacher: u64,
    pub student: u64,
    /// `2S·denoiser + teacher`
    pub dire_pipeline: u64,
    /// `denoiser + student`
    pub distil_pipeline: u64,
}

impl FlopModel {
    pub fn new(steps: usize, denoiser: u64, teacher: u64, student: u64) -> Result<Self> {
        let dire_pipeline = (2 * steps as u64)
            .checked_mul(denoiser)
            .and_then(|v| v.checked_add(teacher))
            .ok_or_else(|| Error::invalid("FLOP count overflow"))?;
        Ok(Self {
            steps,
            denoiser,
            teacher,
            student,
            dire_pipeline,
            distil_pipeline: denoiser + student,
        })
    }

    pub fn from_models(
        steps: usize,
        denoiser: &Denoiser,
        teacher: &DetectorModel,
        student: &DetectorModel,
        image: &[usize],
    ) -> Result<Self> {
        let (c, h, w) = (image[0], image[1], image[2]);
        Self::new(
            steps,
            denoiser_flops(denoiser, image)?,
            detector_flops(teacher, &[c, h, w])?,
            detector_flops(student, &[student.in_channels(), h, w])?,
        )
    }

    pub fn ratio(&self) -> f64 {
        self.dire_pipeline as f64 / self.distil_pipeline as f64
    }
}
