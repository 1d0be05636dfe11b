//! Reconstruction-error and first-step-noise features.
//!
//! The reconstruction error (DIRE) costs a full inversion plus a full
//! reconstruction, `2·S` predictor calls. The first-step noise costs one.

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_inversion_step, ddim_invert, ddim_sample, NoisePredictor, NoiseSchedule, StepPlan};
use crate::error::{Error, Result};
use crate::numerics::Array;

pub const LABEL_REAL: u8 = 0;
pub const LABEL_FAKE: u8 = 1;

/// One image with its precomputed features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DireSample {
    pub x0: Array,
    pub dire: Array,
    pub eps0: Array,
    pub label: u8,
    pub gen_tag: String,
}

impl DireSample {
    pub fn new(x0: Array, dire: Array, eps0: Array, label: u8, gen_tag: impl Into<String>) -> Result<Self> {
        x0.chw()?;
        x0.expect_same_shape(&dire, "x0 vs dire")?;
        x0.expect_same_shape(&eps0, "x0 vs eps0")?;
        if dire.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("reconstruction error must be nonnegative"));
        }
        if label > 1 {
            return Err(Error::invalid(format!("label {label} is not 0/1")));
        }
        Ok(Self {
            x0,
            dire,
            eps0,
            label,
            gen_tag: gen_tag.into(),
        })
    }
}

/// Channel stack `[x0 ; eps0]`, image channels first.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentInput {
    pub channels: Array,
}

/// `|x0 − reconstruct(invert(x0))|`, elementwise.
pub fn compute_dire<P: NoisePredictor + ?Sized>(
    x0: &Array,
    model: &P,
    sched: &NoiseSchedule,
    plan: &StepPlan,
) -> Result<Array> {
    let latent = ddim_invert(model, sched, plan, x0)?;
    let recon = ddim_sample(model, sched, plan, &latent)?;
    x0.zip_map(&recon, |a, b| (a - b).abs())
}

/// Noise isolated from the first inversion leg `0 → tau_1`:
/// `eps0 = (x_1 − sqrt(ab_1)·x0) / sqrt(1 − ab_1)`, with `x0` standing in
/// for the clean-image estimate. One predictor call.
pub fn extract_eps0<P: NoisePredictor + ?Sized>(
    x0: &Array,
    model: &P,
    sched: &NoiseSchedule,
    plan: &StepPlan,
) -> Result<Array> {
    let t1 = *plan
        .taus()
        .first()
        .ok_or_else(|| Error::invalid("empty step plan"))?;
    let eps_hat = model.predict_eps(x0, 0)?;
    let x1 = ddim_inversion_step(x0, &eps_hat, 0, t1, sched)?;
    let ab = sched.alpha_bar(t1);
    let (a, b) = (ab.sqrt() as f32, (1.0 / (1.0 - ab).sqrt()) as f32);
    x1.zip_map(x0, |x1v, x0v| (x1v - a * x0v) * b)
}

pub fn make_student_input(x0: &Array, eps0: &Array) -> Result<StudentInput> {
    Ok(StudentInput {
        channels: Array::concat_channels(&[x0, eps0])?,
    })
}

/// Both features for a labelled image.
pub fn extract_sample<P: NoisePredictor + ?Sized>(
    x0: &Array,
    label: u8,
    gen_tag: &str,
    model: &P,
    sched: &NoiseSchedule,
    plan: &StepPlan,
) -> Result<DireSample> {
    let dire = compute_dire(x0, model, sched, plan)?;
    let eps0 = extract_eps0(x0, model, sched, plan)?;
    DireSample::new(x0.clone(), dire, eps0, label, gen_tag)
}
