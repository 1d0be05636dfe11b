//! End-to-end detection pipelines behind one interface, selectable by name.
//!
//! `dire` reconstructs the image (`2·S` predictor calls) and classifies the
//! reconstruction error with the teacher. `distil` extracts the first-step
//! noise (one call) and classifies `[x0 ; eps0]` with the student.

use std::collections::BTreeMap;

use crate::datagen::{AugmentConfig, Normalizer};
use crate::denoiser::Denoiser;
use crate::detector::DetectorModel;
use crate::diffusion::{NoisePredictor, NoiseSchedule, StepPlan};
use crate::error::{Error, Result};
use crate::evalbench::{denoiser_flops, detector_flops};
use crate::forensics::{compute_dire, extract_eps0};
use crate::numerics::Array;

/// Everything a pipeline shares with its siblings.
pub struct PipelineContext<'a> {
    pub denoiser: &'a Denoiser,
    pub sched: &'a NoiseSchedule,
    pub plan: &'a StepPlan,
    pub normalizer: &'a Normalizer,
    pub augment: AugmentConfig,
}

pub trait DetectionPipeline: Send + Sync {
    fn name(&self) -> &'static str;

    /// Probability that `x0` is fake. Noise predictions go through
    /// `predictor`, which is normally `ctx.denoiser` or an instrumented
    /// wrapper of it.
    fn score(&self, ctx: &PipelineContext, predictor: &dyn NoisePredictor, x0: &Array) -> Result<f64>;

    /// Predictor calls per image.
    fn denoiser_calls(&self, ctx: &PipelineContext) -> usize;

    /// Analytic FLOPs per image.
    fn flops(&self, ctx: &PipelineContext, image: &[usize]) -> Result<u64>;

    fn param_count(&self, ctx: &PipelineContext) -> usize;
}

pub struct DirePipeline {
    pub teacher: DetectorModel,
}

impl DetectionPipeline for DirePipeline {
    fn name(&self) -> &'static str {
        "dire"
    }

    fn score(&self, ctx: &PipelineContext, predictor: &dyn NoisePredictor, x0: &Array) -> Result<f64> {
        let mut dire = compute_dire(x0, predictor, ctx.sched, ctx.plan)?;
        if ctx.augment.normalize_image {
            dire = ctx.normalizer.dire.apply(&dire)?;
        }
        self.teacher.prob(&dire)
    }

    fn denoiser_calls(&self, ctx: &PipelineContext) -> usize {
        2 * ctx.plan.len()
    }

    fn flops(&self, ctx: &PipelineContext, image: &[usize]) -> Result<u64> {
        let d = denoiser_flops(ctx.denoiser, image)?;
        Ok(self.denoiser_calls(ctx) as u64 * d + detector_flops(&self.teacher, image)?)
    }

    fn param_count(&self, ctx: &PipelineContext) -> usize {
        ctx.denoiser.param_count() + self.teacher.param_count()
    }
}

pub struct DistilPipeline {
    pub student: DetectorModel,
}

impl DetectionPipeline for DistilPipeline {
    fn name(&self) -> &'static str {
        "distil"
    }

    fn score(&self, ctx: &PipelineContext, predictor: &dyn NoisePredictor, x0: &Array) -> Result<f64> {
        let mut eps0 = extract_eps0(x0, predictor, ctx.sched, ctx.plan)?;
        let mut img = x0.clone();
        if ctx.augment.normalize_image {
            img = ctx.normalizer.image.apply(&img)?;
        }
        if ctx.augment.normalize_noise {
            eps0 = ctx.normalizer.eps0.apply(&eps0)?;
        }
        self.student.prob(&Array::concat_channels(&[&img, &eps0])?)
    }

    fn denoiser_calls(&self, _ctx: &PipelineContext) -> usize {
        1
    }

    fn flops(&self, ctx: &PipelineContext, image: &[usize]) -> Result<u64> {
        let student_in = [self.student.in_channels(), image[1], image[2]];
        Ok(denoiser_flops(ctx.denoiser, image)? + detector_flops(&self.student, &student_in)?)
    }

    fn param_count(&self, ctx: &PipelineContext) -> usize {
        ctx.denoiser.param_count() + self.student.param_count()
    }
}

/// Trained classifiers a pipeline may be built from.
pub struct Classifiers<'a> {
    pub teacher: Option<&'a DetectorModel>,
    pub student: Option<&'a DetectorModel>,
}

type Factory = fn(&Classifiers) -> Result<Box<dyn DetectionPipeline>>;

pub struct PipelineRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

fn need<'a>(m: Option<&'a DetectorModel>, what: &str) -> Result<&'a DetectorModel> {
    m.ok_or_else(|| Error::invalid(format!("pipeline needs a trained {what}")))
}

impl PipelineRegistry {
    pub fn new() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn build(&self, name: &str, models: &Classifiers) -> Result<Box<dyn DetectionPipeline>> {
        let f = self.factories.get(name).ok_or_else(|| {
            Error::invalid(format!(
                "unknown pipeline {name:?}; known: {}",
                self.names().join(", ")
            ))
        })?;
        f(models)
    }
}

impl Default for PipelineRegistry {
    fn default() -> Self {
        let mut r = Self::new();
        r.register("dire", |m| {
            Ok(Box::new(DirePipeline {
                teacher: need(m.teacher, "teacher")?.clone(),
            }))
        });
        r.register("distil", |m| {
            Ok(Box::new(DistilPipeline {
                student: need(m.student, "student")?.clone(),
            }))
        });
        r
    }
}
