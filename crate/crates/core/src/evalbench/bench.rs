//! Wall-clock timing of detection pipelines.
//!
//! Each run scores every input once; the per-item time of a run is its total
//! divided by the item count. Median over runs is the headline figure.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::CallCounter;
use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::pipeline::{DetectionPipeline, PipelineContext};

pub const MIN_WARMUP: usize = 2;
pub const MIN_RUNS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub pipeline: String,
    pub items: usize,
    pub warmup: usize,
    pub runs: usize,
    /// Seconds per item.
    pub median_s: f64,
    pub mean_s: f64,
    pub min_s: f64,
    pub calls_per_item: usize,
    pub flops_per_item: u64,
    pub params: usize,
    pub valid: bool,
    pub error: Option<String>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `pipeline` over `inputs`. Predictor calls are counted on every pass
/// and must equal the pipeline's declared count. A failing pass stops the
/// bench and returns the runs completed so far flagged invalid.
pub fn benchmark(
    pipeline: &dyn DetectionPipeline,
    ctx: &PipelineContext,
    inputs: &[Array],
    warmup: usize,
    runs: usize,
) -> Result<BenchResult> {
    if warmup < MIN_WARMUP || runs < MIN_RUNS {
        return Err(Error::invalid(format!(
            "bench needs warmup >= {MIN_WARMUP} and runs >= {MIN_RUNS}, got {warmup}/{runs}"
        )));
    }
    let first = inputs.first().ok_or_else(|| Error::invalid("bench needs at least one input"))?;
    let expected = pipeline.denoiser_calls(ctx);
    let counter = CallCounter::new(ctx.denoiser);
    let pass = || -> Result<f64> {
        counter.reset();
        let start = Instant::now();
        for x in inputs {
            std::hint::black_box(pipeline.score(ctx, &counter, x)?);
        }
        let elapsed = start.elapsed().as_secs_f64();
        if counter.calls() != expected * inputs.len() {
            return Err(Error::invalid(format!(
                "{}: {} predictor calls for {} items, expected {} per item",
                pipeline.name(),
                counter.calls(),
                inputs.len(),
                expected
            )));
        }
        Ok(elapsed / inputs.len() as f64)
    };
    let mut times = Vec::with_capacity(runs);
    let mut error = None;
    for i in 0..warmup + runs {
        match pass() {
            Ok(t) if i >= warmup => times.push(t),
            Ok(_) => {}
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    Ok(BenchResult {
        pipeline: pipeline.name().to_string(),
        items: inputs.len(),
        warmup,
        runs: times.len(),
        median_s: median(&times),
        mean_s: times.iter().sum::<f64>() / times.len().max(1) as f64,
        min_s: times.iter().copied().fold(f64::INFINITY, f64::min),
        calls_per_item: expected,
        flops_per_item: pipeline.flops(ctx, first.shape())?,
        params: pipeline.param_count(ctx),
        valid: error.is_none(),
        error,
    })
}

/// `slow.median / fast.median`
pub fn speedup(slow: &BenchResult, fast: &BenchResult) -> f64 {
    slow.median_s / fast.median_s
}
