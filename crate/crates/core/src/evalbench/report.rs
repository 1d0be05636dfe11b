//! Run report: per-generator metrics, the distillation ablation, the bench
//! table and an echo of the effective configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bench::BenchResult;
use super::flops::FlopModel;
use crate::error::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

/// Provenance tag of published reference rows.
pub const REFERENCE_TAG: &str = "paper-table-2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRow {
    pub detector: String,
    pub generator: String,
    pub unseen: bool,
    pub n_real: usize,
    pub n_fake: usize,
    pub accuracy: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub use_kd: bool,
    pub seen_accuracy: f64,
    pub seen_ap: f64,
    /// Mean over unseen generators of the per-generator AP.
    pub unseen_ap: f64,
    pub unseen_per_generator: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub seeds: usize,
    pub kd_wins: usize,
    /// Mean of `unseen_ap(kd) − unseen_ap(no kd)` in AP points (×100).
    pub mean_improvement_points: f64,
}

/// A published figure, kept apart from measured rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub method: String,
    pub seconds_per_item: f64,
    pub params_millions: f64,
    pub tflops: f64,
    pub source: String,
}

pub fn reference_rows() -> Vec<ReferenceRow> {
    [
        ("CNNDet", 1.687, 23.51, 0.021),
        ("DIRE", 6.978, 576.32, 149.62),
        ("DNF", 3.226, 137.18, 20.88),
        ("distilled", 2.183, 576.33, 5.01),
    ]
    .into_iter()
    .map(|(m, s, p, f)| ReferenceRow {
        method: m.into(),
        seconds_per_item: s,
        params_millions: p,
        tflops: f,
        source: REFERENCE_TAG.into(),
    })
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSection {
    pub measured: Vec<BenchResult>,
    pub speedup: f64,
    pub flops: FlopModel,
    pub reference: Vec<ReferenceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub run_id: String,
    pub seed: u64,
    pub code_version: String,
    pub config: serde_json::Value,
    pub generators: Vec<GeneratorRow>,
    pub ablation: Vec<AblationRow>,
    pub ablation_summary: AblationSummary,
    pub bench: BenchSection,
}

/// Sections gathered over a run; all are required.
#[derive(Clone, Debug, Default)]
pub struct ReportParts {
    pub seed: u64,
    pub config: serde_json::Value,
    pub generators: Option<Vec<GeneratorRow>>,
    pub ablation: Option<Vec<AblationRow>>,
    pub bench: Option<BenchSection>,
}

/// Pairs rows by seed and counts seeds where distillation wins.
pub fn summarize_ablation(rows: &[AblationRow]) -> Result<AblationSummary> {
    let mut by_seed: BTreeMap<u64, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in rows {
        let e = by_seed.entry(r.seed).or_default();
        let slot = if r.use_kd { &mut e.0 } else { &mut e.1 };
        if slot.replace(r.unseen_ap).is_some() {
            return Err(Error::invalid(format!("duplicate ablation row for seed {}", r.seed)));
        }
    }
    let mut wins = 0;
    let mut diff = 0.0;
    for (seed, pair) in &by_seed {
        match pair {
            (Some(on), Some(off)) => {
                wins += usize::from(on > off);
                diff += on - off;
            }
            _ => {
                return Err(Error::invalid(format!(
                    "seed {seed} lacks a use_kd=true/false pair"
                )))
            }
        }
    }
    if by_seed.is_empty() {
        return Err(Error::invalid("no ablation rows"));
    }
    Ok(AblationSummary {
        seeds: by_seed.len(),
        kd_wins: wins,
        mean_improvement_points: 100.0 * diff / by_seed.len() as f64,
    })
}

pub fn make_report(parts: ReportParts) -> Result<Report> {
    let mut missing = Vec::new();
    if parts.generators.is_none() {
        missing.push("generators");
    }
    if parts.ablation.is_none() {
        missing.push("ablation");
    }
    if parts.bench.is_none() {
        missing.push("bench");
    }
    if !missing.is_empty() {
        return Err(Error::invalid(format!("report is missing sections: {}", missing.join(", "))));
    }
    let ablation = parts.ablation.unwrap();
    let ablation_summary = summarize_ablation(&ablation)?;
    let bench = parts.bench.unwrap();
    if bench.reference.iter().any(|r| r.source != REFERENCE_TAG) {
        return Err(Error::invalid("reference rows must carry the reference tag"));
    }
    let mut h = Sha256::new();
    h.update(parts.seed.to_le_bytes());
    h.update(serde_json::to_vec(&parts.config)?);
    Ok(Report {
        report_version: REPORT_VERSION,
        run_id: hex::encode(&h.finalize()[..8]),
        seed: parts.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: parts.config,
        generators: parts.generators.unwrap(),
        ablation,
        ablation_summary,
        bench,
    })
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        match v.get("report_version").and_then(|x| x.as_u64()) {
            Some(n) if n == REPORT_VERSION as u64 => {}
            Some(n) => {
                return Err(Error::format(format!(
                    "report version {n} is not supported (expected {REPORT_VERSION})"
                )))
            }
            None => return Err(Error::format("report has no report_version")),
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Copy with wall-clock figures zeroed; what remains is a pure function
    /// of seed and configuration.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for b in &mut r.bench.measured {
            b.median_s = 0.0;
            b.mean_s = 0.0;
            b.min_s = 0.0;
        }
        r.bench.speedup = 0.0;
        r
    }
}

/// Header plus one row per measured pipeline.
pub fn bench_csv(results: &[BenchResult]) -> String {
    let mut out = String::from("pipeline,items,warmup,runs,median_s,mean_s,min_s,calls_per_item,flops_per_item,params,valid\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.9},{:.9},{:.9},{},{},{},{}",
            r.pipeline,
            r.items,
            r.warmup,
            r.runs,
            r.median_s,
            r.mean_s,
            r.min_s,
            r.calls_per_item,
            r.flops_per_item,
            r.params,
            r.valid
        );
    }
    out
}
