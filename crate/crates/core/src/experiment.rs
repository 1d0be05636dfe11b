//! The experiment lifecycle as resumable stages over a working directory.
//!
//! Stages read their prerequisites from the workdir and overwrite their own
//! outputs; rerunning a stage with the same configuration reproduces the same
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{
    gen_fake, gen_real, gen_unseen_fake, generator_tag, is_unseen_tag, load_dataset, AugmentConfig,
    Dataset, FakeSource, Normalizer, Split, TextureConfig,
};
use crate::denoiser::{train_denoiser, Denoiser, DenoiserTrainConfig};
use crate::detector::{pretrain_teacher, train_student, DetectorModel, EpochStats, TrainConfig};
use crate::diffusion::{make_linear_schedule, make_step_plan, NoiseSchedule, StepPlan};
use crate::error::{Error, Result};
use crate::evalbench::{
    accuracy, average_precision, bench_csv, benchmark, make_report, reference_rows, speedup, AblationRow,
    BenchResult, BenchSection, FlopModel, GeneratorRow, Report, ReportParts,
};
use crate::forensics::{extract_sample, DireSample, LABEL_FAKE, LABEL_REAL};
use crate::numerics::{Array, Checkpoint};
use crate::pipeline::{Classifiers, PipelineContext, PipelineRegistry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Sampling/inversion sub-sequence length S.
    pub sample_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.05,
            sample_steps: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub texture: TextureConfig,
    pub diffusion_real: usize,
    pub train_real: usize,
    pub train_fake: usize,
    pub test_real: usize,
    pub test_fake: usize,
    pub unseen_per_generator: usize,
    /// Step count of the held-out sampling variants.
    pub unseen_steps: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            texture: TextureConfig::default(),
            diffusion_real: 2000,
            train_real: 1000,
            train_fake: 1000,
            test_real: 500,
            test_fake: 500,
            unseen_per_generator: 250,
            unseen_steps: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup: usize,
    pub runs: usize,
    pub items: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 2,
            runs: 5,
            items: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for data generation.
    pub seed: u64,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserTrainConfig,
    pub data: DataConfig,
    pub detector: TrainConfig,
    pub ablation_seeds: Vec<u64>,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            diffusion: DiffusionConfig::default(),
            denoiser: DenoiserTrainConfig::default(),
            data: DataConfig::default(),
            detector: TrainConfig::default(),
            ablation_seeds: (0..5).collect(),
            bench: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.diffusion;
        if d.sample_steps == 0 || d.sample_steps > d.steps {
            return Err(Error::invalid(format!("need 1 <= S <= T, got S={} T={}", d.sample_steps, d.steps)));
        }
        if self.data.unseen_steps == 0 || self.data.unseen_steps > d.steps {
            return Err(Error::invalid(format!("unseen step count {} outside 1..=T", self.data.unseen_steps)));
        }
        if self.data.unseen_steps == d.sample_steps {
            return Err(Error::invalid("unseen step count must differ from the training step count"));
        }
        let n = &self.data;
        if [n.diffusion_real, n.train_real, n.train_fake, n.test_real, n.test_fake, n.unseen_per_generator].contains(&0) {
            return Err(Error::invalid("all dataset sizes must be positive"));
        }
        self.detector.validate()?;
        if self.bench.warmup < crate::evalbench::MIN_WARMUP || self.bench.runs < crate::evalbench::MIN_RUNS {
            return Err(Error::invalid(format!(
                "bench needs warmup >= 2 and runs >= 5, got {}/{}",
                self.bench.warmup, self.bench.runs
            )));
        }
        if self.bench.items == 0 {
            return Err(Error::invalid("bench needs at least one item"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.diffusion.steps, self.diffusion.beta_start, self.diffusion.beta_end)
    }

    pub fn plan(&self) -> Result<StepPlan> {
        make_step_plan(self.diffusion.steps, self.diffusion.sample_steps)
    }

    fn variant_denoiser(&self) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            seed: self.denoiser.seed.wrapping_add(1),
            ..self.denoiser.clone()
        }
    }
}

/// Independent seed for a named purpose.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Artifact layout under a working directory.
#[derive(Clone, Debug)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn diffusion_real(&self) -> PathBuf {
        self.path("data/diffusion_real.ddfd")
    }
    pub fn train_real(&self) -> PathBuf {
        self.path("data/train_real.ddfd")
    }
    pub fn test_real(&self) -> PathBuf {
        self.path("data/test_real.ddfd")
    }
    pub fn denoiser(&self) -> PathBuf {
        self.path("ckpt/denoiser.ddck")
    }
    pub fn variant_denoiser(&self) -> PathBuf {
        self.path("ckpt/denoiser_variant.ddck")
    }
    pub fn dataset(&self, name: &str) -> PathBuf {
        self.path(&format!("data/{name}.ddfd"))
    }
    pub fn features(&self, name: &str) -> PathBuf {
        self.path(&format!("features/{name}.json"))
    }
    pub fn normalizer(&self) -> PathBuf {
        self.path("features/normalizer.json")
    }
    pub fn teacher(&self) -> PathBuf {
        self.path("ckpt/teacher.ddck")
    }
    pub fn student(&self, seed: u64, use_kd: bool) -> PathBuf {
        let kd = if use_kd { "kd" } else { "nokd" };
        self.path(&format!("ckpt/student_s{seed}_{kd}.ddck"))
    }
    pub fn evaluation(&self) -> PathBuf {
        self.path("eval/evaluation.json")
    }
    pub fn bench(&self) -> PathBuf {
        self.path("eval/bench.json")
    }
    pub fn bench_csv(&self) -> PathBuf {
        self.path("eval/bench.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.path("report.json")
    }
}

/// Sidecar metadata written next to every detector checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub role: String,
    pub seed: u64,
    pub use_kd: bool,
    pub lambda: f64,
    pub distill_loss: String,
    pub history: Vec<EpochStats>,
    pub digest: String,
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("meta.json")
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing(format!("{what} not found at {}", path.display())))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    require(path, what)?;
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn save_ds(ds: &Dataset, path: &Path) -> Result<()> {
    write_file(path, &ds.to_bytes()?)
}

fn load_ds(path: &Path, what: &str) -> Result<Dataset> {
    require(path, what)?;
    load_dataset(path)
}

pub fn save_features(samples: &[DireSample], path: &Path) -> Result<()> {
    write_file(path, &serde_json::to_vec(samples)?)
}

pub fn load_features(path: &Path) -> Result<Vec<DireSample>> {
    read_json(path, "feature file (run extract-features)")
}

pub fn load_denoiser(path: &Path) -> Result<(Denoiser, NoiseSchedule, String)> {
    require(path, "denoiser checkpoint (run train-diffusion)")?;
    let ck = Checkpoint::load(path)?;
    let (d, s) = Denoiser::from_checkpoint(&ck)?;
    Ok((d, s, ck.digest()))
}

pub fn load_detector(path: &Path, what: &str) -> Result<DetectorModel> {
    require(path, what)?;
    DetectorModel::from_checkpoint(&Checkpoint::load(path)?)
}

/// Real corpora: one for diffusion training and disjoint ones for the
/// detector's train and test splits.
pub fn gen_data(cfg: &ExperimentConfig, wd: &Workdir) -> Result<()> {
    cfg.validate()?;
    let d = &cfg.data;
    let seed = derive_seed(cfg.seed, "real");
    let n_diff = d.diffusion_real as u64;
    let n_train = d.train_real as u64;
    let sets = [
        (wd.diffusion_real(), d.diffusion_real, 0, Split::Train),
        (wd.train_real(), d.train_real, n_diff, Split::Train),
        (wd.test_real(), d.test_real, n_diff + n_train, Split::Test),
    ];
    for (path, n, first, split) in sets {
        let ds = gen_real(n, d.image_size, &d.texture, seed, first, split)?;
        save_ds(&ds, &path)?;
    }
    Ok(())
}

/// Trains the detector's denoiser and a second one from a different seed
/// used only for held-out generators. Returns the final epoch losses.
pub fn train_diffusion(cfg: &ExperimentConfig, wd: &Workdir) -> Result<(f32, f32)> {
    cfg.validate()?;
    let real = load_ds(&wd.diffusion_real(), "diffusion corpus (run gen-data)")?;
    let sched = cfg.schedule()?;
    let mut last = Vec::new();
    for (tc, path) in [(cfg.denoiser.clone(), wd.denoiser()), (cfg.variant_denoiser(), wd.variant_denoiser())] {
        let (model, hist) = train_denoiser(real.images(), &sched, &tc)?;
        write_file(&path, &model.to_checkpoint(&sched).to_bytes())?;
        last.push(*hist.last().unwrap());
    }
    Ok((last[0], last[1]))
}

/// Samples the fake splits from the trained denoisers. Seen fakes use the
/// detector's denoiser at S steps; held-out fakes change S, the checkpoint,
/// or both.
pub fn gen_fakes(cfg: &ExperimentConfig, wd: &Workdir) -> Result<()> {
    cfg.validate()?;
    let (main, sched, main_id) = load_denoiser(&wd.denoiser())?;
    let (variant, vsched, variant_id) = load_denoiser(&wd.variant_denoiser())?;
    let d = &cfg.data;
    let c = main.channels();
    let s = cfg.diffusion.sample_steps;
    let u = d.unseen_steps;
    let plan = cfg.plan()?;
    let uplan = make_step_plan(cfg.diffusion.steps, u)?;
    let seen = FakeSource {
        model: &main,
        sched: &sched,
        plan: plan.clone(),
        tag: generator_tag(&main_id, s),
    };
    let mut train = load_ds(&wd.train_real(), "train reals (run gen-data)")?;
    train.extend(&gen_fake(&seen, d.train_fake, c, d.image_size, derive_seed(cfg.seed, "fake-train"), Split::Train)?)?;
    train.check_split_hygiene()?;
    save_ds(&train, &wd.dataset("train"))?;

    let mut test = load_ds(&wd.test_real(), "test reals (run gen-data)")?;
    test.extend(&gen_fake(&seen, d.test_fake, c, d.image_size, derive_seed(cfg.seed, "fake-test"), Split::Test)?)?;
    save_ds(&test, &wd.dataset("test_seen"))?;

    let sources = [
        FakeSource {
            model: &main,
            sched: &sched,
            plan: uplan.clone(),
            tag: generator_tag(&main_id, u),
        },
        FakeSource {
            model: &variant,
            sched: &vsched,
            plan: plan.clone(),
            tag: generator_tag(&variant_id, s),
        },
        FakeSource {
            model: &variant,
            sched: &vsched,
            plan: uplan,
            tag: generator_tag(&variant_id, u),
        },
    ];
    let unseen = gen_unseen_fake(&sources, d.unseen_per_generator, c, d.image_size, derive_seed(cfg.seed, "fake-unseen"))?;
    save_ds(&unseen, &wd.dataset("test_unseen"))?;
    Ok(())
}

/// Reconstruction error and first-step noise for every image of the three
/// splits, plus normalization statistics fitted on the training split.
/// Samples the fake splits first if they are not present yet.
pub fn extract_features(cfg: &ExperimentConfig, wd: &Workdir) -> Result<usize> {
    cfg.validate()?;
    if ["train", "test_seen", "test_unseen"].iter().any(|n| !wd.dataset(n).exists()) {
        gen_fakes(cfg, wd)?;
    }
    let (model, sched, _) = load_denoiser(&wd.denoiser())?;
    let plan = cfg.plan()?;
    let mut total = 0;
    for name in ["train", "test_seen", "test_unseen"] {
        let ds = load_ds(&wd.dataset(name), "dataset")?;
        let samples = features_for(&ds, &model, &sched, &plan)?;
        if name == "train" {
            write_json(&wd.normalizer(), &Normalizer::fit(&samples)?)?;
        }
        save_features(&samples, &wd.features(name))?;
        total += samples.len();
    }
    Ok(total)
}

pub fn features_for(ds: &Dataset, model: &Denoiser, sched: &NoiseSchedule, plan: &StepPlan) -> Result<Vec<DireSample>> {
    (0..ds.len())
        .map(|i| extract_sample(&ds.images()[i], ds.labels()[i], &ds.gen_tags()[i], model, sched, plan))
        .collect()
}

fn write_detector(path: &Path, model: &DetectorModel, meta: &ModelMeta) -> Result<()> {
    write_file(path, &model.to_checkpoint().to_bytes())?;
    write_json(&meta_path(path), meta)
}

pub fn train_teacher(cfg: &ExperimentConfig, wd: &Workdir) -> Result<DetectorModel> {
    cfg.validate()?;
    let train = load_features(&wd.features("train"))?;
    let norm: Normalizer = read_json(&wd.normalizer(), "normalizer (run extract-features)")?;
    let (teacher, history) = pretrain_teacher(&train, &norm, &cfg.detector)?;
    let meta = ModelMeta {
        role: "teacher".into(),
        seed: cfg.detector.seed,
        use_kd: false,
        lambda: 0.0,
        distill_loss: String::new(),
        history,
        digest: teacher.digest(),
    };
    write_detector(&wd.teacher(), &teacher, &meta)?;
    Ok(teacher)
}

/// Loads the teacher and marks it frozen.
pub fn load_teacher(wd: &Workdir) -> Result<DetectorModel> {
    let mut t = load_detector(&wd.teacher(), "teacher checkpoint (run train-teacher)")?;
    t.freeze();
    Ok(t)
}

pub fn train_student_stage(cfg: &ExperimentConfig, wd: &Workdir, seed: u64, use_kd: bool) -> Result<ModelMeta> {
    cfg.validate()?;
    let train = load_features(&wd.features("train"))?;
    let norm: Normalizer = read_json(&wd.normalizer(), "normalizer (run extract-features)")?;
    let teacher = load_teacher(wd)?;
    let tc = TrainConfig {
        seed,
        use_kd,
        ..cfg.detector.clone()
    };
    let (student, history) = train_student(&train, &teacher, &norm, &tc)?;
    let meta = ModelMeta {
        role: "student".into(),
        seed,
        use_kd,
        lambda: tc.lambda,
        distill_loss: tc.distill_loss.clone(),
        history,
        digest: student.digest(),
    };
    write_detector(&wd.student(seed, use_kd), &student, &meta)?;
    Ok(meta)
}

/// Student probabilities on samples, evaluation-time preprocessing.
pub fn student_scores(student: &DetectorModel, samples: &[DireSample], norm: &Normalizer, aug: &AugmentConfig) -> Result<Vec<f64>> {
    let aug = aug.eval();
    samples
        .iter()
        .map(|s| {
            let p = crate::datagen::augment_with_flip(s, false, &aug, norm)?;
            student.prob(&Array::concat_channels(&[&p.x0, &p.eps0])?)
        })
        .collect()
}

/// Teacher probabilities on the samples' reconstruction errors.
pub fn teacher_scores(teacher: &DetectorModel, samples: &[DireSample], norm: &Normalizer, aug: &AugmentConfig) -> Result<Vec<f64>> {
    let aug = aug.eval();
    samples
        .iter()
        .map(|s| teacher.prob(&crate::datagen::augment_with_flip(s, false, &aug, norm)?.dire))
        .collect()
}

/// One row per generator tag: its fakes against every real sample.
pub fn generator_rows(detector: &str, scores: &[f64], samples: &[DireSample]) -> Result<Vec<GeneratorRow>> {
    let mut tags: Vec<&str> = samples
        .iter()
        .filter(|s| s.label == LABEL_FAKE)
        .map(|s| s.gen_tag.as_str())
        .collect();
    tags.sort_unstable();
    tags.dedup();
    tags.into_iter()
        .map(|tag| {
            let (sc, lb): (Vec<f64>, Vec<u8>) = samples
                .iter()
                .zip(scores)
                .filter(|(s, _)| s.label == LABEL_REAL || s.gen_tag == tag)
                .map(|(s, &p)| (p, s.label))
                .unzip();
            Ok(GeneratorRow {
                detector: detector.to_string(),
                generator: tag.to_string(),
                unseen: is_unseen_tag(tag),
                n_real: lb.iter().filter(|&&l| l == LABEL_REAL).count(),
                n_fake: lb.iter().filter(|&&l| l == LABEL_FAKE).count(),
                accuracy: accuracy(&sc, &lb, 0.5)?,
                ap: average_precision(&sc, &lb)?,
            })
        })
        .collect()
}

/// Test reals from the seen split joined with the held-out fakes.
pub fn unseen_eval_set(seen: &[DireSample], unseen: &[DireSample]) -> Vec<DireSample> {
    seen.iter()
        .filter(|s| s.label == LABEL_REAL)
        .chain(unseen.iter().filter(|s| s.label == LABEL_FAKE))
        .cloned()
        .collect()
}

pub fn ablation_row(
    student: &DetectorModel,
    seed: u64,
    use_kd: bool,
    seen: &[DireSample],
    unseen_set: &[DireSample],
    norm: &Normalizer,
    aug: &AugmentConfig,
) -> Result<AblationRow> {
    let s_scores = student_scores(student, seen, norm, aug)?;
    let labels: Vec<u8> = seen.iter().map(|s| s.label).collect();
    let u_scores = student_scores(student, unseen_set, norm, aug)?;
    let rows = generator_rows("distil", &u_scores, unseen_set)?;
    let per: BTreeMap<String, f64> = rows.iter().map(|r| (r.generator.clone(), r.ap)).collect();
    if per.is_empty() {
        return Err(Error::invalid("no held-out generators to evaluate"));
    }
    Ok(AblationRow {
        seed,
        use_kd,
        seen_accuracy: accuracy(&s_scores, &labels, 0.5)?,
        seen_ap: average_precision(&s_scores, &labels)?,
        unseen_ap: per.values().sum::<f64>() / per.len() as f64,
        unseen_per_generator: per,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub generators: Vec<GeneratorRow>,
    pub ablation: Vec<AblationRow>,
}

/// Per-generator metrics of the primary student and the teacher, plus an
/// ablation row for every trained (seed, kd) student.
pub fn evaluate(cfg: &ExperimentConfig, wd: &Workdir) -> Result<Evaluation> {
    cfg.validate()?;
    let seen = load_features(&wd.features("test_seen"))?;
    let unseen = load_features(&wd.features("test_unseen"))?;
    let norm: Normalizer = read_json(&wd.normalizer(), "normalizer (run extract-features)")?;
    let aug = cfg.detector.augment;
    let teacher = load_teacher(wd)?;
    let primary = wd.student(cfg.detector.seed, cfg.detector.use_kd);
    let student = load_detector(&primary, "student checkpoint (run train-student)")?;
    let all = {
        let mut v = seen.clone();
        v.extend(unseen.iter().filter(|s| s.label == LABEL_FAKE).cloned());
        v
    };
    let mut generators = generator_rows("distil", &student_scores(&student, &all, &norm, &aug)?, &all)?;
    generators.extend(generator_rows("dire", &teacher_scores(&teacher, &all, &norm, &aug)?, &all)?);

    let unseen_set = unseen_eval_set(&seen, &unseen);
    let mut ablation = Vec::new();
    for &seed in &cfg.ablation_seeds {
        let (on, off) = (wd.student(seed, true), wd.student(seed, false));
        if !(on.exists() && off.exists()) {
            continue;
        }
        for (path, kd) in [(on, true), (off, false)] {
            let m = load_detector(&path, "student checkpoint")?;
            ablation.push(ablation_row(&m, seed, kd, &seen, &unseen_set, &norm, &aug)?);
        }
    }
    let ev = Evaluation { generators, ablation };
    write_json(&wd.evaluation(), &ev)?;
    Ok(ev)
}

/// Times both pipelines on the first `bench.items` test images.
pub fn bench(cfg: &ExperimentConfig, wd: &Workdir) -> Result<BenchSection> {
    cfg.validate()?;
    let (denoiser, sched, _) = load_denoiser(&wd.denoiser())?;
    let teacher = load_teacher(wd)?;
    let student = load_detector(
        &wd.student(cfg.detector.seed, cfg.detector.use_kd),
        "student checkpoint (run train-student)",
    )?;
    let norm: Normalizer = read_json(&wd.normalizer(), "normalizer (run extract-features)")?;
    let test = load_ds(&wd.dataset("test_seen"), "test dataset (run extract-features)")?;
    let inputs: Vec<Array> = test.images().iter().take(cfg.bench.items).cloned().collect();
    let plan = cfg.plan()?;
    let ctx = PipelineContext {
        denoiser: &denoiser,
        sched: &sched,
        plan: &plan,
        normalizer: &norm,
        augment: cfg.detector.augment.eval(),
    };
    let registry = PipelineRegistry::default();
    let models = Classifiers {
        teacher: Some(&teacher),
        student: Some(&student),
    };
    let mut measured: Vec<BenchResult> = Vec::new();
    for name in ["dire", "distil"] {
        let p = registry.build(name, &models)?;
        measured.push(benchmark(p.as_ref(), &ctx, &inputs, cfg.bench.warmup, cfg.bench.runs)?);
    }
    if let Some(bad) = measured.iter().find(|r| !r.valid) {
        write_json(&wd.bench(), &measured)?;
        return Err(Error::invalid(format!(
            "bench of {} failed: {}",
            bad.pipeline,
            bad.error.clone().unwrap_or_default()
        )));
    }
    let flops = FlopModel::from_models(plan.len(), &denoiser, &teacher, &student, inputs[0].shape())?;
    let section = BenchSection {
        speedup: speedup(&measured[0], &measured[1]),
        measured,
        flops,
        reference: reference_rows(),
    };
    write_json(&wd.bench(), &section)?;
    write_file(&wd.bench_csv(), bench_csv(&section.measured).as_bytes())?;
    Ok(section)
}

pub fn report(cfg: &ExperimentConfig, wd: &Workdir) -> Result<Report> {
    cfg.validate()?;
    let ev: Option<Evaluation> = wd.evaluation().exists().then(|| read_json(&wd.evaluation(), "evaluation")).transpose()?;
    let bench: Option<BenchSection> = wd.bench().exists().then(|| read_json(&wd.bench(), "bench")).transpose()?;
    let (generators, ablation) = match ev {
        Some(e) => (Some(e.generators), (!e.ablation.is_empty()).then_some(e.ablation)),
        None => (None, None),
    };
    let r = make_report(ReportParts {
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        generators,
        ablation,
        bench,
    })?;
    write_file(&wd.report(), r.to_json()?.as_bytes())?;
    Ok(r)
}
