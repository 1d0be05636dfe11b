use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reconkd::experiment::{self, ExperimentConfig, Workdir};
use reconkd::Error;

/// Diffusion reconstruction-error detection and its single-call distilled
/// student, from data generation to the benchmark report.
#[derive(Parser, Debug)]
#[command(name = "reconkd", version)]
struct Cli {
    /// Working directory holding every artifact.
    #[arg(long, env = "RECONKD_WORKDIR", default_value = "work", global = true)]
    workdir: PathBuf,

    /// TOML configuration; `<workdir>/config.toml` is used when present and
    /// this flag is absent. Built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master data seed [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the real corpora.
    GenData,
    /// Train the denoiser and the held-out variant denoiser.
    TrainDiffusion(DiffusionArgs),
    /// Sample fakes if needed, then compute reconstruction errors and
    /// first-step noise for every split.
    ExtractFeatures(StepsArg),
    /// Train the reconstruction-error classifier and freeze it.
    TrainTeacher(DetectorArgs),
    /// Train a student against the frozen teacher.
    TrainStudent(StudentArgs),
    /// Per-generator accuracy/AP and the distillation ablation table.
    Evaluate,
    /// Time both pipelines and count their FLOPs.
    Bench(BenchArgs),
    /// Assemble the run report.
    Report,
}

#[derive(Args, Debug)]
struct StepsArg {
    /// Sampling steps S [default: 20].
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct DiffusionArgs {
    /// Training epochs [default: 30].
    #[arg(long)]
    epochs: Option<usize>,
    /// Denoiser seed; the variant uses seed + 1 [default: 0].
    #[arg(long)]
    denoiser_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DetectorArgs {
    /// Training epochs [default: 20].
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Minibatch size N [default: 32].
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct StudentArgs {
    #[command(flatten)]
    common: DetectorArgs,
    /// Student seed [default: 0].
    #[arg(long)]
    student_seed: Option<u64>,
    /// Weight of the distillation term [default: 0.5].
    #[arg(long)]
    lambda: Option<f64>,
    /// Train without the distillation term.
    #[arg(long)]
    no_kd: bool,
    /// Distillation loss: l2 or squared-l2 [default: l2].
    #[arg(long)]
    distill_loss: Option<String>,
    /// Train with and without distillation for every ablation seed.
    #[arg(long, conflicts_with_all = ["no_kd", "student_seed"])]
    ablation: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Untimed passes [default: 2].
    #[arg(long)]
    warmup: Option<usize>,
    /// Timed passes [default: 5].
    #[arg(long)]
    runs: Option<usize>,
    /// Test images per pass [default: 200].
    #[arg(long)]
    items: Option<usize>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let implicit = cli.workdir.join("config.toml");
    let path = cli.config.clone().or_else(|| implicit.exists().then_some(implicit));
    let mut cfg = match path {
        Some(p) => parse_config(&p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let det = |cfg: &mut ExperimentConfig, a: &DetectorArgs| {
        if let Some(v) = a.epochs {
            cfg.detector.epochs = v;
        }
        if let Some(v) = a.lr {
            cfg.detector.lr = v;
        }
        if let Some(v) = a.batch_size {
            cfg.detector.batch_size = v;
        }
    };
    match &cli.command {
        Command::TrainDiffusion(a) => {
            if let Some(v) = a.epochs {
                cfg.denoiser.epochs = v;
            }
            if let Some(v) = a.denoiser_seed {
                cfg.denoiser.seed = v;
            }
        }
        Command::ExtractFeatures(a) => {
            if let Some(v) = a.steps {
                cfg.diffusion.sample_steps = v;
            }
        }
        Command::TrainTeacher(a) => det(&mut cfg, a),
        Command::TrainStudent(a) => {
            det(&mut cfg, &a.common);
            if let Some(v) = a.student_seed {
                cfg.detector.seed = v;
            }
            if let Some(v) = a.lambda {
                cfg.detector.lambda = v;
            }
            if let Some(v) = &a.distill_loss {
                cfg.detector.distill_loss = v.clone();
            }
            if a.no_kd {
                cfg.detector.use_kd = false;
            }
        }
        Command::Bench(a) => {
            if let Some(v) = a.warmup {
                cfg.bench.warmup = v;
            }
            if let Some(v) = a.runs {
                cfg.bench.runs = v;
            }
            if let Some(v) = a.items {
                cfg.bench.items = v;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Invalid(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Invalid(format!("config {}: {}", path.display(), e.message())))
}

fn run(cli: &Cli) -> Result<String, Error> {
    let cfg = load_config(cli)?;
    let wd = Workdir::new(&cli.workdir);
    std::fs::create_dir_all(&wd.root)?;
    Ok(match &cli.command {
        Command::GenData => {
            experiment::gen_data(&cfg, &wd)?;
            format!("real corpora written under {}", wd.path("data").display())
        }
        Command::TrainDiffusion(_) => {
            let (a, b) = experiment::train_diffusion(&cfg, &wd)?;
            format!("denoiser loss {a:.5}, variant loss {b:.5}")
        }
        Command::ExtractFeatures(_) => {
            let n = experiment::extract_features(&cfg, &wd)?;
            format!("features for {n} images")
        }
        Command::TrainTeacher(_) => {
            let t = experiment::train_teacher(&cfg, &wd)?;
            format!("teacher {} frozen", &t.digest()[..12])
        }
        Command::TrainStudent(a) => {
            let runs: Vec<(u64, bool)> = if a.ablation {
                cfg.ablation_seeds.iter().flat_map(|&s| [(s, true), (s, false)]).collect()
            } else {
                vec![(cfg.detector.seed, cfg.detector.use_kd)]
            };
            let mut lines = Vec::new();
            for (seed, kd) in runs {
                let m = experiment::train_student_stage(&cfg, &wd, seed, kd)?;
                let last = m.history.last().expect("at least one epoch");
                lines.push(format!(
                    "student seed={seed} kd={kd} cls={:.4} kd_loss={:.4} -> {}",
                    last.cls,
                    last.kd,
                    wd.student(seed, kd).display()
                ));
            }
            lines.join("\n")
        }
        Command::Evaluate => {
            let ev = experiment::evaluate(&cfg, &wd)?;
            let mut out: Vec<String> = ev
                .generators
                .iter()
                .map(|r| format!("{:<7} {:<32} acc {:.4} ap {:.4}", r.detector, r.generator, r.accuracy, r.ap))
                .collect();
            for r in &ev.ablation {
                out.push(format!(
                    "ablation seed={} kd={} seen_ap {:.4} unseen_ap {:.4}",
                    r.seed, r.use_kd, r.seen_ap, r.unseen_ap
                ));
            }
            out.join("\n")
        }
        Command::Bench(_) => {
            let b = experiment::bench(&cfg, &wd)?;
            let mut out: Vec<String> = b
                .measured
                .iter()
                .map(|r| {
                    format!(
                        "{:<7} median {:.6}s mean {:.6}s calls {} flops {}",
                        r.pipeline, r.median_s, r.mean_s, r.calls_per_item, r.flops_per_item
                    )
                })
                .collect();
            out.push(format!("speedup {:.2}x, flop ratio {:.1}x", b.speedup, b.flops.ratio()));
            out.join("\n")
        }
        Command::Report => {
            let r = experiment::report(&cfg, &wd)?;
            format!(
                "report {} written to {} (kd wins {}/{})",
                r.run_id,
                wd.report().display(),
                r.ablation_summary.kd_wins,
                r.ablation_summary.seeds
            )
        }
    })
}

fn classify(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Invalid(_) => ("config", 3),
        Error::Missing(_) => ("missing-artifact", 4),
        Error::NonFinite(_) | Error::Diverged(_) => ("numeric", 5),
        Error::Format(_) | Error::Shape(_) | Error::Frozen(_) | Error::Json(_) => ("artifact", 1),
        Error::Io(_) => ("io", 1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (kind, code) = classify(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(code)
        }
    }
}
