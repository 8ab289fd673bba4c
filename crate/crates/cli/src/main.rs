use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use xmreg::error::{Error, Result};
use xmreg::geometry::CameraIntrinsics;
use xmreg::harness::{
    ablate, evaluate, train, uncertainty_separation, write_csv, Checkpoint, ExperimentConfig, MetricsReport, Panel,
    TrainReport,
};
use xmreg::pose::{ransac_pnp, Correspondence, PnPProblem};
use xmreg::scenegen::{generate_dataset, read_dataset, write_dataset, SceneSample};

/// Image-to-point-cloud registration on synthetic scenes.
#[derive(Parser)]
#[command(name = "xmreg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration, TOML or JSON (by `.json` extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed and the RANSAC seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, val and test scenes from the configured seed splits.
    Generate(Common),
    /// Train a model on `<data>/train.xmrg`, validating on `<data>/val.xmrg`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to the output directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on `<data>/test.xmrg`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `<out>/checkpoint.xmck`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Robust pose from a JSON list of 2-d/3-d correspondences.
    Register {
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the pose JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every cell of the ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Variance of occluded against clean patches for a checkpoint.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path)?;
    let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| Error::Parse {
            offset: e.span().map_or(0, |s| s.start),
            message: format!("{}: {}", path.display(), e.message()),
        })?
    };
    Ok(cfg)
}

fn setup(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.eval.ransac.seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(&common.out)?;
    Ok(cfg)
}

fn split(dir: &Path, name: &str) -> Result<Vec<SceneSample>> {
    let path = dir.join(format!("{name}.xmrg"));
    if !path.exists() {
        return Err(Error::Usage(format!("{} not found; run `xmreg generate` first", path.display())));
    }
    Ok(read_dataset(&path)?.samples)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn generate(common: &Common) -> Result<()> {
    let cfg = setup(common)?;
    for (name, range) in [("train", &cfg.splits.train), ("val", &cfg.splits.val), ("test", &cfg.splits.test)] {
        let seeds: Vec<u64> = range.clone().collect();
        let samples = generate_dataset(&cfg.scene, &seeds)?;
        let path = common.out.join(format!("{name}.xmrg"));
        write_dataset(&path, &cfg.scene, &samples)?;
        info!("wrote {} scenes to {}", samples.len(), path.display());
    }
    Ok(())
}

fn run_train(common: &Common, data: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let cfg = setup(common)?;
    let data = data.unwrap_or(&common.out);
    let train_set = split(data, "train")?;
    let val_set = split(data, "val")?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let run = train(&cfg.train, &train_set, &val_set, &cfg.eval, resume)?;
    run.checkpoint.save(&common.out.join("checkpoint.xmck"))?;
    write_json(&common.out.join("train_report.json"), &run.report)?;
    info!("checkpoint at step {} written to {}", run.checkpoint.step, common.out.display());
    match run.aborted {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn checkpoint_path(common: &Common, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint.map_or_else(|| common.out.join("checkpoint.xmck"), Path::to_path_buf)
}

fn run_eval(common: &Common, data: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = setup(common)?;
    let ck = Checkpoint::load(&checkpoint_path(common, checkpoint))?;
    let test = split(data.unwrap_or(&common.out), "test")?;
    let evaluation = evaluate(&ck.params, &ck.config, &cfg.eval, &test)?;
    let variance = if ck.config.flags.enable_uncertainty {
        uncertainty_separation(&ck.params, &ck.config, &test)
            .map_err(|e| warn!("no variance statistics: {e}"))
            .ok()
    } else {
        None
    };
    let history_path = common.out.join("train_report.json");
    let history: TrainReport = match fs::read_to_string(&history_path) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => TrainReport::default(),
    };
    write_csv(fs::File::create(common.out.join("metrics.csv"))?, &evaluation.scenes)?;
    let report = MetricsReport::new(&cfg.eval, evaluation, history.loss_curve, history.validation, variance);
    write_json(&common.out.join("metrics.json"), &report)?;
    let m = &report.means;
    println!("synthetic IR {:.4}  FMR {:.4}  RR {:.4}", m.ir, m.fmr, m.rr);
    Ok(())
}

#[derive(Serialize)]
struct PoseOutput {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    /// Reprojection RMSE over inliers, pixels.
    rmse: f64,
    inliers: usize,
    success: bool,
}

fn run_register(matches: &Path, intrinsics: &Path, config: Option<&Path>, seed: u64, out: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.eval.ransac.seed = seed;
    cfg.eval.ransac.validate()?;
    let correspondences: Vec<Correspondence> = serde_json::from_str(&fs::read_to_string(matches)?)
        .map_err(|e| Error::Usage(format!("{}: {e}", matches.display())))?;
    let intrinsics: CameraIntrinsics = serde_json::from_str(&fs::read_to_string(intrinsics)?)
        .map_err(|e| Error::Usage(format!("{}: {e}", intrinsics.display())))?;
    let est = ransac_pnp(&PnPProblem { correspondences, intrinsics }, &cfg.eval.ransac)?;
    let tr = est.transform.translation();
    let pose = PoseOutput {
        r: est.transform.rotation_row_major(),
        t: [tr.x, tr.y, tr.z],
        rmse: est.rmse_px,
        inliers: est.inlier_count(),
        success: est.success,
    };
    let text = serde_json::to_string_pretty(&pose)?;
    if let Some(path) = out {
        fs::write(path, format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(())
}

fn run_ablate(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = setup(common)?;
    let data = data.unwrap_or(&common.out);
    let report = ablate(&cfg.train, &cfg.eval, &cfg.ablate, &split(data, "train")?, &split(data, "test")?)?;
    report.write_csv(fs::File::create(common.out.join("ablation.csv"))?)?;
    write_json(&common.out.join("ablation.json"), &report)?;
    let table = report.table();
    fs::write(common.out.join("ablation.txt"), &table)?;
    for panel in [Panel::Modules, Panel::GammaSig, Panel::LambdaGrl] {
        if let Some(svg) = report.svg(panel) {
            fs::write(common.out.join(format!("ablation_{}.svg", panel.name())), svg)?;
        }
    }
    print!("{table}");
    Ok(())
}

fn run_report(common: &Common, data: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    setup(common)?;
    let ck = Checkpoint::load(&checkpoint_path(common, checkpoint))?;
    let test = split(data.unwrap_or(&common.out), "test")?;
    let sep = uncertainty_separation(&ck.params, &ck.config, &test)?;
    write_json(&common.out.join("uncertainty.json"), &sep)?;
    println!(
        "mean σ² corrupted {:.6} (n={})  clean {:.6} (n={})  t {:.3}  p {:.3e}",
        sep.corrupted.mean, sep.corrupted.n, sep.clean.mean, sep.clean.n, sep.t, sep.p_value
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => generate(&c),
        Command::Train { common, data, resume } => run_train(&common, data.as_deref(), resume.as_deref()),
        Command::Eval { common, data, checkpoint } => run_eval(&common, data.as_deref(), checkpoint.as_deref()),
        Command::Register { matches, intrinsics, config, seed, out } => {
            run_register(&matches, &intrinsics, config.as_deref(), seed, out.as_deref())
        }
        Command::Ablate { common, data } => run_ablate(&common, data.as_deref()),
        Command::Report { common, data, checkpoint } => run_report(&common, data.as_deref(), checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
