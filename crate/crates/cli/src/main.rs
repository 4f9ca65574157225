mod config;

use std::path::{Path, PathBuf};

use afw_core::boosting::{train_boosting, BoostConfig};
use afw_core::data::{generate_synthetic_dataset, GeneratorConfig, Manifest, ManifestFaces, Split, MANIFEST_FILE};
use afw_core::eval::evaluate_split;
use afw_core::experiment::{run_experiment, ExperimentConfig};
use afw_core::gradcheck::{check_seed, GradcheckConfig};
use afw_core::inference::{predict_video, Stage, TtaConfig};
use afw_core::trainer::{train, TrackSet, TrainConfig, TrainJob, BEST_CHECKPOINT, FINAL_CHECKPOINT};
use afw_core::Detector;
use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "afw", version, about = "Face-track manipulation detector")]
struct Cli {
    /// TOML experiment config; every section is optional.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.max_steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Root for everything the command writes.
    #[arg(long, env = "AFW_OUTPUT_ROOT", default_value = "runs", global = true)]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset into `<out>/data`.
    GenerateData {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the main network; checkpoints go to `<out>/train`.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a boosting replica on the validation split of a trained checkpoint.
    TrainBoost {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `<out>/boosted.afw`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a split and write `<out>/report.json`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        no_tta: bool,
    },
    /// Score one video of the dataset.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        video: String,
        /// logit-mean, afw, gru, boosted or boosted+tta.
        #[arg(long, default_value = "gru")]
        stage: Stage,
    },
    /// Finite-difference check of the end-to-end gradient on tiny networks.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        #[arg(long, default_value_t = 300)]
        probes: usize,
    },
    /// Full multi-seed experiment; tables go to `<out>/<name>`.
    Experiment {
        /// Replaces the configured seed list; repeatable.
        #[arg(long)]
        seed: Vec<u64>,
    },
}

fn data_dir(cli: &Cli, data: &Option<PathBuf>) -> PathBuf {
    data.clone().unwrap_or_else(|| cli.out.join("data"))
}

fn manifest(dir: &Path) -> Result<Manifest> {
    Manifest::load(dir.join(MANIFEST_FILE)).with_context(|| format!("loading dataset in {}", dir.display()))
}

fn load_detector(path: &Path) -> Result<Detector<f32>> {
    Ok(Detector::load(path)?.0)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg: ExperimentConfig = config::load(cli.config.as_deref(), &cli.overrides)?;
    let provider = ManifestFaces;
    match &cli.command {
        Command::GenerateData { seed } => {
            let g = GeneratorConfig { seed: seed.unwrap_or(cfg.data.seed), ..cfg.data.clone() };
            let dir = cli.out.join("data");
            let m = generate_synthetic_dataset(&g, &dir)?;
            for split in Split::ALL {
                let (real, fake) = m.class_counts(split);
                println!("{split}: {real} real, {fake} fake");
            }
            println!("wrote {}", dir.join(MANIFEST_FILE).display());
        }
        Command::Train { data, seed } => {
            let m = manifest(&data_dir(cli, data))?;
            let out = cli.out.join("train");
            let job = TrainJob {
                manifest: &m,
                provider: &provider,
                model: cfg.model.clone(),
                track: cfg.track.clone(),
                train: TrainConfig { seed: seed.unwrap_or(cfg.train.seed), ..cfg.train.clone() },
                out_dir: Some(out.clone()),
            };
            let outcome = train(&job)?;
            if let Some((update, loss, _)) = &outcome.best {
                println!("best validation log-loss {loss:.4} at update {update}");
            }
            println!("wrote {} and {}", out.join(FINAL_CHECKPOINT).display(), out.join(BEST_CHECKPOINT).display());
        }
        Command::TrainBoost { checkpoint, data, seed, output } => {
            let m = manifest(&data_dir(cli, data))?;
            let mut d = load_detector(checkpoint)?;
            let val = TrackSet::load(&m, Split::Val, &provider, &d.track)?;
            let b = BoostConfig { seed: seed.unwrap_or(cfg.boost.seed), ..cfg.boost.clone() };
            let log = train_boosting(&mut d, &val.tracks, &b)?;
            if let Some(last) = log.last() {
                info!("boosting finished after {} updates", last.step);
            }
            let path = output.clone().unwrap_or_else(|| cli.out.join("boosted.afw"));
            d.save(&path, d.meta("boosted"))?;
            println!("wrote {}", path.display());
        }
        Command::Eval { checkpoint, data, split, no_tta } => {
            let m = manifest(&data_dir(cli, data))?;
            let d = load_detector(checkpoint)?;
            let tta = TtaConfig { enabled: !no_tta && cfg.tta.enabled && d.boost.is_some(), ..cfg.tta.clone() };
            let mut eval = evaluate_split(&d, &m, *split, &provider, Some(&tta), cfg.clip)?;
            eval.report.config = serde_json::to_value(&cfg)?;
            for s in &eval.report.stages {
                let ba = s.balanced_accuracy.value().map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v));
                println!("{:<12} balanced accuracy {ba:>8}  log-loss {:.4}", s.stage.name(), s.log_loss);
            }
            std::fs::create_dir_all(&cli.out)?;
            let path = cli.out.join("report.json");
            std::fs::write(&path, serde_json::to_string_pretty(&eval)?)?;
            println!("wrote {}", path.display());
        }
        Command::Infer { checkpoint, data, video, stage } => {
            let m = manifest(&data_dir(cli, data))?;
            let d = load_detector(checkpoint)?;
            let record = m.get(video).ok_or_else(|| anyhow!("no video `{video}` in the manifest"))?;
            let score = predict_video(&d, &m, record, &provider, *stage, &cfg.tta)?;
            println!("{}", serde_json::to_string_pretty(&score)?);
        }
        Command::Gradcheck { seeds, probes } => {
            let g = GradcheckConfig { probes: *probes, ..GradcheckConfig::default() };
            let mut failed = 0;
            for seed in 0..*seeds {
                let r = check_seed(&g, seed)?;
                let ok = r.passed(g.tolerance);
                failed += usize::from(!ok);
                println!(
                    "seed {seed:>3}: {} entries, max relative error {:.2e} ({}) {}",
                    r.probed,
                    r.max_relative_error,
                    r.worst,
                    if ok { "ok" } else { "FAILED" }
                );
            }
            if failed > 0 {
                bail!("{failed} of {seeds} seeds exceed relative error {:e}", g.tolerance);
            }
        }
        Command::Experiment { seed } => {
            let mut cfg = cfg.clone();
            if !seed.is_empty() {
                cfg.seeds = seed.clone();
            }
            let dir = cli.out.join(&cfg.name);
            let report = run_experiment(&cfg, &dir)?;
            println!("{}\n{}", report.tables.stages_text(), report.tables.boosting_text());
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
