//! Multi-seed experiment: generate data, train, boost, evaluate on the
//! test split, and write stage tables.
//!
//! Output layout under the experiment directory:
//!
//! ```text
//! seed-<s>/data/        generated dataset (manifest.jsonl, frames/)
//! seed-<s>/train/       training checkpoints and metrics.jsonl
//! seed-<s>/model.afw    evaluated model (main, plus replica when boosted)
//! seed-<s>/report.json  MetricReport and per-video predictions
//! stages.txt            balanced accuracy per aggregation stage
//! boosting.txt          log-loss of baseline, +boost, +boost+TTA
//! tables.json           both tables as structured records
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::boosting::{train_boosting, BoostConfig};
use crate::data::{generate_synthetic_dataset, GeneratorConfig, Manifest, ManifestFaces, Split, TrackConfig, MANIFEST_FILE};
use crate::detector::Detector;
use crate::error::{CoreError, Result};
use crate::eval::{evaluate_split, SplitEvaluation};
use crate::inference::{Stage, TtaConfig};
use crate::metrics::DEFAULT_CLIP;
use crate::model::ModelConfig;
use crate::trainer::{train, TrackSet, TrainConfig, TrainJob};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phases {
    pub generate: bool,
    pub train: bool,
    pub boost: bool,
    pub tta: bool,
}

impl Default for Phases {
    fn default() -> Self {
        Phases { generate: true, train: true, boost: true, tta: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Each seed drives data generation, initialization, sampling, boosting
    /// and TTA flips of one run.
    pub seeds: Vec<u64>,
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub track: TrackConfig,
    pub train: TrainConfig,
    pub boost: BoostConfig,
    pub tta: TtaConfig,
    pub clip: f64,
    /// Evaluate the best-on-validation parameters instead of the last ones.
    pub use_best_checkpoint: bool,
    pub phases: Phases,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "default".into(),
            seeds: vec![0, 1, 2, 3, 4],
            data: GeneratorConfig::default(),
            model: ModelConfig::default(),
            track: TrackConfig::default(),
            train: TrainConfig { videos_per_update: 8, frames_per_arcface_update: 64, max_steps: 200, ..TrainConfig::default() },
            boost: BoostConfig::default(),
            tta: TtaConfig::default(),
            clip: DEFAULT_CLIP,
            use_best_checkpoint: false,
            phases: Phases::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CoreError::config("experiment needs at least one seed"));
        }
        self.data.validate()?;
        self.model.validate()?;
        self.track.validate()?;
        self.train.validate()?;
        self.tta.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub evaluation: SplitEvaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub row: String,
    pub per_seed: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tables {
    pub seeds: Vec<u64>,
    /// Balanced accuracy of logit-mean, AFW and GRU.
    pub stages: Vec<TableRow>,
    /// Log-loss of the GRU baseline, +boost and +boost+TTA.
    pub boosting: Vec<TableRow>,
}

impl Tables {
    pub fn stage_mean(&self, row: &str) -> Option<f64> {
        self.stages.iter().find(|r| r.row == row).and_then(|r| r.mean)
    }

    pub fn boosting_mean(&self, row: &str) -> Option<f64> {
        self.boosting.iter().find(|r| r.row == row).and_then(|r| r.mean)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub results: Vec<SeedResult>,
    pub tables: Tables,
}

fn phase<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| CoreError::Phase { phase: name, source: Box::new(e) })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

/// Runs one seed end to end and returns its test-split evaluation.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SplitEvaluation> {
    let data_dir = dir.join("data");
    let manifest = if cfg.phases.generate {
        let g = GeneratorConfig { seed, ..cfg.data.clone() };
        phase("generate", generate_synthetic_dataset(&g, &data_dir))?
    } else {
        phase("generate", Manifest::load(data_dir.join(MANIFEST_FILE)))?
    };
    let provider = ManifestFaces;
    let mut detector = if cfg.phases.train {
        let job = TrainJob {
            manifest: &manifest,
            provider: &provider,
            model: cfg.model.clone(),
            track: cfg.track.clone(),
            train: TrainConfig { seed, ..cfg.train.clone() },
            out_dir: Some(dir.join("train")),
        };
        let outcome = phase("train", train(&job))?;
        let mut d = outcome.detector;
        if let (true, Some((update, loss, store))) = (cfg.use_best_checkpoint, outcome.best) {
            info!("seed {seed}: using parameters from update {update} (validation log-loss {loss:.4})");
            d = d.with_main(store);
        }
        d
    } else {
        phase("train", Detector::untrained(&cfg.model, &cfg.track, seed))?
    };
    if cfg.phases.boost {
        let val = phase("boost", TrackSet::load(&manifest, Split::Val, &provider, &cfg.track))?;
        let b = BoostConfig { seed, ..cfg.boost.clone() };
        phase("boost", train_boosting(&mut detector, &val.tracks, &b))?;
    }
    phase("save", detector.save(&dir.join("model.afw"), detector.meta("experiment")))?;
    let tta = TtaConfig { seed, enabled: cfg.phases.tta && cfg.tta.enabled, ..cfg.tta.clone() };
    let mut eval = phase("eval", evaluate_split(&detector, &manifest, Split::Test, &provider, Some(&tta), cfg.clip))?;
    eval.report.seed = Some(seed);
    let json = serde_json::to_string_pretty(&eval).expect("report serializes");
    phase("eval", write(&dir.join("report.json"), &json))?;
    Ok(eval)
}

fn row(name: &str, values: Vec<Option<f64>>) -> TableRow {
    let mean = values.iter().copied().collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / v.len() as f64);
    TableRow { row: name.into(), per_seed: values, mean }
}

pub fn build_tables(results: &[SeedResult]) -> Tables {
    let ba = |stage: Stage| -> Vec<Option<f64>> {
        results.iter().map(|r| r.evaluation.report.stage(stage).and_then(|m| m.balanced_accuracy.value())).collect()
    };
    let ll = |stage: Stage| -> Vec<Option<f64>> { results.iter().map(|r| r.evaluation.report.stage(stage).map(|m| m.log_loss)).collect() };
    Tables {
        seeds: results.iter().map(|r| r.seed).collect(),
        stages: vec![row("logit-mean", ba(Stage::LogitMean)), row("afw", ba(Stage::Afw)), row("gru", ba(Stage::Gru))],
        boosting: vec![row("baseline", ll(Stage::Gru)), row("+boost", ll(Stage::Boosted)), row("+boost+tta", ll(Stage::BoostedTta))],
    }
}

fn render(title: &str, seeds: &[u64], rows: &[TableRow], percent: bool) -> String {
    let fmt = |v: Option<f64>| match v {
        Some(x) if percent => format!("{:.2}%", 100.0 * x),
        Some(x) => format!("{x:.4}"),
        None => "-".into(),
    };
    let mut header = vec!["".to_string()];
    header.extend(seeds.iter().map(|s| format!("seed {s}")));
    header.push("mean".into());
    let mut cells = vec![header];
    for r in rows {
        let mut line = vec![r.row.clone()];
        line.extend(r.per_seed.iter().map(|v| fmt(*v)));
        line.push(fmt(r.mean));
        cells.push(line);
    }
    let widths: Vec<usize> = (0..cells[0].len()).map(|c| cells.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
    let mut out = format!("{title}\n");
    for line in &cells {
        let parts: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    }
    out
}

impl Tables {
    pub fn stages_text(&self) -> String {
        render("Balanced accuracy on the test split", &self.seeds, &self.stages, true)
    }

    pub fn boosting_text(&self) -> String {
        render("Log-loss on the test split", &self.seeds, &self.boosting, false)
    }
}

pub const STAGES_TABLE: &str = "stages.txt";
pub const BOOSTING_TABLE: &str = "boosting.txt";
pub const TABLES_JSON: &str = "tables.json";

pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    phase("config", cfg.validate())?;
    std::fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    write(&out.join("experiment.json"), &serde_json::to_string_pretty(cfg).expect("config serializes"))?;
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let dir: PathBuf = out.join(format!("seed-{seed}"));
        info!("experiment `{}`: seed {seed}", cfg.name);
        results.push(SeedResult { seed, evaluation: run_seed(cfg, seed, &dir)? });
    }
    let tables = build_tables(&results);
    write(&out.join(STAGES_TABLE), &tables.stages_text())?;
    write(&out.join(BOOSTING_TABLE), &tables.boosting_text())?;
    write(&out.join(TABLES_JSON), &serde_json::to_string_pretty(&tables).expect("tables serialize"))?;
    Ok(ExperimentReport { config: cfg.clone(), results, tables })
}
