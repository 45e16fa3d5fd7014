//! Experiment configuration files (TOML) and grid execution with on-disk
//! artifacts: report.csv, timings.csv, buckets.csv, plus per-run metrics
//! logs and best-checkpoint files in the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Deserialize;

use crate::corpus::{learn_bpe, load_corpus, numberize_corpus, BpeSide, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::eval_set;
use crate::harness::toy::{self, ToySpec, ToyTask};
use crate::harness::{
    aggregate, length_bucket_report, run_condition, write_buckets_csv, write_report_csv,
    write_timings_csv, Condition, ExperimentReport, RunRow, DEFAULT_BUCKET_EDGES,
};
use crate::model::{save_checkpoint, ModelConfig};
use crate::training::{write_metrics_csv, DataBundle, TrainConfig};

fn default_jobs() -> usize {
    1
}

fn default_bucket_edges() -> Vec<usize> {
    DEFAULT_BUCKET_EDGES.to_vec()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub run: RunConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub conditions: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_bucket_edges")]
    pub bucket_edges: Vec<usize>,
}

/// Model hyperparameters, optionally starting from a named preset.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub model_dim: Option<usize>,
    pub ff_dim: Option<usize>,
    pub dropout: Option<f64>,
    pub max_position: Option<usize>,
    pub tie_embeddings: Option<bool>,
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match self.preset.as_deref() {
            None | Some("standard") => ModelConfig::preset_standard(),
            Some("gl-en") => ModelConfig::preset_gl_en(),
            Some(other) => {
                return Err(Error::InvalidConfig(format!("unknown model preset {other:?}")))
            }
        };
        if let Some(v) = self.layers {
            cfg.layers = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.model_dim {
            cfg.model_dim = v;
        }
        if let Some(v) = self.ff_dim {
            cfg.ff_dim = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.max_position {
            cfg.max_position = v;
        }
        if let Some(v) = self.tie_embeddings {
            cfg.tie_embeddings = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub preset: Option<String>,
    pub steps_per_epoch: Option<usize>,
    pub epochs: Option<usize>,
    pub label_smoothing: Option<f64>,
    pub lr_scale: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub clip_norm: Option<f64>,
    pub chunk_size: Option<usize>,
    pub token_budget: Option<usize>,
    pub beam: Option<usize>,
    pub regenerate_each_epoch: Option<bool>,
}

impl TrainSection {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match self.preset.as_deref() {
            None => TrainConfig::default(),
            Some("gl-en") => TrainConfig::preset_gl_en(),
            Some("sk-en") => TrainConfig::preset_sk_en(),
            Some("en-vi") => TrainConfig::preset_en_vi(),
            Some("en-he") => TrainConfig::preset_en_he(),
            Some(other) => {
                return Err(Error::InvalidConfig(format!("unknown train preset {other:?}")))
            }
        };
        if let Some(v) = self.steps_per_epoch {
            cfg.steps_per_epoch = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.label_smoothing {
            cfg.label_smoothing = v;
        }
        if let Some(v) = self.lr_scale {
            cfg.lr_scale = v;
        }
        if let Some(v) = self.warmup_steps {
            cfg.warmup_steps = v;
        }
        if let Some(v) = self.clip_norm {
            cfg.clip_norm = v;
        }
        if let Some(v) = self.chunk_size {
            cfg.chunk_size = v;
        }
        if let Some(v) = self.token_budget {
            cfg.token_budget = v;
        }
        if let Some(v) = self.beam {
            cfg.beam = v;
        }
        if let Some(v) = self.regenerate_each_epoch {
            cfg.regenerate_each_epoch = v;
        }
        Ok(cfg)
    }
}

fn default_toy_dev() -> usize {
    200
}

fn default_toy_vocab() -> usize {
    12
}

fn default_min_len() -> usize {
    3
}

fn default_max_len() -> usize {
    8
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    ToyCopy(ToySection),
    ToyReversal(ToySection),
    Files(FilesSection),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySection {
    pub pairs: usize,
    #[serde(default = "default_toy_dev")]
    pub dev_pairs: usize,
    #[serde(default = "default_toy_dev")]
    pub test_pairs: usize,
    #[serde(default = "default_toy_vocab")]
    pub vocab: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub data_seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilesSection {
    pub train_source: PathBuf,
    pub train_target: PathBuf,
    pub dev_source: PathBuf,
    pub dev_target: PathBuf,
    pub test_source: PathBuf,
    pub test_target: PathBuf,
    /// BPE merge operations learned on the training data; 0 keeps raw
    /// character segmentation.
    pub bpe_ops: usize,
    #[serde(default)]
    pub bpe_side: BpeSideConfig,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum BpeSideConfig {
    Source,
    Target,
    #[default]
    Joint,
}

impl From<BpeSideConfig> for BpeSide {
    fn from(v: BpeSideConfig) -> Self {
        match v {
            BpeSideConfig::Source => BpeSide::Source,
            BpeSideConfig::Target => BpeSide::Target,
            BpeSideConfig::Joint => BpeSide::Joint,
        }
    }
}

impl DatasetConfig {
    fn toy_spec(section: &ToySection, task: ToyTask) -> ToySpec {
        ToySpec {
            task,
            pairs: section.pairs,
            dev_pairs: section.dev_pairs,
            test_pairs: section.test_pairs,
            vocab: section.vocab,
            min_len: section.min_len,
            max_len: section.max_len,
            seed: section.data_seed,
        }
    }

    pub fn build_bundle(&self) -> Result<DataBundle> {
        match self {
            DatasetConfig::ToyCopy(s) => toy::bundle(&toy::generate(&Self::toy_spec(s, ToyTask::Copy))),
            DatasetConfig::ToyReversal(s) => {
                toy::bundle(&toy::generate(&Self::toy_spec(s, ToyTask::Reversal)))
            }
            DatasetConfig::Files(f) => {
                let train = load_corpus(&f.train_source, &f.train_target)?;
                let dev = load_corpus(&f.dev_source, &f.dev_target)?;
                let test = load_corpus(&f.test_source, &f.test_target)?;
                let bpe = learn_bpe(&train, f.bpe_ops, f.bpe_side.into())?;

                let segment = |sents: Vec<Vec<String>>| -> Vec<Vec<String>> {
                    sents
                        .iter()
                        .map(|s| crate::corpus::apply_bpe(&bpe, s))
                        .collect()
                };
                let src_sub = segment(train.pairs.iter().map(|p| p.source.clone()).collect());
                let tgt_sub = segment(train.pairs.iter().map(|p| p.target.clone()).collect());
                let source_vocab = Vocabulary::build(src_sub.iter().map(Vec::as_slice));
                let target_vocab = Vocabulary::build(tgt_sub.iter().map(Vec::as_slice));

                let train_num = numberize_corpus(&train, Some(&bpe), &source_vocab, &target_vocab);
                let dev_num = numberize_corpus(&dev, Some(&bpe), &source_vocab, &target_vocab);
                let test_num = numberize_corpus(&test, Some(&bpe), &source_vocab, &target_vocab);
                Ok(DataBundle {
                    dev: eval_set(&dev, &dev_num),
                    dev_examples: crate::augment::original_examples(&dev_num),
                    test: eval_set(&test, &test_num),
                    train: train_num,
                    source_vocab,
                    target_vocab,
                })
            }
        }
    }
}

pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn run_file_stem(condition: &str, seed: u64) -> String {
    format!("{}_{seed}", condition.replace('+', "_"))
}

/// Executes the configured grid and writes every artifact into `out_dir`:
/// per-run `metrics_*.csv` and `ckpt_*.bin`, then `report.csv`,
/// `timings.csv`, and `buckets.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    fs::create_dir_all(out_dir)?;
    let bundle = cfg.dataset.build_bundle()?;
    let model_cfg = cfg.model.resolve()?;
    let train_cfg = cfg.train.resolve()?;
    let conditions: Vec<Condition> = cfg
        .run
        .conditions
        .iter()
        .map(|n| Condition::parse(n))
        .collect::<Result<_>>()?;
    if conditions.is_empty() {
        return Err(Error::Invalid("need at least one condition".into()));
    }
    if cfg.run.seeds.is_empty() {
        return Err(Error::Invalid("need at least one seed".into()));
    }

    let tasks: Vec<(usize, &Condition, u64)> = conditions
        .iter()
        .flat_map(|c| cfg.run.seeds.iter().map(move |&s| (c, s)))
        .enumerate()
        .map(|(i, (c, s))| (i, c, s))
        .collect();
    let results: Mutex<Vec<Option<Result<RunRow>>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = cfg.run.jobs.max(1).min(tasks.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= tasks.len() {
                    break;
                }
                let (slot, cond, seed) = tasks[i];
                let outcome = (|| -> Result<RunRow> {
                    let (row, run) = run_condition(cond, &bundle, &model_cfg, &train_cfg, seed)?;
                    let stem = run_file_stem(&cond.name, seed);
                    let mut metrics = Vec::new();
                    write_metrics_csv(&mut metrics, &run.metrics)?;
                    fs::write(out_dir.join(format!("metrics_{stem}.csv")), metrics)?;
                    save_checkpoint(run.best_params(), &out_dir.join(format!("ckpt_{stem}.bin")))?;
                    Ok(row)
                })();
                results.lock().unwrap()[slot] = Some(outcome);
            });
        }
    });

    let mut rows = Vec::with_capacity(tasks.len());
    for slot in results.into_inner().unwrap() {
        rows.push(slot.expect("worker filled every slot")?);
    }
    let aggregates = aggregate(&rows, &conditions, &bundle.test.references)?;
    let report = ExperimentReport { rows, aggregates };

    let mut buf = Vec::new();
    write_report_csv(&mut buf, &report)?;
    fs::write(out_dir.join("report.csv"), buf)?;

    let mut buf = Vec::new();
    write_timings_csv(&mut buf, &report)?;
    fs::write(out_dir.join("timings.csv"), buf)?;

    // Figure-1 style length-bucket table from each condition's best seed.
    let train_lengths: Vec<usize> = bundle.train.pairs.iter().map(|p| p.source.len()).collect();
    let source_lengths: Vec<usize> = bundle.test.sources.iter().map(|s| s.len() - 1).collect();
    let mut buf = Vec::new();
    writeln!(&mut buf, "condition,lo,hi,count,bleu,train_percentile_at_hi")
        .map_err(Error::Io)?;
    for cond in &conditions {
        let best = report
            .rows
            .iter()
            .filter(|r| r.condition == cond.name)
            .max_by(|a, b| {
                a.dev_bleu
                    .partial_cmp(&b.dev_bleu)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("at least one row per condition");
        let buckets = length_bucket_report(
            &best.test_hyps,
            &bundle.test.references,
            &source_lengths,
            &cfg.run.bucket_edges,
            &train_lengths,
        )?;
        write_buckets_csv(&mut buf, &cond.name, &buckets)?;
    }
    fs::write(out_dir.join("buckets.csv"), buf)?;

    Ok(report)
}

use std::io::Write;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_toy_experiment_config() {
        let text = r#"
            [dataset]
            kind = "toy-reversal"
            pairs = 100
            dev_pairs = 10
            test_pairs = 10

            [model]
            layers = 1
            heads = 2
            model_dim = 16
            ff_dim = 16
            dropout = 0.0

            [train]
            steps_per_epoch = 2
            epochs = 1
            token_budget = 64
            beam = 1

            [run]
            conditions = ["baseline"]
            seeds = [1]
        "#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        let model = cfg.model.resolve().unwrap();
        assert_eq!(model.layers, 1);
        assert_eq!(model.heads, 2);
        let train = cfg.train.resolve().unwrap();
        assert_eq!(train.epochs, 1);
        assert!(matches!(cfg.dataset, DatasetConfig::ToyReversal(_)));
    }

    #[test]
    fn presets_resolve_by_name() {
        let section = ModelSection {
            preset: Some("gl-en".into()),
            ..ModelSection::default()
        };
        let cfg = section.resolve().unwrap();
        assert_eq!((cfg.layers, cfg.heads), (4, 4));
        assert_eq!(cfg.dropout, 0.4);

        let t = TrainSection {
            preset: Some("en-he".into()),
            ..TrainSection::default()
        };
        assert_eq!(t.resolve().unwrap().steps_per_epoch, 2000);
    }

    #[test]
    fn unknown_preset_is_an_error() {
        let section = ModelSection {
            preset: Some("nope".into()),
            ..ModelSection::default()
        };
        assert!(section.resolve().is_err());
    }

    #[test]
    fn toy_experiment_writes_all_artifacts() {
        let text = r#"
            [dataset]
            kind = "toy-copy"
            pairs = 60
            dev_pairs = 6
            test_pairs = 6
            vocab = 6
            min_len = 2
            max_len = 4

            [model]
            layers = 1
            heads = 2
            model_dim = 16
            ff_dim = 16
            dropout = 0.0
            max_position = 64

            [train]
            steps_per_epoch = 2
            epochs = 1
            token_budget = 64
            warmup_steps = 10
            beam = 1

            [run]
            conditions = ["baseline", "rand"]
            seeds = [1]
            jobs = 2
        "#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(report.rows.len(), 2);
        for name in [
            "report.csv",
            "timings.csv",
            "buckets.csv",
            "metrics_baseline_1.csv",
            "metrics_rand_1.csv",
            "ckpt_baseline_1.bin",
            "ckpt_rand_1.bin",
        ] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
    }
}
