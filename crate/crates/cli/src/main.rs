//! Command-line front end: corpus preparation, augmentation dumps, batch-plan
//! inspection, training, scoring, significance testing, and experiment grids.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use sentcat::augment::{
    concat_consecutive, concat_random, dump_examples, original_examples, sim_shift, uniform_shift,
    ShiftConfig,
};
use sentcat::batching::{plan_default, plan_sep_batch, SepPairing};
use sentcat::corpus::{
    apply_bpe, learn_bpe, load_corpus, numberize_corpus, BpeModel, BpeSide, ParallelCorpus,
    Vocabulary,
};
use sentcat::eval::{bleu, bootstrap_significance};
use sentcat::harness::{load_experiment_config, run_condition, run_experiment, Condition};
use sentcat::model::save_checkpoint;
use sentcat::training::write_metrics_csv;

#[derive(Parser)]
#[command(name = "sentcat", version, about = "Sentence-concatenation augmentation toolkit for NMT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Source,
    Target,
    Joint,
}

impl From<SideArg> for BpeSide {
    fn from(v: SideArg) -> Self {
        match v {
            SideArg::Source => BpeSide::Source,
            SideArg::Target => BpeSide::Target,
            SideArg::Joint => BpeSide::Joint,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AugmentMode {
    Consec,
    Rand,
    SimShift,
    UniformShift,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Default,
    Sep,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a BPE model and vocabularies from a parallel corpus.
    Prep {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long, default_value_t = 8000)]
        bpe_ops: usize,
        #[arg(long, value_enum, default_value_t = SideArg::Joint)]
        side: SideArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Produce augmented training examples and dump them as TSV.
    Augment {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long, value_enum)]
        mode: AugmentMode,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Selection probability for the shift modes (defaults: 1/3 for
        /// sim-shift, 0.1 for uniform-shift).
        #[arg(long)]
        p: Option<f64>,
        /// Inclusive maximum distance for uniform-shift.
        #[arg(long, default_value_t = 100)]
        max_shift: usize,
        #[arg(long)]
        bpe_model: Option<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan minibatches and dump one line per batch.
    Plan {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        chunk_size: usize,
        #[arg(long, default_value_t = 4096)]
        token_budget: usize,
        #[arg(long, value_enum, default_value_t = PolicyArg::Default)]
        batch_policy: PolicyArg,
        /// Augmentation mixed into the default policy: consec or rand.
        #[arg(long, value_enum)]
        augment: Option<AugmentMode>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train one condition from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        condition: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the first seed of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a hypothesis file against a reference file (tokenized BLEU).
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, name = "ref")]
        reference: PathBuf,
    },
    /// Paired bootstrap significance between two hypothesis files.
    Significance {
        #[arg(long)]
        hyp_a: PathBuf,
        #[arg(long)]
        hyp_b: PathBuf,
        #[arg(long, name = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run an experiment grid from a config file.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated condition subset overriding the config.
        #[arg(long, value_delimiter = ',')]
        conditions: Option<Vec<String>>,
        /// Comma-separated seed list overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Reads a tokenized file into word sequences; empty lines become empty
/// sentences (a scorer must tolerate empty hypotheses).
fn read_token_lines(path: &PathBuf) -> anyhow::Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_owned).collect())
        .collect())
}

fn vocabs_for(corpus: &ParallelCorpus, bpe: Option<&BpeModel>) -> (Vocabulary, Vocabulary) {
    let segment = |sents: Vec<Vec<String>>| -> Vec<Vec<String>> {
        match bpe {
            Some(model) => sents.iter().map(|s| apply_bpe(model, s)).collect(),
            None => sents,
        }
    };
    let src = segment(corpus.pairs.iter().map(|p| p.source.clone()).collect());
    let tgt = segment(corpus.pairs.iter().map(|p| p.target.clone()).collect());
    (
        Vocabulary::build(src.iter().map(Vec::as_slice)),
        Vocabulary::build(tgt.iter().map(Vec::as_slice)),
    )
}

fn main() -> anyhow::Result<()> {
    env_logger::init();
    match Cli::parse().command {
        Command::Prep {
            src,
            tgt,
            bpe_ops,
            side,
            out_dir,
        } => {
            let corpus = load_corpus(&src, &tgt)?;
            let model = learn_bpe(&corpus, bpe_ops, side.into())?;
            let (sv, tv) = vocabs_for(&corpus, Some(&model));
            fs::create_dir_all(&out_dir)?;
            model.save(&out_dir.join("bpe.model"))?;
            sv.save(&out_dir.join("vocab.src"))?;
            tv.save(&out_dir.join("vocab.tgt"))?;
            println!(
                "learned {} merges; vocab sizes src={} tgt={}",
                model.merges.len(),
                sv.len(),
                tv.len()
            );
        }
        Command::Augment {
            src,
            tgt,
            mode,
            seed,
            p,
            max_shift,
            bpe_model,
            out,
        } => {
            let corpus = load_corpus(&src, &tgt)?;
            let bpe = bpe_model.map(|path| BpeModel::load(&path)).transpose()?;
            let (sv, tv) = vocabs_for(&corpus, bpe.as_ref());
            let numberized = numberize_corpus(&corpus, bpe.as_ref(), &sv, &tv);
            let examples = match mode {
                AugmentMode::Consec => concat_consecutive(&numberized),
                AugmentMode::Rand => concat_random(&numberized, seed),
                AugmentMode::SimShift => {
                    let mut cfg = ShiftConfig::sim_shift(seed);
                    if let Some(p) = p {
                        cfg.probability = p;
                    }
                    sim_shift(&numberized, &cfg)
                }
                AugmentMode::UniformShift => {
                    let mut cfg = ShiftConfig::uniform_shift(seed);
                    cfg.max_shift = max_shift;
                    if let Some(p) = p {
                        cfg.probability = p;
                    }
                    uniform_shift(&numberized, &cfg)
                }
            };
            match out {
                Some(path) => {
                    let mut file = fs::File::create(&path)?;
                    dump_examples(&mut file, &examples, &sv, &tv)?;
                }
                None => {
                    let stdout = std::io::stdout();
                    dump_examples(&mut stdout.lock(), &examples, &sv, &tv)?;
                }
            }
        }
        Command::Plan {
            src,
            tgt,
            chunk_size,
            token_budget,
            batch_policy,
            augment,
            seed,
        } => {
            let corpus = load_corpus(&src, &tgt)?;
            let (sv, tv) = vocabs_for(&corpus, None);
            let numberized = numberize_corpus(&corpus, None, &sv, &tv);
            let d_orig = original_examples(&numberized);
            let plan = match batch_policy {
                PolicyArg::Default => {
                    let data = match augment {
                        None => d_orig,
                        Some(AugmentMode::Consec) => {
                            sentcat::augment::combine_training_set(d_orig, concat_consecutive(&numberized))
                        }
                        Some(AugmentMode::Rand) => {
                            sentcat::augment::combine_training_set(d_orig, concat_random(&numberized, seed))
                        }
                        Some(_) => bail!("--augment only accepts consec or rand here"),
                    };
                    plan_default(data, chunk_size, token_budget, seed)?
                }
                PolicyArg::Sep => plan_sep_batch(
                    d_orig,
                    chunk_size,
                    token_budget,
                    seed,
                    SepPairing::Sliding,
                    false,
                )?,
            };
            let stdout = std::io::stdout();
            plan.dump(&mut stdout.lock())?;
        }
        Command::Train {
            config,
            condition,
            out,
            seed,
        } => {
            let cfg = load_experiment_config(&config)?;
            let bundle = cfg.dataset.build_bundle()?;
            let model_cfg = cfg.model.resolve()?;
            let train_cfg = cfg.train.resolve()?;
            let cond = Condition::parse(&condition)?;
            let seed = seed.or_else(|| cfg.run.seeds.first().copied()).unwrap_or(1);

            fs::create_dir_all(&out)?;
            let (row, run) = run_condition(&cond, &bundle, &model_cfg, &train_cfg, seed)?;
            let mut metrics = Vec::new();
            write_metrics_csv(&mut metrics, &run.metrics)?;
            fs::write(out.join("metrics.csv"), metrics)?;
            save_checkpoint(run.best_params(), &out.join("best.ckpt"))?;
            let mut log = fs::File::create(out.join("run.log"))?;
            writeln!(
                log,
                "condition={} seed={} steps={} best_epoch={} wall_clock_s={:.3}",
                row.condition, row.seed, row.steps, row.best_epoch, row.wall_clock_s
            )?;
            println!(
                "{}: dev BLEU {:.2} (token acc {:.4}), test BLEU {:.2}, best epoch {}",
                row.condition, row.dev_bleu, row.dev_token_acc, row.test_bleu, row.best_epoch
            );
        }
        Command::Score { hyp, reference } => {
            let hyps = read_token_lines(&hyp)?;
            let refs = read_token_lines(&reference)?;
            let report = bleu(&hyps, &refs)?;
            println!("{report}");
        }
        Command::Significance {
            hyp_a,
            hyp_b,
            reference,
            resamples,
            seed,
        } => {
            let a = read_token_lines(&hyp_a)?;
            let b = read_token_lines(&hyp_b)?;
            let refs = read_token_lines(&reference)?;
            let report = bootstrap_significance(&a, &b, &refs, resamples, seed)?;
            println!(
                "A mean {:.2}, B mean {:.2}, A wins {:.1}%, p = {:.4} ({} resamples, seed {})",
                report.mean_a,
                report.mean_b,
                100.0 * report.wins_a,
                report.p_value,
                report.resamples,
                report.seed
            );
        }
        Command::Experiment {
            config,
            conditions,
            seeds,
            out,
        } => {
            let mut cfg = load_experiment_config(&config)?;
            if let Some(conditions) = conditions {
                cfg.run.conditions = conditions;
            }
            if let Some(seeds) = seeds {
                cfg.run.seeds = seeds;
            }
            let report = run_experiment(&cfg, &out)?;
            for a in &report.aggregates {
                let delta = a
                    .dev_delta
                    .map(|d| format!(" ({d:+.2})"))
                    .unwrap_or_default();
                let mark = if a.significant { " †" } else { "" };
                println!(
                    "{:<32} dev {:.2}{delta}  test {:.2}{mark}",
                    a.condition, a.dev_bleu, a.test_bleu
                );
            }
            println!("report written to {}", out.display());
        }
    }
    Ok(())
}
