//! The experiment harness: named conditions wiring augmentation, masking,
//! batching policy, and position resets together; grid execution over seeds;
//! and the CSV reports.

mod config;
pub mod toy;

pub use config::{load_experiment_config, run_experiment, DatasetConfig, ExperimentConfig, RunConfig};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::augment::ShiftMode;
use crate::batching::BatchPolicy;
use crate::error::{Error, Result};
use crate::eval::{bleu, bootstrap_significance};
use crate::model::{MaskMode, ModelConfig};
use crate::training::{
    decode_and_score, train_run, AugMode, DataBundle, PipelineFlags, TrainConfig, TrainRun,
};

/// Every condition the ablation grid knows, in report order.
pub const CONDITION_NAMES: [&str; 10] = [
    "baseline",
    "consec",
    "rand",
    "baseline+sim-shift",
    "baseline+uniform-shift",
    "rand+uniform-shift",
    "rand+mask",
    "rand+sep-batch",
    "rand+mask+sep-batch",
    "rand+mask+sep-batch+reset-pos",
];

/// A named combination of mechanism flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Condition {
    pub name: String,
    pub flags: PipelineFlags,
}

impl Condition {
    pub fn parse(name: &str) -> Result<Condition> {
        let flags = match name {
            "baseline" => PipelineFlags::baseline(),
            "consec" => PipelineFlags {
                augmentation: AugMode::Consec,
                ..PipelineFlags::baseline()
            },
            "rand" => PipelineFlags {
                augmentation: AugMode::Rand,
                ..PipelineFlags::baseline()
            },
            "baseline+sim-shift" => PipelineFlags {
                shift: ShiftMode::SimShift,
                ..PipelineFlags::baseline()
            },
            "baseline+uniform-shift" => PipelineFlags {
                shift: ShiftMode::UniformShift,
                ..PipelineFlags::baseline()
            },
            "rand+uniform-shift" => PipelineFlags {
                augmentation: AugMode::Rand,
                shift: ShiftMode::UniformShift,
                ..PipelineFlags::baseline()
            },
            "rand+mask" => PipelineFlags {
                augmentation: AugMode::Rand,
                mask: MaskMode::SegmentMasked,
                ..PipelineFlags::baseline()
            },
            "rand+sep-batch" => PipelineFlags {
                augmentation: AugMode::Rand,
                policy: BatchPolicy::SepBatch,
                ..PipelineFlags::baseline()
            },
            "rand+mask+sep-batch" => PipelineFlags {
                augmentation: AugMode::Rand,
                mask: MaskMode::SegmentMasked,
                policy: BatchPolicy::SepBatch,
                ..PipelineFlags::baseline()
            },
            "rand+mask+sep-batch+reset-pos" => PipelineFlags {
                augmentation: AugMode::Rand,
                mask: MaskMode::SegmentMasked,
                policy: BatchPolicy::SepBatch,
                reset_pos: true,
                ..PipelineFlags::baseline()
            },
            other => return Err(Error::UnknownCondition(other.to_owned())),
        };
        Ok(Condition {
            name: name.to_owned(),
            flags,
        })
    }
}

/// One completed (condition, seed) run.
#[derive(Debug, Clone)]
pub struct RunRow {
    pub condition: String,
    pub seed: u64,
    pub dev_bleu: f64,
    pub test_bleu: f64,
    pub dev_token_acc: f64,
    pub best_epoch: usize,
    pub steps: usize,
    pub wall_clock_s: f64,
    pub test_hyps: Vec<Vec<String>>,
}

/// Checks the reconstructed pipeline trace against the condition contract.
fn verify_trace(cond: &Condition, run: &TrainRun) -> Result<()> {
    let t = &run.trace;
    let f = &cond.flags;
    let mut drift = Vec::new();
    if t.augmentation != f.augmentation {
        drift.push(format!("augmentation {:?} != {:?}", t.augmentation, f.augmentation));
    }
    if t.shift != f.shift {
        drift.push(format!("shift {:?} != {:?}", t.shift, f.shift));
    }
    if t.mask != f.mask {
        drift.push(format!("mask {:?} != {:?}", t.mask, f.mask));
    }
    if t.policy != f.policy {
        drift.push(format!("policy {:?} != {:?}", t.policy, f.policy));
    }
    if t.concat_count > 0 && t.reset_pos != f.reset_pos {
        drift.push(format!("reset_pos {} != {}", t.reset_pos, f.reset_pos));
    }
    if drift.is_empty() {
        Ok(())
    } else {
        Err(Error::FlagDrift {
            condition: cond.name.clone(),
            detail: drift.join("; "),
        })
    }
}

/// Executes the full pipeline for one condition and seed: augment, plan,
/// train, decode, score. Returns the report row plus the run itself (for
/// metrics logs and checkpoints).
pub fn run_condition(
    cond: &Condition,
    bundle: &DataBundle,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(RunRow, TrainRun)> {
    let started = std::time::Instant::now();
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let run = train_run(bundle, &cond.flags, model_cfg, &cfg)?;
    verify_trace(cond, &run)?;

    let (dev_bleu, dev_token_acc, best_epoch) = match &run.state.best {
        Some(best) => (best.dev_bleu, best.dev_token_acc, best.epoch),
        None => (0.0, 0.0, 0),
    };
    let (test_report, test_hyps) =
        decode_and_score(run.best_params(), &bundle.test, &bundle.target_vocab, cfg.beam)?;
    Ok((
        RunRow {
            condition: cond.name.clone(),
            seed,
            dev_bleu,
            test_bleu: test_report.bleu,
            dev_token_acc,
            best_epoch,
            steps: run.state.step,
            wall_clock_s: started.elapsed().as_secs_f64(),
            test_hyps,
        },
        run,
    ))
}

/// Per-condition aggregate with the paper-style delta column.
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub condition: String,
    pub dev_bleu: f64,
    pub test_bleu: f64,
    pub dev_delta: Option<f64>,
    pub test_delta: Option<f64>,
    /// Bootstrap p-value of best-seed test outputs against the baseline's.
    pub p_vs_baseline: Option<f64>,
    /// Dagger mark at p < 0.01.
    pub significant: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<AggregateRow>,
}

/// Runs every (condition, seed) combination, optionally spread over worker
/// threads. Rows come back in (condition, seed) order regardless of
/// scheduling, so reports are deterministic.
pub fn run_grid(
    bundle: &DataBundle,
    conditions: &[Condition],
    seeds: &[u64],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    jobs: usize,
) -> Result<ExperimentReport> {
    if conditions.is_empty() {
        return Err(Error::Invalid("need at least one condition".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Invalid("need at least one seed".into()));
    }

    let tasks: Vec<(usize, &Condition, u64)> = conditions
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .enumerate()
        .map(|(i, (c, s))| (i, c, s))
        .collect();
    let results: Mutex<Vec<Option<Result<RunRow>>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = jobs.max(1).min(tasks.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= tasks.len() {
                    break;
                }
                let (slot, cond, seed) = tasks[i];
                let row = run_condition(cond, bundle, model_cfg, train_cfg, seed)
                    .map(|(row, _)| row);
                results.lock().unwrap()[slot] = Some(row);
            });
        }
    });

    let mut rows = Vec::with_capacity(tasks.len());
    for slot in results.into_inner().unwrap() {
        rows.push(slot.expect("worker filled every slot")?);
    }

    let aggregates = aggregate(&rows, conditions, &bundle.test.references)?;
    Ok(ExperimentReport { rows, aggregates })
}

fn aggregate(
    rows: &[RunRow],
    conditions: &[Condition],
    test_refs: &[Vec<String>],
) -> Result<Vec<AggregateRow>> {
    let mean = |cond: &str, f: &dyn Fn(&RunRow) -> f64| {
        let vals: Vec<f64> = rows.iter().filter(|r| r.condition == cond).map(f).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    };
    let best_seed_hyps = |cond: &str| {
        rows.iter()
            .filter(|r| r.condition == cond)
            .max_by(|a, b| a.dev_bleu.partial_cmp(&b.dev_bleu).unwrap_or(std::cmp::Ordering::Equal))
            .map(|r| &r.test_hyps)
    };

    let baseline = conditions.iter().find(|c| c.name == "baseline");
    let base_dev = baseline.map(|_| mean("baseline", &|r| r.dev_bleu));
    let base_test = baseline.map(|_| mean("baseline", &|r| r.test_bleu));
    let base_hyps = baseline.and_then(|_| best_seed_hyps("baseline"));

    let mut out = Vec::with_capacity(conditions.len());
    for cond in conditions {
        let dev = mean(&cond.name, &|r| r.dev_bleu);
        let test = mean(&cond.name, &|r| r.test_bleu);
        let (mut p, mut significant) = (None, false);
        if cond.name != "baseline" {
            if let (Some(base_hyps), Some(hyps)) = (base_hyps, best_seed_hyps(&cond.name)) {
                let report = bootstrap_significance(hyps, base_hyps, test_refs, 1000, 0xB007)?;
                significant = report.p_value < 0.01;
                p = Some(report.p_value);
            }
        }
        out.push(AggregateRow {
            condition: cond.name.clone(),
            dev_bleu: dev,
            test_bleu: test,
            dev_delta: base_dev.map(|b| dev - b).filter(|_| cond.name != "baseline"),
            test_delta: base_test.map(|b| test - b).filter(|_| cond.name != "baseline"),
            p_vs_baseline: p,
            significant,
        });
    }
    Ok(out)
}

/// report.csv: per-run rows then per-condition aggregates. Wall-clock lives
/// in timings.csv so this file is byte-identical across reruns of the same
/// seeds.
pub fn write_report_csv<W: std::io::Write>(w: &mut W, report: &ExperimentReport) -> Result<()> {
    writeln!(
        w,
        "condition,seed,dev_bleu,test_bleu,dev_token_acc,best_epoch,steps,dev_delta,test_delta,p_vs_baseline,significant"
    )?;
    for r in &report.rows {
        writeln!(
            w,
            "{},{},{:.4},{:.4},{:.6},{},{},,,,",
            r.condition, r.seed, r.dev_bleu, r.test_bleu, r.dev_token_acc, r.best_epoch, r.steps
        )?;
    }
    for a in &report.aggregates {
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:+.4}")).unwrap_or_default();
        writeln!(
            w,
            "{},avg,{:.4},{:.4},,,,{},{},{},{}",
            a.condition,
            a.dev_bleu,
            a.test_bleu,
            fmt_opt(a.dev_delta),
            fmt_opt(a.test_delta),
            a.p_vs_baseline.map(|p| format!("{p:.4}")).unwrap_or_default(),
            if a.significant { "dagger" } else { "" }
        )?;
    }
    Ok(())
}

pub fn write_timings_csv<W: std::io::Write>(w: &mut W, report: &ExperimentReport) -> Result<()> {
    writeln!(w, "condition,seed,wall_clock_s")?;
    for r in &report.rows {
        writeln!(w, "{},{},{:.3}", r.condition, r.seed, r.wall_clock_s)?;
    }
    Ok(())
}

/// Default Figure-1-style bucket edges.
pub const DEFAULT_BUCKET_EDGES: [usize; 5] = [10, 20, 30, 40, 60];

#[derive(Debug, Clone, PartialEq)]
pub struct BucketRow {
    pub lo: usize,
    /// Exclusive upper bound; `None` for the final open bucket.
    pub hi: Option<usize>,
    pub count: usize,
    /// Absent (not zero) for empty buckets.
    pub bleu: Option<f64>,
    /// Fraction (in percent) of training sentences with length <= hi.
    pub train_percentile_at_hi: Option<f64>,
}

/// Per-length-bucket corpus BLEU, bucketing by source length, plus the
/// training-corpus percentile at each bucket edge.
pub fn length_bucket_report(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    source_lengths: &[usize],
    edges: &[usize],
    train_lengths: &[usize],
) -> Result<Vec<BucketRow>> {
    if hyps.len() != refs.len() || hyps.len() != source_lengths.len() {
        return Err(Error::ShapeMismatch {
            context: "length buckets",
            expected: format!("{} aligned entries", hyps.len()),
            got: format!("{} refs / {} lengths", refs.len(), source_lengths.len()),
        });
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("bucket edges must be strictly increasing".into()));
    }
    let percentile = |edge: usize| {
        if train_lengths.is_empty() {
            None
        } else {
            let below = train_lengths.iter().filter(|&&l| l <= edge).count();
            Some(100.0 * below as f64 / train_lengths.len() as f64)
        }
    };

    let bucket_count = edges.len() + 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bucket_count];
    for (i, &len) in source_lengths.iter().enumerate() {
        let b = edges.iter().position(|&e| len < e).unwrap_or(edges.len());
        members[b].push(i);
    }

    let mut out = Vec::with_capacity(bucket_count);
    for (b, ids) in members.iter().enumerate() {
        let lo = if b == 0 { 0 } else { edges[b - 1] };
        let hi = edges.get(b).copied();
        let bleu_val = if ids.is_empty() {
            None
        } else {
            let h: Vec<Vec<String>> = ids.iter().map(|&i| hyps[i].clone()).collect();
            let r: Vec<Vec<String>> = ids.iter().map(|&i| refs[i].clone()).collect();
            Some(bleu(&h, &r)?.bleu)
        };
        out.push(BucketRow {
            lo,
            hi,
            count: ids.len(),
            bleu: bleu_val,
            train_percentile_at_hi: hi.and_then(percentile),
        });
    }
    Ok(out)
}

pub fn write_buckets_csv<W: std::io::Write>(
    w: &mut W,
    condition: &str,
    rows: &[BucketRow],
) -> Result<()> {
    for r in rows {
        let hi = r.hi.map(|h| h.to_string()).unwrap_or_else(|| "inf".into());
        let bleu = r.bleu.map(|b| format!("{b:.4}")).unwrap_or_default();
        let pct = r
            .train_percentile_at_hi
            .map(|p| format!("{p:.2}"))
            .unwrap_or_default();
        writeln!(w, "{condition},{},{hi},{},{bleu},{pct}", r.lo, r.count)?;
    }
    Ok(())
}
