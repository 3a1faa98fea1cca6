//! Diagnostics: rank correlation, RES-bucket correlation runs, per-tap KL,
//! timing, ablation plans and summaries, and the loss-trend check.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coreset::{score_dataset, MetricMask, ScoringPass, WorkCounter};
use crate::data::{Dataset, SplitData};
use crate::model::ModelInstance;
use crate::tensor::Tensor;
use crate::train::{run_on_fixed_coreset, run_quarc, Method, RunConfig, RunOutput};
use crate::{Error, Result, LOG_EPS};

/// Smallest bucket count for which a correlation is reported.
pub const MIN_BUCKETS: usize = 5;
pub const PERMUTATIONS: usize = 10_000;

/// Ranks starting at 1; tied values share the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman ρ as the Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!("{} vs {} observations", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Domain("need at least two observations".into()));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

/// Two-sided permutation p-value `(1 + #{|ρ_perm| ≥ |ρ|}) / (1 + shuffles)`.
pub fn permutation_p_value(x: &[f64], y: &[f64], shuffles: usize, seed: u64) -> Result<f64> {
    let observed = spearman(x, y)?.abs();
    let rx = average_ranks(x);
    let mut ry = average_ranks(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..shuffles {
        ry.shuffle(&mut rng);
        if pearson(&rx, &ry).abs() >= observed - 1e-12 {
            extreme += 1;
        }
    }
    Ok((extreme + 1) as f64 / (shuffles + 1) as f64)
}

/// Start offsets of `buckets` equal-size windows spread evenly over `n` sorted items.
pub fn bucket_starts(n: usize, size: usize, buckets: usize) -> Vec<usize> {
    let span = (n - size) as f64;
    (0..buckets)
        .map(|k| {
            if buckets == 1 {
                0
            } else {
                (k as f64 * span / (buckets - 1) as f64).round() as usize
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketResult {
    pub bucket: usize,
    pub mean_res: f64,
    /// Final top-1 per seed.
    pub top1: Vec<f64>,
    pub mean_top1: f64,
    pub sample_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub buckets: Vec<BucketResult>,
    pub rho: f64,
    pub p_value: f64,
}

impl CorrelationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bucket,mean_res,mean_top1,seeds\n");
        for b in &self.buckets {
            let _ = writeln!(s, "{},{},{},{}", b.bucket, b.mean_res, b.mean_top1, b.top1.len());
        }
        s
    }
}

pub struct CorrelateSetup<'a> {
    pub fp: &'a ModelInstance,
    /// Quantized model whose RES against `fp` orders the samples.
    pub quantized: &'a ModelInstance,
    pub split: &'a SplitData,
    pub buckets: usize,
    pub fraction: f64,
    pub seeds: &'a [u64],
    /// Training settings for each bucket run; `seed` is overridden.
    pub config: &'a RunConfig,
}

/// Sorts the training set by RES, carves `buckets` quantile windows of
/// fraction `S`, trains one student per window and seed, and correlates
/// window mean RES with mean final top-1.
pub fn correlate(setup: &CorrelateSetup) -> Result<CorrelationReport> {
    let train = &setup.split.train;
    if setup.buckets < MIN_BUCKETS {
        return Err(Error::Config(format!(
            "need at least {MIN_BUCKETS} buckets, got {}",
            setup.buckets
        )));
    }
    if setup.seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    if !(setup.fraction > 0.0 && setup.fraction <= 1.0) {
        return Err(Error::Config(format!(
            "fraction must be in (0, 1], got {}",
            setup.fraction
        )));
    }
    let n = train.len();
    let size = (setup.fraction * n as f64).floor() as usize;
    if size < setup.config.batch_size {
        return Err(Error::Config(format!(
            "bucket of {size} samples is smaller than batch size {}",
            setup.config.batch_size
        )));
    }
    let pass = ScoringPass {
        epoch: 0,
        total_epochs: 1,
        batch_size: setup.config.batch_size,
        mask: MetricMask::ALL,
    };
    let scores = score_dataset(setup.quantized, setup.fp, train, pass, &mut WorkCounter::default())?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .res
            .partial_cmp(&scores[b].res)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut buckets = Vec::with_capacity(setup.buckets);
    for (k, start) in bucket_starts(n, size, setup.buckets).into_iter().enumerate() {
        let mut ids = order[start..start + size].to_vec();
        let mean_res = ids.iter().map(|&i| scores[i].res).sum::<f64>() / size as f64;
        ids.sort_unstable();
        let mut top1 = Vec::with_capacity(setup.seeds.len());
        for &seed in setup.seeds {
            let cfg = RunConfig {
                seed,
                ..setup.config.clone()
            };
            let out = run_on_fixed_coreset(setup.fp, setup.fp, setup.split, &cfg, &ids)?;
            top1.push(out.metrics.last().map_or(0.0, |m| m.top1));
        }
        let mean_top1 = top1.iter().sum::<f64>() / top1.len() as f64;
        buckets.push(BucketResult {
            bucket: k,
            mean_res,
            top1,
            mean_top1,
            sample_ids: ids,
        });
    }
    let xs: Vec<f64> = buckets.iter().map(|b| b.mean_res).collect();
    let ys: Vec<f64> = buckets.iter().map(|b| b.mean_top1).collect();
    Ok(CorrelationReport {
        rho: spearman(&xs, &ys)?,
        p_value: permutation_p_value(&xs, &ys, PERMUTATIONS, setup.config.seed)?,
        buckets,
    })
}

/// `Σ_rows Σ_i q log((q+ε)/(f+ε))` over row softmaxes of two tap tensors.
pub fn tap_kl_sum(student_tap: &Tensor, teacher_tap: &Tensor) -> f64 {
    let q = student_tap.softmax_rows();
    let f = teacher_tap.softmax_rows();
    q.data()
        .iter()
        .zip(f.data())
        .map(|(&q, &f)| q * ((q + LOG_EPS) / (f + LOG_EPS)).ln())
        .sum()
}

/// Mean per-sample KL(Q‖F) of every tap, in tap order.
pub fn layer_kl(
    fp: &ModelInstance,
    student: &ModelInstance,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<(String, f64)>> {
    if fp.def != student.def {
        return Err(Error::Contract("models do not share a definition".into()));
    }
    if data.is_empty() || batch_size == 0 {
        return Err(Error::Config("need a non-empty dataset and batch size".into()));
    }
    let names = fp.def.taps.clone();
    let mut sums = vec![0.0; names.len()];
    let ids: Vec<usize> = (0..data.len()).collect();
    for chunk in ids.chunks(batch_size) {
        let (x, _) = data.gather(chunk);
        let f = fp.forward(&x)?;
        let q = student.forward(&x)?;
        for (k, name) in names.iter().enumerate() {
            let (Some(ft), Some(qt)) = (f.taps.get(name), q.taps.get(name)) else {
                return Err(Error::Contract(format!("tap {name} missing")));
            };
            sums[k] += tap_kl_sum(qt, ft);
        }
    }
    let n = data.len() as f64;
    Ok(names.into_iter().zip(sums).map(|(name, s)| (name, s / n)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub fraction: f64,
    pub seconds_total: f64,
    pub seconds_per_epoch: f64,
    pub train_forwards: usize,
    pub selection_forwards: usize,
    pub backwards: usize,
    pub teacher_forwards: usize,
    /// Wall-clock relative to the full-data row.
    pub ratio_to_full: f64,
}

/// Whether a run's counters satisfy the accounting identities: one backward
/// per coreset batch, and `2·⌈N/b⌉` scoring passes on selection epochs only.
pub fn work_accounting_holds(out: &RunOutput, n: usize, batch_size: usize) -> bool {
    let scoring = 2 * n.div_ceil(batch_size);
    out.metrics.iter().all(|m| {
        let batches = m.coreset_size.div_ceil(batch_size);
        m.backwards == batches && m.train_forwards == batches
    }) && out.metrics.iter().all(|m| {
        let expect = if m.selected { scoring } else { 0 };
        // Random coresets are selected without scoring.
        m.selection_forwards == expect || (m.selection_forwards == 0 && out.rounds.iter().all(|r| r.alpha.is_nan()))
    })
}

/// Times a full-data run and one score-selected run per fraction, all with
/// the same model, data and epochs.
pub fn bench(fp: &ModelInstance, split: &SplitData, base: &RunConfig, fractions: &[f64]) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(fractions.len() + 1);
    let mut variants = vec![("full-data".to_string(), 1.0, Method::FullData)];
    variants.extend(fractions.iter().map(|&f| (format!("coreset-{f}"), f, Method::Quarc)));
    for (variant, fraction, method) in variants {
        let cfg = RunConfig {
            fraction,
            method,
            ..base.clone()
        };
        let out = run_quarc(fp, fp, split, &cfg)?;
        let total: f64 = out.metrics.iter().map(|m| m.seconds).sum();
        rows.push(BenchRow {
            variant,
            fraction,
            seconds_total: total,
            seconds_per_epoch: total / cfg.epochs as f64,
            train_forwards: out.work.train_forwards,
            selection_forwards: out.work.selection_forwards,
            backwards: out.work.backwards,
            teacher_forwards: out.work.teacher_forwards,
            ratio_to_full: 0.0,
        });
    }
    let full = rows[0].seconds_total;
    for r in &mut rows {
        r.ratio_to_full = if full > 0.0 { r.seconds_total / full } else { 0.0 };
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "variant,fraction,seconds_total,seconds_per_epoch,train_forwards,selection_forwards,backwards,teacher_forwards,ratio_to_full\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{},{},{},{},{:.4}",
            r.variant,
            r.fraction,
            r.seconds_total,
            r.seconds_per_epoch,
            r.train_forwards,
            r.selection_forwards,
            r.backwards,
            r.teacher_forwards,
            r.ratio_to_full
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedRun {
    pub name: String,
    pub config: RunConfig,
}

/// Named run variants sharing one dataset and full-precision model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub runs: Vec<NamedRun>,
    pub seeds: Vec<u64>,
}

impl ExperimentPlan {
    /// `baseline` (EVS+DS), `+res`, `+clc`, `+res+clc` on top of `base`.
    pub fn ablation(base: &RunConfig, seeds: &[u64]) -> Self {
        let variant = |name: &str, metrics: MetricMask, clc: bool| NamedRun {
            name: name.into(),
            config: RunConfig {
                metrics,
                clc,
                method: Method::Quarc,
                ..base.clone()
            },
        };
        Self {
            runs: vec![
                variant("baseline", MetricMask::EVS_DS, false),
                variant("+res", MetricMask::ALL, false),
                variant("+clc", MetricMask::EVS_DS, true),
                variant("+res+clc", MetricMask::ALL, true),
            ],
            seeds: seeds.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("plan needs at least one run and one seed".into()));
        }
        let mut names = BTreeSet::new();
        for r in &self.runs {
            if !names.insert(r.name.as_str()) {
                return Err(Error::Config(format!("duplicate run name {}", r.name)));
            }
            r.config.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub name: String,
    pub runs: usize,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub top5_mean: f64,
    pub top5_std: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One aggregate per run name, in first-seen order.
pub fn aggregate(rows: &[SummaryRow]) -> Vec<Aggregate> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.name.as_str()) {
            names.push(&r.name);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let group: Vec<&SummaryRow> = rows.iter().filter(|r| r.name == name).collect();
            let (top1_mean, top1_std) = mean_std(&group.iter().map(|r| r.top1).collect::<Vec<_>>());
            let (top5_mean, top5_std) = mean_std(&group.iter().map(|r| r.top5).collect::<Vec<_>>());
            Aggregate {
                name: name.to_string(),
                runs: group.len(),
                top1_mean,
                top1_std,
                top5_mean,
                top5_std,
            }
        })
        .collect()
}

/// Per-seed rows followed by `mean` rows; the `seed` column holds `mean` there
/// and the std columns are empty for per-seed rows.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("name,seed,top1,top5,final_loss,top1_std,top5_std\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},,", r.name, r.seed, r.top1, r.top5, r.final_loss);
    }
    for a in aggregate(rows) {
        let _ = writeln!(
            s,
            "{},mean,{},{},,{},{}",
            a.name, a.top1_mean, a.top5_mean, a.top1_std, a.top5_std
        );
    }
    s
}

pub fn summary_text(rows: &[SummaryRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<width$}  {:>6}  {:>16}  {:>16}\n", "name", "seed", "top1", "top5");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>6}  {:>16.4}  {:>16.4}",
            r.name, r.seed, r.top1, r.top5
        );
    }
    for a in aggregate(rows) {
        let t1 = format!("{:.4} ± {:.4}", a.top1_mean, a.top1_std);
        let t5 = format!("{:.4} ± {:.4}", a.top5_mean, a.top5_std);
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>16}  {:>16}", a.name, "mean", t1, t5);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub window: usize,
    pub comparisons: usize,
    pub non_increasing: usize,
    pub fraction: f64,
}

/// Compares consecutive sliding-window means of `values`.
pub fn loss_trend(values: &[f64], window: usize) -> Result<TrendReport> {
    if window == 0 || values.len() < window + 1 {
        return Err(Error::Domain(format!(
            "{} values are too few for window {window}",
            values.len()
        )));
    }
    let means: Vec<f64> = values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    let comparisons = means.len() - 1;
    let non_increasing = means.windows(2).filter(|p| p[1] <= p[0]).count();
    Ok(TrendReport {
        window,
        comparisons,
        non_increasing,
        fraction: non_increasing as f64 / comparisons as f64,
    })
}
