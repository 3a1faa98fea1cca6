//! Per-sample coreset scores and top-fraction selection.
//!
//! Three scores are computed from the quantized student's output `p_Q`:
//! the error-vector score `‖p_Q − onehot(y)‖₂`, the disagreement score
//! `‖p_Q − p_T‖₂` against the teacher, and the relative-entropy score
//! `KL(p_Q ‖ p_F)`. They are combined as
//! `α(t)·evs + (1 − α(t))·ds + res` with `α(t) = cos(tπ / 2T)`.

use std::cmp::Ordering;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::ModelInstance;
use crate::{Error, Result, LOG_EPS};

/// Forward-pass bookkeeping shared by scoring and training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkCounter {
    /// Batched forward passes made only to score samples.
    pub selection_forwards: usize,
    /// Student forward passes that were followed by a backward pass.
    pub train_forwards: usize,
    pub backwards: usize,
    /// Frozen teacher passes that feed the training losses.
    pub teacher_forwards: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: usize,
    pub evs: f64,
    pub ds: f64,
    pub res: f64,
    pub combined: f64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRound {
    pub epoch: usize,
    pub fraction: f64,
    pub alpha: f64,
    /// Ascending.
    pub selected_ids: Vec<usize>,
}

/// Which scores enter the combined metric, and whether RES is min-max
/// normalized over the table first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricMask {
    pub evs: bool,
    pub ds: bool,
    pub res: bool,
    #[serde(default)]
    pub normalize_res: bool,
}

impl MetricMask {
    pub const ALL: Self = Self {
        evs: true,
        ds: true,
        res: true,
        normalize_res: false,
    };
    /// Gradient-based scores only, without relative entropy.
    pub const EVS_DS: Self = Self {
        evs: true,
        ds: true,
        res: false,
        normalize_res: false,
    };
}

impl Default for MetricMask {
    fn default() -> Self {
        Self::ALL
    }
}

fn check_class(p: &[f64], y: usize) -> Result<()> {
    if y >= p.len() {
        return Err(Error::Contract(format!("class {y} outside 0..{}", p.len())));
    }
    Ok(())
}

pub fn score_evs(p_q: &[f64], y: usize) -> Result<f64> {
    check_class(p_q, y)?;
    let sq: f64 = p_q
        .iter()
        .enumerate()
        .map(|(m, &p)| {
            let d = if m == y { p - 1.0 } else { p };
            d * d
        })
        .sum();
    Ok(sq.sqrt())
}

pub fn score_ds(p_q: &[f64], p_t: &[f64]) -> Result<f64> {
    if p_q.len() != p_t.len() {
        return Err(Error::Contract("distributions differ in length".into()));
    }
    Ok(p_q.iter().zip(p_t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `Σ_m p_Q log((p_Q + ε) / (p_F + ε))`.
pub fn score_res(p_q: &[f64], p_f: &[f64]) -> Result<f64> {
    if p_q.len() != p_f.len() {
        return Err(Error::Contract("distributions differ in length".into()));
    }
    Ok(p_q
        .iter()
        .zip(p_f)
        .map(|(&q, &f)| q * ((q + LOG_EPS) / (f + LOG_EPS)).ln())
        .sum())
}

/// Cosine-annealed weight `cos(tπ / 2T)`.
pub fn alpha(t: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("total epochs must be positive".into()));
    }
    if t > total {
        return Err(Error::Contract(format!("epoch {t} beyond total {total}")));
    }
    Ok((t as f64 * PI / (2.0 * total as f64)).cos())
}

pub fn combine(evs: f64, ds: f64, res: f64, t: usize, total: usize) -> Result<f64> {
    let a = alpha(t, total)?;
    Ok(a * evs + (1.0 - a) * ds + res)
}

fn combine_masked(s: &SampleScore, res: f64, a: f64, mask: MetricMask) -> f64 {
    let mut v = 0.0;
    if mask.evs {
        v += a * s.evs;
    }
    if mask.ds {
        v += (1.0 - a) * s.ds;
    }
    if mask.res {
        v += res;
    }
    v
}

#[derive(Clone, Copy, Debug)]
pub struct ScoringPass {
    /// Current epoch `t`.
    pub epoch: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub mask: MetricMask,
}

/// Scores every sample of `data` using the student's current weights.
///
/// Runs exactly one batched forward pass per model per batch, so a dataset
/// of `N` samples costs `2·⌈N/batch_size⌉` forward passes.
pub fn score_dataset(
    student: &ModelInstance,
    teacher: &ModelInstance,
    data: &Dataset,
    pass: ScoringPass,
    work: &mut WorkCounter,
) -> Result<Vec<SampleScore>> {
    if data.is_empty() {
        return Err(Error::Config("cannot score an empty dataset".into()));
    }
    if pass.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let (t, mask) = (pass.epoch, pass.mask);
    let a = alpha(t, pass.total_epochs)?;
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut scores = Vec::with_capacity(data.len());
    for chunk in ids.chunks(pass.batch_size) {
        let (x, labels) = data.gather(chunk);
        let q = student.forward(&x)?;
        let f = teacher.forward(&x)?;
        work.selection_forwards += 2;
        for (row, (&id, &y)) in chunk.iter().zip(&labels).enumerate() {
            let (pq, pf) = (q.probs.row(row), f.probs.row(row));
            scores.push(SampleScore {
                sample_id: id,
                evs: score_evs(pq, y)?,
                ds: score_ds(pq, pf)?,
                res: score_res(pq, pf)?,
                combined: 0.0,
                epoch: t,
            });
        }
    }
    let (lo, hi) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s.res), hi.max(s.res))
    });
    for s in &mut scores {
        let res = if mask.normalize_res {
            if hi > lo {
                (s.res - lo) / (hi - lo)
            } else {
                0.0
            }
        } else {
            s.res
        };
        s.combined = combine_masked(s, res, a, mask);
    }
    Ok(scores)
}

pub fn coreset_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).floor() as usize).clamp(1, n.max(1))
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "coreset fraction must be in (0, 1], got {fraction}"
        )));
    }
    Ok(())
}

/// Highest combined scores first, ties to the lower sample id; keeps
/// `max(1, ⌊S·N⌋)` samples.
pub fn select_top(scores: &[SampleScore], fraction: f64, total_epochs: usize) -> Result<SelectionRound> {
    check_fraction(fraction)?;
    if scores.is_empty() {
        return Err(Error::Config("no scores to select from".into()));
    }
    let mut order: Vec<&SampleScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.combined
            .partial_cmp(&a.combined)
            .unwrap_or(Ordering::Equal)
            .then(a.sample_id.cmp(&b.sample_id))
    });
    let k = coreset_size(scores.len(), fraction);
    let mut selected_ids: Vec<usize> = order[..k].iter().map(|s| s.sample_id).collect();
    selected_ids.sort_unstable();
    let epoch = scores[0].epoch;
    Ok(SelectionRound {
        epoch,
        fraction,
        alpha: alpha(epoch, total_epochs)?,
        selected_ids,
    })
}

/// Class-stratified random coreset of the same size as [`select_top`]
/// would keep. Each class is shuffled and classes are interleaved in
/// proportion to their size before truncating.
pub fn select_random(labels: &[usize], fraction: f64, seed: u64, epoch: usize) -> Result<SelectionRound> {
    check_fraction(fraction)?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::Config("cannot select from an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    rng.set_stream(epoch as u64);
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut order: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    for (c, ids) in by_class.iter_mut().enumerate() {
        ids.shuffle(&mut rng);
        let len = ids.len() as f64;
        order.extend(
            ids.iter()
                .enumerate()
                .map(|(pos, &id)| ((pos as f64 + 0.5) / len, c, id)),
        );
    }
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    let mut ids: Vec<usize> = order[..coreset_size(n, fraction)].iter().map(|o| o.2).collect();
    ids.sort_unstable();
    Ok(SelectionRound {
        epoch,
        fraction,
        alpha: f64::NAN,
        selected_ids: ids,
    })
}

/// Classes with no selected sample.
pub fn uncovered_classes(selected: &[usize], labels: &[usize], classes: usize) -> Vec<usize> {
    let mut seen = vec![false; classes];
    for &i in selected {
        seen[labels[i]] = true;
    }
    (0..classes).filter(|&c| !seen[c]).collect()
}

/// CSV dump with header `sample_id,evs,ds,res,combined,epoch`.
pub fn write_scores_csv<W: std::io::Write>(scores: &[SampleScore], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "evs", "ds", "res", "combined", "epoch"])?;
    for s in scores {
        w.write_record([
            s.sample_id.to_string(),
            s.evs.to_string(),
            s.ds.to_string(),
            s.res.to_string(),
            s.combined.to_string(),
            s.epoch.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv<R: std::io::Read>(input: R) -> Result<Vec<SampleScore>> {
    let mut r = csv::Reader::from_reader(input);
    let expected = ["sample_id", "evs", "ds", "res", "combined", "epoch"];
    if r.headers()?.iter().ne(expected) {
        return Err(Error::Format(format!(
            "score CSV header must be {}",
            expected.join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad {} value {:?}", expected[i], &rec[i])))
        };
        let u = |i: usize| -> Result<usize> {
            rec[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad {} value {:?}", expected[i], &rec[i])))
        };
        out.push(SampleScore {
            sample_id: u(0)?,
            evs: f(1)?,
            ds: f(2)?,
            res: f(3)?,
            combined: f(4)?,
            epoch: u(5)?,
        });
    }
    Ok(out)
}
