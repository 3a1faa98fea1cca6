//! WebAssembly bindings behind `www/index.html`. Each export takes plain
//! numbers or a JSON object and returns JSON for the page to draw.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use quarc_core::coreset::{alpha, score_dataset, select_top, MetricMask, ScoringPass, WorkCounter};
use quarc_core::data::{generate_synthetic, SplitData, SyntheticSpec};
use quarc_core::model::ModelDef;
use quarc_core::quant::{QuantMode, QuantSpec};
use quarc_core::train::{evaluate, pretrain_fp, PretrainConfig};
use quarc_core::{Error, Result};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Fake-quantizer transfer curve over `[lo, hi]`.
#[derive(Debug, Serialize)]
pub struct QuantCurve {
    pub x: Vec<f64>,
    pub q: Vec<f64>,
    /// Straight-through mask: true where the gradient passes.
    pub pass_through: Vec<bool>,
    pub levels: Vec<f64>,
}

pub fn quant_curve(bits: u32, signed: bool, scale: f64, lo: f64, hi: f64, points: usize) -> Result<QuantCurve> {
    if points < 2 || !(hi > lo) {
        return Err(Error::Config("need at least two points and lo < hi".into()));
    }
    if !(scale > 0.0) {
        return Err(Error::Config(format!("scale must be positive, got {scale}")));
    }
    let mode = if signed {
        QuantMode::WeightSigned
    } else {
        QuantMode::ActivationUnsigned
    };
    let spec = QuantSpec::new(bits, mode)?;
    let step = (hi - lo) / (points - 1) as f64;
    let x: Vec<f64> = (0..points).map(|i| lo + step * i as f64).collect();
    let q = x.iter().map(|&v| spec.quantize_value(v, scale)).collect();
    let pass_through = x.iter().map(|&v| spec.in_range(v, scale)).collect();
    let levels = (-(spec.qn as i64)..=spec.qp as i64).map(|k| k as f64 * scale).collect();
    Ok(QuantCurve {
        x,
        q,
        pass_through,
        levels,
    })
}

/// α(t) for every epoch and which epochs reselect the coreset.
#[derive(Debug, Serialize)]
pub struct Schedule {
    pub alpha: Vec<f64>,
    pub selection: Vec<bool>,
}

pub fn schedule(total_epochs: usize, interval: usize) -> Result<Schedule> {
    if total_epochs == 0 || interval == 0 || interval > total_epochs {
        return Err(Error::Config(format!(
            "need 1 ≤ R ≤ T, got R={interval}, T={total_epochs}"
        )));
    }
    let alpha = (0..=total_epochs)
        .map(|t| alpha(t, total_epochs))
        .collect::<Result<_>>()?;
    let selection = (0..=total_epochs)
        .map(|t| t < total_epochs && t % interval == 0)
        .collect();
    Ok(Schedule { alpha, selection })
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default)]
pub struct CoresetParams {
    pub classes: usize,
    pub per_class: usize,
    pub noise: f64,
    pub seed: u64,
    pub fraction: f64,
    pub epoch: usize,
    pub total_epochs: usize,
    pub bits: u32,
    pub pretrain_epochs: usize,
    pub evs: bool,
    pub ds: bool,
    pub res: bool,
}

impl Default for CoresetParams {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 100,
            noise: 1.0,
            seed: 1,
            fraction: 0.1,
            epoch: 0,
            total_epochs: 60,
            bits: 2,
            pretrain_epochs: 15,
            evs: true,
            ds: true,
            res: true,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ScoredPoint {
    pub x: f64,
    pub y: f64,
    pub label: usize,
    pub evs: f64,
    pub ds: f64,
    pub res: f64,
    pub combined: f64,
    pub selected: bool,
}

#[derive(Debug, Serialize)]
pub struct CoresetView {
    pub points: Vec<ScoredPoint>,
    pub alpha: f64,
    pub fp_top1: f64,
    pub quantized_top1: f64,
    pub selected: usize,
}

/// Trains a small MLP on 2-D blobs, clones it to `bits`, scores every sample
/// against the full-precision model and marks the selected coreset.
pub fn coreset_view(p: &CoresetParams) -> Result<CoresetView> {
    if p.epoch > p.total_epochs {
        return Err(Error::Config(format!("epoch {} is past T={}", p.epoch, p.total_epochs)));
    }
    let data = generate_synthetic(&SyntheticSpec::blobs(p.classes, p.per_class, p.noise, p.seed))?;
    let split = SplitData {
        train: data.clone(),
        eval: data.clone(),
    };
    let mut def = ModelDef::mlp(2, &[16, 16], p.classes);
    def.quantize_first_last = true;
    let cfg = PretrainConfig {
        epochs: p.pretrain_epochs,
        seed: p.seed,
        ..PretrainConfig::default()
    };
    let (fp, _) = pretrain_fp(&def, &split, &cfg)?;
    let q = fp.clone_as_quantized(p.bits, None, None)?;
    let pass = ScoringPass {
        epoch: p.epoch,
        total_epochs: p.total_epochs,
        batch_size: 64,
        mask: MetricMask {
            evs: p.evs,
            ds: p.ds,
            res: p.res,
            normalize_res: false,
        },
    };
    let scores = score_dataset(&q, &fp, &data, pass, &mut WorkCounter::default())?;
    let round = select_top(&scores, p.fraction, p.total_epochs)?;
    let mut chosen = vec![false; data.len()];
    for &id in &round.selected_ids {
        chosen[id] = true;
    }
    let points = scores
        .iter()
        .map(|s| {
            let xy = data.sample(s.sample_id);
            ScoredPoint {
                x: xy[0],
                y: xy[1],
                label: data.labels[s.sample_id],
                evs: s.evs,
                ds: s.ds,
                res: s.res,
                combined: s.combined,
                selected: chosen[s.sample_id],
            }
        })
        .collect();
    Ok(CoresetView {
        points,
        alpha: round.alpha,
        fp_top1: evaluate(&fp, &data, 64)?.0,
        quantized_top1: evaluate(&q, &data, 64)?.0,
        selected: round.selected_ids.len(),
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = quantCurve)]
pub fn quant_curve_js(bits: u32, signed: bool, scale: f64, lo: f64, hi: f64, points: usize) -> Result<String, JsError> {
    to_js(quant_curve(bits, signed, scale, lo, hi, points))
}

#[wasm_bindgen(js_name = alphaSchedule)]
pub fn schedule_js(total_epochs: usize, interval: usize) -> Result<String, JsError> {
    to_js(schedule(total_epochs, interval))
}

/// `params` is a JSON object with any [`CoresetParams`] fields.
#[wasm_bindgen(js_name = coresetView)]
pub fn coreset_view_js(params: &str) -> Result<String, JsError> {
    let p: CoresetParams = serde_json::from_str(params).map_err(|e| JsError::new(&e.to_string()))?;
    to_js(coreset_view(&p))
}
