//! Fake quantization with a straight-through estimator.
//!
//! Forward: `q(x) = s · round(clamp(x / s, -Q_N, Q_P))`, rounding half to
//! even. Backward: the upstream gradient passes through where
//! `x / s ∈ [-Q_N, Q_P]` and is zero elsewhere. The step size `s` gets the
//! LSQ gradient `round(x/s) - x/s` in range, `-Q_N` or `Q_P` when clamped,
//! scaled by `grad_factor`.

use serde::{Deserialize, Serialize};

use crate::graph::CustomGradRule;
use crate::{Error, Result, Tensor};

pub const MIN_SCALE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    /// Symmetric signed grid, used for weights.
    WeightSigned,
    /// Non-negative grid, used for post-ReLU activations.
    ActivationUnsigned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub mode: QuantMode,
    pub qn: f64,
    pub qp: f64,
    pub scale: f64,
    pub grad_factor: f64,
    /// When false the scale stays at its calibrated value.
    pub learnable: bool,
}

impl QuantSpec {
    pub fn new(bits: u32, mode: QuantMode) -> Result<Self> {
        if !(2..=24).contains(&bits) {
            return Err(Error::Config(format!("bitwidth must be in 2..=24, got {bits}")));
        }
        let (qn, qp) = match mode {
            QuantMode::WeightSigned => {
                let half = f64::from(1u32 << (bits - 1));
                (half, half - 1.0)
            }
            QuantMode::ActivationUnsigned => (0.0, f64::from((1u32 << bits) - 1)),
        };
        Ok(Self {
            bits,
            mode,
            qn,
            qp,
            scale: 1.0,
            grad_factor: 1.0,
            learnable: true,
        })
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// LSQ gradient scaling `1 / sqrt(n · Q_P)` for a tensor of `n` elements.
    pub fn with_grad_factor_for(mut self, n: usize) -> Self {
        self.grad_factor = 1.0 / (n as f64 * self.qp).sqrt();
        self
    }

    pub fn in_range(&self, x: f64, scale: f64) -> bool {
        let v = x / scale;
        v >= -self.qn && v <= self.qp
    }

    pub fn quantize_value(&self, x: f64, scale: f64) -> f64 {
        scale * (x / scale).clamp(-self.qn, self.qp).round_ties_even()
    }

    /// Keeps the scale strictly positive after an optimizer step.
    pub fn project_scale(&mut self) {
        if !(self.scale >= MIN_SCALE) {
            self.scale = MIN_SCALE;
        }
    }
}

pub fn quantize_forward(x: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    quantize_with_scale(x, spec, spec.scale)
}

fn quantize_with_scale(x: &Tensor, spec: &QuantSpec, scale: f64) -> Result<Tensor> {
    if !(scale > 0.0) {
        return Err(Error::Contract(format!(
            "quantizer scale must be positive, got {scale}"
        )));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("quantizer input".into()));
    }
    Ok(x.map(|v| spec.quantize_value(v, scale)))
}

/// Straight-through gradient for `x` and the step-size gradient.
pub fn quantize_backward(upstream: &Tensor, x: &Tensor, spec: &QuantSpec) -> (Tensor, f64) {
    backward_with_scale(upstream, x, spec, spec.scale)
}

fn backward_with_scale(upstream: &Tensor, x: &Tensor, spec: &QuantSpec, s: f64) -> (Tensor, f64) {
    let grad_x = upstream.zip_map(x, |g, v| if spec.in_range(v, s) { g } else { 0.0 });
    let mut grad_s = 0.0;
    for (&g, &v) in upstream.data().iter().zip(x.data()) {
        let r = v / s;
        let dq = if r < -spec.qn {
            -spec.qn
        } else if r > spec.qp {
            spec.qp
        } else {
            r.round_ties_even() - r
        };
        grad_s += g * dq;
    }
    (grad_x, grad_s * spec.grad_factor)
}

/// Initial step size `2 · mean(|v|) / sqrt(Q_P)`, floored at [`MIN_SCALE`].
pub fn init_scale(values: &Tensor, spec: &QuantSpec) -> f64 {
    let mean_abs = values.data().iter().map(|v| v.abs()).sum::<f64>() / values.numel() as f64;
    (2.0 * mean_abs / spec.qp.sqrt()).max(MIN_SCALE)
}

/// Graph node for fake quantization. Inputs are `[x, scale]` with `scale`
/// a one-element tensor; the spec's own scale is ignored in favour of it.
pub struct FakeQuantRule {
    spec: QuantSpec,
}

impl FakeQuantRule {
    pub fn new(spec: QuantSpec) -> Self {
        Self { spec }
    }
}

impl CustomGradRule for FakeQuantRule {
    fn name(&self) -> &str {
        "fake-quant"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        quantize_with_scale(inputs[0], &self.spec, inputs[1].item())
    }

    fn backward(&self, upstream: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let (gx, gs) = backward_with_scale(upstream, inputs[0], &self.spec, inputs[1].item());
        vec![gx, Tensor::scalar(gs)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;
    use proptest::prelude::*;
    use std::rc::Rc;

    fn signed(bits: u32, s: f64) -> QuantSpec {
        QuantSpec::new(bits, QuantMode::WeightSigned).unwrap().with_scale(s)
    }

    fn q1(spec: &QuantSpec, x: f64) -> f64 {
        quantize_forward(&Tensor::scalar(x), spec).unwrap().item()
    }

    #[test]
    fn grid_bounds() {
        let w = QuantSpec::new(2, QuantMode::WeightSigned).unwrap();
        assert_eq!((w.qn, w.qp), (2.0, 1.0));
        let w8 = QuantSpec::new(8, QuantMode::WeightSigned).unwrap();
        assert_eq!((w8.qn, w8.qp), (128.0, 127.0));
        let a = QuantSpec::new(4, QuantMode::ActivationUnsigned).unwrap();
        assert_eq!((a.qn, a.qp), (0.0, 15.0));
        assert!(QuantSpec::new(1, QuantMode::WeightSigned).is_err());
    }

    #[test]
    fn forward_examples() {
        let s = signed(2, 0.5);
        assert_eq!(q1(&s, 0.6), 0.5);
        assert_eq!(q1(&s, 0.0), 0.0);
        assert_eq!(q1(&s, -5.0), -1.0);
    }

    #[test]
    fn ties_round_to_even() {
        let s = signed(8, 1.0);
        assert_eq!(q1(&s, 0.5), 0.0);
        assert_eq!(q1(&s, 1.5), 2.0);
        assert_eq!(q1(&s, -2.5), -2.0);
    }

    #[test]
    fn rejects_bad_input() {
        let s = signed(4, 0.0);
        assert!(quantize_forward(&Tensor::scalar(1.0), &s).is_err());
        let s = signed(4, 1.0);
        assert!(quantize_forward(&Tensor::scalar(f64::NAN), &s).is_err());
    }

    #[test]
    fn backward_examples() {
        let s = signed(2, 1.0);
        let up = Tensor::scalar(1.0);
        let (g, _) = quantize_backward(&up, &Tensor::scalar(0.3), &s);
        assert_eq!(g.item(), 1.0);
        let (g, gs) = quantize_backward(&up, &Tensor::scalar(10.0), &s);
        assert_eq!(g.item(), 0.0);
        assert_eq!(gs, 1.0);
    }

    #[test]
    fn init_scale_examples() {
        let s = signed(2, 1.0);
        let v = Tensor::new(vec![4], vec![1., -1., 1., -1.]).unwrap();
        assert_eq!(init_scale(&v, &s), 2.0);
        assert_eq!(init_scale(&Tensor::zeros(&[5]), &s), 1e-8);
    }

    #[test]
    fn project_scale_floors() {
        let mut s = signed(2, -3.0);
        s.project_scale();
        assert_eq!(s.scale, MIN_SCALE);
    }

    #[test]
    fn graph_node_matches_free_functions() {
        let spec = signed(3, 0.4).with_grad_factor_for(5);
        let x = Tensor::new(vec![5], vec![-2.0, -0.3, 0.1, 0.55, 3.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let sv = g.param(Tensor::scalar(0.4));
        let y = g.custom(Rc::new(FakeQuantRule::new(spec.clone())), &[xv, sv]).unwrap();
        assert_eq!(g.value(y), &quantize_forward(&x, &spec).unwrap());
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        let (gx, gs) = quantize_backward(&Tensor::full(&[5], 1.0), &x, &spec);
        assert_eq!(g.grad(xv).unwrap(), &gx);
        assert_eq!(g.grad(sv).unwrap().item(), gs);
    }

    proptest! {
        #[test]
        fn idempotent(x in -50.0f64..50.0, s in 0.01f64..3.0, bits in 2u32..9) {
            let spec = signed(bits, s);
            let once = q1(&spec, x);
            prop_assert_eq!(q1(&spec, once), once);
        }

        #[test]
        fn monotone(a in -50.0f64..50.0, b in -50.0f64..50.0, s in 0.01f64..3.0, bits in 2u32..9) {
            let spec = signed(bits, s);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(q1(&spec, lo) <= q1(&spec, hi));
        }

        #[test]
        fn sixteen_bit_error_within_half_step(x in -1.0f64..1.0) {
            let spec = signed(16, 1e-4);
            prop_assert!((q1(&spec, x) - x).abs() <= 0.5e-4 * (1.0 + 1e-12));
        }
    }
}
