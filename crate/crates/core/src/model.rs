//! Small classifiers with fake-quant nodes and intermediate-layer taps.
//!
//! Two architectures are supported: a ReLU MLP and a CNN of 3×3 convolution
//! blocks followed by one dense classifier. Convolutions run as im2col plus
//! matmul on channels-last rows `[batch·height·width, channels]`.
//!
//! Every layer is named (`fc0`, `fc1`, … for the MLP; `conv0`, …, `fc` for the
//! CNN). A tap records a layer's pre-activation output, flattened to
//! `[batch, features]`. The logits layer is never a tap.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::quant::{init_scale, quantize_forward, FakeQuantRule, QuantMode, QuantSpec};
use crate::{Error, Result, Tensor};

pub const CHECKPOINT_FORMAT: &str = "quarc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    Mlp {
        inputs: usize,
        hidden: Vec<usize>,
    },
    Cnn {
        channels: usize,
        height: usize,
        width: usize,
        blocks: Vec<ConvBlock>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDef {
    pub arch: Architecture,
    pub classes: usize,
    /// Ordered tap layer names.
    pub taps: Vec<String>,
    /// Quantize the first and last layers too. Off by default.
    #[serde(default)]
    pub quantize_first_last: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        channels_in: usize,
        channels_out: usize,
        stride: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerShape {
    pub fn weight_shape(&self) -> [usize; 2] {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => [inputs, outputs],
            LayerKind::Conv {
                channels_in,
                channels_out,
                ..
            } => [9 * channels_in, channels_out],
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight_shape()[1]
    }

    /// Features per sample of this layer's pre-activation output.
    pub fn tap_width(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv {
                channels_out, out_hw, ..
            } => channels_out * out_hw.0 * out_hw.1,
        }
    }
}

impl ModelDef {
    /// MLP tapped at its last hidden layer.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Self {
        let mut def = Self {
            arch: Architecture::Mlp {
                inputs,
                hidden: hidden.to_vec(),
            },
            classes,
            taps: vec![],
            quantize_first_last: false,
        };
        def.taps = def.default_taps();
        def
    }

    /// CNN tapped at its last convolution block.
    pub fn cnn(channels: usize, height: usize, width: usize, blocks: &[ConvBlock], classes: usize) -> Self {
        let mut def = Self {
            arch: Architecture::Cnn {
                channels,
                height,
                width,
                blocks: blocks.to_vec(),
            },
            classes,
            taps: vec![],
            quantize_first_last: false,
        };
        def.taps = def.default_taps();
        def
    }

    pub fn with_taps(mut self, taps: &[&str]) -> Self {
        self.taps = taps.iter().map(|s| s.to_string()).collect();
        self
    }

    fn default_taps(&self) -> Vec<String> {
        let layers = self.layers();
        if layers.len() >= 2 {
            vec![layers[layers.len() - 2].name.clone()]
        } else {
            vec![]
        }
    }

    pub fn input_size(&self) -> usize {
        match &self.arch {
            Architecture::Mlp { inputs, .. } => *inputs,
            Architecture::Cnn {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
        }
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut out = Vec::new();
        match &self.arch {
            Architecture::Mlp { inputs, hidden } => {
                let mut prev = *inputs;
                for (i, &h) in hidden.iter().chain(std::iter::once(&self.classes)).enumerate() {
                    out.push(LayerShape {
                        name: format!("fc{i}"),
                        kind: LayerKind::Dense {
                            inputs: prev,
                            outputs: h,
                        },
                    });
                    prev = h;
                }
            }
            Architecture::Cnn {
                channels,
                height,
                width,
                blocks,
            } => {
                let (mut c, mut h, mut w) = (*channels, *height, *width);
                for (i, b) in blocks.iter().enumerate() {
                    let stride = b.stride.max(1);
                    let out_hw = ((h - 1) / stride + 1, (w - 1) / stride + 1);
                    out.push(LayerShape {
                        name: format!("conv{i}"),
                        kind: LayerKind::Conv {
                            channels_in: c,
                            channels_out: b.channels,
                            stride,
                            in_hw: (h, w),
                            out_hw,
                        },
                    });
                    (c, h, w) = (b.channels, out_hw.0, out_hw.1);
                }
                out.push(LayerShape {
                    name: "fc".into(),
                    kind: LayerKind::Dense {
                        inputs: c * h * w,
                        outputs: self.classes,
                    },
                });
            }
        }
        out
    }

    /// Closed-form parameter count (weights and biases; step sizes excluded).
    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| {
                let [r, c] = l.weight_shape();
                r * c + c
            })
            .sum()
    }

    /// Indices of layers that receive fake-quant nodes.
    pub fn quantized_layers(&self) -> Vec<usize> {
        let n = self.layers().len();
        if self.quantize_first_last {
            (0..n).collect()
        } else {
            (1..n.saturating_sub(1)).collect()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        match &self.arch {
            Architecture::Mlp { inputs, hidden } => {
                if *inputs == 0 || hidden.contains(&0) {
                    return Err(Error::Config("MLP widths must be positive".into()));
                }
            }
            Architecture::Cnn {
                channels,
                height,
                width,
                blocks,
            } => {
                if *channels == 0 || *height == 0 || *width == 0 || blocks.is_empty() {
                    return Err(Error::Config(
                        "CNN needs positive input dims and at least one block".into(),
                    ));
                }
                if blocks.iter().any(|b| b.channels == 0 || b.stride == 0) {
                    return Err(Error::Config("CNN blocks need positive channels and stride".into()));
                }
            }
        }
        let layers = self.layers();
        let last = &layers[layers.len() - 1].name;
        for tap in &self.taps {
            if tap == last {
                return Err(Error::Config(format!("logits layer {tap} cannot be a tap")));
            }
            if !layers.iter().any(|l| &l.name == tap) {
                return Err(Error::Config(format!("tap {tap} names no layer")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    Full,
    Quantized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub weight_quant: Option<QuantSpec>,
    /// Quantizer on this layer's input activations.
    pub act_quant: Option<QuantSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInstance {
    pub def: ModelDef,
    pub precision: Precision,
    pub layers: Vec<LayerParams>,
    /// When false, fake-quant nodes are bypassed and the model computes
    /// exactly what its full-precision sibling would.
    pub quant_enabled: bool,
}

/// Named tap outputs in model tap order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TapSet(pub Vec<(String, Tensor)>);

impl TapSet {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub logits: Tensor,
    pub probs: Tensor,
    pub taps: TapSet,
}

/// Graph leaves for one model's parameters.
pub struct Bound {
    layers: Vec<BoundLayer>,
}

struct BoundLayer {
    weight: Var,
    bias: Var,
    weight_scale: Option<Var>,
    act_scale: Option<Var>,
}

/// Graph nodes produced by [`ModelInstance::forward_graph`].
pub struct GraphOutputs {
    pub logits: Var,
    pub probs: Var,
    pub taps: Vec<(String, Var)>,
    /// Input to each layer, after activation fake-quant if any.
    pub layer_inputs: Vec<Var>,
}

/// Per-layer gradients gathered after a backward pass.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub weight_scale: Option<f64>,
    pub act_scale: Option<f64>,
}

impl ModelInstance {
    /// He-normal weights and zero biases from a seeded generator.
    pub fn init(def: ModelDef, seed: u64) -> Result<Self> {
        def.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = def
            .layers()
            .into_iter()
            .map(|l| {
                let [fan_in, out] = l.weight_shape();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let w: Vec<f64> = (0..fan_in * out).map(|_| normal.sample(&mut rng)).collect();
                LayerParams {
                    name: l.name,
                    weight: Tensor::new(vec![fan_in, out], w).expect("weight shape"),
                    bias: Tensor::zeros(&[1, out]),
                    weight_quant: None,
                    act_quant: None,
                }
            })
            .collect();
        Ok(Self {
            def,
            precision: Precision::Full,
            layers,
            quant_enabled: true,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.layers.iter().flat_map(|l| {
            [
                (format!("{}.weight", l.name), &l.weight),
                (format!("{}.bias", l.name), &l.bias),
            ]
        })
    }

    /// Weight as seen by the forward pass.
    pub fn effective_weight(&self, layer: usize) -> Result<Tensor> {
        let l = &self.layers[layer];
        match (&l.weight_quant, self.quant_enabled) {
            (Some(spec), true) => quantize_forward(&l.weight, spec),
            _ => Ok(l.weight.clone()),
        }
    }

    /// Deep copy with weight fake-quant on the eligible layers, step sizes
    /// calibrated from the copied weights. With `bits_a`, the inputs to those
    /// layers are quantized too, calibrated on `calibration`.
    pub fn clone_as_quantized(&self, bits_w: u32, bits_a: Option<u32>, calibration: Option<&Tensor>) -> Result<Self> {
        if self.precision != Precision::Full {
            return Err(Error::Contract(
                "clone_as_quantized needs a full-precision model".into(),
            ));
        }
        let mut q = self.clone();
        q.precision = Precision::Quantized;
        q.quant_enabled = true;
        let targets = self.def.quantized_layers();
        if targets.is_empty() {
            return Err(Error::Config(
                "no layer is eligible for quantization; add hidden layers or set quantize_first_last".into(),
            ));
        }
        let act_inputs = match bits_a {
            Some(_) => {
                let batch = calibration
                    .ok_or_else(|| Error::Config("activation quantization needs a calibration batch".into()))?;
                let mut g = Graph::new();
                let bound = self.bind(&mut g, false);
                let x = g.constant(batch.clone());
                let out = self.forward_graph(&mut g, &bound, x)?;
                out.layer_inputs.iter().map(|&v| g.value(v).clone()).collect()
            }
            None => vec![],
        };
        for &i in &targets {
            let layer = &mut q.layers[i];
            let spec = QuantSpec::new(bits_w, QuantMode::WeightSigned)?;
            let s = init_scale(&layer.weight, &spec);
            layer.weight_quant = Some(spec.with_scale(s).with_grad_factor_for(layer.weight.numel()));
            if let Some(bits) = bits_a {
                let spec = QuantSpec::new(bits, QuantMode::ActivationUnsigned)?;
                let acts = &act_inputs[i];
                let s = init_scale(acts, &spec);
                let per_sample = acts.numel() / calibration.map_or(1, |c| c.shape()[0]);
                layer.act_quant = Some(spec.with_scale(s).with_grad_factor_for(per_sample));
            }
        }
        Ok(q)
    }

    /// Adds every parameter (and step size) to `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let mut leaf = |t: Tensor| if trainable { g.param(t) } else { g.constant(t) };
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                weight: leaf(l.weight.clone()),
                bias: leaf(l.bias.clone()),
                weight_scale: l.weight_quant.as_ref().map(|s| leaf(Tensor::scalar(s.scale))),
                act_scale: l.act_quant.as_ref().map(|s| leaf(Tensor::scalar(s.scale))),
            })
            .collect();
        Bound { layers }
    }

    fn fake_quant(&self, g: &mut Graph, x: Var, spec: &Option<QuantSpec>, scale: Option<Var>) -> Result<Var> {
        match (spec, scale, self.quant_enabled) {
            (Some(spec), Some(s), true) => g.custom(Rc::new(FakeQuantRule::new(spec.clone())), &[x, s]),
            _ => Ok(x),
        }
    }

    pub fn forward_graph(&self, g: &mut Graph, bound: &Bound, input: Var) -> Result<GraphOutputs> {
        let shape = g.value(input).shape().to_vec();
        let batch = shape[0];
        let features: usize = shape[1..].iter().product();
        if shape.len() < 2 || features != self.def.input_size() {
            return Err(Error::Shape(format!(
                "batch shape {shape:?} does not match model input size {}",
                self.def.input_size()
            )));
        }
        let layers = self.def.layers();
        let mut h = g.reshape(input, vec![batch, features])?;
        if let Architecture::Cnn {
            channels,
            height,
            width,
            ..
        } = &self.def.arch
        {
            h = g.gather(
                h,
                nchw_to_rows(batch, *channels, *height, *width),
                vec![batch * height * width, *channels],
            )?;
        }

        let mut taps = Vec::new();
        let mut layer_inputs = Vec::new();
        let last = layers.len() - 1;
        for (i, (shape, (p, b))) in layers.iter().zip(self.layers.iter().zip(&bound.layers)).enumerate() {
            if let LayerKind::Dense { inputs, .. } = shape.kind {
                if g.value(h).last_dim() != inputs {
                    h = g.reshape(h, vec![batch, inputs])?;
                }
            }
            let x = self.fake_quant(g, h, &p.act_quant, b.act_scale)?;
            layer_inputs.push(x);
            let w = self.fake_quant(g, b.weight, &p.weight_quant, b.weight_scale)?;
            let cols = match shape.kind {
                LayerKind::Dense { .. } => x,
                LayerKind::Conv {
                    channels_in,
                    stride,
                    in_hw,
                    out_hw,
                    ..
                } => {
                    let idx = im2col_index(batch, in_hw, out_hw, channels_in, stride);
                    g.gather(x, idx, vec![batch * out_hw.0 * out_hw.1, 9 * channels_in])?
                }
            };
            let rows = g.value(cols).shape()[0];
            let prod = g.matmul(cols, w)?;
            let ones = g.constant(Tensor::full(&[rows, 1], 1.0));
            let bias = g.matmul(ones, b.bias)?;
            let z = g.add(prod, bias)?;
            if self.def.taps.contains(&shape.name) {
                let flat = g.reshape(z, vec![batch, shape.tap_width()])?;
                taps.push((shape.name.clone(), flat));
            }
            h = if i == last { z } else { g.relu(z) };
        }
        // Keep taps in the declared order.
        taps.sort_by_key(|(n, _)| self.def.taps.iter().position(|t| t == n));
        let logits = h;
        let probs = g.softmax(logits)?;
        Ok(GraphOutputs {
            logits,
            probs,
            taps,
            layer_inputs,
        })
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardResult> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let out = self.forward_graph(&mut g, &bound, x)?;
        Ok(ForwardResult {
            logits: g.value(out.logits).clone(),
            probs: g.value(out.probs).clone(),
            taps: TapSet(out.taps.iter().map(|(n, v)| (n.clone(), g.value(*v).clone())).collect()),
        })
    }

    pub fn collect_grads(&self, g: &Graph, bound: &Bound) -> Result<Vec<LayerGrads>> {
        let get = |v: Var| {
            g.grad(v)
                .cloned()
                .ok_or_else(|| Error::Contract("parameter was not bound as trainable".into()))
        };
        bound
            .layers
            .iter()
            .map(|b| {
                Ok(LayerGrads {
                    weight: get(b.weight)?,
                    bias: get(b.bias)?,
                    weight_scale: b.weight_scale.map(get).transpose()?.map(|t| t.item()),
                    act_scale: b.act_scale.map(get).transpose()?.map(|t| t.item()),
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let ckpt: Checkpoint =
            serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("format tag is {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.model.check_consistent()?;
        Ok(ckpt.model)
    }

    fn check_consistent(&self) -> Result<()> {
        self.def.validate()?;
        let shapes = self.def.layers();
        if shapes.len() != self.layers.len() {
            return Err(Error::Format(format!(
                "model definition has {} layers, checkpoint stores {}",
                shapes.len(),
                self.layers.len()
            )));
        }
        for (s, l) in shapes.iter().zip(&self.layers) {
            if s.name != l.name || l.weight.shape() != s.weight_shape() || l.bias.shape() != [1, s.outputs()] {
                return Err(Error::Format(format!(
                    "layer {} does not match the model definition",
                    l.name
                )));
            }
        }
        Ok(())
    }
}

/// On-disk checkpoint: a JSON object with a format tag and version around
/// the serialized model.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: ModelInstance,
}

fn nchw_to_rows(batch: usize, c: usize, h: usize, w: usize) -> Rc<[Option<usize>]> {
    let mut idx = Vec::with_capacity(batch * c * h * w);
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    idx.push(Some(((b * c + ch) * h + y) * w + x));
                }
            }
        }
    }
    idx.into()
}

/// 3×3, padding 1, columns ordered (ky, kx, channel).
fn im2col_index(
    batch: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    c: usize,
    stride: usize,
) -> Rc<[Option<usize>]> {
    let (h, w) = (in_hw.0 as isize, in_hw.1 as isize);
    let mut idx = Vec::with_capacity(batch * out_hw.0 * out_hw.1 * 9 * c);
    for b in 0..batch as isize {
        for oy in 0..out_hw.0 as isize {
            for ox in 0..out_hw.1 as isize {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = oy * stride as isize + ky - 1;
                        let ix = ox * stride as isize + kx - 1;
                        let inside = iy >= 0 && iy < h && ix >= 0 && ix < w;
                        for ch in 0..c {
                            idx.push(inside.then(|| (((b * h + iy) * w + ix) as usize) * c + ch));
                        }
                    }
                }
            }
        }
    }
    idx.into()
}
