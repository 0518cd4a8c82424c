//! Layer kinds and their forward/backward/update kernels.
//!
//! Activations are cached on the layer during forward so a later backward
//! can run without re-deriving state; this is also what makes the trusted
//! world able to answer a `Backward` command long after its `Forward`.
//!
//! Image tensors are `[H, W, C]` (channels last); convolution weights are
//! `[out_c, kh, kw, in_c]`; connected weights are `[out_units, fan_in]`,
//! all row-major.

use crate::error::{Error, Result};
use crate::rng::{mask_uniform, InitRng};
use crate::tensor::{Shape, Tensor};

/// Element-wise activation. Only the two the cfg grammar admits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Linear => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative expressed in terms of the activation *output*.
    #[inline]
    pub fn grad_from_output(self, y: f32) -> f32 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
        }
    }
}

/// Layer kind plus hyperparameters.
///
/// Convolutional and Connected layers are trainable; the rest carry no
/// parameters. Kernels may be rectangular; the cfg grammar only emits
/// square ones but the attack model needs row-spanning kernels.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Convolutional {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
        activation: Activation,
    },
    Connected {
        out_units: usize,
        activation: Activation,
    },
    Maxpool {
        kernel: usize,
        stride: usize,
    },
    Dropout {
        rate: f32,
    },
    Softmax,
    Cost,
}

impl LayerKind {
    pub fn is_trainable(&self) -> bool {
        matches!(
            self,
            LayerKind::Convolutional { .. } | LayerKind::Connected { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Convolutional { .. } => "convolutional",
            LayerKind::Connected { .. } => "connected",
            LayerKind::Maxpool { .. } => "maxpool",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Softmax => "softmax",
            LayerKind::Cost => "cost",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerKind::Convolutional {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                ..
            } => {
                if out_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
                    return Err(Error::validation(
                        "convolutional out_channels/kernel/stride must be positive",
                    ));
                }
            }
            LayerKind::Connected { out_units, .. } => {
                if out_units == 0 {
                    return Err(Error::validation("connected out_units must be positive"));
                }
            }
            LayerKind::Maxpool { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return Err(Error::validation("maxpool kernel/stride must be positive"));
                }
            }
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::validation(format!(
                        "dropout rate must be in [0, 1), got {rate}"
                    )));
                }
            }
            LayerKind::Softmax | LayerKind::Cost => {}
        }
        Ok(())
    }

    /// Output shape as a pure function of kind and input shape.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        match *self {
            LayerKind::Convolutional {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                pad,
                ..
            } => {
                if input.rank() != 3 {
                    return Err(Error::validation(format!(
                        "convolutional layer needs a [H x W x C] input, got {input}"
                    )));
                }
                let (h, w) = (input[0], input[1]);
                if h + 2 * pad < kernel_h || w + 2 * pad < kernel_w {
                    return Err(Error::validation(format!(
                        "kernel {kernel_h}x{kernel_w} exceeds padded input {input} (pad {pad})"
                    )));
                }
                let oh = (h + 2 * pad - kernel_h) / stride + 1;
                let ow = (w + 2 * pad - kernel_w) / stride + 1;
                Shape::new(vec![oh, ow, out_channels])
            }
            LayerKind::Connected { out_units, .. } => Shape::new(vec![out_units]),
            LayerKind::Maxpool { kernel, stride } => {
                if input.rank() != 3 {
                    return Err(Error::validation(format!(
                        "maxpool layer needs a [H x W x C] input, got {input}"
                    )));
                }
                let (h, w) = (input[0], input[1]);
                if h < kernel || w < kernel {
                    return Err(Error::validation(format!(
                        "maxpool kernel {kernel} exceeds input {input}"
                    )));
                }
                Shape::new(vec![(h - kernel) / stride + 1, (w - kernel) / stride + 1, input[2]])
            }
            LayerKind::Dropout { .. } => Ok(input.clone()),
            LayerKind::Softmax | LayerKind::Cost => {
                if input.rank() != 1 {
                    return Err(Error::validation(format!(
                        "{} layer needs a flat input, got {input}",
                        self.name()
                    )));
                }
                Ok(input.clone())
            }
        }
    }
}

/// Execution mode for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Infer,
    Train,
}

/// Deterministic mask source: dropout draws from `(seed, step, layer, unit)`.
#[derive(Debug, Clone, Copy)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    input: Tensor,
    output: Tensor,
    mask: Option<Vec<f32>>,
    train: bool,
}

/// One network layer: kind, parameters, shapes, and forward caches.
#[derive(Debug, Clone)]
pub struct Layer {
    kind: LayerKind,
    weights: Tensor,
    biases: Tensor,
    input_shape: Shape,
    output_shape: Shape,
    cache: Option<ForwardCache>,
    delta_cache: Option<Tensor>,
}

/// Gradients returned by [`backward_layer`]. Parameter gradients are empty
/// tensors on non-trainable layers.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight_grad: Tensor,
    pub bias_grad: Tensor,
    pub input_delta: Tensor,
}

impl Layer {
    pub fn new(kind: LayerKind, input_shape: Shape) -> Result<Self> {
        kind.validate()?;
        let output_shape = kind.output_shape(&input_shape)?;
        let (weights, biases) = match kind {
            LayerKind::Convolutional {
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => {
                let in_c = input_shape[2];
                (
                    Tensor::zeros(Shape::new(vec![out_channels, kernel_h, kernel_w, in_c])?),
                    Tensor::zeros(Shape::new(vec![out_channels])?),
                )
            }
            LayerKind::Connected { out_units, .. } => (
                Tensor::zeros(Shape::new(vec![out_units, input_shape.count()])?),
                Tensor::zeros(Shape::new(vec![out_units])?),
            ),
            _ => (Tensor::empty(), Tensor::empty()),
        };
        Ok(Layer {
            kind,
            weights,
            biases,
            input_shape,
            output_shape,
            cache: None,
            delta_cache: None,
        })
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn is_trainable(&self) -> bool {
        self.kind.is_trainable()
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &Shape {
        &self.output_shape
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn biases(&self) -> &Tensor {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.count() + self.biases.count()
    }

    /// Replace parameters wholesale (weight loaders, unsealing).
    pub fn set_params(&mut self, weights: Vec<f32>, biases: Vec<f32>) -> Result<()> {
        if weights.len() != self.weights.count() || biases.len() != self.biases.count() {
            return Err(Error::CountMismatch(format!(
                "{} layer expects {}+{} parameters, got {}+{}",
                self.kind.name(),
                self.weights.count(),
                self.biases.count(),
                weights.len(),
                biases.len()
            )));
        }
        self.weights.data_mut().copy_from_slice(&weights);
        self.biases.data_mut().copy_from_slice(&biases);
        Ok(())
    }

    /// He-uniform initialization, seeded by the caller's stream.
    pub fn init_params(&mut self, rng: &mut InitRng) {
        if !self.is_trainable() {
            return;
        }
        let fan_in = match self.kind {
            LayerKind::Convolutional {
                kernel_h, kernel_w, ..
            } => kernel_h * kernel_w * self.input_shape[2],
            LayerKind::Connected { .. } => self.input_shape.count(),
            _ => unreachable!(),
        };
        let limit = (6.0 / fan_in as f32).sqrt();
        for w in self.weights.data_mut() {
            *w = rng.next_symmetric(limit);
        }
        for b in self.biases.data_mut() {
            *b = 0.0;
        }
    }

    /// Direct mutable parameter access for finite-difference probes.
    pub fn weights_mut_for_probe(&mut self) -> &mut [f32] {
        self.weights.data_mut()
    }

    /// Direct mutable parameter access for finite-difference probes.
    pub fn biases_mut_for_probe(&mut self) -> &mut [f32] {
        self.biases.data_mut()
    }

    /// Cached activation from the last forward pass, if any.
    pub fn activation_cache(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.output)
    }

    /// Cached upstream delta from the last backward pass, if any.
    pub fn delta_cache(&self) -> Option<&Tensor> {
        self.delta_cache.as_ref()
    }

    pub fn clear_caches(&mut self) {
        self.cache = None;
        self.delta_cache = None;
    }
}

/// Run one layer forward. Caches input/output (and the dropout mask) on the
/// layer. Dropout is identity in `Infer` mode; in `Train` mode each unit is
/// zeroed with probability `rate` and survivors scaled by `1/(1-rate)`,
/// with the mask drawn deterministically from `rng`.
pub fn forward_layer(
    layer: &mut Layer,
    layer_index: usize,
    input: &Tensor,
    mode: Mode,
    rng: RngState,
) -> Result<Tensor> {
    if input.shape() != &layer.input_shape {
        return Err(Error::ShapeMismatch {
            layer: layer_index,
            expected: layer.input_shape.to_string(),
            actual: input.shape().to_string(),
        });
    }
    let mut mask = None;
    let output = match layer.kind {
        LayerKind::Convolutional {
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            activation,
        } => conv_forward(
            input,
            &layer.weights,
            &layer.biases,
            &layer.output_shape,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            activation,
        ),
        LayerKind::Connected {
            out_units,
            activation,
        } => {
            let x = input.data();
            let w = layer.weights.data();
            let b = layer.biases.data();
            let fan_in = x.len();
            let mut out = vec![0.0f32; out_units];
            for (o, out_v) in out.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = b[o];
                for (wv, xv) in row.iter().zip(x) {
                    acc += wv * xv;
                }
                *out_v = activation.apply(acc);
            }
            Tensor::new(layer.output_shape.clone(), out)?
        }
        LayerKind::Maxpool { kernel, stride } => {
            maxpool_forward(input, &layer.output_shape, kernel, stride)
        }
        LayerKind::Dropout { rate } => match mode {
            Mode::Infer => input.clone(),
            Mode::Train => {
                let scale = 1.0 / (1.0 - rate);
                let mut m = vec![0.0f32; input.count()];
                let mut out = vec![0.0f32; input.count()];
                for (e, mv) in m.iter_mut().enumerate() {
                    if mask_uniform(rng.seed, rng.step, layer_index as u64, e as u64) >= rate {
                        *mv = scale;
                    }
                }
                for ((ov, xv), mv) in out.iter_mut().zip(input.data()).zip(&m) {
                    *ov = xv * mv;
                }
                mask = Some(m);
                Tensor::new(layer.output_shape.clone(), out)?
            }
        },
        LayerKind::Softmax => softmax(input),
        LayerKind::Cost => input.clone(),
    };
    debug_assert!(output.all_finite(), "non-finite activation");
    layer.cache = Some(ForwardCache {
        input: input.clone(),
        output: output.clone(),
        mask,
        train: mode == Mode::Train,
    });
    Ok(output)
}

/// Numerically stable softmax: subtract the max logit before exponentiating.
pub fn softmax(input: &Tensor) -> Tensor {
    let x = input.data();
    let max = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f32 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Tensor::new(input.shape().clone(), out).expect("same shape")
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &Tensor,
    weights: &Tensor,
    biases: &Tensor,
    out_shape: &Shape,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    pad: usize,
    activation: Activation,
) -> Tensor {
    let (h, w, in_c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let x = input.data();
    let wt = weights.data();
    let b = biases.data();
    let mut out = vec![0.0f32; oh * ow * out_channels];
    let kstride = kernel_h * kernel_w * in_c;
    for oy in 0..oh {
        for ox in 0..ow {
            let base_y = (oy * stride) as isize - pad as isize;
            let base_x = (ox * stride) as isize - pad as isize;
            let out_px = (oy * ow + ox) * out_channels;
            for oc in 0..out_channels {
                let kern = &wt[oc * kstride..(oc + 1) * kstride];
                let mut acc = b[oc];
                for ky in 0..kernel_h {
                    let iy = base_y + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel_w {
                        let ix = base_x + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xrow = (iy as usize * w + ix as usize) * in_c;
                        let krow = (ky * kernel_w + kx) * in_c;
                        let xs = &x[xrow..xrow + in_c];
                        let ks = &kern[krow..krow + in_c];
                        for (kv, xv) in ks.iter().zip(xs) {
                            acc += kv * xv;
                        }
                    }
                }
                out[out_px + oc] = activation.apply(acc);
            }
        }
    }
    Tensor::new(out_shape.clone(), out).expect("conv shape")
}

fn maxpool_forward(input: &Tensor, out_shape: &Shape, kernel: usize, stride: usize) -> Tensor {
    let (w, c) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let x = input.data();
    let mut out = vec![0.0f32; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f32::NEG_INFINITY;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let v = x[((oy * stride + ky) * w + ox * stride + kx) * c + ch];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(oy * ow + ox) * c + ch] = best;
            }
        }
    }
    Tensor::new(out_shape.clone(), out).expect("pool shape")
}

/// Backward pass through one layer given the upstream delta `dL/d(a^l)`.
/// Requires a preceding train-mode forward (caches populated).
pub fn backward_layer(
    layer: &mut Layer,
    layer_index: usize,
    upstream: &Tensor,
) -> Result<LayerGrads> {
    let cache = layer.cache.as_ref().ok_or_else(|| {
        Error::State(format!(
            "layer {layer_index}: backward without a prior forward"
        ))
    })?;
    if !cache.train {
        return Err(Error::State(format!(
            "layer {layer_index}: backward requires a train-mode forward"
        )));
    }
    if upstream.shape() != &layer.output_shape {
        return Err(Error::ShapeMismatch {
            layer: layer_index,
            expected: layer.output_shape.to_string(),
            actual: upstream.shape().to_string(),
        });
    }
    layer.delta_cache = Some(upstream.clone());
    let cache = layer.cache.as_ref().unwrap();
    let grads = match layer.kind {
        LayerKind::Convolutional {
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            activation,
        } => conv_backward(
            layer,
            cache,
            upstream,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            activation,
        ),
        LayerKind::Connected { activation, .. } => {
            let x = cache.input.data();
            let y = cache.output.data();
            let w = layer.weights.data();
            let fan_in = x.len();
            let mut wg = vec![0.0f32; w.len()];
            let mut bg = vec![0.0f32; y.len()];
            let mut dx = vec![0.0f32; fan_in];
            for o in 0..y.len() {
                let dz = upstream.data()[o] * activation.grad_from_output(y[o]);
                bg[o] = dz;
                let row = o * fan_in;
                for i in 0..fan_in {
                    wg[row + i] = dz * x[i];
                    dx[i] += w[row + i] * dz;
                }
            }
            LayerGrads {
                weight_grad: Tensor::new(layer.weights.shape().clone(), wg)?,
                bias_grad: Tensor::new(layer.biases.shape().clone(), bg)?,
                input_delta: Tensor::new(layer.input_shape.clone(), dx)?,
            }
        }
        LayerKind::Maxpool { kernel, stride } => {
            let x = cache.input.data();
            let (w, c) = (layer.input_shape[1], layer.input_shape[2]);
            let (oh, ow) = (layer.output_shape[0], layer.output_shape[1]);
            let mut dx = vec![0.0f32; x.len()];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        // First maximum in row-major window order wins ties.
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let idx =
                                    ((oy * stride + ky) * w + ox * stride + kx) * c + ch;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        dx[best_idx] += upstream.data()[(oy * ow + ox) * c + ch];
                    }
                }
            }
            LayerGrads {
                weight_grad: Tensor::empty(),
                bias_grad: Tensor::empty(),
                input_delta: Tensor::new(layer.input_shape.clone(), dx)?,
            }
        }
        LayerKind::Dropout { .. } => {
            let mask = cache.mask.as_ref().ok_or_else(|| {
                Error::State(format!("layer {layer_index}: dropout mask not cached"))
            })?;
            let dx: Vec<f32> = upstream
                .data()
                .iter()
                .zip(mask)
                .map(|(d, m)| d * m)
                .collect();
            LayerGrads {
                weight_grad: Tensor::empty(),
                bias_grad: Tensor::empty(),
                input_delta: Tensor::new(layer.input_shape.clone(), dx)?,
            }
        }
        LayerKind::Softmax => {
            let s = cache.output.data();
            let d = upstream.data();
            let dot: f32 = d.iter().zip(s).map(|(dv, sv)| dv * sv).sum();
            let dx: Vec<f32> = s.iter().zip(d).map(|(sv, dv)| sv * (dv - dot)).collect();
            LayerGrads {
                weight_grad: Tensor::empty(),
                bias_grad: Tensor::empty(),
                input_delta: Tensor::new(layer.input_shape.clone(), dx)?,
            }
        }
        LayerKind::Cost => LayerGrads {
            weight_grad: Tensor::empty(),
            bias_grad: Tensor::empty(),
            input_delta: upstream.clone(),
        },
    };
    debug_assert!(grads.input_delta.all_finite(), "non-finite delta");
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    layer: &Layer,
    cache: &ForwardCache,
    upstream: &Tensor,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    pad: usize,
    activation: Activation,
) -> LayerGrads {
    let x = cache.input.data();
    let y = cache.output.data();
    let (h, w, in_c) = (
        layer.input_shape[0],
        layer.input_shape[1],
        layer.input_shape[2],
    );
    let (oh, ow) = (layer.output_shape[0], layer.output_shape[1]);
    let wt = layer.weights.data();
    let kstride = kernel_h * kernel_w * in_c;
    let mut wg = vec![0.0f32; wt.len()];
    let mut bg = vec![0.0f32; out_channels];
    let mut dx = vec![0.0f32; x.len()];
    for oy in 0..oh {
        for ox in 0..ow {
            let base_y = (oy * stride) as isize - pad as isize;
            let base_x = (ox * stride) as isize - pad as isize;
            let out_px = (oy * ow + ox) * out_channels;
            for oc in 0..out_channels {
                let dz = upstream.data()[out_px + oc]
                    * activation.grad_from_output(y[out_px + oc]);
                if dz == 0.0 {
                    continue;
                }
                bg[oc] += dz;
                let kern_base = oc * kstride;
                for ky in 0..kernel_h {
                    let iy = base_y + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel_w {
                        let ix = base_x + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xrow = (iy as usize * w + ix as usize) * in_c;
                        let krow = kern_base + (ky * kernel_w + kx) * in_c;
                        for ic in 0..in_c {
                            wg[krow + ic] += dz * x[xrow + ic];
                            dx[xrow + ic] += wt[krow + ic] * dz;
                        }
                    }
                }
            }
        }
    }
    LayerGrads {
        weight_grad: Tensor::new(layer.weights.shape().clone(), wg).expect("wg shape"),
        bias_grad: Tensor::new(layer.biases.shape().clone(), bg).expect("bg shape"),
        input_delta: Tensor::new(layer.input_shape.clone(), dx).expect("dx shape"),
    }
}

/// Plain SGD: `param -= eta * grad`, in place.
pub fn sgd_update(layer: &mut Layer, weight_grad: &Tensor, bias_grad: &Tensor, eta: f32) -> Result<()> {
    if !layer.is_trainable() {
        if weight_grad.is_empty() && bias_grad.is_empty() {
            return Ok(());
        }
        return Err(Error::contract(format!(
            "sgd_update on non-trainable {} layer with non-empty grads",
            layer.kind.name()
        )));
    }
    if weight_grad.count() != layer.weights.count() || bias_grad.count() != layer.biases.count() {
        return Err(Error::contract(format!(
            "gradient sizes {}+{} do not match parameter sizes {}+{}",
            weight_grad.count(),
            bias_grad.count(),
            layer.weights.count(),
            layer.biases.count()
        )));
    }
    for (w, g) in layer.weights.data_mut().iter_mut().zip(weight_grad.data()) {
        *w -= eta * g;
    }
    for (b, g) in layer.biases.data_mut().iter_mut().zip(bias_grad.data()) {
        *b -= eta * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> RngState {
        RngState { seed: 1, step: 0 }
    }

    #[test]
    fn connected_identity_passthrough() {
        let mut layer = Layer::new(
            LayerKind::Connected {
                out_units: 3,
                activation: Activation::Linear,
            },
            Shape::new(vec![3]).unwrap(),
        )
        .unwrap();
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        layer.set_params(w, vec![0.0; 3]).unwrap();
        let input = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let out = forward_layer(&mut layer, 1, &input, Mode::Infer, rng()).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let out = softmax(&Tensor::from_vec(vec![0.0, 0.0]));
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv_single_window_sums_products() {
        // 2x2 input [[1,2],[3,4]], single 2x2 kernel of ones, stride 1, pad 0,
        // zero bias, linear activation: 1+2+3+4 = 10.
        let mut layer = Layer::new(
            LayerKind::Convolutional {
                out_channels: 1,
                kernel_h: 2,
                kernel_w: 2,
                stride: 1,
                pad: 0,
                activation: Activation::Linear,
            },
            Shape::new(vec![2, 2, 1]).unwrap(),
        )
        .unwrap();
        layer.set_params(vec![1.0; 4], vec![0.0]).unwrap();
        let input = Tensor::new(
            Shape::new(vec![2, 2, 1]).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let out = forward_layer(&mut layer, 1, &input, Mode::Infer, rng()).unwrap();
        assert_eq!(out.shape().extents(), &[1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn connected_backward_matches_hand_grads() {
        let mut layer = Layer::new(
            LayerKind::Connected {
                out_units: 1,
                activation: Activation::Linear,
            },
            Shape::new(vec![2]).unwrap(),
        )
        .unwrap();
        layer.set_params(vec![0.5, -0.5], vec![0.0]).unwrap();
        let input = Tensor::from_vec(vec![1.0, 0.0]);
        forward_layer(&mut layer, 1, &input, Mode::Train, rng()).unwrap();
        let grads = backward_layer(&mut layer, 1, &Tensor::from_vec(vec![2.0])).unwrap();
        assert_eq!(grads.weight_grad.data(), &[2.0, 0.0]);
        assert_eq!(grads.bias_grad.data(), &[2.0]);
    }

    #[test]
    fn maxpool_routes_delta_to_argmax() {
        let mut layer = Layer::new(
            LayerKind::Maxpool { kernel: 2, stride: 2 },
            Shape::new(vec![2, 2, 1]).unwrap(),
        )
        .unwrap();
        let input = Tensor::new(
            Shape::new(vec![2, 2, 1]).unwrap(),
            vec![1.0, 4.0, 3.0, 2.0],
        )
        .unwrap();
        let out = forward_layer(&mut layer, 1, &input, Mode::Train, rng()).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let grads = backward_layer(&mut layer, 1, &Tensor::new(
            Shape::new(vec![1, 1, 1]).unwrap(),
            vec![7.0],
        ).unwrap())
        .unwrap();
        assert_eq!(grads.input_delta.data(), &[0.0, 7.0, 0.0, 0.0]);
        assert!(grads.weight_grad.is_empty());
    }

    #[test]
    fn dropout_infer_is_identity() {
        let mut layer = Layer::new(
            LayerKind::Dropout { rate: 0.5 },
            Shape::new(vec![8]).unwrap(),
        )
        .unwrap();
        let input = Tensor::from_vec((0..8).map(|i| i as f32).collect::<Vec<_>>());
        let out = forward_layer(&mut layer, 1, &input, Mode::Infer, rng()).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn dropout_backward_reuses_forward_mask() {
        let mut layer = Layer::new(
            LayerKind::Dropout { rate: 0.5 },
            Shape::new(vec![64]).unwrap(),
        )
        .unwrap();
        let input = Tensor::from_vec(vec![1.0; 64]);
        let out = forward_layer(&mut layer, 2, &input, Mode::Train, rng()).unwrap();
        let ones = Tensor::from_vec(vec![1.0; 64]);
        let grads = backward_layer(&mut layer, 2, &ones).unwrap();
        // delta * mask == forward output when input was all ones
        assert_eq!(grads.input_delta.data(), out.data());
        // mask actually dropped something and kept something at rate 0.5
        assert!(out.data().iter().any(|&v| v == 0.0));
        assert!(out.data().iter().any(|&v| v == 2.0));
    }

    #[test]
    fn dropout_mask_deterministic_across_instances() {
        let input = Tensor::from_vec(vec![1.0; 32]);
        let mut a = Layer::new(LayerKind::Dropout { rate: 0.3 }, Shape::new(vec![32]).unwrap()).unwrap();
        let mut b = a.clone();
        let oa = forward_layer(&mut a, 5, &input, Mode::Train, RngState { seed: 9, step: 3 }).unwrap();
        let ob = forward_layer(&mut b, 5, &input, Mode::Train, RngState { seed: 9, step: 3 }).unwrap();
        assert_eq!(oa.data(), ob.data());
        let oc = forward_layer(&mut b, 5, &input, Mode::Train, RngState { seed: 9, step: 4 }).unwrap();
        assert_ne!(oa.data(), oc.data());
    }

    #[test]
    fn forward_shape_mismatch_names_layer_and_shapes() {
        let mut layer = Layer::new(
            LayerKind::Connected {
                out_units: 2,
                activation: Activation::Linear,
            },
            Shape::new(vec![3]).unwrap(),
        )
        .unwrap();
        let err = forward_layer(&mut layer, 4, &Tensor::from_vec(vec![1.0; 2]), Mode::Infer, rng())
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 4"), "{msg}");
        assert!(msg.contains("[3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut layer = Layer::new(
            LayerKind::Connected {
                out_units: 2,
                activation: Activation::Linear,
            },
            Shape::new(vec![2]).unwrap(),
        )
        .unwrap();
        let err = backward_layer(&mut layer, 1, &Tensor::from_vec(vec![0.0; 2])).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn sgd_update_basic_and_zero() {
        let mut layer = Layer::new(
            LayerKind::Connected {
                out_units: 1,
                activation: Activation::Linear,
            },
            Shape::new(vec![1]).unwrap(),
        )
        .unwrap();
        layer.set_params(vec![1.0], vec![0.0]).unwrap();
        let g = Tensor::from_vec(vec![0.5]);
        let zb = Tensor::from_vec(vec![0.0]);
        sgd_update(&mut layer, &g, &zb, 0.1).unwrap();
        assert!((layer.weights().data()[0] - 0.95).abs() < 1e-7);
        let zg = Tensor::from_vec(vec![0.0]);
        sgd_update(&mut layer, &zg, &zb, 0.1).unwrap();
        assert!((layer.weights().data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn two_updates_equal_one_summed_update() {
        let mk = || {
            let mut l = Layer::new(
                LayerKind::Connected {
                    out_units: 1,
                    activation: Activation::Linear,
                },
                Shape::new(vec![2]).unwrap(),
            )
            .unwrap();
            l.set_params(vec![1.0, -1.0], vec![0.5]).unwrap();
            l
        };
        let g1 = (Tensor::from_vec(vec![0.1, 0.2]), Tensor::from_vec(vec![0.3]));
        let g2 = (Tensor::from_vec(vec![-0.4, 0.5]), Tensor::from_vec(vec![0.6]));
        let gsum = (
            Tensor::from_vec(vec![0.1 - 0.4, 0.2 + 0.5]),
            Tensor::from_vec(vec![0.3 + 0.6]),
        );
        let mut a = mk();
        sgd_update(&mut a, &g1.0, &g1.1, 0.1).unwrap();
        sgd_update(&mut a, &g2.0, &g2.1, 0.1).unwrap();
        let mut b = mk();
        sgd_update(&mut b, &gsum.0, &gsum.1, 0.1).unwrap();
        for (x, y) in a.weights().data().iter().zip(b.weights().data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn sgd_shape_mismatch_is_contract_violation() {
        let mut layer = Layer::new(
            LayerKind::Connected {
                out_units: 1,
                activation: Activation::Linear,
            },
            Shape::new(vec![2]).unwrap(),
        )
        .unwrap();
        let err = sgd_update(
            &mut layer,
            &Tensor::from_vec(vec![0.0; 3]),
            &Tensor::from_vec(vec![0.0]),
            0.1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
