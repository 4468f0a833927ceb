//! Small convolutional network evaluated and trained in f64, implemented
//! with im2col plus dense matrix products. Padding preserves spatial size,
//! so logits align column-for-column with the input map.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const KERNEL: usize = 3;
pub const HIDDEN_WIDTH: usize = 64;
pub const NUM_LAYERS: usize = 5;

/// One 3x3 same-padding convolution layer.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    /// `(out_channels, in_channels * KERNEL * KERNEL)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Network description stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyMeta {
    /// Mean-pooling factor applied to full-resolution maps before the net.
    pub pool_factor: usize,
    /// Expected vertical voxel count of the (pooled) input map.
    pub map_depth: usize,
    /// Expected class count of the input map.
    pub num_classes: usize,
}

impl PolicyMeta {
    pub fn in_channels(&self) -> usize {
        self.map_depth * self.num_classes
    }
}

/// Weights of the search policy network.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub layers: Vec<ConvLayer>,
    pub meta: PolicyMeta,
}

impl PolicyParams {
    /// He-normal initialization, deterministic for a given rng.
    pub fn init(meta: PolicyMeta, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(NUM_LAYERS);
        let mut in_ch = meta.in_channels();
        for layer in 0..NUM_LAYERS {
            let out_ch = if layer + 1 == NUM_LAYERS { 1 } else { HIDDEN_WIDTH };
            let fan_in = (in_ch * KERNEL * KERNEL) as f64;
            let std = (2.0 / fan_in).sqrt();
            let weight = Array2::from_shape_fn((out_ch, in_ch * KERNEL * KERNEL), |_| {
                gaussian(rng) * std
            });
            layers.push(ConvLayer {
                weight,
                bias: Array1::zeros(out_ch),
                in_channels: in_ch,
                out_channels: out_ch,
            });
            in_ch = out_ch;
        }
        Self { layers, meta }
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn im2col(input: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let k2 = KERNEL * KERNEL;
    let mut cols = Array2::zeros((c * k2, h * w));
    for ch in 0..c {
        for dy in 0..KERNEL {
            for dx in 0..KERNEL {
                let row = ch * k2 + dy * KERNEL + dx;
                for y in 0..h {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[[row, y * w + x]] = input[[ch, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let k2 = KERNEL * KERNEL;
    let mut dinput = Array3::zeros((c, h, w));
    for ch in 0..c {
        for dy in 0..KERNEL {
            for dx in 0..KERNEL {
                let row = ch * k2 + dy * KERNEL + dx;
                for y in 0..h {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dinput[[ch, sy as usize, sx as usize]] += dcols[[row, y * w + x]];
                    }
                }
            }
        }
    }
    dinput
}

fn conv_forward(layer: &ConvLayer, cols: &Array2<f64>) -> Array2<f64> {
    let hw = cols.ncols();
    let mut out = Array2::zeros((layer.out_channels, hw));
    ndarray::linalg::general_mat_mul(1.0, &layer.weight, cols, 0.0, &mut out);
    for (mut row, &b) in out.rows_mut().into_iter().zip(layer.bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    out
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardTrace {
    /// Per layer: the im2col matrix of that layer's input.
    cols: Vec<Array2<f64>>,
    /// Per layer: pre-activation output `(out_ch, H*W)`.
    pre: Vec<Array2<f64>>,
    h: usize,
    w: usize,
}

/// Runs the network on a `(channels, H, W)` input, producing `(H, W)` logits.
pub fn forward(params: &PolicyParams, input: &Array3<f64>) -> Array2<f64> {
    forward_traced(params, input).0
}

pub fn forward_traced(params: &PolicyParams, input: &Array3<f64>) -> (Array2<f64>, ForwardTrace) {
    let (_, h, w) = input.dim();
    let mut trace = ForwardTrace {
        cols: Vec::with_capacity(params.layers.len()),
        pre: Vec::with_capacity(params.layers.len()),
        h,
        w,
    };
    let mut act = input.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let cols = im2col(&act);
        let pre = conv_forward(layer, &cols);
        trace.cols.push(cols);
        let is_last = i + 1 == params.layers.len();
        let next = if is_last {
            pre.clone()
        } else {
            pre.mapv(|v| v.max(0.0))
        };
        trace.pre.push(pre);
        act = next
            .into_shape_with_order((layer.out_channels, h, w))
            .expect("conv output reshapes to (C, H, W)");
    }
    let logits = act
        .index_axis_move(ndarray::Axis(0), 0)
        .into_dimensionality()
        .expect("final layer has one channel");
    (logits, trace)
}

/// Per-layer parameter gradients.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Backpropagates `dlogits` through the trace, returning parameter gradients.
pub fn backward(params: &PolicyParams, trace: &ForwardTrace, dlogits: &Array2<f64>) -> Vec<LayerGrad> {
    let hw = trace.h * trace.w;
    let mut grads: Vec<Option<LayerGrad>> = vec![None; params.layers.len()];
    // Gradient w.r.t. the current layer's pre-activation, shape (out_ch, HW).
    let mut dpre: Array2<f64> = dlogits
        .to_owned()
        .into_shape_with_order((1, hw))
        .expect("logits reshape");
    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        let cols = &trace.cols[i];
        let mut dw = Array2::zeros(layer.weight.raw_dim());
        ndarray::linalg::general_mat_mul(1.0, &dpre, &cols.t().to_owned(), 0.0, &mut dw);
        let db = dpre.sum_axis(ndarray::Axis(1));
        grads[i] = Some(LayerGrad {
            weight: dw,
            bias: db,
        });
        if i == 0 {
            break;
        }
        // Gradient w.r.t. this layer's input columns, then scatter back.
        let mut dcols = Array2::zeros(cols.raw_dim());
        ndarray::linalg::general_mat_mul(1.0, &layer.weight.t().to_owned(), &dpre, 0.0, &mut dcols);
        let dinput = col2im(&dcols, layer.in_channels, trace.h, trace.w);
        // Previous layer's ReLU mask.
        let prev_pre = &trace.pre[i - 1];
        let mut next_dpre = dinput
            .into_shape_with_order((layer.in_channels, hw))
            .expect("dinput reshape");
        ndarray::Zip::from(&mut next_dpre)
            .and(prev_pre)
            .for_each(|d, &p| {
                if p <= 0.0 {
                    *d = 0.0;
                }
            });
        dpre = next_dpre;
    }
    grads.into_iter().map(|g| g.unwrap()).collect()
}

/// Numerically stable softmax over all logits, returned as `(H, W)`.
pub fn softmax2(logits: &Array2<f64>) -> Array2<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Cross-entropy between `softmax(logits)` and a target distribution, with
/// its gradient w.r.t. the logits.
pub fn cross_entropy_and_grad(logits: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let log_sum = logits.mapv(|v| (v - max).exp()).sum().ln() + max;
    let mut loss = 0.0;
    for (&t, &l) in target.iter().zip(logits.iter()) {
        if t > 0.0 {
            loss -= t * (l - log_sum);
        }
    }
    let probs = softmax2(logits);
    let grad = &probs - target;
    (loss, grad)
}
