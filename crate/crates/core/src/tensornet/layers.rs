//! Layer definitions, parameter storage, and exact forward/backward passes.
//!
//! Activations are per-sample: convolution and pooling work on `(C, H, W)`
//! tensors, dense layers on flat vectors. Batching lives in the trainer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::softmax_in_place;
use super::{NetError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Relu,
    Flatten,
    Softmax,
}

impl LayerSpec {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn pool(kernel: usize, stride: usize) -> Self {
        LayerSpec::MaxPool2d { kernel, stride }
    }

    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::Dense { in_dim, out_dim }
    }

    /// Weight and bias shapes, if the layer is trainable.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_ch, out_ch, kernel, ..
            } => Some((vec![out_ch, in_ch, kernel, kernel], vec![out_ch])),
            LayerSpec::Dense { in_dim, out_dim } => Some((vec![out_dim, in_dim], vec![out_dim])),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .unwrap_or(0)
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
            LayerSpec::Dense { in_dim, .. } => in_dim,
            _ => 0,
        }
    }

    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>, NetError> {
        let err = |msg: String| NetError::Dimension { layer: index, msg };
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 {
                    return Err(err("conv dimensions must be positive".into()));
                }
                let [c, h, w] = input else {
                    return Err(err(format!("conv expects (C,H,W), got {input:?}")));
                };
                if *c != in_ch {
                    return Err(err(format!("conv expects {in_ch} channels, got {c}")));
                }
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(err(format!("kernel {kernel} larger than padded input {input:?}")));
                }
                Ok(vec![out_ch, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1])
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return Err(err("pool dimensions must be positive".into()));
                }
                let [c, h, w] = input else {
                    return Err(err(format!("pool expects (C,H,W), got {input:?}")));
                };
                if *h < kernel || *w < kernel {
                    return Err(err(format!("pool kernel {kernel} larger than input {input:?}")));
                }
                Ok(vec![*c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Dense { in_dim, out_dim } => {
                if in_dim == 0 || out_dim == 0 {
                    return Err(err("dense dimensions must be positive".into()));
                }
                if input != [in_dim] {
                    return Err(err(format!("dense expects [{in_dim}], got {input:?}")));
                }
                Ok(vec![out_dim])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(err(format!("softmax expects a vector, got {input:?}")));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Checks a layer chain against an input shape and returns the output shape.
pub fn validate_specs(specs: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>, NetError> {
    let mut shape = input.to_vec();
    for (i, spec) in specs.iter().enumerate() {
        if *spec == LayerSpec::Softmax && i + 1 != specs.len() {
            return Err(NetError::Dimension {
                layer: i,
                msg: "softmax is only allowed as the terminal layer".into(),
            });
        }
        shape = spec.output_shape(i, &shape)?;
    }
    Ok(shape)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Trainable tensors keyed by layer index (`None` for parameter-free layers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    layers: Vec<Option<LayerParams>>,
}

impl ParameterSet {
    pub fn zeros(specs: &[LayerSpec]) -> Self {
        Self {
            layers: specs
                .iter()
                .map(|s| {
                    s.param_shapes().map(|(w, b)| LayerParams {
                        weight: Tensor::zeros(&w),
                        bias: Tensor::zeros(&b),
                    })
                })
                .collect(),
        }
    }

    /// He-uniform weights (`U(±√(6/fan_in))`), zero biases.
    pub fn he_uniform<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Self {
        let mut p = Self::zeros(specs);
        for (spec, layer) in specs.iter().zip(p.layers.iter_mut()) {
            if let Some(lp) = layer {
                let limit = (6.0 / spec.fan_in() as f64).sqrt();
                for w in lp.weight.data_mut() {
                    *w = rng.random_range(-limit..limit);
                }
            }
        }
        p
    }

    pub fn from_layers(layers: Vec<Option<LayerParams>>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Option<LayerParams>] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> Option<&LayerParams> {
        self.layers.get(i).and_then(Option::as_ref)
    }

    pub fn layer_mut(&mut self, i: usize) -> Option<&mut LayerParams> {
        self.layers.get_mut(i).and_then(Option::as_mut)
    }

    pub fn count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Weight then bias of each trainable layer, in layer order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flatten().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flatten().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Checks shapes against a layer chain.
    pub fn check(&self, specs: &[LayerSpec]) -> Result<(), NetError> {
        if self.layers.len() != specs.len() {
            return Err(NetError::Shape(format!(
                "{} parameter slots for {} layers",
                self.layers.len(),
                specs.len()
            )));
        }
        for (i, (spec, lp)) in specs.iter().zip(&self.layers).enumerate() {
            match (spec.param_shapes(), lp) {
                (None, None) => {}
                (Some((w, b)), Some(lp)) if lp.weight.shape() == w && lp.bias.shape() == b => {}
                _ => {
                    return Err(NetError::Dimension {
                        layer: i,
                        msg: "parameter shapes do not match layer".into(),
                    })
                }
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ParameterSet) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.tensors_mut().for_each(|t| t.scale(k));
    }
}

/// Intermediate values saved by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

#[derive(Clone, Debug)]
enum LayerCache {
    Conv { cols: Vec<f64>, in_shape: [usize; 3], out_hw: (usize, usize) },
    Pool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Dense { input: Vec<f64> },
    Relu { output: Vec<f64> },
    Flatten { in_shape: Vec<usize> },
    Softmax { output: Vec<f64> },
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Unrolls a `(C, H, W)` input into a `(C·k·k) × (Ho·Wo)` column matrix.
fn im2col(input: &[f64], [c, h, w]: [usize; 3], k: usize, stride: usize, pad: usize, (ho, wo): (usize, usize)) -> Vec<f64> {
    let n = ho * wo;
    let mut cols = vec![0.0; c * k * k * n];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(dcols: &[f64], [c, h, w]: [usize; 3], k: usize, stride: usize, pad: usize, (ho, wo): (usize, usize)) -> Vec<f64> {
    let n = ho * wo;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &dcols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `C (m×n) = alpha · A (m×k) · B (k×n) + beta · C` with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn param_err(layer: usize) -> NetError {
    NetError::Dimension {
        layer,
        msg: "missing parameters".into(),
    }
}

/// Runs the layer chain on one sample.
pub fn forward(specs: &[LayerSpec], params: &ParameterSet, input: &Tensor) -> Result<(Tensor, ForwardCache), NetError> {
    if params.layers.len() != specs.len() {
        return Err(NetError::Shape(format!(
            "{} parameter slots for {} layers",
            params.layers.len(),
            specs.len()
        )));
    }
    let mut shape = input.shape().to_vec();
    let mut x = input.data().to_vec();
    let mut caches = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let out_shape = spec.output_shape(i, &shape)?;
        let (y, cache) = match *spec {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                let lp = params.layer(i).ok_or_else(|| param_err(i))?;
                let in_shape = [in_ch, shape[1], shape[2]];
                let out_hw = (out_shape[1], out_shape[2]);
                let n = out_hw.0 * out_hw.1;
                let kk = in_ch * kernel * kernel;
                let cols = im2col(&x, in_shape, kernel, stride, pad, out_hw);
                let mut y = vec![0.0; out_ch * n];
                gemm(out_ch, kk, n, lp.weight.data(), (kk, 1), &cols, (n, 1), 0.0, &mut y);
                for (o, &b) in lp.bias.data().iter().enumerate() {
                    y[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += b);
                }
                (y, LayerCache::Conv { cols, in_shape, out_hw })
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let mut y = Vec::with_capacity(c * ho * wo);
                let mut argmax = Vec::with_capacity(c * ho * wo);
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_i = 0;
                            for ki in 0..kernel {
                                for kj in 0..kernel {
                                    let idx = ch * h * w + (oy * stride + ki) * w + ox * stride + kj;
                                    if x[idx] > best {
                                        best = x[idx];
                                        best_i = idx;
                                    }
                                }
                            }
                            y.push(best);
                            argmax.push(best_i);
                        }
                    }
                }
                (
                    y,
                    LayerCache::Pool {
                        argmax,
                        in_shape: shape.clone(),
                    },
                )
            }
            LayerSpec::Dense { in_dim, out_dim } => {
                let lp = params.layer(i).ok_or_else(|| param_err(i))?;
                let wt = lp.weight.data();
                let y: Vec<f64> = (0..out_dim)
                    .map(|o| {
                        let row = &wt[o * in_dim..(o + 1) * in_dim];
                        row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + lp.bias.data()[o]
                    })
                    .collect();
                (y, LayerCache::Dense { input: x })
            }
            LayerSpec::Relu => {
                let y: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
                (y.clone(), LayerCache::Relu { output: y })
            }
            LayerSpec::Flatten => (
                x,
                LayerCache::Flatten {
                    in_shape: shape.clone(),
                },
            ),
            LayerSpec::Softmax => {
                let mut y = x;
                softmax_in_place(&mut y);
                (y.clone(), LayerCache::Softmax { output: y })
            }
        };
        caches.push(cache);
        x = y;
        shape = out_shape;
    }
    Ok((Tensor::from_parts_unchecked(shape, x), ForwardCache { layers: caches }))
}

/// Reverse-mode pass over `specs[..upto]`, adding parameter gradients into
/// `grads` and returning the gradient with respect to the chain input.
///
/// `grad_out` is the gradient at the output of layer `upto - 1`.
pub fn backward_accumulate(
    specs: &[LayerSpec],
    params: &ParameterSet,
    cache: &ForwardCache,
    upto: usize,
    grad_out: &[f64],
    grads: &mut ParameterSet,
) -> Result<Vec<f64>, NetError> {
    if cache.layers.len() != specs.len() || upto > specs.len() {
        return Err(NetError::Shape("forward cache does not match layer chain".into()));
    }
    let mut g = grad_out.to_vec();
    for i in (0..upto).rev() {
        g = match (&specs[i], &cache.layers[i]) {
            (
                &LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                },
                LayerCache::Conv { cols, in_shape, out_hw },
            ) => {
                let lp = params.layer(i).ok_or_else(|| param_err(i))?;
                let n = out_hw.0 * out_hw.1;
                let kk = in_ch * kernel * kernel;
                if g.len() != out_ch * n {
                    return Err(NetError::Dimension {
                        layer: i,
                        msg: format!("upstream gradient has {} values, expected {}", g.len(), out_ch * n),
                    });
                }
                let gl = grads.layer_mut(i).ok_or_else(|| param_err(i))?;
                // dW += G · colsᵀ
                gemm(out_ch, n, kk, &g, (n, 1), cols, (1, n), 1.0, gl.weight.data_mut());
                for (o, db) in gl.bias.data_mut().iter_mut().enumerate() {
                    *db += g[o * n..(o + 1) * n].iter().sum::<f64>();
                }
                // dcols = Wᵀ · G
                let mut dcols = vec![0.0; kk * n];
                gemm(kk, out_ch, n, lp.weight.data(), (1, kk), &g, (n, 1), 0.0, &mut dcols);
                col2im(&dcols, *in_shape, kernel, stride, pad, *out_hw)
            }
            (LayerSpec::MaxPool2d { .. }, LayerCache::Pool { argmax, in_shape }) => {
                let mut dx = vec![0.0; in_shape.iter().product()];
                for (&idx, &gv) in argmax.iter().zip(&g) {
                    dx[idx] += gv;
                }
                dx
            }
            (&LayerSpec::Dense { in_dim, out_dim }, LayerCache::Dense { input }) => {
                let lp = params.layer(i).ok_or_else(|| param_err(i))?;
                if g.len() != out_dim {
                    return Err(NetError::Dimension {
                        layer: i,
                        msg: format!("upstream gradient has {} values, expected {out_dim}", g.len()),
                    });
                }
                let gl = grads.layer_mut(i).ok_or_else(|| param_err(i))?;
                let gw = gl.weight.data_mut();
                for (o, &go) in g.iter().enumerate() {
                    if go != 0.0 {
                        for (w, &xv) in gw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(input) {
                            *w += go * xv;
                        }
                    }
                }
                for (b, &go) in gl.bias.data_mut().iter_mut().zip(&g) {
                    *b += go;
                }
                let wt = lp.weight.data();
                let mut dx = vec![0.0; in_dim];
                for (o, &go) in g.iter().enumerate() {
                    if go != 0.0 {
                        for (d, &w) in dx.iter_mut().zip(&wt[o * in_dim..(o + 1) * in_dim]) {
                            *d += go * w;
                        }
                    }
                }
                dx
            }
            (LayerSpec::Relu, LayerCache::Relu { output }) => {
                g.iter().zip(output).map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 }).collect()
            }
            (LayerSpec::Flatten, LayerCache::Flatten { .. }) => g,
            (LayerSpec::Softmax, LayerCache::Softmax { output }) => {
                let dot: f64 = g.iter().zip(output).map(|(a, b)| a * b).sum();
                g.iter().zip(output).map(|(&gv, &s)| s * (gv - dot)).collect()
            }
            _ => return Err(NetError::Shape(format!("cache entry {i} does not match layer kind"))),
        };
    }
    Ok(g)
}

/// Full reverse pass from the gradient at the chain output.
pub fn backward(
    specs: &[LayerSpec],
    params: &ParameterSet,
    cache: &ForwardCache,
    grad_out: &Tensor,
) -> Result<(ParameterSet, Tensor), NetError> {
    let mut grads = ParameterSet::zeros(specs);
    let dx = backward_accumulate(specs, params, cache, specs.len(), grad_out.data(), &mut grads)?;
    let in_shape = input_shape_of(cache);
    Ok((grads, Tensor::from_parts_unchecked(in_shape, dx)))
}

fn input_shape_of(cache: &ForwardCache) -> Vec<usize> {
    match cache.layers.first() {
        Some(LayerCache::Conv { in_shape, .. }) => in_shape.to_vec(),
        Some(LayerCache::Pool { in_shape, .. }) | Some(LayerCache::Flatten { in_shape }) => in_shape.clone(),
        Some(LayerCache::Dense { input }) => vec![input.len()],
        Some(LayerCache::Relu { output }) | Some(LayerCache::Softmax { output }) => vec![output.len()],
        None => vec![0],
    }
}

/// Index of the layer whose output is the logits (the terminal softmax is skipped).
pub fn logits_end(specs: &[LayerSpec]) -> usize {
    match specs.last() {
        Some(LayerSpec::Softmax) => specs.len() - 1,
        _ => specs.len(),
    }
}
