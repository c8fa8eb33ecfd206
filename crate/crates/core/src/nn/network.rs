use rand::Rng;

use super::params::{Fnv64, Gradients, ParameterSet};
use super::tensor::gemm;
use super::{NnError, Real, Result, Tensor};

const BN_EPSILON: f64 = 1e-5;

/// The fixed layer vocabulary. All layers operate on one sample laid out as
/// `[channels, freq, time]`; per-frame layers treat `channels * freq` as the
/// feature vector of each time step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    /// Stride 1, zero "same" padding on both axes, odd square kernel.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    /// Max pooling along frequency only; trailing bins that do not fill a
    /// window are dropped.
    FreqPool {
        factor: usize,
    },
    DensePerFrame {
        in_features: usize,
        units: usize,
    },
    SoftmaxPerFrame,
    Sigmoid,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::FreqPool { .. } => "freq_pool",
            LayerSpec::DensePerFrame { .. } => "dense_per_frame",
            LayerSpec::SoftmaxPerFrame => "softmax_per_frame",
            LayerSpec::Sigmoid => "sigmoid",
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let positive = |v: usize, what: &str| {
            if v == 0 {
                Err(format!("{} requires a positive {what}", self.kind()))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                positive(in_channels, "input channel count")?;
                positive(out_channels, "filter count")?;
                positive(kernel, "kernel size")?;
                if kernel % 2 == 0 {
                    return Err("conv2d kernel must be odd for same padding".into());
                }
                Ok(())
            }
            LayerSpec::BatchNorm { channels } => positive(channels, "channel count"),
            LayerSpec::FreqPool { factor } => positive(factor, "pool factor"),
            LayerSpec::DensePerFrame { in_features, units } => {
                positive(in_features, "input width")?;
                positive(units, "node count")
            }
            LayerSpec::Relu | LayerSpec::SoftmaxPerFrame | LayerSpec::Sigmoid => Ok(()),
        }
    }

    /// (suffix, shape, trainable) for each tensor this layer owns.
    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>, bool)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel], true),
                ("bias", vec![out_channels], true),
            ],
            LayerSpec::BatchNorm { channels } => vec![
                ("gamma", vec![channels], true),
                ("beta", vec![channels], true),
                ("running_mean", vec![channels], false),
                ("running_var", vec![channels], false),
            ],
            LayerSpec::DensePerFrame { in_features, units } => vec![
                ("weight", vec![units, in_features], true),
                ("bias", vec![units], true),
            ],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Normalize with the statistics of the current sample.
    Train,
    /// Normalize with stored running statistics.
    Infer,
}

#[derive(Debug, Clone)]
enum Cache<R> {
    Conv { input: Tensor<R> },
    BatchNorm { xhat: Vec<R>, inv_std: Vec<R>, mean: Vec<R>, var: Vec<R>, count: usize },
    Relu { mask: Vec<bool> },
    Pool { argmax: Vec<u32>, in_freq: usize },
    Dense { input: Tensor<R> },
    Softmax { output: Tensor<R> },
    Sigmoid { output: Tensor<R> },
}

/// Activations recorded by [`Network::forward`], consumed by backward.
#[derive(Debug, Clone)]
pub struct Tape<R = f32> {
    signature: u64,
    mode: Mode,
    input_shape: Vec<usize>,
    output_shapes: Vec<Vec<usize>>,
    caches: Vec<Cache<R>>,
}

impl<R: Real> Tape<R> {
    /// Digest of every ReLU mask and pooling argmax. Two forwards with the
    /// same signature sit on the same smooth piece of the network.
    pub fn kink_signature(&self) -> u64 {
        let mut h = Fnv64::new();
        for c in &self.caches {
            match c {
                Cache::Relu { mask } => {
                    for chunk in mask.chunks(8) {
                        let byte = chunk.iter().enumerate().fold(0u8, |b, (i, &on)| b | ((on as u8) << i));
                        h.write(&[byte]);
                    }
                }
                Cache::Pool { argmax, .. } => {
                    for a in argmax {
                        h.write(&a.to_le_bytes());
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Output shape of layer `index`.
    pub fn output_shape(&self, index: usize) -> Option<&[usize]> {
        self.output_shapes.get(index).map(|s| s.as_slice())
    }
}

/// A sequential chain of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    signature: u64,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        let mut h = Fnv64::new();
        for l in &layers {
            if !seen.insert(l.name.clone()) {
                return Err(NnError::InvalidLayer(format!("duplicate layer name {}", l.name)));
            }
            l.spec.validate().map_err(|m| NnError::InvalidLayer(format!("{}: {m}", l.name)))?;
            h.write(l.name.as_bytes());
            h.write(format!("{:?}", l.spec).as_bytes());
        }
        Ok(Self {
            layers,
            signature: h.finish(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Every tensor name, layer kind, shape and trainable flag, in layer order.
    pub fn param_manifest(&self) -> Vec<(String, &'static str, Vec<usize>, bool)> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.spec
                    .param_shapes()
                    .into_iter()
                    .map(move |(suffix, shape, tr)| (format!("{}.{suffix}", l.name), l.spec.kind(), shape, tr))
            })
            .collect()
    }

    /// He-style uniform initialization scaled by fan-in; zero biases;
    /// identity batch norm.
    pub fn init_params<G: Rng + ?Sized>(&self, rng: &mut G) -> ParameterSet<f32> {
        let mut set = ParameterSet::new();
        for l in &self.layers {
            let fan_in = match l.spec {
                LayerSpec::Conv2d {
                    in_channels, kernel, ..
                } => in_channels * kernel * kernel,
                LayerSpec::DensePerFrame { in_features, .. } => in_features,
                _ => 1,
            };
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            for (suffix, shape, trainable) in l.spec.param_shapes() {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = match suffix {
                    "weight" => (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                    "gamma" | "running_var" => vec![1.0; n],
                    _ => vec![0.0; n],
                };
                set.insert(format!("{}.{suffix}", l.name), Tensor::new(shape, data), trainable)
                    .expect("layer names are unique");
            }
        }
        set
    }

    pub fn zero_params(&self) -> ParameterSet<f32> {
        let mut set = ParameterSet::new();
        for (name, _, shape, trainable) in self.param_manifest() {
            let value = if name.ends_with(".gamma") || name.ends_with(".running_var") { 1.0 } else { 0.0 };
            set.insert(name, Tensor::filled(shape, value), trainable)
                .expect("layer names are unique");
        }
        set
    }

    pub fn forward<R: Real>(
        &self,
        params: &ParameterSet<R>,
        input: &Tensor<R>,
        mode: Mode,
    ) -> Result<(Tensor<R>, Tape<R>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut output_shapes = Vec::with_capacity(self.layers.len());
        let mut x = to3(input, "input")?;
        for layer in &self.layers {
            let (y, cache) = forward_layer(layer, params, x, mode, true)?;
            output_shapes.push(y.shape.clone());
            caches.push(cache.expect("recording"));
            x = y;
        }
        let tape = Tape {
            signature: self.signature,
            mode,
            input_shape: to3(input, "input")?.shape,
            output_shapes,
            caches,
        };
        Ok((x, tape))
    }

    /// Forward pass without recording activations.
    pub fn infer<R: Real>(&self, params: &ParameterSet<R>, input: &Tensor<R>, mode: Mode) -> Result<Tensor<R>> {
        let mut x = to3(input, "input")?;
        for layer in &self.layers {
            x = forward_layer(layer, params, x, mode, false)?.0;
        }
        Ok(x)
    }

    /// Backpropagate a gradient with respect to the network output.
    pub fn backward<R: Real>(
        &self,
        params: &ParameterSet<R>,
        tape: &Tape<R>,
        output_grad: &Tensor<R>,
        need_input_grad: bool,
    ) -> Result<Gradients<R>> {
        let last = self
            .layers
            .len()
            .checked_sub(1)
            .ok_or_else(|| NnError::InvalidLayer("empty network".into()))?;
        self.backward_from(params, tape, last, output_grad, need_input_grad)
    }

    /// Backpropagate starting at the output of layer `from`, skipping every
    /// later layer. Used to feed fused loss gradients (e.g. softmax +
    /// cross-entropy with respect to logits).
    pub fn backward_from<R: Real>(
        &self,
        params: &ParameterSet<R>,
        tape: &Tape<R>,
        from: usize,
        grad: &Tensor<R>,
        need_input_grad: bool,
    ) -> Result<Gradients<R>> {
        if tape.signature != self.signature || tape.caches.len() != self.layers.len() {
            return Err(NnError::StaleTape);
        }
        let expected = tape.output_shapes.get(from).ok_or(NnError::StaleTape)?;
        let mut g = to3(grad, "output gradient")?;
        if &g.shape != expected {
            return Err(NnError::ShapeMismatch {
                layer: "output gradient".into(),
                expected: expected.clone(),
                actual: g.shape.clone(),
            });
        }
        let lowest_trainable = self.layers[..=from].iter().position(|l| {
            l.spec
                .param_shapes()
                .iter()
                .any(|(s, _, _)| params.is_trainable(&format!("{}.{s}", l.name)))
        });
        let stop = if need_input_grad { 0 } else { lowest_trainable.unwrap_or(from + 1) };

        let mut out = Gradients::default();
        for i in (stop..=from).rev() {
            let layer = &self.layers[i];
            let propagate = need_input_grad || i > stop;
            let in_shape = if i == 0 {
                tape.input_shape.clone()
            } else {
                tape.output_shapes[i - 1].clone()
            };
            g = backward_layer(layer, params, &tape.caches[i], tape.mode, g, &in_shape, propagate, &mut out)?;
        }
        if need_input_grad {
            out.input = Some(g);
        }
        Ok(out)
    }

    /// Fold the batch statistics of a training forward into running means
    /// and (unbiased) variances: `r <- (1 - momentum) * r + momentum * batch`.
    pub fn update_running_stats(&self, params: &mut ParameterSet<f32>, tape: &Tape<f32>, momentum: f32) -> Result<()> {
        if tape.signature != self.signature {
            return Err(NnError::StaleTape);
        }
        for (layer, cache) in self.layers.iter().zip(&tape.caches) {
            if let Cache::BatchNorm { mean, var, count, .. } = cache {
                if tape.mode != Mode::Train {
                    continue;
                }
                let unbias = if *count > 1 { *count as f32 / (*count - 1) as f32 } else { 1.0 };
                let rm = params
                    .get_mut(&format!("{}.running_mean", layer.name))
                    .ok_or_else(|| NnError::MissingParameter(format!("{}.running_mean", layer.name)))?;
                for (r, &m) in rm.tensor.data.iter_mut().zip(mean) {
                    *r = (1.0 - momentum) * *r + momentum * m;
                }
                let rv = params
                    .get_mut(&format!("{}.running_var", layer.name))
                    .ok_or_else(|| NnError::MissingParameter(format!("{}.running_var", layer.name)))?;
                for (r, &v) in rv.tensor.data.iter_mut().zip(var) {
                    *r = (1.0 - momentum) * *r + momentum * v * unbias;
                }
            }
        }
        Ok(())
    }
}

fn to3<R: Real>(t: &Tensor<R>, what: &str) -> Result<Tensor<R>> {
    let (c, f, n) = t.dims3().ok_or_else(|| NnError::ShapeMismatch {
        layer: what.into(),
        expected: vec![0, 0, 0],
        actual: t.shape.clone(),
    })?;
    Ok(Tensor {
        shape: vec![c, f, n],
        data: t.data.clone(),
    })
}

fn param<'a, R: Real>(params: &'a ParameterSet<R>, layer: &Layer, suffix: &str) -> Result<&'a Tensor<R>> {
    params.tensor(&format!("{}.{suffix}", layer.name))
}

fn check_param_shape<R: Real>(t: &Tensor<R>, name: String, shape: &[usize]) -> Result<()> {
    if t.shape != shape {
        return Err(NnError::ShapeMismatch {
            layer: name,
            expected: shape.to_vec(),
            actual: t.shape.clone(),
        });
    }
    Ok(())
}

fn mismatch(layer: &Layer, expected: Vec<usize>, actual: &[usize]) -> NnError {
    NnError::ShapeMismatch {
        layer: layer.name.clone(),
        expected,
        actual: actual.to_vec(),
    }
}

fn im2col<R: Real>(x: &[R], c: usize, f: usize, t: usize, k: usize) -> Vec<R> {
    let p = (k / 2) as isize;
    let plane = f * t;
    let mut cols = vec![R::zero(); c * k * k * plane];
    for ci in 0..c {
        for df in 0..k {
            for dt in 0..k {
                let row = (ci * k + df) * k + dt;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let shift = dt as isize - p;
                for fo in 0..f {
                    let fi = fo as isize + df as isize - p;
                    if fi < 0 || fi >= f as isize {
                        continue;
                    }
                    let src = &x[(ci * f + fi as usize) * t..(ci * f + fi as usize + 1) * t];
                    let out = &mut dst[fo * t..(fo + 1) * t];
                    if shift >= 0 {
                        let s = shift as usize;
                        if s < t {
                            out[..t - s].copy_from_slice(&src[s..]);
                        }
                    } else {
                        let s = (-shift) as usize;
                        if s < t {
                            out[s..].copy_from_slice(&src[..t - s]);
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<R: Real>(cols: &[R], c: usize, f: usize, t: usize, k: usize) -> Vec<R> {
    let p = (k / 2) as isize;
    let plane = f * t;
    let mut x = vec![R::zero(); c * plane];
    for ci in 0..c {
        for df in 0..k {
            for dt in 0..k {
                let row = (ci * k + df) * k + dt;
                let src = &cols[row * plane..(row + 1) * plane];
                let shift = dt as isize - p;
                for fo in 0..f {
                    let fi = fo as isize + df as isize - p;
                    if fi < 0 || fi >= f as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * f + fi as usize) * t..(ci * f + fi as usize + 1) * t];
                    let g = &src[fo * t..(fo + 1) * t];
                    if shift >= 0 {
                        let s = shift as usize;
                        if s < t {
                            for (d, &v) in dst[s..].iter_mut().zip(&g[..t - s]) {
                                *d += v;
                            }
                        }
                    } else {
                        let s = (-shift) as usize;
                        if s < t {
                            for (d, &v) in dst[..t - s].iter_mut().zip(&g[s..]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn forward_layer<R: Real>(
    layer: &Layer,
    params: &ParameterSet<R>,
    x: Tensor<R>,
    mode: Mode,
    record: bool,
) -> Result<(Tensor<R>, Option<Cache<R>>)> {
    let (c, f, t) = (x.shape[0], x.shape[1], x.shape[2]);
    match layer.spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            if c != in_channels {
                return Err(mismatch(layer, vec![in_channels, f, t], &x.shape));
            }
            let w = param(params, layer, "weight")?;
            let b = param(params, layer, "bias")?;
            check_param_shape(w, format!("{}.weight", layer.name), &[out_channels, in_channels, kernel, kernel])?;
            check_param_shape(b, format!("{}.bias", layer.name), &[out_channels])?;
            let cols = im2col(&x.data, c, f, t, kernel);
            let plane = f * t;
            let mut y = vec![R::zero(); out_channels * plane];
            for (co, row) in y.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = b.data[co]);
            }
            gemm(false, false, out_channels, plane, c * kernel * kernel, &w.data, &cols, R::one(), &mut y);
            let cache = record.then(|| Cache::Conv { input: x });
            Ok((Tensor::new(vec![out_channels, f, t], y), cache))
        }
        LayerSpec::BatchNorm { channels } => {
            if c != channels {
                return Err(mismatch(layer, vec![channels, f, t], &x.shape));
            }
            let gamma = param(params, layer, "gamma")?;
            let beta = param(params, layer, "beta")?;
            let plane = f * t;
            let eps = R::from_f64(BN_EPSILON);
            let (mean, var): (Vec<R>, Vec<R>) = match mode {
                Mode::Train => x
                    .data
                    .chunks(plane)
                    .map(|ch| {
                        let n = R::from_f64(plane as f64);
                        let m = ch.iter().copied().sum::<R>() / n;
                        let v = ch.iter().map(|&v| (v - m) * (v - m)).sum::<R>() / n;
                        (m, v)
                    })
                    .unzip(),
                Mode::Infer => (
                    param(params, layer, "running_mean")?.data.clone(),
                    param(params, layer, "running_var")?.data.clone(),
                ),
            };
            let inv_std: Vec<R> = var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
            let mut xhat = x.data;
            let mut y = vec![R::zero(); xhat.len()];
            for ch in 0..c {
                let range = ch * plane..(ch + 1) * plane;
                for (xh, yv) in xhat[range.clone()].iter_mut().zip(&mut y[range]) {
                    *xh = (*xh - mean[ch]) * inv_std[ch];
                    *yv = gamma.data[ch] * *xh + beta.data[ch];
                }
            }
            let cache = record.then(|| Cache::BatchNorm {
                xhat,
                inv_std,
                mean,
                var,
                count: plane,
            });
            Ok((Tensor::new(vec![c, f, t], y), cache))
        }
        LayerSpec::Relu => {
            let mask: Vec<bool> = x.data.iter().map(|&v| v > R::zero()).collect();
            let y = x.data.iter().zip(&mask).map(|(&v, &m)| if m { v } else { R::zero() }).collect();
            Ok((Tensor::new(x.shape.clone(), y), record.then_some(Cache::Relu { mask })))
        }
        LayerSpec::FreqPool { factor } => {
            if f < factor {
                return Err(mismatch(layer, vec![c, factor, t], &x.shape));
            }
            let fo = f / factor;
            let mut y = vec![R::zero(); c * fo * t];
            let mut argmax = vec![0u32; c * fo * t];
            for ch in 0..c {
                for g in 0..fo {
                    let out_off = (ch * fo + g) * t;
                    let first = (ch * f + g * factor) * t;
                    y[out_off..out_off + t].copy_from_slice(&x.data[first..first + t]);
                    for j in 1..factor {
                        let row = &x.data[first + j * t..first + (j + 1) * t];
                        for ti in 0..t {
                            if row[ti] > y[out_off + ti] {
                                y[out_off + ti] = row[ti];
                                argmax[out_off + ti] = j as u32;
                            }
                        }
                    }
                }
            }
            let cache = record.then_some(Cache::Pool { argmax, in_freq: f });
            Ok((Tensor::new(vec![c, fo, t], y), cache))
        }
        LayerSpec::DensePerFrame { in_features, units } => {
            if c * f != in_features {
                return Err(mismatch(layer, vec![in_features, 1, t], &x.shape));
            }
            let w = param(params, layer, "weight")?;
            let b = param(params, layer, "bias")?;
            check_param_shape(w, format!("{}.weight", layer.name), &[units, in_features])?;
            check_param_shape(b, format!("{}.bias", layer.name), &[units])?;
            let mut y = vec![R::zero(); units * t];
            for (u, row) in y.chunks_mut(t).enumerate() {
                row.iter_mut().for_each(|v| *v = b.data[u]);
            }
            gemm(false, false, units, t, in_features, &w.data, &x.data, R::one(), &mut y);
            Ok((Tensor::new(vec![units, 1, t], y), record.then_some(Cache::Dense { input: x })))
        }
        LayerSpec::SoftmaxPerFrame => {
            let d = c * f;
            let mut y = x.data;
            for ti in 0..t {
                let mut max = R::neg_infinity();
                for k in 0..d {
                    max = max.max(y[k * t + ti]);
                }
                let mut sum = R::zero();
                for k in 0..d {
                    let e = (y[k * t + ti] - max).exp();
                    y[k * t + ti] = e;
                    sum += e;
                }
                for k in 0..d {
                    y[k * t + ti] = y[k * t + ti] / sum;
                }
            }
            let out = Tensor::new(vec![c, f, t], y);
            let cache = record.then(|| Cache::Softmax { output: out.clone() });
            Ok((out, cache))
        }
        LayerSpec::Sigmoid => {
            let y: Vec<R> = x.data.iter().map(|&v| stable_sigmoid(v)).collect();
            let out = Tensor::new(x.shape.clone(), y);
            let cache = record.then(|| Cache::Sigmoid { output: out.clone() });
            Ok((out, cache))
        }
    }
}

pub(crate) fn stable_sigmoid<R: Real>(v: R) -> R {
    if v >= R::zero() {
        R::one() / (R::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (R::one() + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_layer<R: Real>(
    layer: &Layer,
    params: &ParameterSet<R>,
    cache: &Cache<R>,
    mode: Mode,
    g: Tensor<R>,
    in_shape: &[usize],
    propagate: bool,
    out: &mut Gradients<R>,
) -> Result<Tensor<R>> {
    let want = |suffix: &str| params.is_trainable(&format!("{}.{suffix}", layer.name));
    let (c_in, f_in, t) = (in_shape[0], in_shape[1], in_shape[2]);
    match (&layer.spec, cache) {
        (
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            },
            Cache::Conv { input },
        ) => {
            let (ci, co, k) = (*in_channels, *out_channels, *kernel);
            let plane = f_in * t;
            let need_w = want("weight");
            if want("bias") {
                let db: Vec<R> = g.data.chunks(plane).map(|row| row.iter().copied().sum()).collect();
                out.params.insert(format!("{}.bias", layer.name), Tensor::new(vec![co], db));
            }
            if !need_w && !propagate {
                return Ok(Tensor::zeros(in_shape.to_vec()));
            }
            let rows = ci * k * k;
            if need_w {
                let cols = im2col(&input.data, ci, f_in, t, k);
                let mut dw = vec![R::zero(); co * rows];
                gemm(false, true, co, rows, plane, &g.data, &cols, R::zero(), &mut dw);
                out.params.insert(format!("{}.weight", layer.name), Tensor::new(vec![co, ci, k, k], dw));
            }
            if !propagate {
                return Ok(Tensor::zeros(in_shape.to_vec()));
            }
            let w = param(params, layer, "weight")?;
            let mut dcols = vec![R::zero(); rows * plane];
            gemm(true, false, rows, plane, co, &w.data, &g.data, R::zero(), &mut dcols);
            Ok(Tensor::new(in_shape.to_vec(), col2im(&dcols, ci, f_in, t, k)))
        }
        (
            LayerSpec::BatchNorm { .. },
            Cache::BatchNorm {
                xhat, inv_std, count, ..
            },
        ) => {
            let plane = *count;
            let gamma = param(params, layer, "gamma")?;
            let mut dgamma = vec![R::zero(); c_in];
            let mut dbeta = vec![R::zero(); c_in];
            for ch in 0..c_in {
                let r = ch * plane..(ch + 1) * plane;
                for (&dy, &xh) in g.data[r.clone()].iter().zip(&xhat[r]) {
                    dbeta[ch] += dy;
                    dgamma[ch] += dy * xh;
                }
            }
            if !propagate {
                if want("gamma") {
                    out.params.insert(format!("{}.gamma", layer.name), Tensor::new(vec![c_in], dgamma));
                }
                if want("beta") {
                    out.params.insert(format!("{}.beta", layer.name), Tensor::new(vec![c_in], dbeta));
                }
                return Ok(Tensor::zeros(in_shape.to_vec()));
            }
            let mut dx = g.data;
            let n = R::from_f64(plane as f64);
            for ch in 0..c_in {
                let r = ch * plane..(ch + 1) * plane;
                let scale = gamma.data[ch] * inv_std[ch];
                match mode {
                    Mode::Train => {
                        for (d, &xh) in dx[r.clone()].iter_mut().zip(&xhat[r]) {
                            *d = scale / n * (n * *d - dbeta[ch] - xh * dgamma[ch]);
                        }
                    }
                    Mode::Infer => dx[r].iter_mut().for_each(|d| *d *= scale),
                }
            }
            if want("gamma") {
                out.params.insert(format!("{}.gamma", layer.name), Tensor::new(vec![c_in], dgamma));
            }
            if want("beta") {
                out.params.insert(format!("{}.beta", layer.name), Tensor::new(vec![c_in], dbeta));
            }
            Ok(Tensor::new(in_shape.to_vec(), dx))
        }
        (LayerSpec::Relu, Cache::Relu { mask }) => {
            let dx = g.data.iter().zip(mask).map(|(&d, &m)| if m { d } else { R::zero() }).collect();
            Ok(Tensor::new(in_shape.to_vec(), dx))
        }
        (LayerSpec::FreqPool { factor }, Cache::Pool { argmax, in_freq }) => {
            let fo = in_freq / factor;
            let mut dx = vec![R::zero(); c_in * in_freq * t];
            for ch in 0..c_in {
                for gi in 0..fo {
                    let off = (ch * fo + gi) * t;
                    for ti in 0..t {
                        let j = argmax[off + ti] as usize;
                        dx[(ch * in_freq + gi * factor + j) * t + ti] += g.data[off + ti];
                    }
                }
            }
            Ok(Tensor::new(in_shape.to_vec(), dx))
        }
        (LayerSpec::DensePerFrame { in_features, units }, Cache::Dense { input }) => {
            let (d, u) = (*in_features, *units);
            if want("weight") {
                let mut dw = vec![R::zero(); u * d];
                gemm(false, true, u, d, t, &g.data, &input.data, R::zero(), &mut dw);
                out.params.insert(format!("{}.weight", layer.name), Tensor::new(vec![u, d], dw));
            }
            if want("bias") {
                let db: Vec<R> = g.data.chunks(t).map(|row| row.iter().copied().sum()).collect();
                out.params.insert(format!("{}.bias", layer.name), Tensor::new(vec![u], db));
            }
            if !propagate {
                return Ok(Tensor::zeros(in_shape.to_vec()));
            }
            let w = param(params, layer, "weight")?;
            let mut dx = vec![R::zero(); d * t];
            gemm(true, false, d, t, u, &w.data, &g.data, R::zero(), &mut dx);
            Ok(Tensor::new(in_shape.to_vec(), dx))
        }
        (LayerSpec::SoftmaxPerFrame, Cache::Softmax { output }) => {
            let d = c_in * f_in;
            let y = &output.data;
            let mut dx = vec![R::zero(); d * t];
            for ti in 0..t {
                let dot: R = (0..d).map(|k| y[k * t + ti] * g.data[k * t + ti]).sum();
                for k in 0..d {
                    dx[k * t + ti] = y[k * t + ti] * (g.data[k * t + ti] - dot);
                }
            }
            Ok(Tensor::new(in_shape.to_vec(), dx))
        }
        (LayerSpec::Sigmoid, Cache::Sigmoid { output }) => {
            let dx = g
                .data
                .iter()
                .zip(&output.data)
                .map(|(&d, &y)| d * y * (R::one() - y))
                .collect();
            Ok(Tensor::new(in_shape.to_vec(), dx))
        }
        _ => Err(NnError::StaleTape),
    }
}
