//! Small convolutional classifier with explicit forward and backward passes.
//!
//! Activations are stored per sample in `[height][width][channel]` order, so a
//! dataset window `[time][generator][parameter]` is a `T × N` image with `P`
//! channels. Parameters live in one flat `f64` vector; the shape table maps
//! each layer's weights and biases to a segment of it.

mod checkpoint;
mod train;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::label::{StabilityLabel, CLASS_COUNT};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{
    evaluate, loss, sgd_step, train_local, ConfusionMatrix, EpochMetrics, Evaluation, TrainConfig, TrainOutcome,
    TrainState, PROB_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    /// Valid-padding, unit-stride convolution followed by ReLU.
    Conv { kernel: (usize, usize), filters: usize },
    MaxPool { kernel: (usize, usize), stride: (usize, usize) },
    /// Inverted dropout, active only during training.
    Dropout { rate: f64 },
    Flatten,
    Dense { units: usize, activation: Activation },
    Softmax,
}

/// Input dimensions `(height, width, channels)` plus an ordered layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl ModelArch {
    /// 5×10×5 input → Conv(3,1)×16 → Conv(1,3)×32 → MaxPool(3,1)/(2,1) →
    /// Dropout 0.2 → Flatten(256) → Dense 64 ReLU → Dense 5 → Softmax.
    pub fn tsa_default() -> Self {
        Self::tsa(16, 32, 64, 0.20)
    }

    /// The default layer sequence with configurable widths.
    pub fn tsa(conv1: usize, conv2: usize, hidden: usize, dropout: f64) -> Self {
        ModelArch {
            input: (5, 10, 5),
            layers: vec![
                LayerSpec::Conv { kernel: (3, 1), filters: conv1 },
                LayerSpec::Conv { kernel: (1, 3), filters: conv2 },
                LayerSpec::MaxPool { kernel: (3, 1), stride: (2, 1) },
                LayerSpec::Dropout { rate: dropout },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: hidden, activation: Activation::Relu },
                LayerSpec::Dense { units: CLASS_COUNT, activation: Activation::Linear },
                LayerSpec::Softmax,
            ],
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }
}

/// One weight or bias block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamSegment {
    pub layer: usize,
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch_hash: u64,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams { arch_hash: self.arch_hash, values: vec![0.0; self.values.len()] }
    }

    pub fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        if self.arch_hash != other.arch_hash {
            return Err(Error::ArchMismatch { expected: self.arch_hash, found: other.arch_hash });
        }
        if self.values.len() != other.values.len() {
            return Err(Error::Shape(format!(
                "parameter count {} vs {}",
                self.values.len(),
                other.values.len()
            )));
        }
        Ok(())
    }
}

/// Output shape `(height, width, channels)` of a layer, or a flat length.
type Shape3 = (usize, usize, usize);

#[derive(Debug, Clone)]
enum Op {
    Conv { input: Shape3, output: Shape3, kh: usize, kw: usize, w: usize, b: usize },
    Pool { input: Shape3, output: Shape3, kh: usize, kw: usize, sh: usize, sw: usize },
    Dropout { rate: f64 },
    Flatten,
    Dense { inp: usize, out: usize, relu: bool, w: usize, b: usize },
    Softmax,
}

/// A validated architecture with its parameter layout.
#[derive(Debug, Clone)]
pub struct Network {
    arch: ModelArch,
    ops: Vec<Op>,
    /// Activation length after each layer (index 0 is the input).
    sizes: Vec<usize>,
    segments: Vec<ParamSegment>,
    param_count: usize,
    arch_hash: u64,
    classes: usize,
}

impl Network {
    pub fn new(arch: ModelArch) -> Result<Network> {
        let (h, w, c) = arch.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape("empty input".into()));
        }
        let mut shape: Shape3 = arch.input;
        let mut flat: Option<usize> = None;
        let mut ops = Vec::with_capacity(arch.layers.len());
        let mut sizes = vec![arch.input_len()];
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push_segment = |layer: usize, name: &'static str, dims: Vec<usize>| {
            let len = dims.iter().product();
            segments.push(ParamSegment { layer, name, shape: dims, offset, len });
            offset += len;
            offset - len
        };
        for (li, layer) in arch.layers.iter().enumerate() {
            let bad = |msg: String| Error::Shape(format!("layer {li} ({layer:?}): {msg}"));
            let spatial = |flat: Option<usize>| {
                if flat.is_some() {
                    Err(bad("needs a spatial input but follows Flatten/Dense".into()))
                } else {
                    Ok(())
                }
            };
            match *layer {
                LayerSpec::Conv { kernel: (kh, kw), filters } => {
                    spatial(flat)?;
                    let (ih, iw, ic) = shape;
                    if kh == 0 || kw == 0 || kh > ih || kw > iw || filters == 0 {
                        return Err(bad(format!("kernel ({kh},{kw}) does not fit {ih}x{iw}")));
                    }
                    let output = (ih - kh + 1, iw - kw + 1, filters);
                    let wo = push_segment(li, "kernel", vec![filters, kh, kw, ic]);
                    let bo = push_segment(li, "bias", vec![filters]);
                    ops.push(Op::Conv { input: shape, output, kh, kw, w: wo, b: bo });
                    shape = output;
                }
                LayerSpec::MaxPool { kernel: (kh, kw), stride: (sh, sw) } => {
                    spatial(flat)?;
                    let (ih, iw, ic) = shape;
                    if kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > ih || kw > iw {
                        return Err(bad(format!("pool ({kh},{kw}) does not fit {ih}x{iw}")));
                    }
                    let output = ((ih - kh) / sh + 1, (iw - kw) / sw + 1, ic);
                    ops.push(Op::Pool { input: shape, output, kh, kw, sh, sw });
                    shape = output;
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(bad(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    ops.push(Op::Dropout { rate });
                }
                LayerSpec::Flatten => {
                    spatial(flat)?;
                    flat = Some(shape.0 * shape.1 * shape.2);
                    ops.push(Op::Flatten);
                }
                LayerSpec::Dense { units, activation } => {
                    let inp = flat.ok_or_else(|| bad("Dense needs a Flatten before it".into()))?;
                    if units == 0 {
                        return Err(bad("zero units".into()));
                    }
                    let wo = push_segment(li, "weight", vec![units, inp]);
                    let bo = push_segment(li, "bias", vec![units]);
                    ops.push(Op::Dense { inp, out: units, relu: activation == Activation::Relu, w: wo, b: bo });
                    flat = Some(units);
                }
                LayerSpec::Softmax => {
                    if li + 1 != arch.layers.len() {
                        return Err(bad("Softmax must be the last layer".into()));
                    }
                    flat.ok_or_else(|| bad("Softmax needs a flat input".into()))?;
                    ops.push(Op::Softmax);
                }
            }
            sizes.push(flat.unwrap_or(shape.0 * shape.1 * shape.2));
        }
        if !matches!(ops.last(), Some(Op::Softmax)) {
            return Err(Error::Shape("architecture must end in Softmax".into()));
        }
        let classes = *sizes.last().unwrap();
        if classes != CLASS_COUNT {
            return Err(Error::Shape(format!("output has {classes} classes, expected {CLASS_COUNT}")));
        }
        let param_count = offset;
        let arch_hash = hash_shape_table(&arch, &segments);
        Ok(Network { arch, ops, sizes, segments, param_count, arch_hash, classes })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn arch_hash(&self) -> u64 {
        self.arch_hash
    }

    pub fn segments(&self) -> &[ParamSegment] {
        &self.segments
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Activation length after every layer, starting with the input.
    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Spatial output shape of every layer (flat layers report `(1, 1, n)`).
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut cur = self.arch.input;
        self.ops
            .iter()
            .zip(&self.sizes[1..])
            .map(|(op, &n)| {
                cur = match op {
                    Op::Conv { output, .. } | Op::Pool { output, .. } => *output,
                    Op::Dropout { .. } => cur,
                    _ => (1, 1, n),
                };
                cur
            })
            .collect()
    }

    /// He-uniform weights `U(−√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.param_count];
        for seg in &self.segments {
            if seg.name == "bias" {
                continue;
            }
            let fan_in: usize = seg.shape[1..].iter().product();
            let limit = (6.0 / fan_in as f64).sqrt();
            for v in &mut values[seg.offset..seg.offset + seg.len] {
                *v = rng.gen_range(-limit..limit);
            }
        }
        ModelParams { arch_hash: self.arch_hash, values }
    }

    fn check(&self, params: &ModelParams, inputs: &[f64], batch: usize) -> Result<()> {
        if params.arch_hash != self.arch_hash {
            return Err(Error::ArchMismatch { expected: self.arch_hash, found: params.arch_hash });
        }
        if params.values.len() != self.param_count {
            return Err(Error::Shape(format!(
                "{} parameters, architecture needs {}",
                params.values.len(),
                self.param_count
            )));
        }
        if inputs.len() != batch * self.input_len() {
            return Err(Error::Shape(format!(
                "input of {} values is not {batch} samples of {}",
                inputs.len(),
                self.input_len()
            )));
        }
        Ok(())
    }

    /// Inference: class probabilities, `batch × classes`. Dropout is inactive.
    pub fn forward(&self, params: &ModelParams, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check(params, inputs, batch)?;
        let mut cur = inputs.to_vec();
        for (i, op) in self.ops.iter().enumerate() {
            let mut next = vec![0.0; batch * self.sizes[i + 1]];
            self.apply(op, &params.values, &cur, &mut next, batch, None, None);
            cur = next;
        }
        Ok(cur)
    }

    /// Training forward pass. Dropout masks are drawn from `rng`; with `None`
    /// dropout is disabled. The returned cache feeds [`Network::backward`].
    pub fn forward_train(
        &self,
        params: &ModelParams,
        inputs: &[f64],
        batch: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardCache> {
        self.check(params, inputs, batch)?;
        let mut acts = Vec::with_capacity(self.ops.len() + 1);
        acts.push(inputs.to_vec());
        let mut aux = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let mut next = vec![0.0; batch * self.sizes[i + 1]];
            let mut extra = Aux::None;
            self.apply(op, &params.values, &acts[i], &mut next, batch, rng.as_deref_mut(), Some(&mut extra));
            acts.push(next);
            aux.push(extra);
        }
        Ok(ForwardCache { batch, acts, aux, arch_hash: self.arch_hash })
    }

    #[allow(clippy::too_many_arguments)]
    fn apply(
        &self,
        op: &Op,
        p: &[f64],
        x: &[f64],
        y: &mut [f64],
        batch: usize,
        rng: Option<&mut ChaCha8Rng>,
        aux: Option<&mut Aux>,
    ) {
        match *op {
            Op::Conv { input: (ih, iw, ic), output: (oh, ow, oc), kh, kw, w, b } => {
                let (isz, osz) = (ih * iw * ic, oh * ow * oc);
                let row = kw * ic;
                for n in 0..batch {
                    let xs = &x[n * isz..(n + 1) * isz];
                    let ys = &mut y[n * osz..(n + 1) * osz];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let out = &mut ys[(oy * ow + ox) * oc..(oy * ow + ox + 1) * oc];
                            for (f, o) in out.iter_mut().enumerate() {
                                let mut acc = p[b + f];
                                for ky in 0..kh {
                                    let xi = ((oy + ky) * iw + ox) * ic;
                                    let wi = w + (f * kh + ky) * row;
                                    acc += dot(&xs[xi..xi + row], &p[wi..wi + row]);
                                }
                                *o = acc.max(0.0);
                            }
                        }
                    }
                }
            }
            Op::Pool { input: (ih, iw, c), output: (oh, ow, _), kh, kw, sh, sw } => {
                let (isz, osz) = (ih * iw * c, oh * ow * c);
                let mut argmax = aux.is_some().then(|| vec![0u32; batch * osz]);
                for n in 0..batch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let mut best = f64::NEG_INFINITY;
                                let mut at = 0;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let idx = ((oy * sh + ky) * iw + ox * sw + kx) * c + ch;
                                        let v = x[n * isz + idx];
                                        if v > best {
                                            best = v;
                                            at = idx;
                                        }
                                    }
                                }
                                let o = n * osz + (oy * ow + ox) * c + ch;
                                y[o] = best;
                                if let Some(a) = argmax.as_mut() {
                                    a[o] = at as u32;
                                }
                            }
                        }
                    }
                }
                if let (Some(aux), Some(a)) = (aux, argmax) {
                    *aux = Aux::Argmax(a);
                }
            }
            Op::Dropout { rate } => match (rng, aux) {
                (Some(rng), Some(aux)) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..x.len())
                        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                        .collect();
                    for ((o, &v), &m) in y.iter_mut().zip(x).zip(&mask) {
                        *o = v * m;
                    }
                    *aux = Aux::Mask(mask);
                }
                _ => y.copy_from_slice(x),
            },
            Op::Flatten => y.copy_from_slice(x),
            Op::Dense { inp, out, relu, w, b } => {
                for n in 0..batch {
                    let xs = &x[n * inp..(n + 1) * inp];
                    for o in 0..out {
                        let v = p[b + o] + dot(xs, &p[w + o * inp..w + (o + 1) * inp]);
                        y[n * out + o] = if relu { v.max(0.0) } else { v };
                    }
                }
            }
            Op::Softmax => {
                let k = self.classes;
                for n in 0..batch {
                    let (xs, ys) = (&x[n * k..(n + 1) * k], &mut y[n * k..(n + 1) * k]);
                    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for (o, &v) in ys.iter_mut().zip(xs) {
                        *o = (v - m).exp();
                        z += *o;
                    }
                    for o in ys.iter_mut() {
                        *o /= z;
                    }
                }
            }
        }
    }

    /// Gradient of the mean (optionally class-weighted) cross-entropy over the
    /// cached batch with respect to every parameter.
    pub fn backward(
        &self,
        params: &ModelParams,
        cache: &ForwardCache,
        labels: &[StabilityLabel],
        class_weights: Option<&[f64; CLASS_COUNT]>,
    ) -> Result<Vec<f64>> {
        if cache.arch_hash != self.arch_hash || cache.acts.len() != self.ops.len() + 1 {
            return Err(Error::invalid("forward cache was not produced by this network"));
        }
        if labels.len() != cache.batch {
            return Err(Error::Shape(format!("{} labels for a batch of {}", labels.len(), cache.batch)));
        }
        let batch = cache.batch;
        let p = &params.values;
        let mut grad = vec![0.0; self.param_count];
        let k = self.classes;

        // Softmax + cross-entropy: dL/dz = w_y (p − onehot(y)) / B.
        let probs = cache.acts.last().unwrap();
        let mut delta = probs.clone();
        for (n, label) in labels.iter().enumerate() {
            let y = label.index();
            let wy = class_weights.map_or(1.0, |w| w[y]);
            let row = &mut delta[n * k..(n + 1) * k];
            row[y] -= 1.0;
            for d in row.iter_mut() {
                *d *= wy / batch as f64;
            }
        }

        for li in (0..self.ops.len() - 1).rev() {
            let x = &cache.acts[li];
            let out = &cache.acts[li + 1];
            let need_input_grad = li > 0;
            let mut dx = vec![0.0; x.len()];
            match self.ops[li] {
                Op::Conv { input: (ih, iw, ic), output: (oh, ow, oc), kh, kw, w, b } => {
                    let (isz, osz) = (ih * iw * ic, oh * ow * oc);
                    let row = kw * ic;
                    for n in 0..batch {
                        let xs = &x[n * isz..(n + 1) * isz];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let o0 = n * osz + (oy * ow + ox) * oc;
                                for f in 0..oc {
                                    if out[o0 + f] <= 0.0 {
                                        continue;
                                    }
                                    let d = delta[o0 + f];
                                    grad[b + f] += d;
                                    for ky in 0..kh {
                                        let xi = ((oy + ky) * iw + ox) * ic;
                                        let wi = w + (f * kh + ky) * row;
                                        axpy(d, &xs[xi..xi + row], &mut grad[wi..wi + row]);
                                        if need_input_grad {
                                            let di = n * isz + xi;
                                            axpy(d, &p[wi..wi + row], &mut dx[di..di + row]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Pool { .. } => {
                    let Aux::Argmax(ref at) = cache.aux[li] else {
                        return Err(Error::invalid("pooling cache missing"));
                    };
                    let osz = out.len() / batch;
                    let isz = x.len() / batch;
                    for (o, &d) in delta.iter().enumerate() {
                        dx[(o / osz) * isz + at[o] as usize] += d;
                    }
                }
                Op::Dropout { .. } => match cache.aux[li] {
                    Aux::Mask(ref mask) => {
                        for ((g, &d), &m) in dx.iter_mut().zip(&delta).zip(mask) {
                            *g = d * m;
                        }
                    }
                    _ => dx.copy_from_slice(&delta),
                },
                Op::Flatten => dx.copy_from_slice(&delta),
                Op::Dense { inp, out: units, relu, w, b } => {
                    for n in 0..batch {
                        let xs = &x[n * inp..(n + 1) * inp];
                        for o in 0..units {
                            let idx = n * units + o;
                            if relu && out[idx] <= 0.0 {
                                continue;
                            }
                            let d = delta[idx];
                            grad[b + o] += d;
                            axpy(d, xs, &mut grad[w + o * inp..w + (o + 1) * inp]);
                            if need_input_grad {
                                axpy(d, &p[w + o * inp..w + (o + 1) * inp], &mut dx[n * inp..(n + 1) * inp]);
                            }
                        }
                    }
                }
                Op::Softmax => unreachable!("softmax is the last layer"),
            }
            delta = dx;
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Argmax(Vec<u32>),
    Mask(Vec<f64>),
}

/// Activations of a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    acts: Vec<Vec<f64>>,
    aux: Vec<Aux>,
    arch_hash: u64,
}

impl ForwardCache {
    pub fn probabilities(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Output of layer `i` (0-based), before any later layer.
    pub fn layer_output(&self, i: usize) -> &[f64] {
        &self.acts[i + 1]
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn hash_shape_table(arch: &ModelArch, segments: &[ParamSegment]) -> u64 {
    let mut h = Sha256::new();
    let (a, b, c) = arch.input;
    for v in [a, b, c] {
        h.update((v as u64).to_le_bytes());
    }
    for layer in &arch.layers {
        h.update(format!("{layer:?};").as_bytes());
    }
    for seg in segments {
        h.update((seg.layer as u64).to_le_bytes());
        h.update(seg.name.as_bytes());
        for d in &seg.shape {
            h.update((*d as u64).to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
