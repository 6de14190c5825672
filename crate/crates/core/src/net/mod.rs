//! Minimal differentiable convolutional classifier.
//!
//! A [`Network`] is an ordered stack of [`LayerSpec`]s over a fixed layer
//! vocabulary (conv2d / relu / maxpool2d / flatten / dense). Shapes are
//! validated when the network is built, never at forward time. The network
//! exposes pre-softmax logits, class probabilities, and reverse-mode
//! gradients with respect to both parameters (for training) and input
//! pixels (for attacks and saliency).
//!
//! Forward and [`Network::input_gradient`] are pure: a network is immutable
//! once built, so a shared reference can be used from many threads.

pub mod model_io;
pub mod synth;
pub mod train;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Image, Scalar, Tensor};
use rand::Rng;

pub use synth::{synth_dataset, Dataset, Split};
pub use train::{accuracy, train, train_with_metrics, EpochStats, TrainConfig};

/// One layer of the fixed vocabulary. Convolutions are stride-1; pooling
/// strides by its window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d { kernel: usize, out_channels: usize, padding: usize },
    Relu,
    MaxPool2d { window: usize },
    Flatten,
    Dense { out_features: usize },
}

/// Shape of the data flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataShape {
    Hwc(usize, usize, usize),
    Flat(usize),
}

impl DataShape {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            DataShape::Hwc(h, w, c) => vec![*h, *w, *c],
            DataShape::Flat(n) => vec![*n],
        }
    }

    fn len(&self) -> usize {
        match self {
            DataShape::Hwc(h, w, c) => h * w * c,
            DataShape::Flat(n) => *n,
        }
    }
}

/// Parameters attached to one layer. Layers without parameters hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T> {
    /// Conv weights `[k, k, c_in, c_out]` plus one bias per output channel.
    Conv { weights: Tensor<T>, bias: Vec<T> },
    /// Dense weights `[in, out]` plus one bias per output feature.
    Dense { weights: Tensor<T>, bias: Vec<T> },
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams<T>>,
    /// Output shape of each layer; `shapes[0]` is the input shape.
    shapes: Vec<DataShape>,
    input_shape: [usize; 3],
    num_classes: usize,
}

/// Walk the layer stack and compute every intermediate shape, rejecting any
/// stack whose shapes do not compose.
fn propagate_shapes(input_shape: [usize; 3], layers: &[LayerSpec]) -> Result<Vec<DataShape>> {
    let [h, w, c] = input_shape;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::invalid("input_shape", "all dimensions must be positive"));
    }
    let mut shapes = vec![DataShape::Hwc(h, w, c)];
    for (i, layer) in layers.iter().enumerate() {
        let cur = *shapes.last().unwrap();
        let bad = |message: String| Error::BadNetwork { layer: i, message };
        let next = match (layer, cur) {
            (LayerSpec::Conv2d { kernel, out_channels, padding }, DataShape::Hwc(h, w, _)) => {
                if *kernel == 0 || *out_channels == 0 {
                    return Err(bad("conv2d kernel and out_channels must be positive".into()));
                }
                let oh = (h + 2 * padding).checked_sub(*kernel).map(|v| v + 1);
                let ow = (w + 2 * padding).checked_sub(*kernel).map(|v| v + 1);
                match (oh, ow) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 => DataShape::Hwc(oh, ow, *out_channels),
                    _ => return Err(bad(format!("conv2d kernel {kernel} too large for {h}x{w} input"))),
                }
            }
            (LayerSpec::Conv2d { .. }, DataShape::Flat(_)) => {
                return Err(bad("conv2d requires an unflattened [h,w,c] input".into()))
            }
            (LayerSpec::Relu, s) => s,
            (LayerSpec::MaxPool2d { window }, DataShape::Hwc(h, w, c)) => {
                if *window == 0 {
                    return Err(bad("maxpool2d window must be positive".into()));
                }
                if h % window != 0 || w % window != 0 {
                    return Err(bad(format!("maxpool2d window {window} must divide {h}x{w} input")));
                }
                DataShape::Hwc(h / window, w / window, c)
            }
            (LayerSpec::MaxPool2d { .. }, DataShape::Flat(_)) => {
                return Err(bad("maxpool2d requires an unflattened [h,w,c] input".into()))
            }
            (LayerSpec::Flatten, DataShape::Hwc(h, w, c)) => DataShape::Flat(h * w * c),
            (LayerSpec::Flatten, DataShape::Flat(_)) => {
                return Err(bad("flatten applied to already-flat input".into()))
            }
            (LayerSpec::Dense { out_features }, DataShape::Flat(_)) => {
                if *out_features == 0 {
                    return Err(bad("dense out_features must be positive".into()));
                }
                DataShape::Flat(*out_features)
            }
            (LayerSpec::Dense { .. }, DataShape::Hwc(..)) => {
                return Err(bad("dense requires a flattened input".into()))
            }
        };
        shapes.push(next);
    }
    match shapes.last() {
        Some(DataShape::Flat(n)) if *n >= 2 => Ok(shapes),
        _ => Err(Error::invalid(
            "layers",
            "network must end in a flat logit vector of length >= 2",
        )),
    }
}

impl<T: Scalar> Network<T> {
    /// Build a network with seeded Glorot-uniform weights and zero biases.
    pub fn build(input_shape: [usize; 3], layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let shapes = propagate_shapes(input_shape, &layers)?;
        let mut rng = rng::substream(seed, "net/init");
        let mut params = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let p = match (layer, shapes[i]) {
                (LayerSpec::Conv2d { kernel, out_channels, .. }, DataShape::Hwc(_, _, c_in)) => {
                    let k = *kernel;
                    let fan_in = k * k * c_in;
                    let fan_out = k * k * out_channels;
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n = k * k * c_in * out_channels;
                    let data: Vec<T> = (0..n)
                        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
                        .collect();
                    LayerParams::Conv {
                        weights: Tensor::from_vec(&[k, k, c_in, *out_channels], data)?,
                        bias: vec![T::zero(); *out_channels],
                    }
                }
                (LayerSpec::Dense { out_features }, DataShape::Flat(in_features)) => {
                    let limit = (6.0 / (in_features + out_features) as f64).sqrt();
                    let n = in_features * out_features;
                    let data: Vec<T> = (0..n)
                        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
                        .collect();
                    LayerParams::Dense {
                        weights: Tensor::from_vec(&[in_features, *out_features], data)?,
                        bias: vec![T::zero(); *out_features],
                    }
                }
                _ => LayerParams::None,
            };
            params.push(p);
        }
        let num_classes = shapes.last().unwrap().len();
        Ok(Network { layers, params, shapes, input_shape, num_classes })
    }

    /// Build a network from explicit parameters, validating every shape.
    pub fn with_params(
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        params: Vec<LayerParams<T>>,
    ) -> Result<Self> {
        let shapes = propagate_shapes(input_shape, &layers)?;
        if params.len() != layers.len() {
            return Err(Error::invalid("params", "one parameter entry required per layer"));
        }
        for (i, (layer, p)) in layers.iter().zip(&params).enumerate() {
            let bad = |message: String| Error::BadNetwork { layer: i, message };
            match (layer, p, shapes[i]) {
                (
                    LayerSpec::Conv2d { kernel, out_channels, .. },
                    LayerParams::Conv { weights, bias },
                    DataShape::Hwc(_, _, c_in),
                ) => {
                    let want = [*kernel, *kernel, c_in, *out_channels];
                    if weights.shape() != want {
                        return Err(bad(format!(
                            "conv weights shape {:?}, want {:?}",
                            weights.shape(),
                            want
                        )));
                    }
                    if bias.len() != *out_channels {
                        return Err(bad(format!("conv bias length {}, want {out_channels}", bias.len())));
                    }
                }
                (
                    LayerSpec::Dense { out_features },
                    LayerParams::Dense { weights, bias },
                    DataShape::Flat(in_features),
                ) => {
                    let want = [in_features, *out_features];
                    if weights.shape() != want {
                        return Err(bad(format!(
                            "dense weights shape {:?}, want {:?}",
                            weights.shape(),
                            want
                        )));
                    }
                    if bias.len() != *out_features {
                        return Err(bad(format!("dense bias length {}, want {out_features}", bias.len())));
                    }
                }
                (LayerSpec::Relu | LayerSpec::MaxPool2d { .. } | LayerSpec::Flatten, LayerParams::None, _) => {}
                _ => return Err(bad("parameter kind does not match layer kind".into())),
            }
        }
        let num_classes = shapes.last().unwrap().len();
        Ok(Network { layers, params, shapes, input_shape, num_classes })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    /// Cast all parameters through `f64` (e.g. an `f32` network into an
    /// `f64` one for high-precision verification).
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| match p {
                    LayerParams::Conv { weights, bias } => LayerParams::Conv {
                        weights: weights.cast(),
                        bias: bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    },
                    LayerParams::Dense { weights, bias } => LayerParams::Dense {
                        weights: weights.cast(),
                        bias: bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    },
                    LayerParams::None => LayerParams::None,
                })
                .collect(),
            shapes: self.shapes.clone(),
            input_shape: self.input_shape,
            num_classes: self.num_classes,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want: Vec<usize> = self.input_shape.to_vec();
        if x.shape() != want {
            return Err(Error::ShapeMismatch { expected: want, got: x.shape().to_vec() });
        }
        Ok(())
    }

    /// Pre-softmax logits for an input tensor of the network's input shape.
    ///
    /// Accepts raw tensors (not just `[0,1]` images) because network-domain
    /// noised inputs exceed the image range.
    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let acts = self.forward_all(x);
        let logits = acts.into_iter().last().unwrap();
        logits.ensure_finite("forward logits")?;
        Ok(logits)
    }

    /// Pre-softmax logits for an image.
    pub fn forward(&self, image: &Image<T>) -> Result<Tensor<T>> {
        self.forward_tensor(image.tensor())
    }

    /// Predicted class and its probability. Ties break to the lowest index.
    pub fn predict(&self, image: &Image<T>) -> Result<(usize, T)> {
        self.predict_tensor(image.tensor())
    }

    pub fn predict_tensor(&self, x: &Tensor<T>) -> Result<(usize, T)> {
        let logits = self.forward_tensor(x)?;
        let probs = softmax(&logits)?;
        let class = argmax(probs.data());
        Ok((class, probs.data()[class]))
    }

    /// Gradient of `class_weights . logits` with respect to the input pixels.
    ///
    /// With a one-hot weighting this is the input gradient of a single
    /// logit; with `+1` at a target class and `-1` at a reference class it
    /// is the gradient of their difference in one backward pass.
    pub fn input_gradient(&self, x: &Tensor<T>, class_weights: &[T]) -> Result<Tensor<T>> {
        self.check_input(x)?;
        if class_weights.len() != self.num_classes {
            return Err(Error::invalid(
                "class_weights",
                format!("length {} does not match {} classes", class_weights.len(), self.num_classes),
            ));
        }
        let acts = self.forward_all(x);
        let mut grad = Tensor::from_vec(&[self.num_classes], class_weights.to_vec())?;
        for i in (0..self.layers.len()).rev() {
            grad = self.backward_layer(i, &acts[i], &acts[i + 1], &grad, None);
        }
        Ok(grad)
    }

    /// Run every layer, returning `[input, out_0, ..., out_last]`.
    fn forward_all(&self, x: &Tensor<T>) -> Vec<Tensor<T>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = self.apply_layer(i, layer, acts.last().unwrap());
            acts.push(out);
        }
        acts
    }

    fn apply_layer(&self, idx: usize, layer: &LayerSpec, input: &Tensor<T>) -> Tensor<T> {
        match layer {
            LayerSpec::Conv2d { kernel, out_channels, padding } => {
                let (LayerParams::Conv { weights, bias }, DataShape::Hwc(h, w, c_in)) =
                    (&self.params[idx], self.shapes[idx])
                else {
                    unreachable!("validated at build time")
                };
                let DataShape::Hwc(oh, ow, _) = self.shapes[idx + 1] else { unreachable!() };
                conv2d_forward(
                    input.data(),
                    (h, w, c_in),
                    weights.data(),
                    bias,
                    (*kernel, *out_channels, *padding),
                    (oh, ow),
                )
            }
            LayerSpec::Relu => {
                let mut out = input.clone();
                for v in out.data_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
                out
            }
            LayerSpec::MaxPool2d { window } => {
                let DataShape::Hwc(h, w, c) = self.shapes[idx] else { unreachable!() };
                maxpool_forward(input.data(), (h, w, c), *window)
            }
            LayerSpec::Flatten => {
                let n = input.len();
                input.reshaped(&[n]).expect("flatten preserves size")
            }
            LayerSpec::Dense { out_features } => {
                let LayerParams::Dense { weights, bias } = &self.params[idx] else {
                    unreachable!("validated at build time")
                };
                dense_forward(input.data(), weights.data(), bias, *out_features)
            }
        }
    }

    /// Backward pass through layer `idx`. Returns the gradient with respect
    /// to the layer input; when `param_grads` is given, accumulates weight
    /// and bias gradients into it.
    fn backward_layer(
        &self,
        idx: usize,
        input: &Tensor<T>,
        _output: &Tensor<T>,
        dout: &Tensor<T>,
        param_grads: Option<&mut LayerParams<T>>,
    ) -> Tensor<T> {
        match &self.layers[idx] {
            LayerSpec::Conv2d { kernel, out_channels, padding } => {
                let (LayerParams::Conv { weights, .. }, DataShape::Hwc(h, w, c_in)) =
                    (&self.params[idx], self.shapes[idx])
                else {
                    unreachable!()
                };
                let DataShape::Hwc(oh, ow, _) = self.shapes[idx + 1] else { unreachable!() };
                let mut grads = param_grads;
                let (dw, db) = match &mut grads {
                    Some(LayerParams::Conv { weights, bias }) => (Some(weights), Some(bias)),
                    _ => (None, None),
                };
                conv2d_backward(
                    input.data(),
                    (h, w, c_in),
                    weights.data(),
                    dout.data(),
                    (*kernel, *out_channels, *padding),
                    (oh, ow),
                    dw,
                    db,
                )
            }
            LayerSpec::Relu => {
                let mut din = dout.clone();
                for (g, v) in din.data_mut().iter_mut().zip(input.data()) {
                    if *v <= T::zero() {
                        *g = T::zero();
                    }
                }
                din.reshaped(input.shape()).expect("same size")
            }
            LayerSpec::MaxPool2d { window } => {
                let DataShape::Hwc(h, w, c) = self.shapes[idx] else { unreachable!() };
                maxpool_backward(input.data(), (h, w, c), *window, dout.data())
            }
            LayerSpec::Flatten => dout.reshaped(input.shape()).expect("same size"),
            LayerSpec::Dense { out_features } => {
                let LayerParams::Dense { weights, .. } = &self.params[idx] else { unreachable!() };
                let mut grads = param_grads;
                let (dw, db) = match &mut grads {
                    Some(LayerParams::Dense { weights, bias }) => (Some(weights), Some(bias)),
                    _ => (None, None),
                };
                dense_backward(input.data(), weights.data(), dout.data(), *out_features, dw, db)
            }
        }
    }

    /// Zero-valued parameter gradients in the same layout as the network's
    /// parameters.
    pub(crate) fn zero_grads(&self) -> Vec<LayerParams<T>> {
        self.params
            .iter()
            .map(|p| match p {
                LayerParams::Conv { weights, bias } => LayerParams::Conv {
                    weights: Tensor::zeros(weights.shape()),
                    bias: vec![T::zero(); bias.len()],
                },
                LayerParams::Dense { weights, bias } => LayerParams::Dense {
                    weights: Tensor::zeros(weights.shape()),
                    bias: vec![T::zero(); bias.len()],
                },
                LayerParams::None => LayerParams::None,
            })
            .collect()
    }

    /// Forward plus full backward from a logit-space gradient, accumulating
    /// parameter gradients. Used by the trainer. Returns the logits.
    pub(crate) fn accumulate_grads(
        &self,
        x: &Tensor<T>,
        dlogits_of: impl FnOnce(&Tensor<T>) -> Tensor<T>,
        grads: &mut [LayerParams<T>],
    ) -> Tensor<T> {
        let acts = self.forward_all(x);
        let logits = acts.last().unwrap().clone();
        let mut grad = dlogits_of(&logits);
        for i in (0..self.layers.len()).rev() {
            // The input gradient of layer 0 is not needed for training, but
            // computing it unconditionally keeps the code path single.
            grad = self.backward_layer(i, &acts[i], &acts[i + 1], &grad, Some(&mut grads[i]));
        }
        logits
    }

    pub(crate) fn apply_update(&mut self, grads: &[LayerParams<T>], scale: T) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            match (p, g) {
                (
                    LayerParams::Conv { weights, bias },
                    LayerParams::Conv { weights: gw, bias: gb },
                )
                | (
                    LayerParams::Dense { weights, bias },
                    LayerParams::Dense { weights: gw, bias: gb },
                ) => {
                    for (w, g) in weights.data_mut().iter_mut().zip(gw.data()) {
                        *w = *w - scale * *g;
                    }
                    for (b, g) in bias.iter_mut().zip(gb) {
                        *b = *b - scale * *g;
                    }
                }
                (LayerParams::None, LayerParams::None) => {}
                _ => unreachable!("gradient layout matches parameter layout"),
            }
        }
    }
}

/// Numerically stable softmax (max-shifted).
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.is_empty() {
        return Err(Error::invalid("logits", "softmax of an empty vector"));
    }
    logits.ensure_finite("softmax input")?;
    let max = logits.data().iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.data().iter().map(|v| (*v - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for v in &mut out {
        *v = *v / sum;
    }
    Tensor::from_vec(logits.shape(), out)
}

/// Index of the largest value; ties break to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn conv2d_forward<T: Scalar>(
    input: &[T],
    (h, w, c_in): (usize, usize, usize),
    weights: &[T],
    bias: &[T],
    (k, c_out, pad): (usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Tensor<T> {
    let mut out = vec![T::zero(); oh * ow * c_out];
    for cell in out.chunks_exact_mut(c_out) {
        cell.copy_from_slice(bias);
    }
    for y in 0..oh {
        for ky in 0..k {
            let iy = y + ky;
            if iy < pad || iy - pad >= h {
                continue;
            }
            let iy = iy - pad;
            for x in 0..ow {
                let out_off = (y * ow + x) * c_out;
                for kx in 0..k {
                    let ix = x + kx;
                    if ix < pad || ix - pad >= w {
                        continue;
                    }
                    let ix = ix - pad;
                    let in_off = (iy * w + ix) * c_in;
                    let w_off = ((ky * k + kx) * c_in) * c_out;
                    for ic in 0..c_in {
                        let v = input[in_off + ic];
                        let wrow = &weights[w_off + ic * c_out..w_off + (ic + 1) * c_out];
                        let orow = &mut out[out_off..out_off + c_out];
                        for (o, wv) in orow.iter_mut().zip(wrow) {
                            *o = *o + v * *wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow, c_out], out).expect("conv output size")
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    input: &[T],
    (h, w, c_in): (usize, usize, usize),
    weights: &[T],
    dout: &[T],
    (k, c_out, pad): (usize, usize, usize),
    (oh, ow): (usize, usize),
    mut dweights: Option<&mut Tensor<T>>,
    mut dbias: Option<&mut Vec<T>>,
) -> Tensor<T> {
    let mut din = vec![T::zero(); h * w * c_in];
    if let Some(db) = dbias.as_deref_mut() {
        for cell in dout.chunks_exact(c_out) {
            for (b, g) in db.iter_mut().zip(cell) {
                *b = *b + *g;
            }
        }
    }
    for y in 0..oh {
        for ky in 0..k {
            let iy = y + ky;
            if iy < pad || iy - pad >= h {
                continue;
            }
            let iy = iy - pad;
            for x in 0..ow {
                let g = &dout[(y * ow + x) * c_out..(y * ow + x) * c_out + c_out];
                for kx in 0..k {
                    let ix = x + kx;
                    if ix < pad || ix - pad >= w {
                        continue;
                    }
                    let ix = ix - pad;
                    let in_off = (iy * w + ix) * c_in;
                    let w_off = ((ky * k + kx) * c_in) * c_out;
                    for ic in 0..c_in {
                        let wrow = &weights[w_off + ic * c_out..w_off + (ic + 1) * c_out];
                        let mut acc = T::zero();
                        for (gv, wv) in g.iter().zip(wrow) {
                            acc = acc + *gv * *wv;
                        }
                        din[in_off + ic] = din[in_off + ic] + acc;
                        if let Some(dw) = dweights.as_deref_mut() {
                            let v = input[in_off + ic];
                            let dwrow =
                                &mut dw.data_mut()[w_off + ic * c_out..w_off + (ic + 1) * c_out];
                            for (d, gv) in dwrow.iter_mut().zip(g) {
                                *d = *d + v * *gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[h, w, c_in], din).expect("conv input size")
}

fn maxpool_forward<T: Scalar>(input: &[T], (h, w, c): (usize, usize, usize), win: usize) -> Tensor<T> {
    let (oh, ow) = (h / win, w / win);
    let mut out = vec![T::zero(); oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                // First-seen maximum wins, a fixed tie rule.
                let mut best = input[((y * win) * w + x * win) * c + ch];
                for dy in 0..win {
                    for dx in 0..win {
                        let v = input[((y * win + dy) * w + (x * win + dx)) * c + ch];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(y * ow + x) * c + ch] = best;
            }
        }
    }
    Tensor::from_vec(&[oh, ow, c], out).expect("pool output size")
}

fn maxpool_backward<T: Scalar>(
    input: &[T],
    (h, w, c): (usize, usize, usize),
    win: usize,
    dout: &[T],
) -> Tensor<T> {
    let (oh, ow) = (h / win, w / win);
    let mut din = vec![T::zero(); h * w * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best = input[((y * win) * w + x * win) * c + ch];
                let mut best_idx = ((y * win) * w + x * win) * c + ch;
                for dy in 0..win {
                    for dx in 0..win {
                        let idx = ((y * win + dy) * w + (x * win + dx)) * c + ch;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                din[best_idx] = din[best_idx] + dout[(y * ow + x) * c + ch];
            }
        }
    }
    Tensor::from_vec(&[h, w, c], din).expect("pool input size")
}

fn dense_forward<T: Scalar>(input: &[T], weights: &[T], bias: &[T], out_f: usize) -> Tensor<T> {
    let mut out = bias.to_vec();
    for (i, v) in input.iter().enumerate() {
        let wrow = &weights[i * out_f..(i + 1) * out_f];
        for (o, wv) in out.iter_mut().zip(wrow) {
            *o = *o + *v * *wv;
        }
    }
    Tensor::from_vec(&[out_f], out).expect("dense output size")
}

fn dense_backward<T: Scalar>(
    input: &[T],
    weights: &[T],
    dout: &[T],
    out_f: usize,
    mut dweights: Option<&mut Tensor<T>>,
    dbias: Option<&mut Vec<T>>,
) -> Tensor<T> {
    if let Some(db) = dbias {
        for (b, g) in db.iter_mut().zip(dout) {
            *b = *b + *g;
        }
    }
    let mut din = vec![T::zero(); input.len()];
    for (i, v) in input.iter().enumerate() {
        let wrow = &weights[i * out_f..(i + 1) * out_f];
        let mut acc = T::zero();
        for (g, wv) in dout.iter().zip(wrow) {
            acc = acc + *g * *wv;
        }
        din[i] = acc;
        if let Some(dw) = dweights.as_deref_mut() {
            let dwrow = &mut dw.data_mut()[i * out_f..(i + 1) * out_f];
            for (d, g) in dwrow.iter_mut().zip(dout) {
                *d = *d + *v * *g;
            }
        }
    }
    Tensor::from_vec(&[input.len()], din).expect("dense input size")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_layers(classes: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv2d { kernel: 3, out_channels: 4, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { window: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: classes },
        ]
    }

    fn zero_image(h: usize, w: usize) -> Image<f32> {
        Image::new(Tensor::zeros(&[h, w, 3])).unwrap()
    }

    #[test]
    fn zero_weights_yield_bias_logits() {
        let layers = vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 4 }];
        let bias = vec![0.5f32, -1.0, 2.0, 0.0];
        let params = vec![
            LayerParams::None,
            LayerParams::Dense {
                weights: Tensor::zeros(&[8 * 8 * 3, 4]),
                bias: bias.clone(),
            },
        ];
        let net = Network::with_params([8, 8, 3], layers, params).unwrap();
        let logits = net.forward(&zero_image(8, 8)).unwrap();
        assert_eq!(logits.data(), bias.as_slice());
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::<f32>::build([8, 8, 3], tiny_layers(5), 7).unwrap();
        let mut t = Tensor::zeros(&[8, 8, 3]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = (i % 17) as f32 / 17.0;
        }
        let img = Image::new(t).unwrap();
        let a = net.forward(&img).unwrap();
        let b = net.forward(&img).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let net = Network::<f32>::build([8, 8, 3], tiny_layers(5), 7).unwrap();
        let err = net.forward(&zero_image(10, 8)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[8, 8, 3]") && msg.contains("[10, 8, 3]"), "diagnostic names both shapes: {msg}");
    }

    #[test]
    fn bad_compositions_rejected_at_build() {
        // dense before flatten
        let r = Network::<f32>::build(
            [8, 8, 3],
            vec![LayerSpec::Dense { out_features: 4 }],
            0,
        );
        assert!(r.is_err());
        // pool window not dividing input
        let r = Network::<f32>::build(
            [9, 9, 3],
            vec![
                LayerSpec::MaxPool2d { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 4 },
            ],
            0,
        );
        assert!(r.is_err());
        // kernel larger than padded input
        let r = Network::<f32>::build(
            [4, 4, 3],
            vec![
                LayerSpec::Conv2d { kernel: 7, out_channels: 2, padding: 0 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 4 },
            ],
            0,
        );
        assert!(r.is_err());
        // flatten twice
        let r = Network::<f32>::build(
            [8, 8, 3],
            vec![LayerSpec::Flatten, LayerSpec::Flatten, LayerSpec::Dense { out_features: 4 }],
            0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let logits = Tensor::from_vec(&[4], vec![0.0f32; 4]).unwrap();
        let p = softmax(&logits).unwrap();
        for v in p.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let logits = Tensor::from_vec(&[2], vec![1000.0f32, 0.0]).unwrap();
        let p = softmax(&logits).unwrap();
        assert!(p.data()[0] > 0.999_999);
        assert!(p.data()[1] >= 0.0);
        assert!(p.all_finite());
    }

    #[test]
    fn softmax_rejects_empty() {
        let logits = Tensor::from_vec(&[0], vec![]).unwrap();
        assert!(softmax::<f32>(&logits).is_err());
    }

    #[test]
    fn softmax_matches_direct_f64_evaluation() {
        let logits = Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let p = softmax(&logits).unwrap();
        let denom: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (i, v) in p.data().iter().enumerate() {
            let direct = ((i + 1) as f64).exp() / denom;
            assert!((v - direct).abs() < 1e-7);
        }
    }

    #[test]
    fn predict_ties_break_low() {
        // all-zero weights: uniform distribution, class 0 wins
        let layers = vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 4 }];
        let params = vec![
            LayerParams::None,
            LayerParams::Dense { weights: Tensor::zeros(&[8 * 8 * 3, 4]), bias: vec![0.0f32; 4] },
        ];
        let net = Network::with_params([8, 8, 3], layers, params).unwrap();
        let (class, p) = net.predict(&zero_image(8, 8)).unwrap();
        assert_eq!(class, 0);
        assert!((p - 0.25).abs() < 1e-6);
    }

    #[test]
    fn argmax_picks_highest() {
        assert_eq!(argmax(&[0.1f32, 5.0, 0.1]), 1);
        assert_eq!(argmax(&[0.5f32, 0.5]), 0);
    }

    #[test]
    fn zero_class_weights_give_zero_gradient() {
        let net = Network::<f32>::build([8, 8, 3], tiny_layers(5), 3).unwrap();
        let img = zero_image(8, 8);
        let g = net.input_gradient(img.tensor(), &[0.0; 5]).unwrap();
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn input_gradient_is_linear_in_class_weights() {
        let net = Network::<f64>::build([8, 8, 3], tiny_layers(5), 11).unwrap();
        let mut t = Tensor::zeros(&[8, 8, 3]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = ((i * 31 + 7) % 101) as f64 / 101.0;
        }
        let mut w_plus = vec![0.0; 5];
        w_plus[2] = 1.0;
        let mut w_minus = vec![0.0; 5];
        w_minus[0] = 1.0;
        let combined: Vec<f64> = w_plus.iter().zip(&w_minus).map(|(a, b)| a - b).collect();
        let g_plus = net.input_gradient(&t, &w_plus).unwrap();
        let g_minus = net.input_gradient(&t, &w_minus).unwrap();
        let g_comb = net.input_gradient(&t, &combined).unwrap();
        for ((a, b), c) in g_plus.data().iter().zip(g_minus.data()).zip(g_comb.data()) {
            assert!((a - b - c).abs() < 1e-6);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Network::<f32>::build([8, 8, 3], tiny_layers(5), 42).unwrap();
        let b = Network::<f32>::build([8, 8, 3], tiny_layers(5), 42).unwrap();
        assert_eq!(a.params(), b.params());
    }
}
