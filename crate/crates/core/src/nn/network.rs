use std::fmt;

use serde::{Deserialize, Serialize};

use super::conv::{conv2d_backward, conv2d_forward, Conv2d};
use super::dense::{dense_backward, dense_forward, Dense};
use super::loss::{softmax, softmax_cross_entropy};
use super::pool::{maxpool_backward, maxpool_forward, MaxPool};
use super::twofold::TwoFold;
use super::{Matrix, NnError, Scalar, Shape4, Tensor4};

/// Per-sample input shape `(channels, rows, cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl InputShape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn batch(&self, n: usize) -> Shape4 {
        Shape4::new(n, self.c, self.h, self.w)
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for InputShape {
    /// RGB 100×100 patches.
    fn default() -> Self {
        Self::new(3, 100, 100)
    }
}

impl fmt::Display for InputShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    MaxPool(MaxPool),
    Relu,
    Flatten,
    Dense(Dense<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::MaxPool(_) => "maxpool",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
        }
    }

    /// Output shape for a given input shape, or the error the forward pass would raise.
    pub fn output_shape(&self, input: Shape4) -> Result<Shape4, NnError> {
        match self {
            Layer::Conv2d(c) => c.output_shape(input),
            Layer::MaxPool(p) => p.output_shape(input),
            Layer::Relu => Ok(input),
            Layer::Flatten => Ok(Shape4::new(input.n, input.item_len(), 1, 1)),
            Layer::Dense(d) => {
                if input.h != 1 || input.w != 1 || input.c != d.in_units {
                    return Err(NnError::shape(
                        "dense input",
                        format!("(n, {}, 1, 1)", d.in_units),
                        input.to_string(),
                    ));
                }
                Ok(Shape4::new(input.n, d.out_units, 1, 1))
            }
        }
    }

    fn params(&self) -> Vec<&[T]> {
        match self {
            Layer::Conv2d(c) => vec![c.weights.data(), &c.bias],
            Layer::Dense(d) => vec![d.weights.data(), &d.bias],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Layer::Conv2d(c) => vec![c.weights.data_mut(), &mut c.bias],
            Layer::Dense(d) => vec![d.weights.data_mut(), &mut d.bias],
            _ => Vec::new(),
        }
    }
}

/// Gradient buffers aligned with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            tensors: net.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

enum Cache<T> {
    Conv(Tensor4<T>),
    Pool { argmax: Vec<usize>, input_shape: Shape4 },
    Relu(Tensor4<T>),
    Flatten(Shape4),
    Dense(Matrix<T>),
}

/// A linear stack of layers ending in a `class_count`-way dense classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    input_shape: InputShape,
    class_count: usize,
}

pub const CLASS_COUNT: usize = 2;

impl<T: Scalar> Network<T> {
    pub fn new(layers: Vec<Layer<T>>, input_shape: InputShape) -> Result<Self, NnError> {
        let net = Self {
            layers,
            input_shape,
            class_count: CLASS_COUNT,
        };
        let out = net.shape_trace()?.last().copied().unwrap_or(input_shape.batch(1));
        match net.layers.last() {
            Some(Layer::Dense(d)) if d.out_units == CLASS_COUNT => {}
            _ => {
                return Err(NnError::shape(
                    "network output",
                    format!("final dense layer with {CLASS_COUNT} units"),
                    out.to_string(),
                ))
            }
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_shape(&self) -> InputShape {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Output shape of every layer for a batch of one.
    pub fn shape_trace(&self) -> Result<Vec<Shape4>, NnError> {
        let mut shape = self.input_shape.batch(1);
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(shape)?;
            trace.push(shape);
        }
        Ok(trace)
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params().into_iter().flatten() {
            for b in v.to_f64_lossy().to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    fn check_batch(&self, batch: &Tensor4<T>) -> Result<(), NnError> {
        let s = batch.shape();
        let i = self.input_shape;
        if (s.c, s.h, s.w) != (i.c, i.h, i.w) {
            return Err(NnError::shape("network input", i.batch(s.n).to_string(), s.to_string()));
        }
        Ok(())
    }

    fn run(&self, batch: &Tensor4<T>, mut tape: Option<&mut Vec<Cache<T>>>) -> Result<Matrix<T>, NnError> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv2d(c) => {
                    let y = conv2d_forward(&x, c)?;
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(Cache::Conv(x));
                    }
                    y
                }
                Layer::MaxPool(p) => {
                    let out = maxpool_forward(&x, p)?;
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(Cache::Pool {
                            argmax: out.argmax,
                            input_shape: out.input_shape,
                        });
                    }
                    out.output
                }
                Layer::Relu => {
                    let mut y = x.clone();
                    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(Cache::Relu(x));
                    }
                    y
                }
                Layer::Flatten => {
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(Cache::Flatten(x.shape()));
                    }
                    x.flattened()
                }
                Layer::Dense(d) => {
                    layer.output_shape(x.shape())?;
                    let m: Matrix<T> = x.into();
                    let y = dense_forward(&m, d)?;
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(Cache::Dense(m));
                    }
                    y.into_tensor()?
                }
            };
        }
        Ok(x.into())
    }

    /// Logits, one row per batch item.
    pub fn forward(&self, batch: &Tensor4<T>) -> Result<Matrix<T>, NnError> {
        self.run(batch, None)
    }

    /// Positive-class probability per batch item.
    pub fn predict_scores(&self, batch: &Tensor4<T>) -> Result<Vec<T>, NnError> {
        let p = softmax(&self.forward(batch)?);
        Ok((0..p.rows()).map(|r| p.get(r, 1)).collect())
    }

    pub fn loss(&self, batch: &Tensor4<T>, labels: &[usize]) -> Result<T, NnError> {
        Ok(softmax_cross_entropy(&self.forward(batch)?, labels)?.0)
    }

    /// Mean loss and its gradient with respect to every parameter.
    pub fn loss_and_grads(&self, batch: &Tensor4<T>, labels: &[usize]) -> Result<(T, Gradients<T>), NnError> {
        let mut tape = Vec::with_capacity(self.layers.len());
        let logits = self.run(batch, Some(&mut tape))?;
        let (loss, grad_logits) = softmax_cross_entropy(&logits, labels)?;
        let mut grad = grad_logits.into_tensor()?;
        let mut rev_params: Vec<Vec<T>> = Vec::new();
        for (layer, cache) in self.layers.iter().zip(tape).rev() {
            grad = match (layer, cache) {
                (Layer::Conv2d(c), Cache::Conv(input)) => {
                    let g = conv2d_backward(&input, c, &grad)?;
                    rev_params.push(g.bias);
                    rev_params.push(g.weights.into_vec());
                    g.input
                }
                (Layer::MaxPool(_), Cache::Pool { argmax, input_shape }) => {
                    maxpool_backward(&argmax, input_shape, &grad)?
                }
                (Layer::Relu, Cache::Relu(input)) => {
                    for (g, x) in grad.data_mut().iter_mut().zip(input.data()) {
                        if *x <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    grad
                }
                (Layer::Flatten, Cache::Flatten(shape)) => grad.reshaped(shape)?,
                (Layer::Dense(d), Cache::Dense(input)) => {
                    let g = dense_backward(&input, d, &grad.into())?;
                    rev_params.push(g.bias);
                    rev_params.push(g.weights.into_vec());
                    g.input.into_tensor()?
                }
                _ => unreachable!("tape entries follow layer order"),
            };
        }
        rev_params.reverse();
        Ok((loss, Gradients { tensors: rev_params }))
    }

    /// Loss plus a hash of every ReLU on/off decision and pool argmax.
    fn loss_and_pattern(&self, batch: &Tensor4<T>, labels: &[usize]) -> Result<(T, u64), NnError> {
        let mut tape = Vec::with_capacity(self.layers.len());
        let logits = self.run(batch, Some(&mut tape))?;
        let (loss, _) = softmax_cross_entropy(&logits, labels)?;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for entry in &tape {
            match entry {
                Cache::Relu(x) => x.data().iter().for_each(|v| mix(u64::from(*v > T::zero()))),
                Cache::Pool { argmax, .. } => argmax.iter().for_each(|&a| mix(a as u64)),
                _ => {}
            }
        }
        Ok((loss, h))
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv_u = |t: &Tensor4<T>| t.cast::<U>();
        let vec_u = |v: &[T]| {
            v.iter()
                .map(|x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect::<Vec<U>>()
        };
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    weights: conv_u(&c.weights),
                    bias: vec_u(&c.bias),
                }),
                Layer::MaxPool(p) => Layer::MaxPool(*p),
                Layer::Relu => Layer::Relu,
                Layer::Flatten => Layer::Flatten,
                Layer::Dense(d) => Layer::Dense(Dense {
                    in_units: d.in_units,
                    out_units: d.out_units,
                    weights: Matrix::from_vec(d.out_units, d.in_units, vec_u(d.weights.data())).expect("same shape"),
                    bias: vec_u(&d.bias),
                }),
            })
            .collect();
        Network {
            layers,
            input_shape: self.input_shape,
            class_count: self.class_count,
        }
    }
}

/// Momentum SGD: `v ← μ·v − η·g; w ← w + v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    lr: T,
    momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self, NnError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NnError::InvalidHyperparameter(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(NnError::InvalidHyperparameter(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr: T::from_f64_lossy(lr),
            momentum: T::from_f64_lossy(momentum),
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<(), NnError> {
        let mut params = net.params_mut();
        if grads.tensors.len() != params.len() {
            return Err(NnError::shape(
                "sgd gradients",
                format!("{} tensors", params.len()),
                format!("{} tensors", grads.tensors.len()),
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        for ((w, g), v) in params.iter_mut().zip(&grads.tensors).zip(&mut self.velocity) {
            if w.len() != g.len() || w.len() != v.len() {
                return Err(NnError::shape(
                    "sgd tensor",
                    format!("{} elements", w.len()),
                    format!("{} elements", g.len()),
                ));
            }
            for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi - self.lr * *gi;
                *wi += *vi;
            }
        }
        Ok(())
    }

    /// Forward, backward and one update; returns the loss before the update.
    pub fn train_batch(&mut self, net: &mut Network<T>, batch: &Tensor4<T>, labels: &[usize]) -> Result<T, NnError> {
        let (loss, grads) = net.loss_and_grads(batch, labels)?;
        if loss.is_finite() && grads.is_finite() {
            self.step(net, &grads)?;
        }
        Ok(loss)
    }
}

/// Outcome of comparing backpropagated gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a − cd| / max(|a|, |cd|, 1e-12)` over checked parameters.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Probes skipped because `w ± ε` changed a ReLU mask or pool argmax,
    /// where the loss is not differentiable.
    pub skipped_kinks: usize,
}

/// Compares `analytic` against central differences of the loss.
///
/// The probe losses are evaluated in double-double arithmetic, so the
/// difference quotient is not limited by f64 rounding even for tiny
/// gradients.
pub fn max_relative_error(
    network: &Network<f64>,
    batch: &Tensor4<f64>,
    labels: &[usize],
    epsilon: f64,
    analytic: &Gradients<f64>,
) -> Result<GradCheckReport, NnError> {
    let mut probe: Network<TwoFold> = network.cast();
    let batch: Tensor4<TwoFold> = batch.cast();
    let count = probe.params().len();
    let shapes_match = analytic.tensors.len() == count
        && probe
            .params()
            .iter()
            .zip(&analytic.tensors)
            .all(|(p, g)| p.len() == g.len());
    if !shapes_match {
        return Err(NnError::shape(
            "grad_check gradients",
            format!("{count} tensors of {} values", network.param_count()),
            format!(
                "{} tensors of {} values",
                analytic.tensors.len(),
                analytic.tensors.iter().map(Vec::len).sum::<usize>()
            ),
        ));
    }
    let (_, base_pattern) = probe.loss_and_pattern(&batch, labels)?;
    let eps = TwoFold::from_f64(epsilon);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for t in 0..count {
        for i in 0..analytic.tensors[t].len() {
            let orig = probe.params()[t][i];
            probe.params_mut()[t][i] = orig + eps;
            let (plus, p_plus) = probe.loss_and_pattern(&batch, labels)?;
            probe.params_mut()[t][i] = orig - eps;
            let (minus, p_minus) = probe.loss_and_pattern(&batch, labels)?;
            probe.params_mut()[t][i] = orig;
            if p_plus != base_pattern || p_minus != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let cd = ((plus - minus) / (eps + eps)).to_f64_lossy();
            let a = analytic.tensors[t][i];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-12);
            report.max_relative_error = report.max_relative_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Checks backpropagation against central finite differences.
pub fn grad_check(
    network: &Network<f64>,
    batch: &Tensor4<f64>,
    labels: &[usize],
    epsilon: f64,
) -> Result<GradCheckReport, NnError> {
    let (_, grads) = network.loss_and_grads(batch, labels)?;
    max_relative_error(network, batch, labels, epsilon, &grads)
}
