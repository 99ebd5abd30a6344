//! Valid (unpadded) 2-D cross-correlation lowered to GEMM via im2col.

use rand::Rng;

use super::scalar::matmul;
use super::{output_dim, NnError, Scalar, Shape4, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `(out_channels, in_channels, kernel, kernel)`
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
}

/// Gradients of the loss with respect to a convolution's input and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        weights: Tensor4<T>,
        bias: Vec<T>,
    ) -> Result<Self, NnError> {
        if kernel == 0 || stride == 0 {
            return Err(NnError::InvalidHyperparameter(format!(
                "conv kernel and stride must be >= 1 (kernel={kernel}, stride={stride})"
            )));
        }
        let expect = Shape4::new(out_channels, in_channels, kernel, kernel);
        if weights.shape() != expect {
            return Err(NnError::shape(
                "conv2d weights",
                expect.to_string(),
                weights.shape().to_string(),
            ));
        }
        if bias.len() != out_channels {
            return Err(NnError::shape(
                "conv2d bias",
                format!("{out_channels} elements"),
                format!("{} elements", bias.len()),
            ));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weights,
            bias,
        })
    }

    /// Fan-in scaled uniform weights in `±sqrt(6 / fan_in)`, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let fan_in = (in_channels * kernel * kernel).max(1);
        let bound = (6.0 / fan_in as f64).sqrt();
        let shape = Shape4::new(out_channels, in_channels, kernel.max(1), kernel.max(1));
        let data = (0..shape.len())
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            .collect();
        let weights = Tensor4::from_vec(shape, data)?;
        Self::new(
            in_channels,
            out_channels,
            kernel,
            stride,
            weights,
            vec![T::zero(); out_channels],
        )
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4, NnError> {
        if input.c != self.in_channels {
            return Err(NnError::shape(
                "conv2d input channels",
                self.in_channels.to_string(),
                input.c.to_string(),
            ));
        }
        let dims = output_dim(input.h, self.kernel, self.stride).zip(output_dim(input.w, self.kernel, self.stride));
        match dims {
            Some((h, w)) => Ok(Shape4::new(input.n, self.out_channels, h, w)),
            None => Err(NnError::shape(
                "conv2d spatial",
                format!("h, w >= kernel {}", self.kernel),
                format!("h={}, w={}", input.h, input.w),
            )),
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unrolls one batch item `(c, h, w)` into a `(c·k·k) × (ho·wo)` matrix.
fn im2col<T: Scalar>(item: &[T], in_shape: Shape4, k: usize, s: usize, ho: usize, wo: usize, col: &mut [T]) {
    let positions = ho * wo;
    for ci in 0..in_shape.c {
        let plane = &item[ci * in_shape.h * in_shape.w..(ci + 1) * in_shape.h * in_shape.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * positions..(row + 1) * positions];
                for oy in 0..ho {
                    let src = &plane[(oy * s + ki) * in_shape.w..];
                    for ox in 0..wo {
                        dst[oy * wo + ox] = src[ox * s + kj];
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto an input-shaped item.
fn col2im<T: Scalar>(col: &[T], in_shape: Shape4, k: usize, s: usize, ho: usize, wo: usize, item: &mut [T]) {
    let positions = ho * wo;
    for ci in 0..in_shape.c {
        let plane = &mut item[ci * in_shape.h * in_shape.w..(ci + 1) * in_shape.h * in_shape.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * positions..(row + 1) * positions];
                for oy in 0..ho {
                    let base = (oy * s + ki) * in_shape.w + kj;
                    for ox in 0..wo {
                        plane[base + ox * s] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(input: &Tensor4<T>, layer: &Conv2d<T>) -> Result<Tensor4<T>, NnError> {
    let in_shape = input.shape();
    let out_shape = layer.output_shape(in_shape)?;
    let positions = out_shape.h * out_shape.w;
    let patch = layer.patch_len();
    let mut out = Tensor4::zeros(out_shape)?;
    let mut col = vec![T::zero(); patch * positions];
    let out_item = out_shape.item_len();
    for n in 0..in_shape.n {
        im2col(
            input.item(n),
            in_shape,
            layer.kernel,
            layer.stride,
            out_shape.h,
            out_shape.w,
            &mut col,
        );
        let dst = &mut out.data_mut()[n * out_item..(n + 1) * out_item];
        for (o, b) in layer.bias.iter().enumerate() {
            dst[o * positions..(o + 1) * positions].fill(*b);
        }
        matmul(
            layer.out_channels,
            patch,
            positions,
            layer.weights.data(),
            false,
            &col,
            false,
            dst,
            T::one(),
        );
    }
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    layer: &Conv2d<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>, NnError> {
    let in_shape = input.shape();
    let out_shape = layer.output_shape(in_shape)?;
    if grad_out.shape() != out_shape {
        return Err(NnError::shape(
            "conv2d grad_out",
            out_shape.to_string(),
            grad_out.shape().to_string(),
        ));
    }
    let positions = out_shape.h * out_shape.w;
    let patch = layer.patch_len();
    let mut grad_input = Tensor4::zeros(in_shape)?;
    let mut grad_w = Tensor4::zeros(layer.weights.shape())?;
    let mut grad_b = vec![T::zero(); layer.out_channels];
    let mut col = vec![T::zero(); patch * positions];
    let mut grad_col = vec![T::zero(); patch * positions];
    let in_item = in_shape.item_len();
    for n in 0..in_shape.n {
        let g = grad_out.item(n);
        for (o, gb) in grad_b.iter_mut().enumerate() {
            *gb += g[o * positions..(o + 1) * positions].iter().copied().sum::<T>();
        }
        im2col(
            input.item(n),
            in_shape,
            layer.kernel,
            layer.stride,
            out_shape.h,
            out_shape.w,
            &mut col,
        );
        // dW += dY · colᵀ
        matmul(
            layer.out_channels,
            positions,
            patch,
            g,
            false,
            &col,
            true,
            grad_w.data_mut(),
            T::one(),
        );
        // dcol = Wᵀ · dY
        matmul(
            patch,
            layer.out_channels,
            positions,
            layer.weights.data(),
            true,
            g,
            false,
            &mut grad_col,
            T::zero(),
        );
        let dst = &mut grad_input.data_mut()[n * in_item..(n + 1) * in_item];
        col2im(
            &grad_col,
            in_shape,
            layer.kernel,
            layer.stride,
            out_shape.h,
            out_shape.w,
            dst,
        );
    }
    Ok(ConvGrads {
        input: grad_input,
        weights: grad_w,
        bias: grad_b,
    })
}
