use super::{output_dim, NnError, Scalar, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub size: usize,
    pub stride: usize,
}

/// Output of a max-pool forward pass together with the flat input index
/// each output element was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolOutput<T> {
    pub output: Tensor4<T>,
    pub argmax: Vec<usize>,
    pub input_shape: Shape4,
}

impl MaxPool {
    pub fn new(size: usize, stride: usize) -> Result<Self, NnError> {
        if size == 0 || stride == 0 {
            return Err(NnError::InvalidHyperparameter(format!(
                "pool size and stride must be >= 1 (size={size}, stride={stride})"
            )));
        }
        Ok(Self { size, stride })
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4, NnError> {
        match output_dim(input.h, self.size, self.stride).zip(output_dim(input.w, self.size, self.stride)) {
            Some((h, w)) => Ok(Shape4::new(input.n, input.c, h, w)),
            None => Err(NnError::shape(
                "maxpool spatial",
                format!("h, w >= size {}", self.size),
                format!("h={}, w={}", input.h, input.w),
            )),
        }
    }
}

/// Ties resolve to the first maximal element in row-major window order.
pub fn maxpool_forward<T: Scalar>(input: &Tensor4<T>, layer: &MaxPool) -> Result<PoolOutput<T>, NnError> {
    let s = input.shape();
    let os = layer.output_shape(s)?;
    let mut out = Vec::with_capacity(os.len());
    let mut argmax = Vec::with_capacity(os.len());
    let x = input.data();
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = (n * s.c + c) * s.h * s.w;
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best_idx = plane + oy * layer.stride * s.w + ox * layer.stride;
                    let mut best = x[best_idx];
                    for ki in 0..layer.size {
                        let row = plane + (oy * layer.stride + ki) * s.w + ox * layer.stride;
                        for kj in 0..layer.size {
                            let v = x[row + kj];
                            if v > best {
                                best = v;
                                best_idx = row + kj;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor4::from_vec(os, out)?,
        argmax,
        input_shape: s,
    })
}

/// Routes each upstream gradient element to the input position it was pooled from.
pub fn maxpool_backward<T: Scalar>(
    argmax: &[usize],
    input_shape: Shape4,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>, NnError> {
    if grad_out.data().len() != argmax.len() {
        return Err(NnError::shape(
            "maxpool grad_out",
            format!("{} elements", argmax.len()),
            format!("{} elements ({})", grad_out.data().len(), grad_out.shape()),
        ));
    }
    let mut grad = Tensor4::zeros(input_shape)?;
    let g = grad.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        if idx >= g.len() {
            return Err(NnError::shape(
                "maxpool argmax",
                format!("index < {}", g.len()),
                idx.to_string(),
            ));
        }
        g[idx] += v;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_vec(Shape4::new(shape.0, shape.1, shape.2, shape.3), data).unwrap()
    }

    #[test]
    fn constant_input_routes_to_first_window_element() {
        let x = t((1, 1, 4, 4), vec![2.0; 16]);
        let p = maxpool_forward(&x, &MaxPool::new(2, 2).unwrap()).unwrap();
        assert!(p.output.data().iter().all(|v| *v == 2.0));
        assert_eq!(p.argmax, vec![0, 2, 8, 10]);
        let g = maxpool_backward(&p.argmax, p.input_shape, &t((1, 1, 2, 2), vec![1.0; 4])).unwrap();
        let expect: Vec<f64> = (0..16)
            .map(|i| if [0, 2, 8, 10].contains(&i) { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(g.data(), &expect[..]);
    }

    #[test]
    fn two_by_two_picks_four() {
        let x = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let p = maxpool_forward(&x, &MaxPool::new(2, 2).unwrap()).unwrap();
        assert_eq!(p.output.data(), &[4.0]);
        let g = maxpool_backward(&p.argmax, p.input_shape, &t((1, 1, 1, 1), vec![0.5])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn unit_window_is_identity() {
        let x = t((2, 2, 2, 3), (0..24).map(|v| (v as f64).cos()).collect());
        let p = maxpool_forward(&x, &MaxPool::new(1, 1).unwrap()).unwrap();
        assert_eq!(p.output, x);
        let g = maxpool_backward(&p.argmax, p.input_shape, &x).unwrap();
        assert_eq!(g, x);
    }

    #[test]
    fn overlapping_windows_accumulate() {
        // 1x3 row, size 2 stride 1: both windows pick the middle element.
        let x = t((1, 1, 2, 3), vec![0.0, 9.0, 0.0, 0.0, 0.0, 0.0]);
        let p = maxpool_forward(&x, &MaxPool::new(2, 1).unwrap()).unwrap();
        let g = maxpool_backward(&p.argmax, p.input_shape, &t((1, 1, 1, 2), vec![1.0, 2.0])).unwrap();
        assert_eq!(g.data()[1], 3.0);
    }

    #[test]
    fn too_small_input_is_an_error() {
        let x = t((1, 1, 2, 2), vec![0.0; 4]);
        assert!(maxpool_forward(&x, &MaxPool::new(3, 1).unwrap()).is_err());
        assert!(MaxPool::new(0, 1).is_err());
    }
}
