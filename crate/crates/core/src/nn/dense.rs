use rand::Rng;

use super::scalar::matmul;
use super::{Matrix, NnError, Scalar};

/// Fully connected layer, `out = x·Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub in_units: usize,
    pub out_units: usize,
    /// `out_units × in_units`
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<T> {
    pub input: Matrix<T>,
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(weights: Matrix<T>, bias: Vec<T>) -> Result<Self, NnError> {
        if bias.len() != weights.rows() {
            return Err(NnError::shape(
                "dense bias",
                format!("{} elements", weights.rows()),
                format!("{} elements", bias.len()),
            ));
        }
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(NnError::InvalidHyperparameter("dense layer with zero units".into()));
        }
        Ok(Self {
            in_units: weights.cols(),
            out_units: weights.rows(),
            weights,
            bias,
        })
    }

    /// Fan-in scaled uniform weights in `±sqrt(6 / in_units)`, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(in_units: usize, out_units: usize, rng: &mut R) -> Result<Self, NnError> {
        let bound = (6.0 / in_units.max(1) as f64).sqrt();
        let data = (0..in_units * out_units)
            .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            .collect();
        Self::new(Matrix::from_vec(out_units, in_units, data)?, vec![T::zero(); out_units])
    }

    fn check_input(&self, cols: usize) -> Result<(), NnError> {
        if cols != self.in_units {
            return Err(NnError::shape(
                "dense input columns",
                self.in_units.to_string(),
                cols.to_string(),
            ));
        }
        Ok(())
    }
}

pub fn dense_forward<T: Scalar>(input: &Matrix<T>, layer: &Dense<T>) -> Result<Matrix<T>, NnError> {
    layer.check_input(input.cols())?;
    let n = input.rows();
    let mut out = Matrix::zeros(n, layer.out_units);
    for r in 0..n {
        out.data_mut()[r * layer.out_units..(r + 1) * layer.out_units].copy_from_slice(&layer.bias);
    }
    matmul(
        n,
        layer.in_units,
        layer.out_units,
        input.data(),
        false,
        layer.weights.data(),
        true,
        out.data_mut(),
        T::one(),
    );
    Ok(out)
}

pub fn dense_backward<T: Scalar>(
    input: &Matrix<T>,
    layer: &Dense<T>,
    grad_out: &Matrix<T>,
) -> Result<DenseGrads<T>, NnError> {
    layer.check_input(input.cols())?;
    if grad_out.rows() != input.rows() || grad_out.cols() != layer.out_units {
        return Err(NnError::shape(
            "dense grad_out",
            format!("{}x{}", input.rows(), layer.out_units),
            format!("{}x{}", grad_out.rows(), grad_out.cols()),
        ));
    }
    let n = input.rows();
    let mut grad_w = Matrix::zeros(layer.out_units, layer.in_units);
    matmul(
        layer.out_units,
        n,
        layer.in_units,
        grad_out.data(),
        true,
        input.data(),
        false,
        grad_w.data_mut(),
        T::zero(),
    );
    let mut grad_in = Matrix::zeros(n, layer.in_units);
    matmul(
        n,
        layer.out_units,
        layer.in_units,
        grad_out.data(),
        false,
        layer.weights.data(),
        false,
        grad_in.data_mut(),
        T::zero(),
    );
    let mut grad_b = vec![T::zero(); layer.out_units];
    for r in 0..n {
        for (gb, g) in grad_b.iter_mut().zip(grad_out.row(r)) {
            *gb += *g;
        }
    }
    Ok(DenseGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b,
    })
}
