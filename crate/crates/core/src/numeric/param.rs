//! Trainable parameters and linear layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::matrix::Matrix;
use crate::numeric::tape::{Tape, Var};

/// A named trainable matrix with an additively accumulated gradient.
///
/// The gradient always has the same shape as the value; it is zero
/// after [`Parameter::zero_grad`] and each backward pass adds into it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    /// Uniform fan-in initialization: entries in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform_fan_in(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (rows as f64).sqrt();
        let value = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound));
        Parameter::new(name, value)
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Parameter::new(name, Matrix::zeros(rows, cols))
    }

    pub fn zero_grad(&mut self) {
        self.grad = Matrix::zeros(self.value.rows(), self.value.cols());
    }

    pub fn accumulate_grad(&mut self, delta: &Matrix) {
        self.grad.add_assign(delta);
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }
}

/// Linear map stored in right-multiplication convention:
/// `y = x W (+ bias)`, with `W` of shape `in_dim x out_dim`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Linear {
    pub fn new(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: Parameter::uniform_fan_in(format!("{name}.weight"), in_dim, out_dim, rng),
            bias: bias.then(|| Parameter::zeros(format!("{name}.bias"), 1, out_dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    /// Applies the layer on the tape; `bound` must come from
    /// [`Linear::bind`] on the same tape.
    pub fn apply(&self, tape: &Tape, bound: &BoundLinear, x: Var) -> Var {
        let y = tape.matmul(x, bound.weight);
        match bound.bias {
            Some(b) => tape.add_bias_row(y, b),
            None => y,
        }
    }

    /// Registers the layer's parameters as tape leaves.
    pub fn bind(&self, tape: &Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.value.clone()),
            bias: self.bias.as_ref().map(|b| tape.leaf(b.value.clone())),
        }
    }

    /// Pulls gradients accumulated on the tape back into the parameters.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &BoundLinear) {
        self.weight.accumulate_grad(&tape.grad(bound.weight));
        if let (Some(b), Some(bv)) = (self.bias.as_mut(), bound.bias) {
            b.accumulate_grad(&tape.grad(bv));
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    /// Value-level forward for inference paths.
    pub fn forward_value(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight.value).map_err(|_| {
            Error::dimension(
                "linear",
                format!(
                    "input is {}x{}, weight is {}x{}",
                    x.rows(),
                    x.cols(),
                    self.weight.value.rows(),
                    self.weight.value.cols()
                ),
            )
        })?;
        if let Some(b) = &self.bias {
            for i in 0..y.rows() {
                let row = y.row_mut(i);
                for (v, bv) in row.iter_mut().zip(b.value.row(0)) {
                    *v += bv;
                }
            }
        }
        Ok(y)
    }
}

/// Tape handles for one bound [`Linear`].
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Option<Var>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn fan_in_bound_respected() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let p = Parameter::uniform_fan_in("w", 16, 8, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(p.value.as_slice().iter().all(|v| v.abs() <= bound));
        assert_eq!(p.grad.shape(), (16, 8));
        assert!(p.grad.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_value_and_tape_agree() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let layer = Linear::new("l", 3, 2, true, &mut rng);
        let x = Matrix::from_fn(4, 3, |i, j| (i + j) as f64 * 0.25 - 0.5);

        let by_value = layer.forward_value(&x).unwrap();

        let tape = Tape::new();
        let bound = layer.bind(&tape);
        let xv = tape.constant(x);
        let y = layer.apply(&tape, &bound, xv);
        assert!(by_value.max_abs_diff(&tape.value(y)) < 1e-15);
    }
}
