//! Glorot initialization, Adam, and the L2 penalty on transformation
//! matrices.

use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Uniform samples in `[−s, s]` with `s = √(6 / (rows + cols))`.
pub fn glorot_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "glorot_init needs positive dims, got {rows}x{cols}"
        )));
    }
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-s..=s)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Adam with bias correction over a fixed list of parameter matrices.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in place.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for k in 0..params.len() {
            if params[k].shape() != self.m[k].shape() || grads[k].shape() != self.m[k].shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: self.m[k].shape(),
                    rhs: grads[k].shape(),
                });
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for k in 0..params.len() {
            let p = params[k].data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, &g) in grads[k].data().iter().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `weight · Σ ‖W‖²_F` over the given matrices.
pub fn l2_penalty(tape: &mut Tape, params: &[Tensor], weight: f64) -> Result<Tensor> {
    if !(weight >= 0.0) {
        return Err(Error::invalid(format!(
            "l2 weight must be nonnegative, got {weight}"
        )));
    }
    let mut total = tape.constant(Matrix::zeros(1, 1));
    for &p in params {
        let sq = tape.squared_norm(p);
        total = tape.add(total, sq)?;
    }
    Ok(tape.scale(total, weight))
}
