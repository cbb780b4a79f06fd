//! Binary logistic-regression probe for linear separability of embeddings.

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const RIDGE: f64 = 1e-8;
const MAX_ITERS: usize = 200;

/// A fitted linear classifier on standardized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Bias first, then one weight per input column.
    weights: Vec<f64>,
}

impl LogisticProbe {
    /// Damped Newton on the ridge-penalized log-loss. The tiny ridge keeps the
    /// weights finite on separable data.
    pub fn fit(x: &Matrix, y: &[bool]) -> Result<Self> {
        let (n, d) = x.shape();
        if n != y.len() || n == 0 {
            return Err(Error::Shape {
                op: "probe",
                lhs: x.shape(),
                rhs: (y.len(), 1),
            });
        }
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for c in 0..d {
            mean[c] = (0..n).map(|i| x.get(i, c)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x.get(i, c) - mean[c]).powi(2)).sum::<f64>() / n as f64;
            scale[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                std::iter::once(1.0)
                    .chain((0..d).map(|c| (x.get(i, c) - mean[c]) / scale[c]))
                    .collect()
            })
            .collect();
        let targets: Vec<f64> = y.iter().map(|&b| f64::from(u8::from(b))).collect();
        let objective = |w: &[f64]| {
            let mut total = 0.5 * RIDGE * w.iter().map(|v| v * v).sum::<f64>();
            for (r, &t) in rows.iter().zip(&targets) {
                let z = dot(r, w);
                // log(1 + e^z) − t·z, written to stay finite
                total += z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z;
            }
            total
        };

        let p = d + 1;
        let mut w = vec![0.0; p];
        let mut current = objective(&w);
        for _ in 0..MAX_ITERS {
            let mut grad: Vec<f64> = w.iter().map(|v| RIDGE * v).collect();
            let mut hess = vec![vec![0.0; p]; p];
            for (k, row) in hess.iter_mut().enumerate() {
                row[k] = RIDGE;
            }
            for (r, &t) in rows.iter().zip(&targets) {
                let s = sigmoid(dot(r, &w));
                let curv = s * (1.0 - s);
                for a in 0..p {
                    grad[a] += (s - t) * r[a];
                    for b in 0..p {
                        hess[a][b] += curv * r[a] * r[b];
                    }
                }
            }
            let step = solve(hess, grad)?;
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha > 1e-10 {
                let trial: Vec<f64> = w.iter().zip(&step).map(|(v, s)| v - alpha * s).collect();
                let value = objective(&trial);
                if value < current {
                    let gain = current - value;
                    w = trial;
                    current = value;
                    accepted = gain > 1e-14 * current.abs().max(1e-300);
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(Self {
            mean,
            scale,
            weights: w,
        })
    }

    fn score(&self, x: &[f64]) -> f64 {
        self.weights[0]
            + x.iter()
                .enumerate()
                .map(|(c, v)| self.weights[c + 1] * (v - self.mean[c]) / self.scale[c])
                .sum::<f64>()
    }

    pub fn predict(&self, x: &Matrix) -> Vec<bool> {
        (0..x.rows()).map(|i| self.score(x.row(i)) > 0.0).collect()
    }

    pub fn accuracy(&self, x: &Matrix, y: &[bool]) -> f64 {
        let hits = self
            .predict(x)
            .iter()
            .zip(y)
            .filter(|(p, t)| p == t)
            .count();
        hits as f64 / y.len().max(1) as f64
    }
}

/// Fits on all rows and reports training accuracy.
pub fn probe_accuracy(x: &Matrix, y: &[bool]) -> Result<f64> {
    Ok(LogisticProbe::fit(x, y)?.accuracy(x, y))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::invalid("singular system in probe fit"));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let tail: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - tail) / a[r][r];
    }
    Ok(x)
}
