//! L2-regularized binary logistic regression solved by damped Newton.
//!
//! Objective (sum convention, `λ = 1/C` in scikit-learn terms):
//! `Σ_i log(1 + exp(-s_i z_i)) + (λ/2)‖w‖²`, with `z_i = w·x_i + b` and
//! `s_i = ±1`. The intercept, when fitted, is not penalized.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const GRADIENT_TOLERANCE: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticFit {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) >= 0.0
    }

    pub fn accuracy(&self, xs: &[&[f64]], ys: &[bool]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs.iter().zip(ys).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / xs.len() as f64
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fits the model on rows `xs` with boolean targets `ys`.
pub fn fit_logistic(xs: &[&[f64]], ys: &[bool], lambda: f64, intercept: bool) -> Result<LogisticFit> {
    let n = xs.len();
    if n == 0 || n != ys.len() {
        return Err(Error::InvalidInput(format!("{n} rows for {} targets", ys.len())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("negative regularization {lambda}")));
    }
    let d = xs[0].len();
    if xs.iter().any(|x| x.len() != d) {
        return Err(Error::Shape("ragged feature rows".into()));
    }
    let p = d + intercept as usize;
    let design = DMatrix::from_fn(n, p, |i, j| if j < d { xs[i][j] } else { 1.0 });
    let signs = DVector::from_iterator(n, ys.iter().map(|&y| if y { 1.0 } else { -1.0 }));
    let targets = DVector::from_iterator(n, ys.iter().map(|&y| y as u8 as f64));
    let mut penalty = DVector::from_element(p, lambda);
    if intercept {
        penalty[d] = 0.0;
    }

    let objective = |theta: &DVector<f64>| -> f64 {
        let z = &design * theta;
        let data: f64 = z.iter().zip(signs.iter()).map(|(&zi, &si)| softplus(-si * zi)).sum();
        let reg: f64 = theta.iter().zip(penalty.iter()).map(|(t, l)| 0.5 * l * t * t).sum();
        data + reg
    };

    let mut theta = DVector::<f64>::zeros(p);
    let mut f = objective(&theta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        let z = &design * &theta;
        let probs = z.map(sigmoid);
        let mut grad = design.tr_mul(&(&probs - &targets));
        grad += penalty.component_mul(&theta);
        if grad.amax() / n as f64 <= GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        iterations += 1;
        let s = probs.map(|q| (q * (1.0 - q)).max(1e-12));
        let weighted = DMatrix::from_fn(n, p, |i, j| design[(i, j)] * s[i]);
        let mut hess = design.tr_mul(&weighted);
        for j in 0..p {
            hess[(j, j)] += penalty[j] + 1e-10;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                for j in 0..p {
                    hess[(j, j)] += 1e-6;
                }
                hess.cholesky()
                    .ok_or_else(|| Error::NonFinite("logistic Hessian is not positive definite".into()))?
                    .solve(&grad)
            }
        };
        let slope = -grad.dot(&step);
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-12 {
            let candidate = &theta - &step * alpha;
            let fc = objective(&candidate);
            if fc <= f + 1e-4 * alpha * slope {
                theta = candidate;
                f = fc;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // No further decrease is representable.
            converged = true;
            break;
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logistic regression diverged".into()));
    }
    let weights = theta.iter().take(d).copied().collect();
    let bias = if intercept { theta[d] } else { 0.0 };
    Ok(LogisticFit {
        weights,
        bias,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_separable_direction() {
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let t = i as f64 / 39.0 * 4.0 - 2.0;
                vec![t, 0.3 * (i % 5) as f64]
            })
            .collect();
        let ys: Vec<bool> = xs.iter().map(|x| x[0] > 0.0).collect();
        let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let fit = fit_logistic(&rows, &ys, 1e-3, true).unwrap();
        assert_eq!(fit.accuracy(&rows, &ys), 1.0);
        assert!(fit.converged);
    }

    #[test]
    fn gradient_vanishes_at_solution() {
        let xs: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos()]).collect();
        let ys: Vec<bool> = (0..30).map(|i| (i * 7) % 3 == 0).collect();
        let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let lambda = 0.5;
        let fit = fit_logistic(&rows, &ys, lambda, false).unwrap();
        for j in 0..2 {
            let mut g = lambda * fit.weights[j];
            for (x, &y) in xs.iter().zip(&ys) {
                g += (sigmoid(fit.decision(x)) - y as u8 as f64) * x[j];
            }
            assert!(g.abs() < 1e-6 * 30.0);
        }
    }
}
