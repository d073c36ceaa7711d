//! Multinomial logistic regression (Newton / IRLS) and shrinkage LDA.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const LOGISTIC_GRAD_TOL: f64 = 1e-8;
pub const LOGISTIC_MAX_ITER: usize = 200;

fn softmax(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

/// Class 0 is the reference class with zero coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logistic {
    /// [(n_classes - 1) x d]
    pub coef: Array2<f64>,
    pub intercept: Vec<f64>,
    pub n_iter: usize,
    pub grad_norm: f64,
}

impl Logistic {
    pub fn predict_proba_row(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let mut z = vec![0.0];
        for (r, b) in self.coef.rows().into_iter().zip(&self.intercept) {
            z.push(r.dot(&x) + b);
        }
        softmax(&mut z);
        z
    }
}

/// Mean negative log-likelihood plus (l2 / 2) * |W|^2 on the non-intercept weights.
fn objective(x: ArrayView2<f64>, y: &[usize], theta: &DVector<f64>, k1: usize, l2: f64) -> f64 {
    let (n, d) = x.dim();
    let p1 = d + 1;
    let mut nll = 0.0;
    for i in 0..n {
        let z = logits(x.row(i), theta, k1);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        nll += lse - z[y[i]];
    }
    let mut reg = 0.0;
    for c in 0..k1 {
        for j in 0..d {
            reg += theta[c * p1 + j].powi(2);
        }
    }
    nll / n as f64 + 0.5 * l2 * reg
}

fn logits(x: ArrayView1<f64>, theta: &DVector<f64>, k1: usize) -> Vec<f64> {
    let d = x.len();
    let p1 = d + 1;
    let mut z = vec![0.0; k1 + 1];
    for c in 0..k1 {
        let off = c * p1;
        let mut s = theta[off + d];
        for j in 0..d {
            s += theta[off + j] * x[j];
        }
        z[c + 1] = s;
    }
    z
}

pub fn fit_logistic(x: ArrayView2<f64>, y: &[usize], n_classes: usize, l2: f64) -> Result<Logistic> {
    let (n, d) = x.dim();
    let k1 = n_classes - 1;
    let p1 = d + 1;
    let np = k1 * p1;
    let mut theta = DVector::<f64>::zeros(np);
    let mut f = objective(x, y, &theta, k1, l2);
    let mut grad_norm = f64::INFINITY;
    let mut iter = 0;
    let mut xi = vec![0.0; p1];
    while iter < LOGISTIC_MAX_ITER {
        let mut g = DVector::<f64>::zeros(np);
        let mut h = DMatrix::<f64>::zeros(np, np);
        for i in 0..n {
            for j in 0..d {
                xi[j] = x[[i, j]];
            }
            xi[d] = 1.0;
            let mut p = logits(x.row(i), &theta, k1);
            softmax(&mut p);
            for a in 0..k1 {
                let r = p[a + 1] - f64::from(y[i] == a + 1);
                for j in 0..p1 {
                    g[a * p1 + j] += r * xi[j];
                }
                for b in a..k1 {
                    let wab = p[a + 1] * (f64::from(a == b) - p[b + 1]);
                    for j in 0..p1 {
                        let s = wab * xi[j];
                        for l in 0..p1 {
                            h[(a * p1 + j, b * p1 + l)] += s * xi[l];
                        }
                    }
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        g *= inv_n;
        h *= inv_n;
        for a in 0..k1 {
            for b in a + 1..k1 {
                for j in 0..p1 {
                    for l in 0..p1 {
                        h[(b * p1 + l, a * p1 + j)] = h[(a * p1 + j, b * p1 + l)];
                    }
                }
            }
            for j in 0..d {
                let q = a * p1 + j;
                g[q] += l2 * theta[q];
                h[(q, q)] += l2;
            }
            // Keeps the intercept block invertible on separable data.
            h[(a * p1 + d, a * p1 + d)] += 1e-12;
        }
        grad_norm = g.norm();
        if grad_norm < LOGISTIC_GRAD_TOL {
            break;
        }
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => h
                .lu()
                .solve(&g)
                .ok_or_else(|| Error::Numerical("singular logistic Hessian".into()))?,
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &theta - &step * t;
            let fc = objective(x, y, &cand, k1, l2);
            if fc <= f {
                theta = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iter += 1;
        if !accepted {
            break;
        }
    }
    if grad_norm >= LOGISTIC_GRAD_TOL {
        log::warn!("logistic regression stopped at gradient norm {grad_norm:.3e} after {iter} iterations");
    }
    let mut coef = Array2::<f64>::zeros((k1, d));
    let mut intercept = vec![0.0; k1];
    for c in 0..k1 {
        for j in 0..d {
            coef[[c, j]] = theta[c * p1 + j];
        }
        intercept[c] = theta[c * p1 + d];
    }
    Ok(Logistic { coef, intercept, n_iter: iter, grad_norm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lda {
    /// Per-class linear weights Sigma^-1 mu_k, [n_classes x d].
    pub weights: Array2<f64>,
    /// -mu_k' Sigma^-1 mu_k / 2 + ln prior_k.
    pub offsets: Vec<f64>,
    pub ridge: f64,
}

impl Lda {
    pub fn predict_proba_row(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let mut z: Vec<f64> = self.weights.rows().into_iter().zip(&self.offsets).map(|(r, b)| r.dot(&x) + b).collect();
        softmax(&mut z);
        z
    }
}

pub fn fit_lda(x: ArrayView2<f64>, y: &[usize], n_classes: usize, shrinkage: f64) -> Result<Lda> {
    let (n, d) = x.dim();
    let mut means = vec![vec![0.0; d]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for i in 0..n {
        counts[y[i]] += 1;
        for j in 0..d {
            means[y[i]][j] += x[[i, j]];
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    let mut s = DMatrix::<f64>::zeros(d, d);
    let mut r = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            r[j] = x[[i, j]] - means[y[i]][j];
        }
        for a in 0..d {
            for b in a..d {
                s[(a, b)] += r[a] * r[b];
            }
        }
    }
    let dof = (n.saturating_sub(n_classes)).max(1) as f64;
    for a in 0..d {
        for b in a..d {
            s[(a, b)] /= dof;
            s[(b, a)] = s[(a, b)];
        }
    }
    let tr = s.trace();
    let ridge = if tr > 0.0 { shrinkage * tr / d as f64 } else { 1e-12 };
    for a in 0..d {
        s[(a, a)] += ridge;
    }
    let ch = s
        .cholesky()
        .ok_or_else(|| Error::Numerical("pooled covariance not positive definite".into()))?;
    let mut weights = Array2::<f64>::zeros((n_classes, d));
    let mut offsets = vec![0.0; n_classes];
    for k in 0..n_classes {
        let mu = DVector::from_vec(means[k].clone());
        let w = ch.solve(&mu);
        for j in 0..d {
            weights[[k, j]] = w[j];
        }
        offsets[k] = -0.5 * mu.dot(&w) + (counts[k] as f64 / n as f64).ln();
    }
    Ok(Lda { weights, offsets, ridge })
}
