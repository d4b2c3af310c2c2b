//! Linear-probe solvers: L2-regularized logistic regression by Newton's
//! method with conjugate-gradient inner solves, and ridge regression by
//! Cholesky factorization. Intercepts are unpenalized in both.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stable log(1 + e^z).
fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub struct LogisticFit {
    /// d feature weights followed by the intercept.
    pub weights: Vec<f64>,
    pub converged: bool,
    pub final_grad_norm: f64,
    pub iterations: usize,
}

impl LogisticFit {
    pub fn decision(&self, row: &[f64]) -> f64 {
        let d = self.weights.len() - 1;
        let mut z = self.weights[d];
        for (w, x) in self.weights[..d].iter().zip(row) {
            z += w * x;
        }
        z
    }

    pub fn prob(&self, row: &[f64]) -> f64 {
        sigmoid(self.decision(row))
    }
}

/// Objective, gradient, and Hessian-vector products of the regularized
/// negative log-likelihood. `w` has the intercept in its last slot; the
/// penalty skips it.
fn logistic_objective(x: &Tensor<f64>, y: &[f64], w: &[f64], l2: f64) -> f64 {
    let d = x.cols;
    let mut obj = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let mut z = w[d];
        for (j, &xij) in x.row(i).iter().enumerate() {
            z += w[j] * xij;
        }
        obj += log1p_exp(z) - yi * z;
    }
    let pen: f64 = w[..d].iter().map(|v| v * v).sum();
    obj + 0.5 * l2 * pen
}

fn logistic_grad(x: &Tensor<f64>, y: &[f64], w: &[f64], l2: f64) -> Vec<f64> {
    let d = x.cols;
    let mut g = vec![0.0; d + 1];
    for (i, &yi) in y.iter().enumerate() {
        let mut z = w[d];
        for (j, &xij) in x.row(i).iter().enumerate() {
            z += w[j] * xij;
        }
        let r = sigmoid(z) - yi;
        for (j, &xij) in x.row(i).iter().enumerate() {
            g[j] += r * xij;
        }
        g[d] += r;
    }
    for j in 0..d {
        g[j] += l2 * w[j];
    }
    g
}

/// H v where H = X^T S X + l2 I (intercept column included, unpenalized).
fn logistic_hess_vec(x: &Tensor<f64>, s: &[f64], v: &[f64], l2: f64) -> Vec<f64> {
    let d = x.cols;
    let mut hv = vec![0.0; d + 1];
    for (i, &si) in s.iter().enumerate() {
        let mut xv = v[d];
        for (j, &xij) in x.row(i).iter().enumerate() {
            xv += v[j] * xij;
        }
        let sxv = si * xv;
        for (j, &xij) in x.row(i).iter().enumerate() {
            hv[j] += sxv * xij;
        }
        hv[d] += sxv;
    }
    for j in 0..d {
        hv[j] += l2 * v[j];
    }
    hv
}

/// Conjugate gradient on H z = -g with a forcing-sequence tolerance.
fn newton_cg_direction(x: &Tensor<f64>, s: &[f64], g: &[f64], l2: f64) -> Vec<f64> {
    let n = g.len();
    let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = (gnorm * gnorm.sqrt().min(0.5)).max(1e-14);
    let mut z = vec![0.0; n];
    let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut p = r.clone();
    let mut rs: f64 = r.iter().map(|v| v * v).sum();
    for _ in 0..2 * n {
        if rs.sqrt() < tol {
            break;
        }
        let hp = logistic_hess_vec(x, s, &p, l2);
        let php: f64 = p.iter().zip(&hp).map(|(a, b)| a * b).sum();
        if php <= 0.0 {
            break;
        }
        let alpha = rs / php;
        for i in 0..n {
            z[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }
    z
}

/// Fit binary logistic regression (targets 0/1). Convergence is the
/// infinity norm of the gradient; non-convergence returns the last iterate
/// flagged rather than failing.
pub fn logistic_newton_cg(
    x: &Tensor<f64>,
    y: &[f64],
    l2: f64,
    max_iter: usize,
    tol: f64,
) -> Result<LogisticFit> {
    if x.rows != y.len() || x.rows == 0 {
        return Err(Error::DegenerateInput("misaligned logistic inputs".into()));
    }
    if !x.all_finite() {
        return Err(Error::Numeric("non-finite features".into()));
    }
    let d = x.cols;
    let mut w = vec![0.0; d + 1];
    let mut iterations = 0;
    let mut gnorm_inf = f64::INFINITY;
    for it in 0..max_iter {
        iterations = it + 1;
        let g = logistic_grad(x, y, &w, l2);
        gnorm_inf = g.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if gnorm_inf < tol {
            iterations = it;
            break;
        }
        let s: Vec<f64> = (0..x.rows)
            .map(|i| {
                let mut z = w[d];
                for (j, &xij) in x.row(i).iter().enumerate() {
                    z += w[j] * xij;
                }
                let p = sigmoid(z);
                (p * (1.0 - p)).max(1e-10)
            })
            .collect();
        let dir = newton_cg_direction(x, &s, &g, l2);
        // Backtracking line search on the objective.
        let f0 = logistic_objective(x, y, &w, l2);
        let slope: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand: Vec<f64> = w.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
            let f = logistic_objective(x, y, &cand, l2);
            if f <= f0 + 1e-4 * step * slope {
                w = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // no descent possible at machine precision
        }
    }
    let g = logistic_grad(x, y, &w, l2);
    let final_grad_norm = g.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    Ok(LogisticFit {
        weights: w,
        converged: final_grad_norm < tol,
        final_grad_norm: final_grad_norm.max(gnorm_inf.min(final_grad_norm)),
        iterations,
    })
}

/// In-place Cholesky factorization (lower triangle). Errors name the
/// failing pivot.
pub fn cholesky(a: &mut Vec<Vec<f64>>) -> Result<()> {
    let n = a.len();
    for j in 0..n {
        for k in 0..j {
            let ajk = a[j][k];
            for i in j..n {
                a[i][j] -= a[i][k] * ajk;
            }
        }
        let pivot = a[j][j];
        if pivot <= 0.0 || !pivot.is_finite() {
            return Err(Error::Numeric(format!(
                "system not positive definite at pivot {j} (value {pivot:.3e})"
            )));
        }
        let root = pivot.sqrt();
        for i in j..n {
            a[i][j] /= root;
        }
    }
    Ok(())
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = b[i];
        for j in 0..i {
            acc -= l[i][j] * y[j];
        }
        y[i] = acc / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = y[i];
        for j in i + 1..n {
            acc -= l[j][i] * x[j];
        }
        x[i] = acc / l[i][i];
    }
    x
}

/// Closed-form ridge regression: solve (X~^T X~ + diag(l2, ..., l2, 0)) w =
/// X~^T y with X~ the intercept-augmented design. Returns d feature weights
/// followed by the intercept.
pub fn ridge_cholesky(x: &Tensor<f64>, y: &[f64], l2: f64) -> Result<Vec<f64>> {
    if x.rows != y.len() || x.rows == 0 {
        return Err(Error::DegenerateInput("misaligned ridge inputs".into()));
    }
    let d = x.cols;
    let n = d + 1;
    let mut gram = vec![vec![0.0f64; n]; n];
    let mut rhs = vec![0.0f64; n];
    for i in 0..x.rows {
        let row = x.row(i);
        for a in 0..d {
            for b in a..d {
                gram[b][a] += row[a] * row[b];
            }
            gram[d][a] += row[a];
            rhs[a] += row[a] * y[i];
        }
        gram[d][d] += 1.0;
        rhs[d] += y[i];
    }
    for a in 0..d {
        gram[a][a] += l2;
        for b in a + 1..d {
            gram[a][b] = gram[b][a];
        }
        gram[a][d] = gram[d][a];
    }
    cholesky(&mut gram)?;
    Ok(cholesky_solve(&gram, &rhs))
}

pub fn ridge_predict(weights: &[f64], row: &[f64]) -> f64 {
    let d = weights.len() - 1;
    let mut z = weights[d];
    for (w, x) in weights[..d].iter().zip(row) {
        z += w * x;
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn logistic_separable_two_points() {
        let x = Tensor::from_vec(2, 1, vec![-1.0, 1.0]);
        let y = vec![0.0, 1.0];
        let fit = logistic_newton_cg(&x, &y, 1.0, 100, 1e-6).unwrap();
        assert!(fit.converged);
        assert!(fit.weights.iter().all(|w| w.is_finite()));
        assert!(fit.prob(&[-1.0]) < 0.5);
        assert!(fit.prob(&[1.0]) > 0.5);
    }

    #[test]
    fn logistic_single_class_intercept_only() {
        // Zero features: only the intercept can move, toward p = class rate.
        let x = Tensor::zeros(10, 2);
        let y = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let fit = logistic_newton_cg(&x, &y, 1.0, 100, 1e-8).unwrap();
        assert!((fit.prob(&[0.0, 0.0]) - 0.7).abs() < 1e-6);
        assert!(fit.weights[0].abs() < 1e-9 && fit.weights[1].abs() < 1e-9);

        // All one class: probability runs to the class rate of 1.
        let y_all = vec![1.0; 10];
        let fit = logistic_newton_cg(&x, &y_all, 1.0, 60, 1e-6).unwrap();
        assert!(fit.prob(&[0.0, 0.0]) > 0.999);
    }

    /// Plain gradient descent with backtracking; the independent oracle.
    fn gd_oracle(x: &Tensor<f64>, y: &[f64], l2: f64) -> f64 {
        let d = x.cols;
        let mut w = vec![0.0; d + 1];
        let mut step = 1.0;
        for _ in 0..200_000 {
            let g = logistic_grad(x, y, &w, l2);
            let gn: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gn < 1e-10 {
                break;
            }
            let f0 = logistic_objective(x, y, &w, l2);
            loop {
                let cand: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a - step * b).collect();
                if logistic_objective(x, y, &cand, l2) < f0 {
                    w = cand;
                    step *= 1.3;
                    break;
                }
                step *= 0.5;
                if step < 1e-16 {
                    return logistic_objective(x, y, &w, l2);
                }
            }
        }
        logistic_objective(x, y, &w, l2)
    }

    #[test]
    fn logistic_matches_gradient_descent_oracle() {
        let mut rng = Rng::new(9);
        for trial in 0..5 {
            let x = Tensor::from_fn(50, 5, |_, _| rng.normal());
            let true_w: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..50)
                .map(|i| {
                    let z: f64 = x.row(i).iter().zip(&true_w).map(|(a, b)| a * b).sum();
                    f64::from(z + 0.3 * rng.normal() > 0.0)
                })
                .collect();
            let fit = logistic_newton_cg(&x, &y, 0.5, 100, 1e-8).unwrap();
            let f_ncg = logistic_objective(&x, &y, &fit.weights, 0.5);
            let f_gd = gd_oracle(&x, &y, 0.5);
            assert!(
                (f_ncg - f_gd).abs() < 1e-6,
                "trial {trial}: {f_ncg} vs {f_gd}"
            );
        }
    }

    #[test]
    fn ridge_exact_line() {
        let x = Tensor::from_vec(2, 1, vec![1.0, 2.0]);
        let w = ridge_cholesky(&x, &[1.0, 2.0], 0.0).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!(w[1].abs() < 1e-12);
    }

    #[test]
    fn ridge_huge_penalty_recovers_mean() {
        let mut rng = Rng::new(3);
        let x = Tensor::from_fn(30, 2, |_, _| rng.normal());
        let y: Vec<f64> = (0..30).map(|_| 2.0 + rng.normal()).collect();
        let mean = y.iter().sum::<f64>() / 30.0;
        let w = ridge_cholesky(&x, &y, 1e9).unwrap();
        assert!(w[0].abs() < 1e-3 && w[1].abs() < 1e-3);
        assert!((w[2] - mean).abs() < 1e-3);
    }

    /// Explicit normal-equation solve via Gauss-Jordan inversion.
    fn normal_equation_oracle(x: &Tensor<f64>, y: &[f64], l2: f64) -> Vec<f64> {
        let d = x.cols;
        let n = d + 1;
        let mut a = vec![vec![0.0f64; n]; n];
        let mut b = vec![0.0f64; n];
        for i in 0..x.rows {
            let mut row = x.row(i).to_vec();
            row.push(1.0);
            for p in 0..n {
                for q in 0..n {
                    a[p][q] += row[p] * row[q];
                }
                b[p] += row[p] * y[i];
            }
        }
        for p in 0..d {
            a[p][p] += l2;
        }
        // Invert a by Gauss-Jordan.
        let mut inv = vec![vec![0.0f64; n]; n];
        for (i, row) in inv.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&p, &q| a[p][col].abs().partial_cmp(&a[q][col].abs()).unwrap())
                .unwrap();
            a.swap(col, piv);
            inv.swap(col, piv);
            let scale = a[col][col];
            for q in 0..n {
                a[col][q] /= scale;
                inv[col][q] /= scale;
            }
            for p in 0..n {
                if p != col {
                    let f = a[p][col];
                    for q in 0..n {
                        a[p][q] -= f * a[col][q];
                        inv[p][q] -= f * inv[col][q];
                    }
                }
            }
        }
        (0..n)
            .map(|p| (0..n).map(|q| inv[p][q] * b[q]).sum())
            .collect()
    }

    #[test]
    fn ridge_matches_normal_equation_oracle() {
        let mut rng = Rng::new(5);
        for _ in 0..5 {
            let x = Tensor::from_fn(40, 6, |_, _| rng.normal());
            let y: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
            let fast = ridge_cholesky(&x, &y, 0.37).unwrap();
            let slow = normal_equation_oracle(&x, &y, 0.37);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite_matrix_naming_pivot() {
        let mut a = vec![vec![1.0, 0.0], vec![0.0, -2.0]];
        let err = cholesky(&mut a).unwrap_err();
        assert!(err.to_string().contains("pivot 1"), "{err}");
    }
}
