//! Non-negative least squares in Gram form.

use nalgebra::{DMatrix, DVector};

/// Solves `min_{x ≥ 0} xᵀGx − 2xᵀb` for symmetric positive semi-definite `G`
/// with the Lawson–Hanson active-set method, warm-started from the feasible
/// point `start`.
///
/// Passive-set systems are solved by Cholesky, falling back to a
/// pseudo-inverse when `G` is singular on the passive set, so flat directions
/// resolve to the minimum-norm step instead of failing.
pub fn nnls_gram(gram: &DMatrix<f64>, b: &DVector<f64>, start: &[f64]) -> Vec<f64> {
    let k = b.len();
    debug_assert_eq!(gram.shape(), (k, k));
    debug_assert_eq!(start.len(), k);
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    let tol = 1e-14 * scale * k as f64;
    let max_entry = start.iter().cloned().fold(0.0, f64::max);
    let mut x = DVector::from_iterator(k, start.iter().map(|&v| if v > 1e-9 * max_entry { v } else { 0.0 }));
    let mut passive: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();

    for _outer in 0..(3 * k + 10) {
        // make the passive-set solution feasible
        for _inner in 0..(k + 1) {
            let z = solve_passive(gram, b, &passive);
            if (0..k).filter(|&j| passive[j]).all(|j| z[j] > 0.0) {
                x = z;
                break;
            }
            let mut step = 1.0f64;
            let mut blocking = None;
            for j in (0..k).filter(|&j| passive[j] && z[j] <= 0.0) {
                let t = x[j] / (x[j] - z[j]);
                if t < step || blocking.is_none() {
                    step = step.min(t);
                    blocking = Some(j);
                }
            }
            x = &x + (&z - &x) * step;
            for j in 0..k {
                if passive[j] && (x[j] <= 0.0 || Some(j) == blocking) {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
        }
        // negative half-gradient b − Gx
        let w = b - gram * &x;
        let candidate = (0..k).filter(|&j| !passive[j]).max_by(|&a, &c| w[a].total_cmp(&w[c]));
        match candidate {
            Some(j) if w[j] > tol => passive[j] = true,
            _ => break,
        }
    }
    x.iter().map(|&v| v.max(0.0)).collect()
}

fn solve_passive(gram: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let k = b.len();
    let idx: Vec<usize> = (0..k).filter(|&j| passive[j]).collect();
    let mut z = DVector::zeros(k);
    if idx.is_empty() {
        return z;
    }
    let sub = DMatrix::from_fn(idx.len(), idx.len(), |r, c| gram[(idx[r], idx[c])]);
    let rhs = DVector::from_iterator(idx.len(), idx.iter().map(|&j| b[j]));
    let sol = match sub.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            let svd = sub.svd(true, true);
            let cut = 1e-12 * svd.singular_values.max();
            svd.solve(&rhs, cut).unwrap_or_else(|_| DVector::zeros(idx.len()))
        }
    };
    for (r, &j) in idx.iter().enumerate() {
        z[j] = sol[r];
    }
    z
}

/// `xᵀGx − 2xᵀb`
pub fn gram_objective(gram: &DMatrix<f64>, b: &DVector<f64>, x: &[f64]) -> f64 {
    let x = DVector::from_column_slice(x);
    (x.transpose() * gram * &x)[(0, 0)] - 2.0 * x.dot(b)
}
