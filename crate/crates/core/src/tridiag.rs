//! Lowest eigenpairs of a real symmetric tridiagonal matrix by Sturm-sequence
//! bisection followed by inverse iteration.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EigenError {
    #[error("tridiagonal matrix of order {n} has no {count} eigenpairs")]
    TooFew { n: usize, count: usize },
    #[error("inverse iteration stalled for eigenvalue #{index} (residual {residual:e})")]
    NoConvergence { index: usize, residual: f64 },
}

/// Number of eigenvalues strictly below `x`.
pub fn sturm_count(d: &[f64], e: &[f64], x: f64) -> usize {
    let tiny = f64::MIN_POSITIVE.sqrt();
    let mut count = 0;
    let mut q = 1.0;
    for i in 0..d.len() {
        let off = if i == 0 { 0.0 } else { e[i - 1] * e[i - 1] / q };
        q = d[i] - x - off;
        if q == 0.0 {
            q = -tiny;
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

fn gershgorin(d: &[f64], e: &[f64]) -> (f64, f64) {
    let n = d.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { e[i - 1].abs() } else { 0.0 } + if i + 1 < n { e[i].abs() } else { 0.0 };
        lo = lo.min(d[i] - r);
        hi = hi.max(d[i] + r);
    }
    (lo, hi)
}

/// `index`-th smallest eigenvalue (0-based) by bisection to full precision.
pub fn bisect_eigenvalue(d: &[f64], e: &[f64], index: usize) -> f64 {
    let (mut lo, mut hi) = gershgorin(d, e);
    let span = hi.abs().max(lo.abs()).max(f64::MIN_POSITIVE);
    lo -= 2.0 * f64::EPSILON * span;
    hi += 2.0 * f64::EPSILON * span;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sturm_count(d, e, mid) > index {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 2.0 * f64::EPSILON * lo.abs().max(hi.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// LU factors of `T - shift` with partial pivoting (LAPACK gttrf layout).
struct TridiagLu {
    dl: Vec<f64>,
    d: Vec<f64>,
    du: Vec<f64>,
    du2: Vec<f64>,
    swapped: Vec<bool>,
}

impl TridiagLu {
    fn new(d: &[f64], e: &[f64], shift: f64) -> Self {
        let n = d.len();
        let mut dl = e.to_vec();
        let mut dd: Vec<f64> = d.iter().map(|v| v - shift).collect();
        let mut du = e.to_vec();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut swapped = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            if dd[i].abs() >= dl[i].abs() {
                if dd[i] != 0.0 {
                    let fact = dl[i] / dd[i];
                    dl[i] = fact;
                    dd[i + 1] -= fact * du[i];
                } else {
                    dl[i] = 0.0;
                }
            } else {
                let fact = dd[i] / dl[i];
                dd[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = dd[i + 1];
                dd[i + 1] = temp - fact * dd[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] *= -fact;
                }
                swapped[i] = true;
            }
        }
        // an exact singular pivot just means the shift is an eigenvalue to
        // working precision; perturb it so the solve returns the eigenvector
        let scale = d.iter().chain(e.iter()).fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for v in dd.iter_mut() {
            if v.abs() < f64::EPSILON * scale {
                *v = f64::EPSILON * scale * if *v < 0.0 { -1.0 } else { 1.0 };
            }
        }
        TridiagLu { dl, d: dd, du, du2, swapped }
    }

    fn solve(&self, b: &mut [f64]) {
        let n = self.d.len();
        for i in 0..n.saturating_sub(1) {
            if self.swapped[i] {
                let temp = b[i];
                b[i] = b[i + 1];
                b[i + 1] = temp - self.dl[i] * b[i];
            } else {
                b[i + 1] -= self.dl[i] * b[i];
            }
        }
        b[n - 1] /= self.d[n - 1];
        if n > 1 {
            b[n - 2] = (b[n - 2] - self.du[n - 2] * b[n - 1]) / self.d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            b[i] = (b[i] - self.du[i] * b[i + 1] - self.du2[i] * b[i + 2]) / self.d[i];
        }
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn residual(d: &[f64], e: &[f64], lambda: f64, v: &[f64]) -> f64 {
    let n = d.len();
    let mut r2 = 0.0;
    for i in 0..n {
        let mut y = (d[i] - lambda) * v[i];
        if i > 0 {
            y += e[i - 1] * v[i - 1];
        }
        if i + 1 < n {
            y += e[i] * v[i + 1];
        }
        r2 += y * y;
    }
    r2.sqrt()
}

/// The `count` smallest eigenvalues in increasing order together with
/// orthonormal eigenvectors. `d` is the diagonal, `e` the off-diagonal.
pub fn lowest_eigenpairs(d: &[f64], e: &[f64], count: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>), EigenError> {
    let n = d.len();
    assert_eq!(e.len() + 1, n.max(1), "off-diagonal length");
    if count > n {
        return Err(EigenError::TooFew { n, count });
    }
    let norm = gershgorin(d, e).0.abs().max(gershgorin(d, e).1.abs());
    let mut values = Vec::with_capacity(count);
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(count);
    for index in 0..count {
        let lambda = bisect_eigenvalue(d, e, index);
        let lu = TridiagLu::new(d, e, lambda);
        // deterministic start vector with no special symmetry
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * ((i as f64 + 1.0) * 0.61803).sin()).collect();
        let mut res = f64::INFINITY;
        for _ in 0..8 {
            lu.solve(&mut v);
            for u in &vectors {
                let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u.iter()).for_each(|(x, y)| *x -= dot * y);
            }
            normalize(&mut v);
            res = residual(d, e, lambda, &v);
            if res <= 1e-11 * norm.max(1.0) {
                break;
            }
        }
        if !(res <= 1e-8 * norm.max(1.0)) {
            return Err(EigenError::NoConvergence { index, residual: res });
        }
        values.push(lambda);
        vectors.push(v);
    }
    Ok((values, vectors))
}
