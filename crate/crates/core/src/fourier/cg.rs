/// Result of a conjugate-gradient solve.
#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final residual norm relative to `||b||`.
    pub rel_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `K x = b` for a symmetric positive-definite `K` given as a closure,
/// starting from zero. Stops once `||r|| <= tol * ||b||`.
pub fn conjugate_gradient(apply: impl Fn(&[f64]) -> Vec<f64>, b: &[f64], tol: f64, max_iter: usize) -> CgOutcome {
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return CgOutcome {
            x,
            iterations: 0,
            rel_residual: 0.0,
            converged: true,
        };
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut iterations = 0;
    while iterations < max_iter && rs.sqrt() > tol * b_norm {
        let kp = apply(&p);
        let pkp = dot(&p, &kp);
        if pkp <= 0.0 {
            break;
        }
        let step = rs / pkp;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * kp[i];
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
        iterations += 1;
    }
    let rel_residual = rs.sqrt() / b_norm;
    CgOutcome {
        x,
        iterations,
        rel_residual,
        converged: rel_residual <= tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_spd_system() {
        // K = [[4, 1], [1, 3]], b = [1, 2] -> x = [1/11, 7/11]
        let k = |v: &[f64]| vec![4.0 * v[0] + v[1], v[0] + 3.0 * v[1]];
        let out = conjugate_gradient(k, &[1.0, 2.0], 1e-12, 10);
        assert!(out.converged);
        assert!((out.x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((out.x[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn flags_iteration_cap() {
        let k = |v: &[f64]| v.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x).collect();
        let out = conjugate_gradient(k, &[1.0; 6], 1e-14, 1);
        assert!(!out.converged);
        assert_eq!(out.iterations, 1);
        assert!(out.rel_residual > 0.0);
    }

    #[test]
    fn zero_rhs_is_immediate() {
        let out = conjugate_gradient(|v: &[f64]| v.to_vec(), &[0.0; 3], 1e-6, 5);
        assert_eq!(out.iterations, 0);
        assert!(out.x.iter().all(|v| *v == 0.0));
    }
}
