//! Small dense complex kernels used by the subspace solver.

use num_complex::Complex64;

/// `Σ conj(a_i) b_i`.
pub fn dotc(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Eigen-decomposition of a Hermitian matrix by cyclic Jacobi rotations.
///
/// `a` is `n x n` row-major and only needs to be Hermitian up to rounding.
/// Returns eigenvalues in descending order and the matching eigenvectors
/// as the columns of a column-major `n x n` matrix.
pub fn hermitian_eigen(n: usize, mut a: Vec<Complex64>) -> (Vec<f64>, Vec<Complex64>) {
    assert_eq!(a.len(), n * n);
    for i in 0..n {
        for j in 0..i {
            let m = (a[i * n + j] + a[j * n + i].conj()) * 0.5;
            a[i * n + j] = m;
            a[j * n + i] = m.conj();
        }
        a[i * n + i].im = 0.0;
    }
    // v is column-major: column k is v[k*n..(k+1)*n].
    let mut v = vec![Complex64::new(0.0, 0.0); n * n];
    for k in 0..n {
        v[k * n + k] = Complex64::new(1.0, 0.0);
    }

    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let h = a[p * n + q];
                let mag = h.norm();
                let (app, aqq) = (a[p * n + p].re, a[q * n + q].re);
                if mag < 1e-300 || mag <= 1e-17 * (app.abs() * aqq.abs()).sqrt() {
                    a[p * n + q] = Complex64::new(0.0, 0.0);
                    a[q * n + p] = Complex64::new(0.0, 0.0);
                    continue;
                }
                rotated = true;

                // Make the (p, q) entry real by rephasing index q.
                let ph = h.conj() / mag;
                for r in 0..n {
                    a[r * n + q] *= ph;
                }
                for c in 0..n {
                    a[q * n + c] *= ph.conj();
                }
                for r in 0..n {
                    v[q * n + r] *= ph;
                }

                let theta = 0.5 * (aqq - app) / mag;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let (g, h) = (a[r * n + p], a[r * n + q]);
                    a[r * n + p] = g * c - h * s;
                    a[r * n + q] = g * s + h * c;
                }
                for col in 0..n {
                    let (g, h) = (a[p * n + col], a[q * n + col]);
                    a[p * n + col] = g * c - h * s;
                    a[q * n + col] = g * s + h * c;
                }
                a[p * n + q] = Complex64::new(0.0, 0.0);
                a[q * n + p] = Complex64::new(0.0, 0.0);
                a[p * n + p].im = 0.0;
                a[q * n + q].im = 0.0;
                for r in 0..n {
                    let (g, h) = (v[p * n + r], v[q * n + r]);
                    v[p * n + r] = g * c - h * s;
                    v[q * n + r] = g * s + h * c;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].re.total_cmp(&a[i * n + i].re).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i].re).collect();
    let mut vectors = Vec::with_capacity(n * n);
    for &i in &order {
        vectors.extend_from_slice(&v[i * n..(i + 1) * n]);
    }
    (values, vectors)
}

/// Rotates `col` so that its largest-magnitude entry (lowest index on
/// ties) is real and positive.
pub fn fix_phase(col: &mut [Complex64]) {
    let mut best = 0;
    for (i, c) in col.iter().enumerate() {
        if c.norm_sqr() > col[best].norm_sqr() {
            best = i;
        }
    }
    let pivot = col[best];
    if pivot.norm() == 0.0 {
        return;
    }
    let rot = pivot.conj() / pivot.norm();
    for c in col.iter_mut() {
        *c *= rot;
    }
    col[best] = Complex64::new(col[best].norm(), 0.0);
}
