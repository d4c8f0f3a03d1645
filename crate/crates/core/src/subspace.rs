//! Dominant principal subspace of a dictionary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use num_complex::{Complex32, Complex64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::linalg::{dotc, fix_phase, hermitian_eigen, norm};

pub const DEFAULT_RANK: usize = 10;

/// Orthonormal `L x s` basis, stored column by column, with the matching
/// Gram eigenvalues in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    frames: usize,
    dim: usize,
    basis: Vec<Complex64>,
    eigenvalues: Vec<f64>,
    source_digest: [u8; 32],
}

impl Subspace {
    /// Validates shapes, ordering and orthonormality (to 1e-10 per entry).
    pub fn from_parts(
        frames: usize,
        basis: Vec<Complex64>,
        eigenvalues: Vec<f64>,
        source_digest: [u8; 32],
    ) -> Result<Self> {
        let dim = eigenvalues.len();
        if frames == 0 || basis.len() != frames * dim {
            return Err(Error::DimensionMismatch {
                context: "subspace basis",
                expected: frames * dim,
                found: basis.len(),
            });
        }
        if dim > frames {
            return Err(Error::InvalidArgument(format!(
                "subspace dimension {dim} exceeds signal length {frames}"
            )));
        }
        if eigenvalues.iter().any(|v| !v.is_finite() || *v < -1e-12)
            || eigenvalues.windows(2).any(|w| w[0] < w[1])
        {
            return Err(Error::InvalidArgument(
                "eigenvalues must be finite, non-negative and descending".into(),
            ));
        }
        let sub = Self {
            frames,
            dim,
            basis,
            eigenvalues,
            source_digest,
        };
        let err = sub.orthonormality_error();
        if !(err <= 1e-10) {
            return Err(Error::InvalidArgument(format!(
                "basis columns are not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(sub)
    }

    /// Largest entry-wise deviation of `V^H V` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.dim {
            for j in 0..=i {
                let g = dotc(self.column(i), self.column(j));
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - target).norm());
            }
        }
        worst
    }

    /// Signal length `L`.
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn source_digest(&self) -> &[u8; 32] {
        &self.source_digest
    }

    /// Column-major basis.
    pub fn basis(&self) -> &[Complex64] {
        &self.basis
    }

    pub fn column(&self, k: usize) -> &[Complex64] {
        &self.basis[k * self.frames..(k + 1) * self.frames]
    }

    pub fn is_real(&self) -> bool {
        self.basis.iter().all(|c| c.im == 0.0)
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.frames {
            return Err(Error::DimensionMismatch {
                context: "signal length",
                expected: self.frames,
                found: n,
            });
        }
        Ok(())
    }

    /// `V^H x`.
    pub fn project(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_len(x.len())?;
        Ok((0..self.dim).map(|k| dotc(self.column(k), x)).collect())
    }

    /// `Re(V^H x)`, the real input seen by the network's trainable layers.
    pub fn project_real(&self, x: &[Complex64]) -> Result<Vec<f64>> {
        Ok(self.project(x)?.into_iter().map(|c| c.re).collect())
    }

    /// `V y`.
    pub fn lift(&self, y: &[Complex64]) -> Result<Vec<Complex64>> {
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "subspace coordinates",
                expected: self.dim,
                found: y.len(),
            });
        }
        let mut out = vec![Complex64::new(0.0, 0.0); self.frames];
        for (k, &yk) in y.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.column(k)) {
                *o += v * yk;
            }
        }
        Ok(out)
    }

    /// Compressed atoms `V^H D_j`, row-major `d x s`.
    pub fn project_atoms(&self, dict: &Dictionary) -> Result<Vec<Complex64>> {
        self.check_len(dict.frames())?;
        let (l, s) = (self.frames, self.dim);
        let mut out = vec![Complex64::new(0.0, 0.0); dict.n_atoms() * s];
        if s == 0 {
            return Ok(out);
        }
        let vr: Vec<f64> = self.basis.iter().map(|c| c.re).collect();
        let vi: Vec<f64> = self.basis.iter().map(|c| c.im).collect();
        let complex = !self.is_real() || !dict.is_real();
        out.par_chunks_mut(PROJECT_BLOCK * s)
            .enumerate()
            .for_each(|(b, chunk)| {
                let first = b * PROJECT_BLOCK;
                let nb = chunk.len() / s;
                let (ar, ai) = split_block(dict.atoms(), l, first, nb);
                // (A + iB) conj(V) = (A Vr + B Vi) + i (B Vr - A Vi)
                let mut re = vec![0.0; nb * s];
                let mut im = vec![0.0; nb * s];
                gemm_rows_by_basis(nb, l, s, &ar, &vr, 1.0, &mut re);
                if complex {
                    gemm_rows_by_basis(nb, l, s, &ai, &vi, 1.0, &mut re);
                    gemm_rows_by_basis(nb, l, s, &ai, &vr, 1.0, &mut im);
                    gemm_rows_by_basis(nb, l, s, &ar, &vi, -1.0, &mut im);
                }
                for (o, (r, i)) in chunk.iter_mut().zip(re.into_iter().zip(im)) {
                    *o = Complex64::new(r, i);
                }
            });
        Ok(out)
    }

    /// `Σ_j ‖V^H D_j‖² / Σ_j ‖D_j‖²`.
    pub fn captured_energy(&self, dict: &Dictionary) -> Result<f64> {
        let compressed = self.project_atoms(dict)?;
        let kept: f64 = compressed.iter().map(|c| c.norm_sqr()).sum();
        let total: f64 = dict
            .atoms()
            .iter()
            .map(|c| (c.re as f64).powi(2) + (c.im as f64).powi(2))
            .sum();
        Ok(if total > 0.0 { kept / total } else { 0.0 })
    }

    /// One row per frame, columns `v1_re,v1_im,...`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        let header: Vec<String> = (1..=self.dim)
            .flat_map(|k| [format!("v{k}_re"), format!("v{k}_im")])
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for t in 0..self.frames {
            let row: Vec<String> = (0..self.dim)
                .flat_map(|k| {
                    let c = self.basis[k * self.frames + t];
                    [format!("{:e}", c.re), format!("{:e}", c.im)]
                })
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubspaceOptions {
    pub max_iter: usize,
    /// Relative tolerance on the change of each leading eigenvalue.
    pub tol: f64,
    pub seed: u64,
}

impl Default for SubspaceOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-10,
            seed: 0,
        }
    }
}

const GRAM_BLOCK: usize = 1024;
const GRAM_GROUPS: usize = 8;
const PROJECT_BLOCK: usize = 2048;
const OVERSAMPLE: usize = 10;

/// Hermitian `L x L` matrix `Σ_j D_j D_j^H`, row-major, as real and
/// imaginary parts. `im` is `None` for a real dictionary.
pub struct Gram {
    pub frames: usize,
    pub re: Vec<f64>,
    pub im: Option<Vec<f64>>,
}

impl Gram {
    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        let k = r * self.frames + c;
        Complex64::new(self.re[k], self.im.as_ref().map_or(0.0, |im| im[k]))
    }

    fn trace(&self) -> f64 {
        (0..self.frames).map(|i| self.re[i * self.frames + i]).sum()
    }

    /// `G Q` for a column-major `L x p` block.
    fn apply(&self, q: &[Complex64], p: usize) -> Vec<Complex64> {
        let l = self.frames;
        let qr: Vec<f64> = q.iter().map(|c| c.re).collect();
        let qi: Vec<f64> = q.iter().map(|c| c.im).collect();
        let q_complex = qi.iter().any(|&v| v != 0.0);
        let mut wr = vec![0.0; l * p];
        let mut wi = vec![0.0; l * p];
        let mul = |a: &[f64], b: &[f64], alpha: f64, c: &mut [f64]| unsafe {
            // Row-major G times column-major Q into column-major W.
            matrixmultiply::dgemm(
                l,
                l,
                p,
                alpha,
                a.as_ptr(),
                l as isize,
                1,
                b.as_ptr(),
                1,
                l as isize,
                1.0,
                c.as_mut_ptr(),
                1,
                l as isize,
            );
        };
        mul(&self.re, &qr, 1.0, &mut wr);
        if q_complex {
            mul(&self.re, &qi, 1.0, &mut wi);
        }
        if let Some(gi) = &self.im {
            mul(gi, &qr, 1.0, &mut wi);
            if q_complex {
                mul(gi, &qi, -1.0, &mut wr);
            }
        }
        wr.into_iter()
            .zip(wi)
            .map(|(r, i)| Complex64::new(r, i))
            .collect()
    }
}

fn split_block(atoms: &[Complex32], l: usize, first: usize, nb: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = &atoms[first * l..(first + nb) * l];
    (
        rows.iter().map(|c| c.re as f64).collect(),
        rows.iter().map(|c| c.im as f64).collect(),
    )
}

/// `c += alpha * A conj?(V)`: `A` is row-major `nb x l`, `V` column-major `l x s`,
/// `c` row-major `nb x s`.
fn gemm_rows_by_basis(
    nb: usize,
    l: usize,
    s: usize,
    a: &[f64],
    v: &[f64],
    alpha: f64,
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            nb,
            l,
            s,
            alpha,
            a.as_ptr(),
            l as isize,
            1,
            v.as_ptr(),
            1,
            l as isize,
            1.0,
            c.as_mut_ptr(),
            s as isize,
            1,
        );
    }
}

/// Accumulates the Gram matrix over fixed atom blocks. Blocks are split
/// into a fixed number of contiguous groups summed in group order, so the
/// result is independent of the worker count.
pub fn gram_matrix(dict: &Dictionary) -> Gram {
    let l = dict.frames();
    let d = dict.n_atoms();
    let complex = !dict.is_real();
    let n_blocks = d.div_ceil(GRAM_BLOCK);
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..GRAM_GROUPS)
        .into_par_iter()
        .map(|g| {
            let mut re = vec![0.0; l * l];
            // Holds B^T A; the imaginary part is its antisymmetric part.
            let mut bta = if complex {
                vec![0.0; l * l]
            } else {
                Vec::new()
            };
            let blocks = (g * n_blocks / GRAM_GROUPS)..((g + 1) * n_blocks / GRAM_GROUPS);
            for b in blocks {
                let first = b * GRAM_BLOCK;
                let nb = GRAM_BLOCK.min(d - first);
                let (ar, ai) = split_block(dict.atoms(), l, first, nb);
                let ata = |x: &[f64], y: &[f64], c: &mut [f64]| unsafe {
                    matrixmultiply::dgemm(
                        l,
                        nb,
                        l,
                        1.0,
                        x.as_ptr(),
                        1,
                        l as isize,
                        y.as_ptr(),
                        l as isize,
                        1,
                        1.0,
                        c.as_mut_ptr(),
                        l as isize,
                        1,
                    );
                };
                ata(&ar, &ar, &mut re);
                if complex {
                    ata(&ai, &ai, &mut re);
                    ata(&ai, &ar, &mut bta);
                }
            }
            (re, bta)
        })
        .collect();

    let mut re = vec![0.0; l * l];
    let mut bta = vec![0.0; if complex { l * l } else { 0 }];
    for (pr, pb) in &partials {
        re.iter_mut().zip(pr).for_each(|(a, b)| *a += b);
        bta.iter_mut().zip(pb).for_each(|(a, b)| *a += b);
    }
    for i in 0..l {
        for j in 0..i {
            let m = 0.5 * (re[i * l + j] + re[j * l + i]);
            re[i * l + j] = m;
            re[j * l + i] = m;
        }
    }
    let im = complex.then(|| {
        let mut im = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..l {
                im[i * l + j] = bta[i * l + j] - bta[j * l + i];
            }
        }
        im
    });
    Gram { frames: l, re, im }
}

/// Leading `s` eigenpairs of the dictionary Gram matrix by blocked
/// orthogonal iteration with Rayleigh-Ritz acceleration.
pub fn compute_subspace(dict: &Dictionary, s: usize, opts: &SubspaceOptions) -> Result<Subspace> {
    let l = dict.frames();
    if s == 0 || s > l {
        return Err(Error::InvalidArgument(format!(
            "subspace rank must lie in 1..={l}, got {s}"
        )));
    }
    let gram = gram_matrix(dict);
    let (values, vectors) = leading_eigenpairs(&gram, s, opts)?;
    Subspace::from_parts(l, vectors, values, dict.content_digest())
}

/// Returns `s` eigenvalues (descending, clamped at zero) and phase-fixed
/// eigenvectors as a column-major `L x s` block.
pub fn leading_eigenpairs(
    gram: &Gram,
    s: usize,
    opts: &SubspaceOptions,
) -> Result<(Vec<f64>, Vec<Complex64>)> {
    let l = gram.frames;
    let trace = gram.trace();
    if !(trace > 0.0) {
        return Err(Error::Degenerate("Gram matrix has zero trace".into()));
    }
    let p = (s + OVERSAMPLE).min(l);

    let (values, mut vectors) = if p == l {
        let dense: Vec<Complex64> = (0..l * l).map(|k| gram.get(k / l, k % l)).collect();
        let (vals, vecs) = hermitian_eigen(l, dense);
        (vals, vecs)
    } else {
        orthogonal_iteration(gram, s, p, opts)?
    };

    vectors.truncate(l * s);
    for col in vectors.chunks_mut(l) {
        fix_phase(col);
    }
    let values = values[..s].iter().map(|&v| v.max(0.0)).collect();
    Ok((values, vectors))
}

fn orthogonal_iteration(
    gram: &Gram,
    s: usize,
    p: usize,
    opts: &SubspaceOptions,
) -> Result<(Vec<f64>, Vec<Complex64>)> {
    let l = gram.frames;
    let complex = gram.im.is_some();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut draw = |rng: &mut ChaCha8Rng| -> Vec<Complex64> {
        (0..l)
            .map(|_| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = if complex {
                    StandardNormal.sample(rng)
                } else {
                    0.0
                };
                Complex64::new(re, im)
            })
            .collect()
    };

    let mut w: Vec<Complex64> = (0..p).flat_map(|_| draw(&mut rng)).collect();
    let mut prev: Option<Vec<f64>> = None;
    let mut last_change = f64::INFINITY;

    for _ in 0..opts.max_iter {
        let mut q = w;
        orthonormalize(&mut q, l, p, &mut rng, &mut draw);
        w = gram.apply(&q, p);

        let mut h = vec![Complex64::new(0.0, 0.0); p * p];
        for i in 0..p {
            for j in 0..p {
                h[i * p + j] = dotc(&q[i * l..(i + 1) * l], &w[j * l..(j + 1) * l]);
            }
        }
        let (theta, u) = hermitian_eigen(p, h);
        let q = rotate_columns(&q, &u, l, p);
        w = rotate_columns(&w, &u, l, p);

        let top = theta[0].abs();
        let floor = 1e-4 * top;
        let mut change = 0.0f64;
        let mut residual_ok = true;
        for i in 0..s {
            let scale = theta[i].abs().max(floor);
            if let Some(prev) = &prev {
                change = change.max((theta[i] - prev[i]).abs() / scale);
            } else {
                change = f64::INFINITY;
            }
            let r: f64 = w[i * l..(i + 1) * l]
                .iter()
                .zip(&q[i * l..(i + 1) * l])
                .map(|(a, b)| (a - b * theta[i]).norm_sqr())
                .sum::<f64>()
                .sqrt();
            residual_ok &= r <= 10.0 * opts.tol * scale;
        }
        last_change = change;
        if change <= opts.tol && residual_ok {
            return Ok((theta, q));
        }
        prev = Some(theta);
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        change: last_change,
    })
}

/// Two passes of modified Gram-Schmidt. Columns that collapse (the block
/// exceeds the numerical rank) are replaced by fresh random directions.
fn orthonormalize(
    q: &mut [Complex64],
    l: usize,
    p: usize,
    rng: &mut ChaCha8Rng,
    draw: &mut impl FnMut(&mut ChaCha8Rng) -> Vec<Complex64>,
) {
    for k in 0..p {
        for attempt in 0..4 {
            let before = norm(&q[k * l..(k + 1) * l]);
            for _pass in 0..2 {
                for j in 0..k {
                    let (done, rest) = q.split_at_mut(k * l);
                    let qj = &done[j * l..(j + 1) * l];
                    let col = &mut rest[..l];
                    let c = dotc(qj, col);
                    col.iter_mut().zip(qj).for_each(|(x, y)| *x -= y * c);
                }
            }
            let after = norm(&q[k * l..(k + 1) * l]);
            if after > 1e-10 * before && after > 0.0 {
                q[k * l..(k + 1) * l].iter_mut().for_each(|x| *x /= after);
                break;
            }
            assert!(attempt < 3, "could not extend orthonormal block");
            let fresh = draw(rng);
            q[k * l..(k + 1) * l].copy_from_slice(&fresh);
        }
    }
}

/// `X U` for column-major `l x p` X and column-major `p x p` U.
fn rotate_columns(x: &[Complex64], u: &[Complex64], l: usize, p: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); l * p];
    for j in 0..p {
        let dst = &mut out[j * l..(j + 1) * l];
        for k in 0..p {
            let c = u[j * p + k];
            if c == Complex64::new(0.0, 0.0) {
                continue;
            }
            for (o, v) in dst.iter_mut().zip(&x[k * l..(k + 1) * l]) {
                *o += v * c;
            }
        }
    }
    out
}
