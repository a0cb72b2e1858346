//! Cholesky factorization and triangular solves for small-to-medium SPD systems.

use super::Tensor;
use crate::error::{Error, Result};

const BLOCK: usize = 64;

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`, stored row-major.
#[derive(Clone, Debug)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factors a symmetric positive definite matrix. Only the lower triangle is read.
    pub fn factor(a: &Tensor) -> Result<Self> {
        let k = a.rows();
        if a.ndim() != 2 || a.cols() != k {
            return Err(Error::Dimension {
                op: "cholesky",
                lhs: a.shape().to_vec(),
                rhs: vec![k, k],
            });
        }
        let mut lower = a.data().to_vec();
        let scale = (0..k).fold(0.0_f64, |m, i| m.max(lower[i * k + i].abs()));
        let tol = scale * f64::EPSILON;
        if k <= BLOCK {
            factor_block(&mut lower, k, 0, k, tol)?;
        } else {
            factor_blocked(&mut lower, k, tol)?;
        }
        for i in 0..k {
            for j in i + 1..k {
                lower[i * k + j] = 0.0;
            }
        }
        Ok(Self { dim: k, lower })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> Tensor {
        Tensor::matrix(self.dim, self.dim, self.lower.clone()).expect("square factor")
    }

    /// Solves `A·Z = B` for every column of `B`.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let k = self.dim;
        if b.rows() != k || b.ndim() > 2 {
            return Err(Error::Dimension {
                op: "solve_spd",
                lhs: vec![k, k],
                rhs: b.shape().to_vec(),
            });
        }
        let r = b.cols();
        // Work on Bᵀ so each right-hand side is contiguous.
        let mut rhs = b.transpose().into_data();
        for col in rhs.chunks_mut(k) {
            self.solve_in_place(col);
        }
        let solved = Tensor::matrix(r, k, rhs)?.transpose();
        solved.reshape(b.shape())
    }

    fn solve_in_place(&self, y: &mut [f64]) {
        let k = self.dim;
        let l = &self.lower;
        for i in 0..k {
            let row = &l[i * k..i * k + i];
            y[i] = (y[i] - dot(row, &y[..i])) / l[i * k + i];
        }
        // Lᵀ·z = y: column i of Lᵀ is row i of L.
        for i in (0..k).rev() {
            let zi = y[i] / l[i * k + i];
            y[i] = zi;
            let row = &l[i * k..i * k + i];
            for (yj, lij) in y[..i].iter_mut().zip(row) {
                *yj -= zi * lij;
            }
        }
    }
}

/// Unblocked left-looking factorization of the diagonal block `[j0, j0+jb)`.
fn factor_block(a: &mut [f64], k: usize, j0: usize, jb: usize, tol: f64) -> Result<()> {
    for j in j0..j0 + jb {
        let row_j = &a[j * k + j0..j * k + j];
        let d = a[j * k + j] - dot(row_j, row_j);
        if !(d > tol) || !d.is_finite() {
            return Err(Error::Singular { pivot: j, value: d });
        }
        let ljj = d.sqrt();
        a[j * k + j] = ljj;
        for i in j + 1..j0 + jb {
            let (upper, lower) = a.split_at_mut(i * k);
            let lj = &upper[j * k + j0..j * k + j];
            let ri = &mut lower[..k];
            let s = dot(&ri[j0..j], lj);
            ri[j] = (ri[j] - s) / ljj;
        }
    }
    Ok(())
}

fn factor_blocked(a: &mut [f64], k: usize, tol: f64) -> Result<()> {
    let mut j0 = 0;
    while j0 < k {
        let jb = BLOCK.min(k - j0);
        factor_block(a, k, j0, jb, tol)?;
        let end = j0 + jb;
        if end == k {
            break;
        }
        // Panel: rows below the diagonal block, L21 = A21 · L11⁻ᵀ.
        let diag: Vec<f64> = (j0..end)
            .flat_map(|j| a[j * k + j0..j * k + end].to_vec())
            .collect();
        for i in end..k {
            let ri = &mut a[i * k + j0..i * k + end];
            for j in 0..jb {
                let lj = &diag[j * jb..j * jb + j];
                let s = dot(&ri[..j], lj);
                ri[j] = (ri[j] - s) / diag[j * jb + j];
            }
        }
        // Trailing update A22 -= L21·L21ᵀ, lower triangle by row blocks.
        let m = k - end;
        let panel: Vec<f64> = (end..k)
            .flat_map(|i| a[i * k + j0..i * k + end].to_vec())
            .collect();
        let mut r0 = 0;
        while r0 < m {
            let rb = BLOCK.min(m - r0);
            let cols = r0 + rb;
            let mut update = vec![0.0; rb * cols];
            // SAFETY: panel is m×jb row-major; update is rb×cols row-major.
            unsafe {
                matrixmultiply::dgemm(
                    rb,
                    jb,
                    cols,
                    1.0,
                    panel.as_ptr().add(r0 * jb),
                    jb as isize,
                    1,
                    panel.as_ptr(),
                    1,
                    jb as isize,
                    0.0,
                    update.as_mut_ptr(),
                    cols as isize,
                    1,
                );
            }
            for ii in 0..rb {
                let row = &mut a[(end + r0 + ii) * k + end..(end + r0 + ii) * k + end + cols];
                for (dst, u) in row.iter_mut().zip(&update[ii * cols..(ii + 1) * cols]) {
                    *dst -= u;
                }
            }
            r0 += rb;
        }
        j0 = end;
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(k: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Tensor::matrix(k, k, (0..k * k).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let mut a = m.matmul(&m.transpose()).unwrap();
        for i in 0..k {
            let v = a.get(i, i) + k as f64 * 0.1;
            a.set(i, i, v);
        }
        a
    }

    fn residual(a: &Tensor, z: &Tensor, b: &Tensor) -> f64 {
        let az = a.matmul(z).unwrap();
        az.zip_map(b, |x, y| x - y).max_abs()
    }

    #[test]
    fn scaled_identity() {
        let a = Tensor::eye(2).scale(2.0);
        let z = Cholesky::factor(&a).unwrap().solve(&Tensor::column(&[1.0, 2.0])).unwrap();
        assert!((z.data()[0] - 0.5).abs() < 1e-15 && (z.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn small_residual() {
        let a = Tensor::from_rows(&[[4.0, 1.0], [1.0, 3.0]]);
        let b = Tensor::column(&[1.0, 2.0]);
        let z = Cholesky::factor(&a).unwrap().solve(&b).unwrap();
        assert!(residual(&a, &z, &b) < 1e-12);
    }

    #[test]
    fn blocked_path_matches_reconstruction() {
        for &k in &[65, 130, 200] {
            let a = random_spd(k, k as u64);
            let chol = Cholesky::factor(&a).unwrap();
            let l = chol.lower();
            let rebuilt = l.matmul(&l.transpose()).unwrap();
            let err = rebuilt.zip_map(&a, |x, y| x - y).max_abs();
            assert!(err < 1e-10 * a.max_abs(), "k={k} err={err}");
            let b = Tensor::matrix(k, 3, (0..3 * k).map(|v| (v as f64).cos()).collect()).unwrap();
            let z = chol.solve(&b).unwrap();
            assert!(residual(&a, &z, &b) < 1e-10 * (1.0 + b.max_abs()));
        }
    }

    #[test]
    fn indefinite_reports_pivot() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        match Cholesky::factor(&a) {
            Err(Error::Singular { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn vector_rhs_keeps_shape() {
        let a = Tensor::eye(3).scale(4.0);
        let b = Tensor::new(vec![3], vec![4.0, 8.0, 12.0]).unwrap();
        let z = Cholesky::factor(&a).unwrap().solve(&b).unwrap();
        assert_eq!(z.shape(), &[3]);
        assert_eq!(z.data(), &[1.0, 2.0, 3.0]);
    }
}
