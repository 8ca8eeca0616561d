//! CSR sparse matrices and the linear solvers behind every assembly and
//! solve step.
//!
//! Two families of systems appear in the pipeline: symmetric positive
//! definite ones (scalar Neumann problems, the Hilbertian velocity
//! extension) solved by diagonally preconditioned conjugate gradients, and
//! the coupled optimality system, which is symmetric indefinite in its
//! rescaled form. For the latter [`solve_general`] factors the matrix with a
//! banded LU (partial pivoting, iterative refinement) whenever the band fits
//! a fixed memory budget, and falls back to restarted GMRES with diagonal
//! preconditioning otherwise.

use crate::error::{Error, Result};

/// Accumulates `(row, col, value)` contributions; duplicates are summed when
/// the buffer is converted to CSR.
#[derive(Debug, Clone, Default)]
pub struct TripletBuffer {
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(cap: usize) -> Self {
        Self {
            entries: Vec::with_capacity(cap),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        self.entries.push((row, col, value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Compressed sparse row matrix. Structural zeros are allowed; within each
/// row the column indices are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    /// Converts a triplet buffer to CSR, summing duplicate positions.
    pub fn from_triplets(buf: &TripletBuffer, nrows: usize, ncols: usize) -> Result<Self> {
        for &(r, c, _) in &buf.entries {
            if r >= nrows || c >= ncols {
                return Err(Error::Dimension(format!(
                    "triplet ({r},{c}) outside {nrows}x{ncols}"
                )));
            }
        }
        let mut counts = vec![0usize; nrows + 1];
        for &(r, _, _) in &buf.entries {
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        // Bucket raw entries per row, then sort and merge duplicates.
        let mut cols = vec![0usize; buf.entries.len()];
        let mut vals = vec![0f64; buf.entries.len()];
        let mut cursor = counts.clone();
        for &(r, c, v) in &buf.entries {
            let k = cursor[r];
            cols[k] = c;
            vals[k] = v;
            cursor[r] += 1;
        }
        let mut row_offsets = vec![0usize; nrows + 1];
        let mut out_cols = Vec::with_capacity(buf.entries.len());
        let mut out_vals = Vec::with_capacity(buf.entries.len());
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for r in 0..nrows {
            scratch.clear();
            scratch.extend(
                cols[counts[r]..counts[r + 1]]
                    .iter()
                    .zip(&vals[counts[r]..counts[r + 1]])
                    .map(|(&c, &v)| (c, v)),
            );
            scratch.sort_unstable_by_key(|e| e.0);
            let mut i = 0;
            while i < scratch.len() {
                let c = scratch[i].0;
                let mut v = scratch[i].1;
                let mut j = i + 1;
                while j < scratch.len() && scratch[j].0 == c {
                    v += scratch[j].1;
                    j += 1;
                }
                out_cols.push(c);
                out_vals.push(v);
                i = j;
            }
            row_offsets[r + 1] = out_cols.len();
        }
        Ok(SparseMatrix {
            nrows,
            ncols,
            row_offsets,
            col_indices: out_cols,
            values: out_vals,
        })
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    /// `y = A·x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ncols {
            return Err(Error::Dimension(format!(
                "matvec: vector length {} vs {} columns",
                x.len(),
                self.ncols
            )));
        }
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y);
        Ok(y)
    }

    fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                acc += self.values[k] * x[self.col_indices[k]];
            }
            y[r] = acc;
        }
    }

    /// Main diagonal (zeros where no entry is stored).
    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.nrows];
        for r in 0..self.nrows {
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                if self.col_indices[k] == r {
                    d[r] = self.values[k];
                }
            }
        }
        d
    }

    /// Quadratic form `xᵀ A y`.
    pub fn quadratic_form(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let ay = self.matvec(y)?;
        if x.len() != self.nrows {
            return Err(Error::Dimension("quadratic_form: row mismatch".into()));
        }
        Ok(dot(x, &ay))
    }

    /// Lower and upper bandwidths `(kl, ku)` of the sparsity pattern.
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut kl = 0usize;
        let mut ku = 0usize;
        for r in 0..self.nrows {
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                let c = self.col_indices[k];
                if c < r {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        (kl, ku)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Relative residual `‖b − A x‖ / ‖b‖` (absolute when `b = 0`).
pub fn relative_residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.matvec(x).expect("dimension checked by caller");
    let mut r = b.to_vec();
    axpy(-1.0, &ax, &mut r);
    let nb = norm(b);
    if nb == 0.0 {
        norm(&r)
    } else {
        norm(&r) / nb
    }
}

fn default_max_iters(n: usize) -> usize {
    10 * n.max(50)
}

/// Conjugate gradients with Jacobi preconditioning for symmetric positive
/// definite systems. Returns `x` with `‖A x − b‖ ≤ tol·‖b‖`.
pub fn solve_spd(a: &SparseMatrix, b: &[f64], tol: f64) -> Result<Vec<f64>> {
    if a.nrows != a.ncols || b.len() != a.nrows {
        return Err(Error::Dimension("solve_spd: square system required".into()));
    }
    let n = a.nrows;
    let nb = norm(b);
    if nb == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let diag = a.diagonal();
    let inv_d: Vec<f64> = diag
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_d).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let max_iters = default_max_iters(n);
    for it in 0..max_iters {
        if norm(&r) <= tol * nb {
            let res = relative_residual(a, &x, b);
            if res <= 10.0 * tol {
                return Ok(x);
            }
        }
        a.matvec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::SolverNoConvergence {
                method: "cg (matrix not positive definite)",
                residual: norm(&r) / nb,
                tol,
                iterations: it,
            });
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        for i in 0..n {
            z[i] = r[i] * inv_d[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let res = relative_residual(a, &x, b);
    if res <= tol {
        Ok(x)
    } else {
        Err(Error::SolverNoConvergence {
            method: "cg",
            residual: res,
            tol,
            iterations: max_iters,
        })
    }
}

/// Banded LU factorization with partial pivoting.
///
/// Row `i` of the band store covers columns `i-kl ..= i+kl+ku`; the extra
/// `kl` upper diagonals absorb pivoting fill.
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    band: Vec<f64>,
    pivots: Vec<usize>,
}

/// Band storage cap (doubles) before `solve_general` falls back to GMRES.
const BAND_BUDGET: usize = 48_000_000;

impl BandedLu {
    /// Factors `a`; fails on zero pivots or when the band store would exceed
    /// the memory budget.
    pub fn factor(a: &SparseMatrix) -> Result<BandedLu> {
        if a.nrows != a.ncols {
            return Err(Error::Factorization("matrix not square".into()));
        }
        let n = a.nrows;
        let (kl, ku) = a.bandwidths();
        let width = 2 * kl + ku + 1;
        if n.saturating_mul(width) > BAND_BUDGET {
            return Err(Error::Factorization(format!(
                "band store {n}x{width} exceeds budget"
            )));
        }
        let mut band = vec![0.0; n * width];
        let idx = |i: usize, j: usize| -> usize {
            debug_assert!(j + kl >= i && j <= i + kl + ku);
            i * width + (j + kl - i)
        };
        for r in 0..n {
            for k in a.row_offsets[r]..a.row_offsets[r + 1] {
                band[idx(r, a.col_indices[k])] = a.values[k];
            }
        }
        let mut pivots = vec![0usize; n];
        for k in 0..n {
            // Partial pivot among rows k..=k+kl.
            let last = (k + kl).min(n - 1);
            let mut piv = k;
            let mut best = band[idx(k, k)].abs();
            for i in (k + 1)..=last {
                let v = band[idx(i, k)].abs();
                if v > best {
                    best = v;
                    piv = i;
                }
            }
            if best == 0.0 {
                return Err(Error::Factorization(format!("zero pivot at column {k}")));
            }
            pivots[k] = piv;
            let jmax = (k + kl + ku).min(n - 1);
            if piv != k {
                for j in k..=jmax {
                    band.swap(idx(k, j), idx(piv, j));
                }
            }
            let pivval = band[idx(k, k)];
            for i in (k + 1)..=last {
                let m = band[idx(i, k)] / pivval;
                band[idx(i, k)] = m;
                if m != 0.0 {
                    for j in (k + 1)..=jmax {
                        band[idx(i, j)] -= m * band[idx(k, j)];
                    }
                }
            }
        }
        Ok(BandedLu {
            n,
            kl,
            ku,
            width,
            band,
            pivots,
        })
    }

    /// Solves `A x = b` using the stored factors.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::Dimension("banded solve: length mismatch".into()));
        }
        let n = self.n;
        let idx = |i: usize, j: usize| -> usize { i * self.width + (j + self.kl - i) };
        let mut x = b.to_vec();
        for k in 0..n {
            let piv = self.pivots[k];
            if piv != k {
                x.swap(k, piv);
            }
            let last = (k + self.kl).min(n - 1);
            let xk = x[k];
            if xk != 0.0 {
                for i in (k + 1)..=last {
                    x[i] -= self.band[idx(i, k)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let jmax = (k + self.kl + self.ku).min(n - 1);
            let mut acc = x[k];
            for j in (k + 1)..=jmax {
                acc -= self.band[idx(k, j)] * x[j];
            }
            x[k] = acc / self.band[idx(k, k)];
        }
        Ok(x)
    }

    /// Solve followed by iterative refinement against `a` until the relative
    /// residual drops below `tol` (at most `max_refine` corrections).
    pub fn solve_refined(
        &self,
        a: &SparseMatrix,
        b: &[f64],
        tol: f64,
        max_refine: usize,
    ) -> Result<Vec<f64>> {
        let mut x = self.solve(b)?;
        let nb = norm(b);
        if nb == 0.0 {
            return Ok(x);
        }
        for _ in 0..max_refine {
            let ax = a.matvec(&x)?;
            let mut r = b.to_vec();
            axpy(-1.0, &ax, &mut r);
            if norm(&r) <= tol * nb {
                return Ok(x);
            }
            let dx = self.solve(&r)?;
            axpy(1.0, &dx, &mut x);
        }
        let res = relative_residual(a, &x, b);
        if res <= tol {
            Ok(x)
        } else {
            Err(Error::SolverNoConvergence {
                method: "banded lu + refinement",
                residual: res,
                tol,
                iterations: max_refine,
            })
        }
    }
}

/// Restarted GMRES with diagonal (Jacobi) right preconditioning. The
/// preconditioner diagonal is floored to avoid division by structural zeros.
fn gmres(a: &SparseMatrix, b: &[f64], tol: f64, restart: usize, max_outer: usize) -> Result<Vec<f64>> {
    let n = a.nrows;
    let nb = norm(b);
    if nb == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let diag = a.diagonal();
    let floor = diag.iter().fold(0.0f64, |m, d| m.max(d.abs())) * 1e-12 + f64::MIN_POSITIVE;
    let inv_d: Vec<f64> = diag
        .iter()
        .map(|&d| if d.abs() > floor { 1.0 / d } else { 1.0 })
        .collect();

    let m = restart.min(n);
    let mut x = vec![0.0; n];
    for _outer in 0..max_outer {
        let ax = a.matvec(&x)?;
        let mut r = b.to_vec();
        axpy(-1.0, &ax, &mut r);
        let beta = norm(&r);
        if beta <= tol * nb {
            return Ok(x);
        }
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        basis.push(r.iter().map(|v| v / beta).collect());
        let mut h = vec![vec![0.0f64; m]; m + 1];
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![0.0f64; m];
        let mut g = vec![0.0f64; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            // w = A M⁻¹ v_k
            let zk: Vec<f64> = basis[k].iter().zip(&inv_d).map(|(v, d)| v * d).collect();
            let mut w = a.matvec(&zk)?;
            for j in 0..=k {
                let hjk = dot(&w, &basis[j]);
                h[j][k] = hjk;
                axpy(-hjk, &basis[j], &mut w);
            }
            let wnorm = norm(&w);
            h[k + 1][k] = wnorm;
            // Apply accumulated Givens rotations to the new column.
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let denom = (h[k][k].powi(2) + h[k + 1][k].powi(2)).sqrt();
            if denom == 0.0 {
                k_used = k;
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            if g[k + 1].abs() <= tol * nb {
                break;
            }
            if wnorm == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / wnorm).collect());
        }
        if k_used == 0 {
            break;
        }
        // Back-substitute for the Krylov coefficients.
        let mut y = vec![0.0f64; k_used];
        for i in (0..k_used).rev() {
            let mut acc = g[i];
            for j in (i + 1)..k_used {
                acc -= h[i][j] * y[j];
            }
            y[i] = acc / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            for i in 0..n {
                x[i] += yj * basis[j][i] * inv_d[i];
            }
        }
    }
    let res = relative_residual(a, &x, b);
    if res <= tol {
        Ok(x)
    } else {
        Err(Error::SolverNoConvergence {
            method: "gmres",
            residual: res,
            tol,
            iterations: max_outer,
        })
    }
}

/// Solves a square nonsingular system to relative residual `tol`.
///
/// When the sparsity pattern is banded enough to fit the memory budget the
/// system is factored directly (banded LU with partial pivoting plus
/// iterative refinement); otherwise restarted GMRES with diagonal
/// preconditioning runs, which covers matrices with no usable band such as
/// coupled systems on uniformly refined meshes. The returned residual is
/// recomputed independently before the solution is accepted.
pub fn solve_general(a: &SparseMatrix, b: &[f64], tol: f64) -> Result<Vec<f64>> {
    if a.nrows != a.ncols || b.len() != a.nrows {
        return Err(Error::Dimension(
            "solve_general: square system required".into(),
        ));
    }
    match BandedLu::factor(a) {
        Ok(lu) => {
            let x = lu.solve_refined(a, b, tol, 4)?;
            let res = relative_residual(a, &x, b);
            if res <= tol {
                Ok(x)
            } else {
                Err(Error::SolverNoConvergence {
                    method: "banded lu",
                    residual: res,
                    tol,
                    iterations: 0,
                })
            }
        }
        Err(Error::Factorization(_)) => {
            let n = a.nrows;
            let restart = 120.min(n);
            let max_outer = (default_max_iters(n) / restart.max(1)).max(4);
            let x = gmres(a, b, tol, restart, max_outer)?;
            let res = relative_residual(a, &x, b);
            if res <= tol {
                Ok(x)
            } else {
                Err(Error::SolverNoConvergence {
                    method: "gmres",
                    residual: res,
                    tol,
                    iterations: max_outer,
                })
            }
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense accumulation oracle for CSR conversion and matvec.
    fn dense_from_triplets(buf: &TripletBuffer, nrows: usize, ncols: usize) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; ncols]; nrows];
        for &(r, c, v) in &buf.entries {
            d[r][c] += v;
        }
        d
    }

    fn dense_matvec(d: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        d.iter().map(|row| dot(row, x)).collect()
    }

    /// Dense LU with partial pivoting; test-only oracle.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for k in 0..n {
            let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
            a.swap(k, piv);
            b.swap(k, piv);
            for i in (k + 1)..n {
                let m = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= m * a[k][j];
                }
                b[i] -= m * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut acc = b[i];
            for j in (i + 1)..n {
                acc -= a[i][j] * x[j];
            }
            x[i] = acc / a[i][i];
        }
        x
    }

    #[test]
    fn duplicate_triplets_are_summed() {
        let mut buf = TripletBuffer::new();
        buf.push(0, 0, 1.0);
        buf.push(0, 0, 2.0);
        let a = SparseMatrix::from_triplets(&buf, 1, 1).unwrap();
        assert_eq!(a.nnz(), 1);
        assert_eq!(a.values[0], 3.0);
    }

    #[test]
    fn empty_buffer_gives_zero_matrix() {
        let a = SparseMatrix::from_triplets(&TripletBuffer::new(), 3, 4).unwrap();
        let y = a.matvec(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(y, vec![0.0; 3]);
    }

    #[test]
    fn out_of_range_triplet_rejected() {
        let mut buf = TripletBuffer::new();
        buf.push(5, 0, 1.0);
        assert!(SparseMatrix::from_triplets(&buf, 3, 3).is_err());
    }

    #[test]
    fn random_triplets_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (n, m) = (50, 50);
        let mut buf = TripletBuffer::new();
        for _ in 0..600 {
            buf.push(
                rng.gen_range(0..n),
                rng.gen_range(0..m),
                rng.gen_range(-1.0..1.0),
            );
        }
        let a = SparseMatrix::from_triplets(&buf, n, m).unwrap();
        let d = dense_from_triplets(&buf, n, m);
        // Entrywise agreement.
        for r in 0..n {
            let mut row = vec![0.0; m];
            for k in a.row_offsets[r]..a.row_offsets[r + 1] {
                row[a.col_indices[k]] = a.values[k];
            }
            for c in 0..m {
                assert!((row[c] - d[r][c]).abs() < 1e-14);
            }
        }
        // CSR invariants.
        assert_eq!(a.row_offsets[0], 0);
        assert_eq!(a.row_offsets[n], a.nnz());
        for r in 0..n {
            for k in a.row_offsets[r]..a.row_offsets[r + 1].saturating_sub(1) {
                assert!(a.col_indices[k] < a.col_indices[k + 1]);
            }
        }
        // Matvec oracle.
        let x: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = a.matvec(&x).unwrap();
        let yd = dense_matvec(&d, &x);
        let scale = norm(&yd).max(1.0);
        for i in 0..n {
            assert!((y[i] - yd[i]).abs() <= 1e-13 * scale);
        }
    }

    #[test]
    fn identity_matvec() {
        let mut buf = TripletBuffer::new();
        for i in 0..4 {
            buf.push(i, i, 1.0);
        }
        let a = SparseMatrix::from_triplets(&buf, 4, 4).unwrap();
        let x = vec![3.0, -1.0, 0.5, 2.0];
        assert_eq!(a.matvec(&x).unwrap(), x);
        assert_eq!(a.matvec(&[0.0; 4]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn cg_identity_and_diagonal() {
        let mut buf = TripletBuffer::new();
        for i in 0..3 {
            buf.push(i, i, 1.0);
        }
        let a = SparseMatrix::from_triplets(&buf, 3, 3).unwrap();
        let b = vec![1.0, -2.0, 0.25];
        let x = solve_spd(&a, &b, 1e-12).unwrap();
        for i in 0..3 {
            assert!((x[i] - b[i]).abs() < 1e-10);
        }

        let mut buf = TripletBuffer::new();
        buf.push(0, 0, 2.0);
        buf.push(1, 1, 4.0);
        let a = SparseMatrix::from_triplets(&buf, 2, 2).unwrap();
        let x = solve_spd(&a, &[2.0, 4.0], 1e-12).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cg_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 40;
        // Build M^T M + I through a dense product, then load as triplets.
        let m: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect())
            .collect();
        let mut buf = TripletBuffer::new();
        for i in 0..n {
            for j in 0..n {
                let mut v = 0.0;
                for k in 0..n {
                    v += m[k][i] * m[k][j];
                }
                if i == j {
                    v += 1.0;
                }
                buf.push(i, j, v);
            }
        }
        let a = SparseMatrix::from_triplets(&buf, n, n).unwrap();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tol = 1e-10;
        let x = solve_spd(&a, &b, tol).unwrap();
        assert!(relative_residual(&a, &x, &b) <= tol);
    }

    #[test]
    fn general_solver_identity() {
        let mut buf = TripletBuffer::new();
        for i in 0..5 {
            buf.push(i, i, 1.0);
        }
        let a = SparseMatrix::from_triplets(&buf, 5, 5).unwrap();
        let b = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let x = solve_general(&a, &b, 1e-12).unwrap();
        for i in 0..5 {
            assert!((x[i] - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn general_solver_vs_dense_lu_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 120;
        // Skew-perturbed SPD system: A = (I + 0.5 band) + skew part.
        let mut dense = vec![vec![0.0; n]; n];
        let mut buf = TripletBuffer::new();
        for i in 0..n {
            for dj in -3i64..=3 {
                let j = i as i64 + dj;
                if j < 0 || j >= n as i64 {
                    continue;
                }
                let j = j as usize;
                let mut v = if i == j { 4.0 } else { rng.gen_range(-0.5..0.5) };
                if j > i {
                    v += 0.8; // break symmetry
                }
                dense[i][j] += v;
                buf.push(i, j, v);
            }
        }
        let a = SparseMatrix::from_triplets(&buf, n, n).unwrap();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = solve_general(&a, &b, 1e-10).unwrap();
        let xd = dense_solve(dense, b.clone());
        let scale = norm(&xd);
        let diff: f64 = x
            .iter()
            .zip(&xd)
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            .sqrt();
        assert!(diff / scale <= 1e-8, "relative error {}", diff / scale);
    }

    #[test]
    fn gmres_path_matches_direct() {
        // Force the GMRES path by a pattern whose band blows the budget:
        // an arrow matrix couples everything to the last row/column.
        let n = 300;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut buf = TripletBuffer::new();
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            let d = 5.0 + rng.gen_range(0.0..1.0);
            buf.push(i, i, d);
            dense[i][i] += d;
            if i + 1 < n {
                let v = rng.gen_range(-0.5..0.5);
                buf.push(i, i + 1, v);
                dense[i][i + 1] += v;
            }
            if i < n - 1 {
                let v = rng.gen_range(-0.3..0.3);
                buf.push(i, n - 1, v);
                dense[i][n - 1] += v;
                let w = rng.gen_range(-0.3..0.3);
                buf.push(n - 1, i, w);
                dense[n - 1][i] += w;
            }
        }
        let a = SparseMatrix::from_triplets(&buf, n, n).unwrap();
        // The arrow pattern has kl ≈ ku ≈ n, still inside the band budget at
        // n = 300, so call gmres directly.
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = gmres(&a, &b, 1e-10, 60, 50).unwrap();
        assert!(relative_residual(&a, &x, &b) <= 1e-10);
        let xd = dense_solve(dense, b.clone());
        let diff: f64 = x
            .iter()
            .zip(&xd)
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            .sqrt();
        assert!(diff / norm(&xd) <= 1e-8);
    }

    #[test]
    fn banded_lu_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 80;
        let mut buf = TripletBuffer::new();
        for i in 0..n {
            for dj in -2i64..=2 {
                let j = i as i64 + dj;
                if j < 0 || j >= n as i64 {
                    continue;
                }
                let v = if dj == 0 { 3.0 } else { rng.gen_range(-1.0..1.0) };
                buf.push(i, j as usize, v);
            }
        }
        let a = SparseMatrix::from_triplets(&buf, n, n).unwrap();
        let lu = BandedLu::factor(&a).unwrap();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = lu.solve_refined(&a, &b, 1e-12, 3).unwrap();
        assert!(relative_residual(&a, &x, &b) <= 1e-12);
    }

    #[test]
    fn dimension_mismatch_reported() {
        let a = SparseMatrix::from_triplets(&TripletBuffer::new(), 3, 3).unwrap();
        assert!(a.matvec(&[1.0, 2.0]).is_err());
        assert!(solve_spd(&a, &[1.0, 2.0], 1e-10).is_err());
    }
}
