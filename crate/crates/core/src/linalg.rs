//! Dense complex linear algebra helpers: Kronecker and Khatri-Rao products,
//! column stacking, Hermitian square roots and guarded inverses, and the
//! real block representation used by the bound computations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;
pub type RVec = DVector<f64>;

/// Condition-number ceiling applied to every normal-equation solve.
pub const CONDITION_LIMIT: f64 = 1e12;

pub const J: C64 = C64 { re: 0.0, im: 1.0 };

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = CMat::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let s = a[(i, j)];
            if s == C64::new(0.0, 0.0) {
                continue;
            }
            for q in 0..bc {
                for p in 0..br {
                    out[(i * br + p, j * bc + q)] = s * b[(p, q)];
                }
            }
        }
    }
    out
}

pub fn kron_vec(a: &CVec, b: &CVec) -> CVec {
    let mut out = CVec::zeros(a.len() * b.len());
    for (i, &s) in a.iter().enumerate() {
        for (p, &t) in b.iter().enumerate() {
            out[i * b.len() + p] = s * t;
        }
    }
    out
}

pub fn kron_real(a: &RMat, b: &RMat) -> RMat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = RMat::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let s = a[(i, j)];
            for q in 0..bc {
                for p in 0..br {
                    out[(i * br + p, j * bc + q)] = s * b[(p, q)];
                }
            }
        }
    }
    out
}

/// Column-wise Kronecker product. Column `n` of the result is `a_n ⊗ b_n`.
pub fn khatri_rao(a: &CMat, b: &CMat) -> Result<CMat> {
    if a.ncols() != b.ncols() {
        return Err(Error::dim(format!(
            "khatri-rao operands have {} and {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    let (ar, br) = (a.nrows(), b.nrows());
    let mut out = CMat::zeros(ar * br, a.ncols());
    for n in 0..a.ncols() {
        for i in 0..ar {
            let s = a[(i, n)];
            for p in 0..br {
                out[(i * br + p, n)] = s * b[(p, n)];
            }
        }
    }
    Ok(out)
}

/// Stacks the columns of `m` into one vector.
pub fn vec_cols(m: &CMat) -> CVec {
    CVec::from_column_slice(m.as_slice())
}

pub fn unvec(v: &CVec, rows: usize, cols: usize) -> Result<CMat> {
    if v.len() != rows * cols {
        return Err(Error::dim(format!(
            "cannot reshape length {} into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(CMat::from_column_slice(rows, cols, v.as_slice()))
}

pub fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()).scale(0.5)
}

/// Eigen-decomposition of the Hermitian part of `m`, eigenvalues unsorted.
pub fn hermitian_eigen(m: &CMat) -> (RVec, CMat) {
    let eig = SymmetricEigen::new(hermitian_part(m));
    (eig.eigenvalues, eig.eigenvectors)
}

/// Hermitian PSD square root. Eigenvalues between `-1e-10·max(1, λmax)` and
/// zero are clipped to zero; anything more negative is rejected.
pub fn psd_sqrt(m: &CMat) -> Result<CMat> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim("square root of a non-square matrix"));
    }
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let (vals, vecs) = hermitian_eigen(m);
    let lmax = vals.iter().cloned().fold(0.0_f64, f64::max);
    let floor = -1e-10 * lmax.max(1.0);
    let mut scaled = vecs.clone();
    for (j, &l) in vals.iter().enumerate() {
        if l < floor {
            return Err(Error::NotPsd { min_eigenvalue: l });
        }
        let s = l.max(0.0).sqrt();
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= s;
        }
    }
    Ok(&scaled * vecs.adjoint())
}

/// Inverse of a Hermitian positive definite matrix, refusing matrices whose
/// condition number exceeds [`CONDITION_LIMIT`].
pub fn hermitian_inverse(m: &CMat) -> Result<CMat> {
    let (vals, vecs) = hermitian_eigen(m);
    let lmax = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lmin = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(lmax > 0.0) || lmin <= lmax / CONDITION_LIMIT {
        return Err(Error::unidentifiable(format!(
            "normal matrix condition number exceeds {CONDITION_LIMIT:e} (eigenvalues {lmin:e}..{lmax:e})"
        )));
    }
    let mut scaled = vecs.clone();
    for (j, &l) in vals.iter().enumerate() {
        for i in 0..scaled.nrows() {
            scaled[(i, j)] /= l;
        }
    }
    Ok(&scaled * vecs.adjoint())
}

/// Moore-Penrose pseudo-inverse with singular values below
/// `max(rows, cols)·ε·σmax` treated as zero.
pub fn pinv(m: &CMat) -> CMat {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return CMat::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = r.max(c) as f64 * f64::EPSILON * smax;
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut out = CMat::zeros(c, r);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= tol || s == 0.0 {
            continue;
        }
        let vk = vt.row(k).adjoint();
        let uk = u.column(k).adjoint();
        out += (vk * uk).scale(1.0 / s);
    }
    out
}

/// Ratio of largest to smallest singular value (infinite when rank deficient).
pub fn condition_number(m: &CMat) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return f64::INFINITY;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = if m.nrows() >= m.ncols() {
        sv.iter().cloned().fold(f64::INFINITY, f64::min)
    } else {
        0.0
    };
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Least-squares solution `a⁺ b`, rejecting rank-deficient or badly
/// conditioned `a`.
pub fn guarded_lstsq(a: &CMat, b: &CMat) -> Result<CMat> {
    if a.nrows() != b.nrows() {
        return Err(Error::dim(format!(
            "lstsq with {} and {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.nrows() < a.ncols() {
        return Err(Error::unidentifiable(format!(
            "{} equations for {} unknowns",
            a.nrows(),
            a.ncols()
        )));
    }
    let cond = condition_number(a);
    // cond(AᴴA) = cond(A)²; the guard applies to the normal equations.
    if !(cond * cond <= CONDITION_LIMIT) {
        return Err(Error::unidentifiable(format!(
            "system matrix condition number {cond:e}"
        )));
    }
    Ok(pinv(a) * b)
}

/// `[Re -Im; Im Re]` real representation of a complex matrix.
pub fn real_rep(m: &CMat) -> RMat {
    let (r, c) = m.shape();
    let mut out = RMat::zeros(2 * r, 2 * c);
    for j in 0..c {
        for i in 0..r {
            let z = m[(i, j)];
            out[(i, j)] = z.re;
            out[(i, j + c)] = -z.im;
            out[(i + r, j)] = z.im;
            out[(i + r, j + c)] = z.re;
        }
    }
    out
}

/// `[Re v; Im v]`.
pub fn real_stack(v: &CVec) -> RVec {
    let n = v.len();
    RVec::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
}

pub fn complex_unstack(v: &RVec) -> Result<CVec> {
    if v.len() % 2 != 0 {
        return Err(Error::dim("real stack of odd length"));
    }
    let n = v.len() / 2;
    Ok(CVec::from_fn(n, |i, _| C64::new(v[i], v[i + n])))
}

pub fn relative_frobenius(a: &CMat, reference: &CMat) -> f64 {
    let denom = reference.norm();
    if denom == 0.0 {
        return (a - reference).norm();
    }
    (a - reference).norm() / denom
}

/// Eigen-decomposition of the symmetric part of a real matrix.
pub fn symmetric_eigen_real(m: &RMat) -> (RVec, RMat) {
    let sym = (m + m.transpose()).scale(0.5);
    let eig = SymmetricEigen::new(sym);
    (eig.eigenvalues, eig.eigenvectors)
}

pub fn diag(v: &CVec) -> CMat {
    CMat::from_diagonal(v)
}
