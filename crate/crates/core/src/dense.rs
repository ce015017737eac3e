//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::C64;

/// Ascending eigenvalues of a Hermitian matrix.
pub fn hermitian_eigenvalues(m: &DMatrix<C64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// `exp(c H)` for Hermitian `H` and complex scalar `c`, via diagonalization.
pub fn hermitian_expm(h: &DMatrix<C64>, c: C64) -> DMatrix<C64> {
    let eig = h.clone().symmetric_eigen();
    let v = &eig.eigenvectors;
    let phases: DVector<C64> = eig.eigenvalues.map(|e| (c * e).exp());
    let mut scaled = v.clone();
    for (j, p) in phases.iter().enumerate() {
        for x in scaled.column_mut(j).iter_mut() {
            *x *= p;
        }
    }
    scaled * v.adjoint()
}

/// `exp(c H)` for real symmetric `H`.
pub fn symmetric_expm(h: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
    let eig = h.clone().symmetric_eigen();
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, &e) in eig.eigenvalues.iter().enumerate() {
        let p = (c * e).exp();
        for x in scaled.column_mut(j).iter_mut() {
            *x *= p;
        }
    }
    scaled * v.transpose()
}

/// Spectral norm (largest singular value).
pub fn op_norm(m: &DMatrix<C64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Pauli matrices `[σx, σy, σz]` in the basis `{down = 0, up = 1}`.
///
/// With bit 1 meaning spin up, `σz = diag(-1, +1)`.
pub fn pauli() -> [DMatrix<C64>; 3] {
    let z = C64::new(0.0, 0.0);
    let o = C64::new(1.0, 0.0);
    let i = C64::new(0.0, 1.0);
    [
        DMatrix::from_row_slice(2, 2, &[z, o, o, z]),
        DMatrix::from_row_slice(2, 2, &[z, i, -i, z]),
        DMatrix::from_row_slice(2, 2, &[-o, z, z, o]),
    ]
}

/// Operator on `n` sites equal to the given single-site factors and identity
/// elsewhere. Site 0 is the least significant bit of the row index.
pub fn kron_chain(n: usize, factors: &[(usize, DMatrix<C64>)]) -> DMatrix<C64> {
    let mut out = DMatrix::<C64>::from_element(1, 1, C64::new(1.0, 0.0));
    for site in (0..n).rev() {
        let f = factors
            .iter()
            .find(|(s, _)| *s == site)
            .map(|(_, m)| m.clone())
            .unwrap_or_else(|| DMatrix::identity(2, 2));
        out = out.kronecker(&f);
    }
    out
}

/// `y = m x` into a caller-provided buffer.
pub fn mat_vec(m: &DMatrix<C64>, x: &[C64], y: &mut [C64]) {
    let n = m.nrows();
    for r in 0..n {
        y[r] = C64::new(0.0, 0.0);
    }
    for c in 0..m.ncols() {
        let xc = x[c];
        if xc == C64::new(0.0, 0.0) {
            continue;
        }
        let col = m.column(c);
        for r in 0..n {
            y[r] += col[r] * xc;
        }
    }
}
