//! Small dense linear-algebra helpers shared across the crate.

use nalgebra::{DMatrix, DVector};

/// Elementwise split `M = M⁺ - M⁻` with `M⁺ = max(M, 0)` and both parts
/// nonnegative.
pub fn split_matrix(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let plus = m.map(|x| x.max(0.0));
    let minus = &plus - m;
    (plus, minus)
}

/// Vector counterpart of [`split_matrix`].
pub fn split_vector(v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let plus = v.map(|x| x.max(0.0));
    let minus = &plus - v;
    (plus, minus)
}

/// Assemble a matrix from a rectangular grid of equally shaped blocks.
pub fn block_matrix(blocks: &[&[&DMatrix<f64>]]) -> DMatrix<f64> {
    assert!(!blocks.is_empty() && !blocks[0].is_empty());
    let rows_per: Vec<usize> = blocks.iter().map(|r| r[0].nrows()).collect();
    let cols_per: Vec<usize> = blocks[0].iter().map(|b| b.ncols()).collect();
    let total_rows: usize = rows_per.iter().sum();
    let total_cols: usize = cols_per.iter().sum();
    let mut out = DMatrix::zeros(total_rows, total_cols);
    let mut r0 = 0;
    for (bi, row) in blocks.iter().enumerate() {
        assert_eq!(row.len(), cols_per.len());
        let mut c0 = 0;
        for (bj, blk) in row.iter().enumerate() {
            assert_eq!(blk.nrows(), rows_per[bi]);
            assert_eq!(blk.ncols(), cols_per[bj]);
            out.view_mut((r0, c0), blk.shape()).copy_from(*blk);
            c0 += cols_per[bj];
        }
        r0 += rows_per[bi];
    }
    out
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let mut ev = m.clone().symmetric_eigen().eigenvalues;
    ev.as_mut_slice().sort_by(f64::total_cmp);
    ev
}

pub fn lambda_max_symmetric(m: &DMatrix<f64>) -> f64 {
    let ev = symmetric_eigenvalues(m);
    ev[ev.len() - 1]
}

pub fn lambda_min_symmetric(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m)[0]
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.iter().all(|x| *x == 0.0) {
        return 0.0;
    }
    let gram = m.transpose() * m;
    lambda_max_symmetric(&gram).max(0.0).sqrt()
}

/// Moore-Penrose pseudo-inverse via SVD.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.iter().all(|x| *x == 0.0) {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    m.clone()
        .svd(true, true)
        .pseudo_inverse(1e-12)
        .expect("svd of a finite matrix")
}

/// Real spectral decomposition of a general square matrix.
///
/// Returns eigenvalues sorted ascending together with unit-norm eigenvector
/// columns, or `None` when the spectrum is not real or not simple enough to
/// produce a well-conditioned eigenbasis. Eigenvector signs are fixed so that
/// the largest-magnitude entry is positive, making the output deterministic.
pub fn real_eigen_decomposition(m: &DMatrix<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    assert_eq!(n, m.ncols());
    let scale = m.amax().max(1.0);
    let complex = m.clone().complex_eigenvalues();
    let imag_tol = 1e-9 * scale;
    if complex.iter().any(|z| z.im.abs() > imag_tol) {
        return None;
    }
    let mut eigenvalues: Vec<f64> = complex.iter().map(|z| z.re).collect();
    eigenvalues.sort_by(f64::total_cmp);
    // Repeated eigenvalues may be defective; demand separation.
    for w in eigenvalues.windows(2) {
        if (w[1] - w[0]).abs() <= 1e-9 * scale {
            return None;
        }
    }
    let mut basis = DMatrix::zeros(n, n);
    for (k, &lambda) in eigenvalues.iter().enumerate() {
        let shifted = m - DMatrix::identity(n, n) * lambda;
        // Null vector = right singular vector of the smallest singular value.
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.as_ref()?;
        let mut vec = v_t.row(n - 1).transpose();
        let (mut best, mut best_abs) = (0, 0.0);
        for i in 0..n {
            if vec[i].abs() > best_abs {
                best_abs = vec[i].abs();
                best = i;
            }
        }
        if vec[best] < 0.0 {
            vec.neg_mut();
        }
        basis.set_column(k, &vec);
    }
    // Reject nearly dependent eigenvectors.
    let min_sv = basis
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min_sv < 1e-9 {
        return None;
    }
    Some((DVector::from_vec(eigenvalues), basis))
}

/// Euclidean norm of the componentwise interval bound: `sup {|v| : lo ≤ v ≤ hi}`.
pub fn interval_euclidean_bound(lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    lo.zip_map(hi, |a, b| a.abs().max(b.abs())).norm()
}
