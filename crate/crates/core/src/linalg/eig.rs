use super::{inverse, CMat, CVec, C64};
use crate::error::{Error, Result};

const EPS: f64 = f64::EPSILON;

#[derive(Clone, Debug)]
pub struct HermitianEig {
    /// Ascending.
    pub values: Vec<f64>,
    /// Unitary; column `i` pairs with `values[i]`.
    pub vectors: CMat,
}

#[derive(Clone, Debug)]
pub struct GeneralEig {
    /// Sorted by real part descending, then imaginary part descending.
    pub values: CVec,
    /// Unit-norm right eigenvectors, first significant entry real positive.
    pub vectors: CMat,
    /// `||V||_F ||V^-1||_F`.
    pub cond: f64,
}

/// Householder vector `v` (unit norm) mapping `x` onto `alpha e_1`.
fn householder(x: &[C64]) -> Option<(Vec<C64>, C64)> {
    let norm = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let phase = if x[0].norm() > 0.0 { x[0] / x[0].norm() } else { C64::new(1.0, 0.0) };
    let alpha = -phase * norm;
    let mut v = x.to_vec();
    v[0] -= alpha;
    let vn = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if vn == 0.0 {
        return None;
    }
    for z in v.iter_mut() {
        *z /= vn;
    }
    Some((v, alpha))
}

/// Applies `H = I - 2 v v*` (acting on indices `off..`) from the left to
/// rows and from the right to columns of `a`, and from the right to `q`.
fn apply_reflector(a: &mut CMat, q: &mut CMat, v: &[C64], off: usize) {
    let n = a.rows();
    // rows: A[S,:] <- A[S,:] - 2 v (v* A[S,:])
    for j in 0..n {
        let mut s = C64::new(0.0, 0.0);
        for (t, vt) in v.iter().enumerate() {
            s += vt.conj() * a[(off + t, j)];
        }
        s *= 2.0;
        for (t, vt) in v.iter().enumerate() {
            a[(off + t, j)] -= vt * s;
        }
    }
    // columns: A[:,S] <- A[:,S] - 2 (A[:,S] v) v*
    for m in [a, q] {
        for i in 0..n {
            let mut s = C64::new(0.0, 0.0);
            for (t, vt) in v.iter().enumerate() {
                s += m[(i, off + t)] * vt;
            }
            s *= 2.0;
            for (t, vt) in v.iter().enumerate() {
                m[(i, off + t)] -= s * vt.conj();
            }
        }
    }
}

/// Reduces `a` in place to upper Hessenberg form `Q* A Q`, returning `Q`.
/// For Hermitian input the result is tridiagonal.
fn hessenberg(a: &mut CMat) -> CMat {
    let n = a.rows();
    let mut q = CMat::identity(n);
    for k in 0..n.saturating_sub(2) {
        let x: Vec<C64> = (k + 1..n).map(|i| a[(i, k)]).collect();
        if x[1..].iter().all(|z| z.norm() == 0.0) {
            continue;
        }
        if let Some((v, alpha)) = householder(&x) {
            apply_reflector(a, &mut q, &v, k + 1);
            a[(k + 1, k)] = alpha;
            for i in k + 2..n {
                a[(i, k)] = C64::new(0.0, 0.0);
            }
        }
    }
    q
}

/// Implicit QL on a real symmetric tridiagonal matrix (`d` diagonal, `e[i]`
/// couples `i` and `i+1`), rotating the columns of `z`.
fn tridiagonal_ql(d: &mut [f64], e: &mut [f64], z: &mut CMat) -> Result<()> {
    let n = d.len();
    const MAX_ITER: usize = 60;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= EPS * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > MAX_ITER {
                return Err(Error::NonConvergence(MAX_ITER));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..n {
                    let zf = z[(k, i + 1)];
                    let zi = z[(k, i)];
                    z[(k, i + 1)] = zi * s + zf * c;
                    z[(k, i)] = zi * c - zf * s;
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Eigen-decomposition of a Hermitian matrix, `M = U diag(values) U*`.
///
/// The input is symmetrized first; asymmetry above `1e-10 ||M||_F` is an
/// error rather than something to paper over.
pub fn hermitian_eig(m: &CMat) -> Result<HermitianEig> {
    if !m.is_square() {
        return Err(Error::Shape(format!("eig of {}x{} matrix", m.rows(), m.cols())));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("hermitian_eig input".into()));
    }
    let n = m.rows();
    let tol = 1e-10 * m.fro_norm();
    let asym = m.hermitian_defect();
    if asym > tol {
        return Err(Error::NonHermitian { asym, tol });
    }
    let mut a = m.hermitian_part();
    let mut q = hessenberg(&mut a);

    // unitary diagonal scaling makes the off-diagonal real and non-negative
    let mut d: Vec<f64> = (0..n).map(|i| a[(i, i)].re).collect();
    let mut e = vec![0.0; n];
    let mut phase = C64::new(1.0, 0.0);
    for i in 0..n {
        if i > 0 {
            let sub = a[(i, i - 1)];
            let r = sub.norm();
            e[i - 1] = r;
            if r > 0.0 {
                phase *= sub / r;
            }
        }
        for k in 0..n {
            q[(k, i)] *= phase;
        }
    }
    tridiagonal_ql(&mut d, &mut e, &mut q)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].total_cmp(&d[j]));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = CMat::from_fn(n, n, |r, c| q[(r, order[c])]);
    Ok(HermitianEig { values, vectors })
}

/// Hermitian square root of a positive semidefinite matrix.
///
/// Eigenvalues in `[-1e-12 lambda_max, 0)` are round-off and clamped to zero.
pub fn hermitian_sqrt(p: &CMat) -> Result<CMat> {
    let eig = hermitian_eig(p)?;
    let lmax = eig.values.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut roots = Vec::with_capacity(eig.values.len());
    for &l in &eig.values {
        if l < -1e-12 * lmax {
            return Err(Error::NotPsd(l));
        }
        roots.push(l.max(0.0).sqrt());
    }
    Ok(spectral_apply(&eig.vectors, &roots))
}

/// `U diag(f) U*`, Hermitian by construction.
pub(crate) fn spectral_apply(u: &CMat, f: &[f64]) -> CMat {
    let n = u.rows();
    let scaled = CMat::from_fn(n, n, |i, j| u[(i, j)] * f[j]);
    scaled.matmul(&u.adjoint()).hermitian_part()
}

/// Complex Schur decomposition `M = Z T Z*` with `T` upper triangular.
pub fn schur(m: &CMat) -> Result<(CMat, CMat)> {
    if !m.is_square() {
        return Err(Error::Shape(format!("schur of {}x{} matrix", m.rows(), m.cols())));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("schur input".into()));
    }
    let n = m.rows();
    let mut h = m.clone();
    let mut z = hessenberg(&mut h);
    if n <= 1 {
        return Ok((h, z));
    }
    let norm = h.fro_norm().max(f64::MIN_POSITIVE);
    let max_total = 60 * n;
    let mut total = 0;
    let mut iter = 0;
    let mut hi = n - 1;
    let mut rots: Vec<(C64, C64)> = Vec::with_capacity(n);
    while hi > 0 {
        let mut l = hi;
        while l > 0 {
            let mut s = h[(l - 1, l - 1)].norm() + h[(l, l)].norm();
            if s == 0.0 {
                s = norm;
            }
            if h[(l, l - 1)].norm() <= EPS * s {
                h[(l, l - 1)] = C64::new(0.0, 0.0);
                break;
            }
            l -= 1;
        }
        if l == hi {
            hi -= 1;
            iter = 0;
            continue;
        }
        iter += 1;
        total += 1;
        if total > max_total {
            return Err(Error::NonConvergence(max_total));
        }

        let shift = if iter % 10 == 0 {
            h[(hi, hi)] + 0.75 * h[(hi, hi - 1)].norm()
        } else {
            let (a, b, c, d) = (h[(hi - 1, hi - 1)], h[(hi - 1, hi)], h[(hi, hi - 1)], h[(hi, hi)]);
            let half = (a - d) * 0.5;
            let disc = (half * half + b * c).sqrt();
            let mean = (a + d) * 0.5;
            let (e1, e2) = (mean + disc, mean - disc);
            if (e1 - d).norm() <= (e2 - d).norm() {
                e1
            } else {
                e2
            }
        };

        for k in l..=hi {
            h[(k, k)] -= shift;
        }
        rots.clear();
        for k in l..hi {
            let (x, y) = (h[(k, k)], h[(k + 1, k)]);
            let r = (x.norm_sqr() + y.norm_sqr()).sqrt();
            let (c, s) = if r == 0.0 { (C64::new(1.0, 0.0), C64::new(0.0, 0.0)) } else { (x / r, y / r) };
            for j in k..n {
                let (p, q) = (h[(k, j)], h[(k + 1, j)]);
                h[(k, j)] = c.conj() * p + s.conj() * q;
                h[(k + 1, j)] = -s * p + c * q;
            }
            rots.push((c, s));
        }
        for (idx, &(c, s)) in rots.iter().enumerate() {
            let k = l + idx;
            for i in 0..=(k + 1) {
                let (p, q) = (h[(i, k)], h[(i, k + 1)]);
                h[(i, k)] = p * c + q * s;
                h[(i, k + 1)] = -p * s.conj() + q * c.conj();
            }
            for i in 0..n {
                let (p, q) = (z[(i, k)], z[(i, k + 1)]);
                z[(i, k)] = p * c + q * s;
                z[(i, k + 1)] = -p * s.conj() + q * c.conj();
            }
        }
        for k in l..=hi {
            h[(k, k)] += shift;
        }
    }
    for i in 1..n {
        for j in 0..i {
            h[(i, j)] = C64::new(0.0, 0.0);
        }
    }
    Ok((h, z))
}

/// Eigenvalues and right eigenvectors of a general complex matrix.
///
/// Fails with [`Error::NearDefective`] when the eigenvector matrix has
/// condition number above `1e10`.
pub fn general_eig(m: &CMat) -> Result<GeneralEig> {
    let (t, z) = schur(m)?;
    let n = t.rows();
    let small = EPS * t.fro_norm().max(f64::MIN_POSITIVE);

    // eigenvectors of the triangular factor by back substitution
    let mut y = CMat::zeros(n, n);
    for k in 0..n {
        let lam = t[(k, k)];
        y[(k, k)] = C64::new(1.0, 0.0);
        for j in (0..k).rev() {
            let mut s = C64::new(0.0, 0.0);
            for mm in j + 1..=k {
                s += t[(j, mm)] * y[(mm, k)];
            }
            let mut den = t[(j, j)] - lam;
            if den.norm() < small {
                den = C64::new(small, 0.0);
            }
            y[(j, k)] = -s / den;
        }
        // rescale to avoid overflow when the block is nearly defective
        let mx = (0..=k).map(|j| y[(j, k)].norm()).fold(0.0, f64::max);
        if mx > 1e100 {
            for j in 0..=k {
                y[(j, k)] /= mx;
            }
        }
    }
    let v = z.matmul(&y);

    let mut order: Vec<usize> = (0..n).collect();
    let vals = t.diagonal();
    order.sort_by(|&i, &j| {
        vals[j].re.total_cmp(&vals[i].re).then(vals[j].im.total_cmp(&vals[i].im))
    });
    let values: CVec = order.iter().map(|&i| vals[i]).collect();
    let mut vectors = CMat::zeros(n, n);
    for (c, &src) in order.iter().enumerate() {
        let mut col = v.col(src);
        normalize_column(&mut col);
        for (r, x) in col.into_iter().enumerate() {
            vectors[(r, c)] = x;
        }
    }
    let cond = match inverse(&vectors) {
        Ok(inv) => vectors.fro_norm() * inv.fro_norm(),
        Err(_) => f64::INFINITY,
    };
    if cond.is_nan() || cond > 1e10 {
        return Err(Error::NearDefective(cond));
    }
    Ok(GeneralEig { values, vectors, cond })
}

/// Unit norm, with the first significant entry rotated to the positive real axis.
pub(crate) fn normalize_column(col: &mut [C64]) {
    let norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let mx = col.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let pivot = col.iter().find(|z| z.norm() > 1e-8 * mx).copied().unwrap_or(C64::new(1.0, 0.0));
    let rot = pivot.conj() / pivot.norm() / norm;
    for z in col.iter_mut() {
        *z *= rot;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c64;
    use crate::linalg::testutil::*;
    use proptest::prelude::*;

    fn reconstruct(e: &HermitianEig) -> CMat {
        spectral_apply_signed(&e.vectors, &e.values)
    }

    fn spectral_apply_signed(u: &CMat, f: &[f64]) -> CMat {
        let n = u.rows();
        CMat::from_fn(n, n, |i, j| u[(i, j)] * f[j]).matmul(&u.adjoint())
    }

    #[test]
    fn identity_and_diagonal() {
        let e = hermitian_eig(&CMat::identity(2)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0]);
        let e = hermitian_eig(&CMat::diag_real(&[3.0, 2.0])).unwrap();
        assert!((e.values[0] - 2.0).abs() < 1e-15 && (e.values[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn swap_matrix_eigenvalues() {
        let m = CMat::from_real(2, 2, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let e = hermitian_eig(&m).unwrap();
        assert!((e.values[0] + 1.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn non_hermitian_rejected() {
        let m = CMat::from_real(2, 2, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(hermitian_eig(&m), Err(Error::NonHermitian { .. })));
    }

    #[test]
    fn sqrt_examples() {
        let s = hermitian_sqrt(&CMat::diag_real(&[4.0, 9.0])).unwrap();
        assert!(s.sub(&CMat::diag_real(&[2.0, 3.0])).max_abs() < 1e-14);
        let s = hermitian_sqrt(&CMat::identity(3)).unwrap();
        assert!(s.sub(&CMat::identity(3)).max_abs() < 1e-14);
        assert!(matches!(hermitian_sqrt(&CMat::diag_real(&[1.0, -0.5])), Err(Error::NotPsd(_))));
    }

    #[test]
    fn random_psd_sqrt() {
        let mut rng = rng(11);
        let x = random_mat(&mut rng, 8, 8);
        let p = x.matmul(&x.adjoint());
        let s = hermitian_sqrt(&p).unwrap();
        assert!(s.hermitian_defect() < 1e-14);
        assert!(s.matmul(&s).sub(&p).fro_norm() / p.fro_norm() <= 1e-9);
    }

    #[test]
    fn general_eig_examples() {
        let d = CMat::diag(&[c64(-1.0, 0.0), c64(-2.0, 3.0)]);
        let e = general_eig(&d).unwrap();
        assert_eq!(e.values, vec![c64(-1.0, 0.0), c64(-2.0, 3.0)]);
        assert!(e.vectors.sub(&CMat::identity(2)).max_abs() < 1e-15);

        let rot = CMat::from_real(2, 2, &[0.0, -1.0, 1.0, 0.0]).unwrap();
        let e = general_eig(&rot).unwrap();
        assert!((e.values[0] - c64(0.0, 1.0)).norm() < 1e-14);
        assert!((e.values[1] - c64(0.0, -1.0)).norm() < 1e-14);

        let jordan = CMat::from_real(2, 2, &[1.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(matches!(general_eig(&jordan), Err(Error::NearDefective(_))));
    }

    #[test]
    fn schur_is_unitary_similarity() {
        let mut rng = rng(5);
        let m = random_mat(&mut rng, 20, 20);
        let (t, z) = schur(&m).unwrap();
        assert!(z.adjoint().matmul(&z).sub(&CMat::identity(20)).fro_norm() < 1e-12);
        assert!(z.matmul(&t).matmul(&z.adjoint()).sub(&m).fro_norm() / m.fro_norm() < 1e-12);
        for i in 1..20 {
            for j in 0..i {
                assert_eq!(t[(i, j)], c64(0.0, 0.0));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn hermitian_reconstruction(n in 1usize..=64, seed in any::<u64>()) {
            let mut rng = rng(seed);
            let m = random_hermitian(&mut rng, n);
            let e = hermitian_eig(&m).unwrap();
            let scale = m.fro_norm().max(1e-300);
            prop_assert!(reconstruct(&e).sub(&m).fro_norm() / scale <= 1e-10);
            let unit = e.vectors.adjoint().matmul(&e.vectors).sub(&CMat::identity(n)).fro_norm();
            prop_assert!(unit <= 1e-10);
            prop_assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn psd_sqrt_squares_back(n in 1usize..=64, seed in any::<u64>()) {
            let mut rng = rng(seed);
            let x = random_mat(&mut rng, n, n);
            let p = x.matmul(&x.adjoint());
            let s = hermitian_sqrt(&p).unwrap();
            prop_assert!(s.matmul(&s).sub(&p).fro_norm() / p.fro_norm() <= 1e-9);
        }

        #[test]
        fn general_residual(n in 1usize..=32, seed in any::<u64>()) {
            let mut rng = rng(seed);
            let m = random_mat(&mut rng, n, n);
            if let Ok(e) = general_eig(&m) {
                let mv = m.matmul(&e.vectors);
                let vd = CMat::from_fn(n, n, |i, j| e.vectors[(i, j)] * e.values[j]);
                prop_assert!(mv.sub(&vd).fro_norm() / m.fro_norm() <= 1e-8);
            }
        }
    }
}
