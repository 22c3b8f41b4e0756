//! HiPPO-LegS matrix, its normal plus low-rank split, and Skew-HiPPO
//! initialization of diagonal eigenvalues.

use crate::dss::Variant;
use crate::error::{Error, Result};
use crate::linalg::{hermitian_eig, CMat, CVec, C64};

/// `H[n][k] = -sqrt(2n+1) sqrt(2k+1)` below the diagonal, `-(n+1)` on it,
/// zero above (0-based indices).
pub fn hippo_legs(nprime: usize) -> CMat {
    CMat::from_fn(nprime, nprime, |n, k| {
        let v = if n > k {
            -((2 * n + 1) as f64).sqrt() * ((2 * k + 1) as f64).sqrt()
        } else if n == k {
            -((n + 1) as f64)
        } else {
            0.0
        };
        C64::new(v, 0.0)
    })
}

/// `H = H' - 1/2 P Q^T` with `H'` normal (`-1/2 I` plus a skew-symmetric part).
#[derive(Clone, Debug)]
pub struct HippoDecomposition {
    pub full: CMat,
    pub normal: CMat,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl HippoDecomposition {
    /// `max |H - (H' - 1/2 P Q^T)|`.
    pub fn reconstruction_error(&self) -> f64 {
        let n = self.full.rows();
        let mut err: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let rebuilt = self.normal[(i, j)].re - 0.5 * self.p[i] * self.q[j];
                err = err.max((self.full[(i, j)].re - rebuilt).abs()).max(self.normal[(i, j)].im.abs());
            }
        }
        err
    }

    /// `max |S + S^T|` for `S = H' + 1/2 I`.
    pub fn skew_defect(&self) -> f64 {
        let n = self.normal.rows();
        let mut err: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let sij = self.normal[(i, j)].re + if i == j { 0.5 } else { 0.0 };
                let sji = self.normal[(j, i)].re + if i == j { 0.5 } else { 0.0 };
                err = err.max((sij + sji).abs());
            }
        }
        err
    }
}

pub fn normal_lowrank_split(nprime: usize) -> HippoDecomposition {
    let root = |n: usize| ((2 * n + 1) as f64).sqrt();
    let normal = CMat::from_fn(nprime, nprime, |n, k| {
        let v = if n > k {
            -root(n) * root(k) / 2.0
        } else if n == k {
            -0.5
        } else {
            root(n) * root(k) / 2.0
        };
        C64::new(v, 0.0)
    });
    let p: Vec<f64> = (0..nprime).map(root).collect();
    HippoDecomposition { full: hippo_legs(nprime), normal, q: p.clone(), p }
}

/// The `n` eigenvalues of `H'` (size `2n`) with positive imaginary part,
/// sorted by ascending imaginary part.
///
/// `H' = -1/2 I + S` with `S` skew-symmetric, so `iS` is Hermitian and each
/// of its eigenvalues `nu` gives `-1/2 - i nu` for `H'`.
pub fn skew_hippo_eigs(n: usize) -> Result<CVec> {
    let dec = normal_lowrank_split(2 * n);
    let m = 2 * n;
    let is = CMat::from_fn(m, m, |i, j| {
        let s = dec.normal[(i, j)].re + if i == j { 0.5 } else { 0.0 };
        C64::new(0.0, s)
    });
    let eig = hermitian_eig(&is)?;
    let mut mu: CVec = eig.values.iter().filter(|&&nu| nu < 0.0).map(|&nu| C64::new(-0.5, -nu)).collect();
    mu.sort_by(|a, b| a.im.total_cmp(&b.im));
    if mu.len() != n {
        return Err(Error::Shape(format!("expected {n} eigenvalues with Im > 0, found {}", mu.len())));
    }
    Ok(mu)
}

/// Skew-HiPPO initialization for one DSS kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct SkewInit {
    pub mu: CVec,
    pub lambda_re: Vec<f64>,
    pub lambda_im: Vec<f64>,
    pub variant: Variant,
}

/// Maps eigenvalues to the trainable `(Lambda_re, Lambda_im)` of a variant:
/// EXP uses `(log(-Re mu), Im mu)`, SOFTMAX uses `(Re mu, Im mu)`.
pub fn init_lambda(variant: Variant, mu: &[C64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut re = Vec::with_capacity(mu.len());
    for (index, m) in mu.iter().enumerate() {
        re.push(match variant {
            Variant::Exp => {
                if m.re >= 0.0 {
                    return Err(Error::PositiveRealPart { index, re: m.re });
                }
                (-m.re).ln()
            }
            Variant::Softmax => m.re,
        });
    }
    Ok((re, mu.iter().map(|m| m.im).collect()))
}

pub fn skew_hippo_init(variant: Variant, n: usize) -> Result<SkewInit> {
    let mu = skew_hippo_eigs(n)?;
    let (lambda_re, lambda_im) = init_lambda(variant, &mu)?;
    Ok(SkewInit { mu, lambda_re, lambda_im, variant })
}

/// `index,re,im` CSV of the Skew-HiPPO eigenvalues.
pub fn eigs_csv(mu: &[C64]) -> String {
    let mut out = String::from("index,re,im\n");
    for (i, m) in mu.iter().enumerate() {
        out.push_str(&format!("{i},{:.17e},{:.17e}\n", m.re, m.im));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::schur;
    use proptest::prelude::*;

    #[test]
    fn small_hippo_matrices() {
        assert_eq!(hippo_legs(1)[(0, 0)].re, -1.0);
        let h = hippo_legs(2);
        assert_eq!(h[(0, 0)].re, -1.0);
        assert_eq!(h[(0, 1)].re, 0.0);
        assert!((h[(1, 0)].re + 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(h[(1, 1)].re, -2.0);
    }

    #[test]
    fn lower_triangular_with_negative_diagonal() {
        let h = hippo_legs(40);
        for i in 0..40 {
            assert!(h[(i, i)].re < 0.0);
            for j in i + 1..40 {
                assert_eq!(h[(i, j)].re, 0.0);
            }
        }
    }

    #[test]
    fn two_by_two_split() {
        let d = normal_lowrank_split(2);
        let r3 = 3f64.sqrt();
        let expect = [-0.5, r3 / 2.0, -r3 / 2.0, -0.5];
        for (i, e) in expect.iter().enumerate() {
            assert!((d.normal.as_slice()[i].re - e).abs() < 1e-15);
        }
        assert!((d.p[1] - r3).abs() < 1e-15 && d.p == d.q);
        assert!(d.reconstruction_error() <= 1e-12);
        assert_eq!(d.skew_defect(), 0.0);
    }

    #[test]
    fn scalar_skew_hippo() {
        let mu = skew_hippo_eigs(1).unwrap();
        assert!((mu[0] - C64::new(-0.5, 3f64.sqrt() / 2.0)).norm() < 1e-14);
    }

    #[test]
    fn spectrum_is_conjugate_closed_with_half_real_part() {
        let n = 32;
        let mu = skew_hippo_eigs(n).unwrap();
        assert!(mu.iter().all(|m| (m.re + 0.5).abs() <= 1e-10 && m.im > 0.0));
        let (t, _) = schur(&normal_lowrank_split(2 * n).normal).unwrap();
        let mut spec: Vec<C64> = t.diagonal();
        assert!(spec.iter().all(|m| (m.re + 0.5).abs() <= 1e-10));
        let mut expect: Vec<C64> = mu.iter().copied().chain(mu.iter().map(|m| m.conj())).collect();
        spec.sort_by(|a, b| a.im.total_cmp(&b.im));
        expect.sort_by(|a, b| a.im.total_cmp(&b.im));
        for (a, b) in spec.iter().zip(&expect) {
            assert!((a - b).norm() <= 1e-9 * b.norm().max(1.0));
        }
    }

    #[test]
    fn init_lambda_examples() {
        let mu = [C64::new(-0.5, 3f64.sqrt() / 2.0)];
        let (re, im) = init_lambda(Variant::Exp, &mu).unwrap();
        assert!((re[0] + std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(im[0], 3f64.sqrt() / 2.0);
        let (re, _) = init_lambda(Variant::Softmax, &mu).unwrap();
        assert_eq!(re[0], -0.5);
        assert!(matches!(
            init_lambda(Variant::Exp, &[C64::new(0.1, 1.0)]),
            Err(Error::PositiveRealPart { index: 0, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn reconstruction_identity(nprime in 1usize..=256) {
            let d = normal_lowrank_split(nprime);
            prop_assert!(d.reconstruction_error() <= 1e-12);
            prop_assert!(d.skew_defect() <= 1e-12);
        }

        #[test]
        fn init_round_trips(n in 1usize..=64) {
            let mu = skew_hippo_eigs(n).unwrap();
            for v in [Variant::Exp, Variant::Softmax] {
                let (re, im) = init_lambda(v, &mu).unwrap();
                for i in 0..n {
                    let back = v.lambda(re[i], im[i]);
                    prop_assert!((back - mu[i]).norm() <= 1e-14 * mu[i].norm().max(1.0));
                }
            }
        }
    }
}
