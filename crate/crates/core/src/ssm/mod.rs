//! Continuous-time SISO state-space models: ZOH discretization, impulse
//! kernels, recurrent evaluation, transfer functions and Gramians.

mod text;

pub use text::{read_ssm_file, write_ssm_file, SsmFile};

use crate::error::{Error, Result};
use crate::linalg::{expm, schur, solve, CMat, CVec, Lu, C64};

/// Real parts with magnitude at or below this are treated as marginal.
pub const STABILITY_MARGIN: f64 = 1e-12;

/// `exp(z) - 1` without cancellation for small `|z|`.
pub fn cexpm1(z: C64) -> C64 {
    if z.norm() > 0.5 {
        return z.exp() - 1.0;
    }
    let (s, c) = z.im.sin_cos();
    let half = (0.5 * z.im).sin();
    C64::new(z.re.exp_m1() * c - 2.0 * half * half, z.re.exp() * s)
}

/// Diagonal continuous-time system `dx/dt = diag(lambda) x + B u, y = C x`
/// sampled with step `delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalSsm {
    pub lambda: CVec,
    pub b: CVec,
    pub c: CVec,
    pub delta: f64,
}

impl DiagonalSsm {
    pub fn new(lambda: CVec, b: CVec, c: CVec, delta: f64) -> Result<Self> {
        let n = lambda.len();
        if b.len() != n || c.len() != n {
            return Err(Error::Shape(format!(
                "diagonal SSM with |lambda|={n}, |B|={}, |C|={}",
                b.len(),
                c.len()
            )));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("sample time must be positive, got {delta}")));
        }
        if lambda.iter().chain(&b).chain(&c).any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("diagonal SSM parameters".into()));
        }
        check_off_axis(&lambda)?;
        Ok(DiagonalSsm { lambda, b, c, delta })
    }

    pub fn order(&self) -> usize {
        self.lambda.len()
    }

    /// Largest real part of the spectrum.
    pub fn max_real(&self) -> f64 {
        self.lambda.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_dense(&self) -> DenseSsm {
        DenseSsm { a: CMat::diag(&self.lambda), b: self.b.clone(), c: self.c.clone(), delta: self.delta }
    }
}

fn check_off_axis(lambda: &[C64]) -> Result<()> {
    for (index, l) in lambda.iter().enumerate() {
        if l.re.abs() <= STABILITY_MARGIN {
            return Err(Error::OnImaginaryAxis { index, re: l.re });
        }
    }
    Ok(())
}

/// Dense system `(A, B, C)` as produced by truncation. `delta` is carried so
/// reduced systems keep the sample time of the system they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSsm {
    pub a: CMat,
    pub b: CVec,
    pub c: CVec,
    pub delta: f64,
}

impl DenseSsm {
    pub fn new(a: CMat, b: CVec, c: CVec, delta: f64) -> Result<Self> {
        if !a.is_square() || b.len() != a.rows() || c.len() != a.rows() {
            return Err(Error::Shape(format!(
                "dense SSM with A {}x{}, |B|={}, |C|={}",
                a.rows(),
                a.cols(),
                b.len(),
                c.len()
            )));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("sample time must be positive, got {delta}")));
        }
        Ok(DenseSsm { a, b, c, delta })
    }

    pub fn order(&self) -> usize {
        self.a.rows()
    }

    /// `(T A T^-1, T B, C T^-1)`.
    pub fn transform(&self, t: &CMat, tinv: &CMat) -> DenseSsm {
        DenseSsm {
            a: t.matmul(&self.a).matmul(tinv),
            b: t.matvec(&self.b),
            c: tinv.vecmat(&self.c),
            delta: self.delta,
        }
    }

    /// Impulse response `h_k = C e^{A k delta} (e^{A delta} - I) A^-1 B`
    /// through the matrix exponential, independent of any eigendecomposition.
    pub fn impulse_kernel(&self, len: usize) -> Result<CVec> {
        let n = self.order();
        let abar = expm(&self.a.scale(C64::new(self.delta, 0.0)));
        let ainv_b = solve(&self.a, &CMat::new(n, 1, self.b.clone())?)?;
        let mut x = abar.sub(&CMat::identity(n)).matmul(&ainv_b).col(0);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.c.iter().zip(&x).map(|(c, x)| c * x).sum());
            x = abar.matvec(&x);
        }
        Ok(out)
    }
}

/// Zero-order-hold discretization of a diagonal system.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub abar: CVec,
    pub bbar: CVec,
    pub cbar: CVec,
}

pub fn discretize(s: &DiagonalSsm) -> Result<DiscreteSsm> {
    check_off_axis(&s.lambda)?;
    let abar = s.lambda.iter().map(|l| (l * s.delta).exp()).collect();
    let bbar = s.lambda.iter().zip(&s.b).map(|(l, b)| cexpm1(l * s.delta) * b / l).collect();
    Ok(DiscreteSsm { abar, bbar, cbar: s.c.clone() })
}

/// `h_k = sum_i C_i e^{lambda_i k delta} (e^{lambda_i delta} - 1) B_i / lambda_i`
/// for `k < len`.
pub fn impulse_kernel(s: &DiagonalSsm, len: usize) -> Result<CVec> {
    check_off_axis(&s.lambda)?;
    let coeff: Vec<C64> = s
        .lambda
        .iter()
        .zip(&s.b)
        .zip(&s.c)
        .map(|((l, b), c)| c * b * cexpm1(l * s.delta) / l)
        .collect();
    Ok((0..len)
        .map(|k| {
            let t = k as f64 * s.delta;
            s.lambda.iter().zip(&coeff).map(|(l, w)| w * (l * t).exp()).sum()
        })
        .collect())
}

/// Magnitude of the first kernel sample past `len`; small values mean the
/// truncated convolution is a good stand-in for the infinite recurrence.
pub fn kernel_tail(s: &DiagonalSsm, len: usize) -> Result<f64> {
    check_off_axis(&s.lambda)?;
    let t = len as f64 * s.delta;
    Ok(s.lambda
        .iter()
        .zip(&s.b)
        .zip(&s.c)
        .map(|((l, b), c)| c * b * cexpm1(l * s.delta) / l * (l * t).exp())
        .sum::<C64>()
        .norm())
}

/// Runs `x_k = Abar x_{k-1} + Bbar u_k`, `y_k = C x_k` from `x0` (the state
/// before the first sample). Returns the outputs and the final state.
pub fn recurrent_run(d: &DiscreteSsm, u: &[f64], x0: Option<&[C64]>) -> Result<(CVec, CVec)> {
    let n = d.abar.len();
    let mut x = match x0 {
        Some(x0) if x0.len() != n => {
            return Err(Error::Shape(format!("initial state has {} entries, expected {n}", x0.len())))
        }
        Some(x0) => x0.to_vec(),
        None => vec![C64::new(0.0, 0.0); n],
    };
    let mut y = Vec::with_capacity(u.len());
    for &uk in u {
        y.push(recurrent_step(d, &mut x, uk));
    }
    Ok((y, x))
}

/// One step of the recurrence, O(N) time and no allocation.
#[inline]
pub fn recurrent_step(d: &DiscreteSsm, x: &mut [C64], u: f64) -> C64 {
    let mut y = C64::new(0.0, 0.0);
    for i in 0..x.len() {
        x[i] = d.abar[i] * x[i] + d.bbar[i] * u;
        y += d.cbar[i] * x[i];
    }
    y
}

/// Transfer function `G(s) = C (sI - A)^-1 B`.
pub trait TransferFunction {
    fn transfer(&self, s: C64) -> Result<C64>;
}

impl TransferFunction for DiagonalSsm {
    fn transfer(&self, s: C64) -> Result<C64> {
        let mut g = C64::new(0.0, 0.0);
        for ((l, b), c) in self.lambda.iter().zip(&self.b).zip(&self.c) {
            let d = s - l;
            if d.norm() < 1e-14 {
                return Err(Error::PoleHit(d.norm()));
            }
            g += c * b / d;
        }
        Ok(g)
    }
}

impl TransferFunction for DenseSsm {
    fn transfer(&self, s: C64) -> Result<C64> {
        let n = self.order();
        let shifted = CMat::from_fn(n, n, |i, j| if i == j { s - self.a[(i, j)] } else { -self.a[(i, j)] });
        let x = match Lu::new(&shifted) {
            Ok(lu) => lu.solve_vec(&self.b),
            Err(Error::Singular { pivot, .. }) => return Err(Error::PoleHit(pivot)),
            Err(e) => return Err(e),
        };
        Ok(self.c.iter().zip(&x).map(|(c, x)| c * x).sum())
    }
}

pub fn transfer_eval<S: TransferFunction + ?Sized>(sys: &S, s: C64) -> Result<C64> {
    sys.transfer(s)
}

/// Controllability and observability Gramians.
#[derive(Clone, Debug)]
pub struct Gramians {
    pub p: CMat,
    pub q: CMat,
}

/// Closed-form Gramians of a diagonal system:
/// `P_ij = -B_i conj(B_j) / (lambda_i + conj(lambda_j))`,
/// `Q_ij = -conj(C_i) C_j / (conj(lambda_i) + lambda_j)`.
pub fn gramians_diagonal(s: &DiagonalSsm) -> Result<Gramians> {
    let margin = s.max_real();
    if margin >= -STABILITY_MARGIN {
        return Err(Error::Unstable(margin));
    }
    let n = s.order();
    let l = &s.lambda;
    let p = CMat::from_fn(n, n, |i, j| -s.b[i] * s.b[j].conj() / (l[i] + l[j].conj()));
    let q = CMat::from_fn(n, n, |i, j| -s.c[i].conj() * s.c[j] / (l[i].conj() + l[j]));
    Ok(Gramians { p, q })
}

/// Systems up to this order are also solved through the Kronecker form.
pub const KRONECKER_MAX_ORDER: usize = 16;

/// Gramians of a dense stable system from the two Lyapunov equations
/// `A P + P A* + B B* = 0` and `A* Q + Q A + C* C = 0`.
pub fn gramians_dense(s: &DenseSsm) -> Result<Gramians> {
    let (t, z) = schur(&s.a)?;
    let margin = t.diagonal().iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    if margin >= -STABILITY_MARGIN {
        return Err(Error::Unstable(margin));
    }
    let cconj: CVec = s.c.iter().map(|c| c.conj()).collect();
    let (p, q) = if s.order() <= KRONECKER_MAX_ORDER {
        (lyapunov_kronecker(&s.a, &s.b)?, lyapunov_kronecker(&s.a.adjoint(), &cconj)?)
    } else {
        let p = lyapunov_schur(&t, &z, &s.b)?;
        let (ta, za) = schur(&s.a.adjoint())?;
        (p, lyapunov_schur(&ta, &za, &cconj)?)
    };
    Ok(Gramians { p, q })
}

/// Solves `A X + X A* + b b* = 0` with `vec(A X + X A*) = (I (x) A + conj(A) (x) I) vec(X)`.
pub fn lyapunov_kronecker(a: &CMat, b: &[C64]) -> Result<CMat> {
    let n = a.rows();
    let nn = n * n;
    let mut k = CMat::zeros(nn, nn);
    for j in 0..n {
        for i in 0..n {
            let row = i + j * n;
            for m in 0..n {
                k[(row, m + j * n)] += a[(i, m)];
                k[(row, i + m * n)] += a[(j, m)].conj();
            }
        }
    }
    let rhs: CVec = (0..nn).map(|idx| -b[idx % n] * b[idx / n].conj()).collect();
    let x = Lu::new(&k)?.solve_vec(&rhs);
    Ok(CMat::from_fn(n, n, |i, j| x[i + j * n]).hermitian_part())
}

/// Bartels-Stewart style solve of `A X + X A* + b b* = 0` given the Schur
/// form `A = Z T Z*`.
pub fn lyapunov_schur(t: &CMat, z: &CMat, b: &[C64]) -> Result<CMat> {
    let n = t.rows();
    let zb = z.adjoint().matvec(b);
    // T Y + Y T* = F with F = -Z* b b* Z, solved column by column from the right
    let f = CMat::from_fn(n, n, |i, j| -zb[i] * zb[j].conj());
    let mut y = CMat::zeros(n, n);
    for j in (0..n).rev() {
        let mut rhs: CVec = (0..n).map(|i| f[(i, j)]).collect();
        for k in j + 1..n {
            let tjk = t[(j, k)].conj();
            for (i, r) in rhs.iter_mut().enumerate() {
                *r -= y[(i, k)] * tjk;
            }
        }
        let shift = t[(j, j)].conj();
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for k in i + 1..n {
                s -= t[(i, k)] * y[(k, j)];
            }
            let d = t[(i, i)] + shift;
            if d.norm() < 1e-300 {
                return Err(Error::Singular { pivot: d.norm(), col: i });
            }
            y[(i, j)] = s / d;
        }
    }
    Ok(z.matmul(&y).matmul(&z.adjoint()).hermitian_part())
}

/// `||A P + P A* + B B*||_F / ||B B*||_F`.
pub fn lyapunov_residual_p(a: &CMat, b: &[C64], p: &CMat) -> f64 {
    let bb = CMat::outer(b, b);
    let res = a.matmul(p).add(&p.matmul(&a.adjoint())).add(&bb);
    res.fro_norm() / bb.fro_norm().max(f64::MIN_POSITIVE)
}

/// `||A* Q + Q A + C* C||_F / ||C* C||_F`.
pub fn lyapunov_residual_q(a: &CMat, c: &[C64], q: &CMat) -> f64 {
    let cc: CVec = c.iter().map(|x| x.conj()).collect();
    let ccm = CMat::outer(&cc, &cc);
    let res = a.adjoint().matmul(q).add(&q.matmul(a)).add(&ccm);
    res.fro_norm() / ccm.fro_norm().max(f64::MIN_POSITIVE)
}

/// Stability verdict with the margin `max Re(eig(A))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stability {
    pub stable: bool,
    pub margin: f64,
}

pub trait Spectrum {
    fn max_real_eig(&self) -> Result<f64>;
}

impl Spectrum for DiagonalSsm {
    fn max_real_eig(&self) -> Result<f64> {
        Ok(self.max_real())
    }
}

impl Spectrum for DenseSsm {
    fn max_real_eig(&self) -> Result<f64> {
        let (t, _) = schur(&self.a)?;
        Ok(t.diagonal().iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max))
    }
}

pub fn is_stable<S: Spectrum + ?Sized>(sys: &S) -> Result<Stability> {
    let margin = sys.max_real_eig()?;
    Ok(Stability { stable: margin < -STABILITY_MARGIN, margin })
}
