//! Balanced truncation: Hankel singular values, the balancing transform,
//! truncation to order `r`, and sampled H-infinity error certification.
//!
//! The transform follows the square-root procedure on the Gramians:
//! `P^{1/2} Q P^{1/2} = U Lambda U*`, `T = Lambda^{1/4} U* P^{-1/2}`, so that
//! `T P T* = T^{-*} Q T^{-1} = diag(sigma)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{hermitian_eig, schur, CMat, C64};
use crate::ssm::{gramians_diagonal, is_stable, DenseSsm, DiagonalSsm, Gramians, TransferFunction};

/// What to do with modes that have `Re(lambda) >= 0` before reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stabilize {
    #[default]
    Error,
    /// `Re(lambda) -> -|Re(lambda)|`, imaginary part unchanged.
    Reflect,
}

impl std::str::FromStr for Stabilize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "error" => Ok(Stabilize::Error),
            "reflect" => Ok(Stabilize::Reflect),
            _ => Err(Error::Config(format!("unknown stabilize policy `{s}` (expected error|reflect)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReduceOptions {
    pub stabilize: Stabilize,
    /// Clamp Hankel singular values below the rank tolerance instead of
    /// failing with [`Error::NearlyUncontrollable`].
    pub clamp_rank: bool,
    /// Relative rank tolerance, `sigma_min <= rank_tol * sigma_1` is rank deficient.
    pub rank_tol: f64,
    pub grid: FrequencyGrid,
}

impl Default for ReduceOptions {
    fn default() -> Self {
        ReduceOptions { stabilize: Stabilize::Error, clamp_rank: false, rank_tol: 1e-10, grid: FrequencyGrid::default() }
    }
}

/// Log-spaced sweep over `[decades_below * m, decades_above * M]` where
/// `m`, `M` are the smallest and largest pole scales `|Re| + |Im|`; both signs
/// of frequency are sampled plus zero and every pole frequency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    pub points: usize,
    pub low_factor: f64,
    pub high_factor: f64,
    pub refine_iters: usize,
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        FrequencyGrid { points: 512, low_factor: 1e-3, high_factor: 1e3, refine_iters: 60 }
    }
}

impl FrequencyGrid {
    pub fn frequencies(&self, poles: &[C64]) -> Vec<f64> {
        let scales: Vec<f64> = poles.iter().map(|l| l.re.abs() + l.im.abs()).filter(|s| *s > 0.0).collect();
        let m = scales.iter().copied().fold(f64::INFINITY, f64::min);
        let mx = scales.iter().copied().fold(0.0, f64::max);
        let (m, mx) = if scales.is_empty() { (1.0, 1.0) } else { (m, mx) };
        let lo = (self.low_factor * m).ln();
        let hi = (self.high_factor * mx).ln();
        let mut w = vec![0.0];
        let pts = self.points.max(2);
        for j in 0..pts {
            let x = (lo + (hi - lo) * j as f64 / (pts - 1) as f64).exp();
            w.push(x);
            w.push(-x);
        }
        w.extend(poles.iter().map(|l| l.im));
        w.sort_by(f64::total_cmp);
        w.dedup();
        w
    }
}

/// Balanced realization of a diagonal system.
#[derive(Clone, Debug)]
pub struct BalancedRealization {
    pub original: DiagonalSsm,
    pub t: CMat,
    pub tinv: CMat,
    pub sys_bal: DenseSsm,
    /// Hankel singular values, descending.
    pub sigma: Vec<f64>,
    pub gramians: Gramians,
    /// Singular values that were lifted to the rank tolerance, if any.
    pub clamped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub sigma: Vec<f64>,
    pub r: usize,
    /// `sigma_{r+1}` (zero when nothing is truncated).
    pub lower_bound: f64,
    /// `2 * sum_{i>r} sigma_i`.
    pub upper_bound: f64,
    pub sampled_hinf_error: f64,
    /// False when `sigma_r` and `sigma_{r+1}` are nearly tied, so the bounds
    /// are indicative only.
    pub bound_strict: bool,
    pub stabilized: Vec<usize>,
    pub clamped: usize,
    pub warnings: Vec<String>,
    pub residuals: BTreeMap<String, f64>,
}

impl ReductionReport {
    /// `index,sigma` CSV of the Hankel spectrum (1-based index).
    pub fn hankel_csv(&self) -> String {
        hankel_csv(&self.sigma)
    }
}

pub fn hankel_csv(sigma: &[f64]) -> String {
    let mut out = String::from("index,sigma\n");
    for (i, s) in sigma.iter().enumerate() {
        out.push_str(&format!("{},{:.17e}\n", i + 1, s));
    }
    out
}

/// Eigen-decomposition of `P` reused for `P^{1/2}` and `P^{-1/2}`.
struct PsdRoots {
    sqrt: CMat,
    inv_sqrt: CMat,
}

fn psd_roots(p: &CMat, floor: Option<f64>) -> Result<PsdRoots> {
    let eig = hermitian_eig(p)?;
    let lmax = eig.values.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let n = p.rows();
    let mut root = Vec::with_capacity(n);
    let mut inv_root = Vec::with_capacity(n);
    for &l in &eig.values {
        if l < -1e-12 * lmax {
            return Err(Error::NotPsd(l));
        }
        let mut l = l.max(0.0);
        if let Some(f) = floor {
            l = l.max(f);
        }
        if l == 0.0 {
            return Err(Error::NearlyUncontrollable { sigma_min: 0.0, tol: 0.0 });
        }
        root.push(l.sqrt());
        inv_root.push(1.0 / l.sqrt());
    }
    let u = &eig.vectors;
    let apply = |f: &[f64]| CMat::from_fn(n, n, |i, j| u[(i, j)] * f[j]).matmul(&u.adjoint()).hermitian_part();
    Ok(PsdRoots { sqrt: apply(&root), inv_sqrt: apply(&inv_root) })
}

/// Hankel singular values `sqrt(eig(P^{1/2} Q P^{1/2}))`, descending.
pub fn hankel_values(p: &CMat, q: &CMat) -> Result<Vec<f64>> {
    if p.rows() != q.rows() || !p.is_square() || !q.is_square() {
        return Err(Error::Shape("Gramians must be square and of equal size".into()));
    }
    let s = crate::linalg::hermitian_sqrt(p)?;
    let m = s.matmul(q).matmul(&s);
    let eig = hermitian_eig(&m)?;
    let lmax = eig.values.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut sigma = Vec::with_capacity(eig.values.len());
    for &l in eig.values.iter().rev() {
        if l < -1e-12 * lmax {
            return Err(Error::NotPsd(l));
        }
        sigma.push(l.max(0.0).sqrt());
    }
    Ok(sigma)
}

/// Independent route: `sqrt(eig(P Q))` from the Schur form of the product.
pub fn hankel_values_via_product(p: &CMat, q: &CMat) -> Result<Vec<f64>> {
    let (t, _) = schur(&p.matmul(q))?;
    let mut s: Vec<f64> = t.diagonal().iter().map(|l| l.re.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Reflects unstable modes when the policy allows it; returns the indices
/// that were changed.
pub fn stabilize(sys: &DiagonalSsm, policy: Stabilize) -> Result<(DiagonalSsm, Vec<usize>)> {
    let bad: Vec<usize> = sys.lambda.iter().enumerate().filter(|(_, l)| l.re >= 0.0).map(|(i, _)| i).collect();
    if bad.is_empty() {
        return Ok((sys.clone(), bad));
    }
    match policy {
        Stabilize::Error => Err(Error::Unstable(sys.max_real())),
        Stabilize::Reflect => {
            let lambda = sys.lambda.iter().map(|l| C64::new(-l.re.abs(), l.im)).collect();
            Ok((DiagonalSsm::new(lambda, sys.b.clone(), sys.c.clone(), sys.delta)?, bad))
        }
    }
}

pub fn balance(sys: &DiagonalSsm, opts: &ReduceOptions) -> Result<BalancedRealization> {
    let g = gramians_diagonal(sys)?;
    let n = sys.order();

    // a floored P keeps P^{-1/2} finite for rank-deficient input
    let floor = if opts.clamp_rank { Some(opts.rank_tol * g.p.max_abs()) } else { None };
    let roots = psd_roots(&g.p, floor)?;
    let m = roots.sqrt.matmul(&g.q).matmul(&roots.sqrt);
    let eig = hermitian_eig(&m)?;

    // descending order
    let order: Vec<usize> = (0..n).rev().collect();
    let mut lam: Vec<f64> = order.iter().map(|&i| eig.values[i].max(0.0)).collect();
    let u = CMat::from_fn(n, n, |i, j| eig.vectors[(i, order[j])]);
    let s1 = lam[0].sqrt();
    let tol = effective_rank_tol(opts.rank_tol) * s1;
    if s1 == 0.0 {
        return Err(Error::NearlyUncontrollable { sigma_min: 0.0, tol: 0.0 });
    }
    let mut clamped = 0;
    let lam_floor = tol * tol;
    for l in lam.iter_mut() {
        if *l <= lam_floor {
            if !opts.clamp_rank {
                return Err(Error::NearlyUncontrollable { sigma_min: l.sqrt(), tol });
            }
            *l = lam_floor;
            clamped += 1;
        }
    }
    let sigma: Vec<f64> = lam.iter().map(|l| l.sqrt()).collect();
    let quarter: Vec<f64> = lam.iter().map(|l| l.powf(0.25)).collect();

    let uh = u.adjoint();
    let t = CMat::from_fn(n, n, |i, j| uh[(i, j)] * quarter[i]).matmul(&roots.inv_sqrt);
    let tinv = roots.sqrt.matmul(&CMat::from_fn(n, n, |i, j| u[(i, j)] / quarter[j]));
    let sys_bal = sys.to_dense().transform(&t, &tinv);

    Ok(BalancedRealization { original: sys.clone(), t, tinv, sys_bal, sigma, gramians: g, clamped })
}

impl BalancedRealization {
    /// `max(||T P T* - S||_F, ||T^{-*} Q T^{-1} - S||_F) / ||S||_F` with `S = diag(sigma)`.
    pub fn balancedness_residual(&self) -> (f64, f64) {
        let s = CMat::diag_real(&self.sigma);
        let sn = s.fro_norm().max(f64::MIN_POSITIVE);
        let pb = self.t.matmul(&self.gramians.p).matmul(&self.t.adjoint());
        let qb = self.tinv.adjoint().matmul(&self.gramians.q).matmul(&self.tinv);
        (pb.sub(&s).fro_norm() / sn, qb.sub(&s).fro_norm() / sn)
    }

    pub fn inverse_residual(&self) -> f64 {
        let n = self.t.rows();
        self.t.matmul(&self.tinv).sub(&CMat::identity(n)).fro_norm()
    }

    pub fn order(&self) -> usize {
        self.sigma.len()
    }
}

/// Hankel values come from eigenvalues of `P^{1/2} Q P^{1/2}`, whose absolute
/// error is about `eps * sigma_1^2`; singular values below `~sqrt(eps) sigma_1`
/// cannot be told apart from zero, so the rank tolerance never drops below
/// that floor.
pub const SIGMA_NOISE_FLOOR: f64 = 4.0 * 1.4901161193847656e-8;

pub fn effective_rank_tol(rank_tol: f64) -> f64 {
    rank_tol.max(SIGMA_NOISE_FLOOR)
}

/// Relative gap under which `sigma_r` and `sigma_{r+1}` count as tied.
pub const TIE_TOL: f64 = 1e-8;

/// Keeps the leading `r` balanced states and certifies the result.
pub fn truncate(bal: &BalancedRealization, r: usize, grid: &FrequencyGrid) -> Result<(DenseSsm, ReductionReport)> {
    let n = bal.order();
    if r == 0 || r > n {
        return Err(Error::BadOrder { r, n });
    }
    let sb = &bal.sys_bal;
    let red = DenseSsm {
        a: sb.a.leading_block(r),
        b: sb.b[..r].to_vec(),
        c: sb.c[..r].to_vec(),
        delta: sb.delta,
    };
    let mut warnings = Vec::new();
    let mut bound_strict = true;
    if r < n {
        let (a, b) = (bal.sigma[r - 1], bal.sigma[r]);
        if a - b <= TIE_TOL * a {
            bound_strict = false;
            let msg = format!("sigma_{r} = {a:.6e} and sigma_{} = {b:.6e} are nearly tied; error bounds are indicative", r + 1);
            log::warn!("{msg}");
            warnings.push(msg);
        }
        if bal.sigma[r..].windows(2).any(|w| w[0] - w[1] <= TIE_TOL * w[0]) {
            bound_strict = false;
        }
    }
    if bal.clamped > 0 {
        warnings.push(format!("{} Hankel singular values clamped to the rank tolerance", bal.clamped));
    }
    let stab = is_stable(&red)?;
    if !stab.stable {
        // theory guarantees stability for distinct sigma; surface numerically marginal cases
        warnings.push(format!("reduced system has spectral margin {:.3e}", stab.margin));
    }

    let tail: f64 = bal.sigma[r..].iter().sum();
    let sampled = hinf_error_estimate(&bal.original, &red, &bal.original.lambda, grid)?;
    let (pb, qb) = bal.balancedness_residual();
    let mut residuals = BTreeMap::new();
    residuals.insert("t_tinv".to_string(), bal.inverse_residual());
    residuals.insert("balanced_p".to_string(), pb);
    residuals.insert("balanced_q".to_string(), qb);
    residuals.insert("reduced_margin".to_string(), stab.margin);
    let report = ReductionReport {
        sigma: bal.sigma.clone(),
        r,
        lower_bound: if r < n { bal.sigma[r] } else { 0.0 },
        upper_bound: 2.0 * tail,
        sampled_hinf_error: sampled,
        bound_strict,
        stabilized: Vec::new(),
        clamped: bal.clamped,
        warnings,
        residuals,
    };
    Ok((red, report))
}

/// Full pipeline on one diagonal system: stabilize (per policy), Gramians,
/// balance, truncate. The sample time is carried through unchanged.
pub fn reduce(sys: &DiagonalSsm, r: usize, opts: &ReduceOptions) -> Result<(DenseSsm, ReductionReport)> {
    if r == 0 || r > sys.order() {
        return Err(Error::BadOrder { r, n: sys.order() });
    }
    let (sys, changed) = stabilize(sys, opts.stabilize)?;
    let bal = balance(&sys, opts)?;
    let (red, mut report) = truncate(&bal, r, &opts.grid)?;
    if !changed.is_empty() {
        report.warnings.push(format!("reflected {} unstable modes before reduction", changed.len()));
    }
    report.stabilized = changed;
    Ok((red, report))
}

/// Sampled `max_w |G(iw) - G_r(iw)|` over the grid, refined by golden-section
/// search around the best sample. Always a lower bound on the true norm.
pub fn hinf_error_estimate<F, R>(full: &F, red: &R, poles: &[C64], grid: &FrequencyGrid) -> Result<f64>
where
    F: TransferFunction + ?Sized,
    R: TransferFunction + ?Sized,
{
    let err = |w: f64| -> Result<f64> {
        let s = C64::new(0.0, w);
        Ok((full.transfer(s)? - red.transfer(s)?).norm())
    };
    sampled_peak(err, poles, grid)
}

/// Sampled peak of `|G(iw)|`.
pub fn hinf_norm_estimate<F: TransferFunction + ?Sized>(sys: &F, poles: &[C64], grid: &FrequencyGrid) -> Result<f64> {
    sampled_peak(|w| Ok(sys.transfer(C64::new(0.0, w))?.norm()), poles, grid)
}

fn sampled_peak(f: impl Fn(f64) -> Result<f64>, poles: &[C64], grid: &FrequencyGrid) -> Result<f64> {
    let ws = grid.frequencies(poles);
    let mut vals = Vec::with_capacity(ws.len());
    for &w in &ws {
        vals.push(f(w)?);
    }
    let (imax, &best) = vals
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    let mut best = best;
    if ws.len() >= 3 && grid.refine_iters > 0 {
        let lo = ws[imax.saturating_sub(1)];
        let hi = ws[(imax + 1).min(ws.len() - 1)];
        let (mut a, mut b) = (lo, hi);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let (mut fc, mut fd) = (f(c)?, f(d)?);
        for _ in 0..grid.refine_iters {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = f(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = f(d)?;
            }
            best = best.max(fc).max(fd);
        }
    }
    Ok(best)
}
