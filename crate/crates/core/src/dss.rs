//! Diagonal state-space layer: per-feature kernels in the EXP and SOFTMAX
//! parameterizations, GELU connection, feature mixing, and the convolutional
//! and step-by-step forward paths.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ConvPlan, CVec, C64};
use crate::serial;
use crate::ssm::{cexpm1, discretize, DiagonalSsm, DiscreteSsm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Exp,
    Softmax,
}

impl Variant {
    /// Continuous eigenvalue from the trainable pair.
    pub fn lambda(self, re: f64, im: f64) -> C64 {
        match self {
            Variant::Exp => C64::new(-re.exp(), im),
            Variant::Softmax => C64::new(re, im),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Exp => "exp",
            Variant::Softmax => "softmax",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exp" => Ok(Variant::Exp),
            "softmax" => Ok(Variant::Softmax),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected exp or softmax)"))),
        }
    }
}

/// Trainable parameters of one feature's kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DssParams {
    pub variant: Variant,
    #[serde(with = "serial::reals")]
    pub lambda_re: Vec<f64>,
    #[serde(with = "serial::reals")]
    pub lambda_im: Vec<f64>,
    #[serde(with = "serial::complexes")]
    pub w: CVec,
    #[serde(with = "serial::real")]
    pub log_delta: f64,
    #[serde(with = "serial::real")]
    pub d: f64,
}

impl DssParams {
    pub fn order(&self) -> usize {
        self.w.len()
    }

    pub fn delta(&self) -> f64 {
        self.log_delta.exp()
    }

    pub fn lambdas(&self) -> CVec {
        self.lambda_re.iter().zip(&self.lambda_im).map(|(&re, &im)| self.variant.lambda(re, im)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.w.len();
        if self.lambda_re.len() != n || self.lambda_im.len() != n {
            return Err(Error::Shape(format!(
                "kernel with |w|={n}, |Lambda_re|={}, |Lambda_im|={}",
                self.lambda_re.len(),
                self.lambda_im.len()
            )));
        }
        let finite = self.lambda_re.iter().chain(&self.lambda_im).all(|x| x.is_finite())
            && self.w.iter().all(|z| z.re.is_finite() && z.im.is_finite())
            && self.log_delta.is_finite()
            && self.d.is_finite();
        if !finite {
            return Err(Error::NonFinite("kernel parameters".into()));
        }
        Ok(())
    }
}

/// Mixing weights and per-feature kernels of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub dss: Vec<DssParams>,
    /// `H x H`, row-major.
    #[serde(with = "serial::reals")]
    pub w_out: Vec<f64>,
    #[serde(with = "serial::reals")]
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn width(&self) -> usize {
        self.dss.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.dss.len();
        if self.w_out.len() != h * h || self.bias.len() != h {
            return Err(Error::Shape(format!(
                "layer with H={h}, |W_out|={}, |bias|={}",
                self.w_out.len(),
                self.bias.len()
            )));
        }
        for (feature, p) in self.dss.iter().enumerate() {
            p.validate().map_err(|e| e.at_feature(0, feature))?;
        }
        Ok(())
    }
}

/// Recurrent state, one complex vector per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub x: Vec<CVec>,
}

impl LayerState {
    pub fn zeros(lp: &LayerParams) -> Self {
        LayerState { x: lp.dss.iter().map(|p| vec![C64::new(0.0, 0.0); p.order()]).collect() }
    }
}

/// The variant's `(A, B, C, delta)`. SOFTMAX needs the sequence length
/// because its `B` does.
pub fn materialize_ssm(p: &DssParams, len: usize) -> Result<DiagonalSsm> {
    p.validate()?;
    let lambda = p.lambdas();
    let delta = p.delta();
    let b = match p.variant {
        Variant::Exp => vec![C64::new(1.0, 0.0); lambda.len()],
        Variant::Softmax => {
            let mut b = Vec::with_capacity(lambda.len());
            for l in &lambda {
                let z = l * (len as f64 * delta);
                if z.re > 700.0 {
                    return Err(Error::Overflow(z.re));
                }
                b.push(1.0 / cexpm1(z));
            }
            b
        }
    };
    DiagonalSsm::new(lambda, b, p.w.clone(), delta)
}

/// `K_k = sum_i w_i (e^{lambda_i delta} - 1) / lambda_i * e^{lambda_i k delta}`.
pub fn kernel_exp(p: &DssParams, len: usize) -> Result<CVec> {
    p.validate()?;
    let lambda = p.lambdas();
    let delta = p.delta();
    let mut k = vec![C64::new(0.0, 0.0); len];
    for (l, w) in lambda.iter().zip(&p.w) {
        let coeff = w * cexpm1(l * delta) / l;
        for (j, kj) in k.iter_mut().enumerate() {
            *kj += coeff * (l * (j as f64 * delta)).exp();
        }
    }
    Ok(k)
}

/// Row softmax over `k < len` of `lambda k delta`, shifted by the row's
/// largest real part.
///
/// With `B = 1/(e^{L lambda delta} - 1)` the kernel is
/// `w (e^{lambda delta} - 1) / lambda * e^{lambda k delta} / (e^{L lambda delta} - 1)`,
/// and since `sum_{r<L} e^{lambda r delta} = (e^{L lambda delta} - 1) / (e^{lambda delta} - 1)`
/// that equals `w / lambda * softmax_k(lambda k delta)`. Subtracting the row
/// maximum `m` from every exponent cancels in the ratio.
fn softmax_row(l: C64, delta: f64, len: usize) -> CVec {
    let m = (l.re * (len.saturating_sub(1)) as f64 * delta).max(0.0);
    let e: CVec = (0..len).map(|j| (l * (j as f64 * delta) - m).exp()).collect();
    let s: C64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `K_k = sum_i w_i / lambda_i * softmax_k(lambda_i k delta)`.
pub fn kernel_softmax(p: &DssParams, len: usize) -> Result<CVec> {
    p.validate()?;
    let lambda = p.lambdas();
    let delta = p.delta();
    let mut k = vec![C64::new(0.0, 0.0); len];
    for (l, w) in lambda.iter().zip(&p.w) {
        let coeff = w / l;
        for (kj, s) in k.iter_mut().zip(softmax_row(*l, delta, len)) {
            *kj += coeff * s;
        }
    }
    Ok(k)
}

pub fn kernel(p: &DssParams, len: usize) -> Result<CVec> {
    match p.variant {
        Variant::Exp => kernel_exp(p, len),
        Variant::Softmax => kernel_softmax(p, len),
    }
}

/// Real part of the kernel; the only part a real input sequence sees.
pub fn kernel_re(p: &DssParams, len: usize) -> Result<Vec<f64>> {
    Ok(kernel(p, len)?.into_iter().map(|z| z.re).collect())
}

/// Gradients of one feature's kernel parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DssGrad {
    pub lambda_re: Vec<f64>,
    pub lambda_im: Vec<f64>,
    /// Real and imaginary parts carry the gradients of `Re w` and `Im w`.
    pub w: CVec,
    pub log_delta: f64,
}

/// Pulls `g_k = dL/d(Re K_k)` back to the kernel parameters.
pub fn kernel_backward(p: &DssParams, g: &[f64]) -> DssGrad {
    let len = g.len();
    let lambda = p.lambdas();
    let delta = p.delta();
    let n = lambda.len();
    let mut out = DssGrad {
        lambda_re: vec![0.0; n],
        lambda_im: vec![0.0; n],
        w: vec![C64::new(0.0, 0.0); n],
        log_delta: 0.0,
    };
    let mut d_delta = 0.0;
    for i in 0..n {
        let l = lambda[i];
        let w = p.w[i];
        // t: sum g_k dK_k/dw, s: sum g_k dK_k/dlambda, q: sum g_k dK_k/ddelta
        let (t, s, q) = match p.variant {
            Variant::Exp => {
                let em1 = cexpm1(l * delta);
                let e1 = em1 + 1.0;
                let a = em1 / l;
                let da = (e1 * delta * l - em1) / (l * l);
                let (mut t, mut s, mut q) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0));
                for (k, &gk) in g.iter().enumerate() {
                    if gk == 0.0 {
                        continue;
                    }
                    let kf = k as f64;
                    let ek = (l * (kf * delta)).exp() * gk;
                    t += a * ek;
                    s += (da + a * (kf * delta)) * ek;
                    q += (e1 + em1 * kf) * ek;
                }
                (t, s * w, q * w)
            }
            Variant::Softmax => {
                let sm = softmax_row(l, delta, len);
                let kbar: C64 = sm.iter().enumerate().map(|(k, s)| s * k as f64).sum();
                let (mut gs, mut gsk) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0));
                for (k, (&gk, s)) in g.iter().zip(&sm).enumerate() {
                    gs += s * gk;
                    gsk += s * (gk * k as f64);
                }
                // sum_k g_k s_k (k - kbar)
                let centered = gsk - gs * kbar;
                let t = gs / l;
                let s = -w / (l * l) * gs + w / l * centered * delta;
                let q = w * centered;
                (t, s, q)
            }
        };
        out.w[i] = t.conj();
        out.lambda_im[i] = -s.im;
        out.lambda_re[i] = match p.variant {
            Variant::Exp => -p.lambda_re[i].exp() * s.re,
            Variant::Softmax => s.re,
        };
        d_delta += q.re;
    }
    out.log_delta = d_delta * delta;
    out
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `GELU(Re y_k + D u_k)`.
pub fn nonlinear_connect(y: &[C64], u: &[f64], d: f64) -> Result<Vec<f64>> {
    if y.len() != u.len() {
        return Err(Error::Shape(format!("{} outputs for {} inputs", y.len(), u.len())));
    }
    Ok(y.iter().zip(u).map(|(y, u)| gelu(y.re + d * u)).collect())
}

/// `out[h][k] = sum_h' W[h][h'] y[h'][k] + bias[h]` on `H x L` row-major data.
pub fn mix(y: &[f64], w_out: &[f64], bias: &[f64], len: usize) -> Vec<f64> {
    let h = bias.len();
    let mut out = vec![0.0; h * len];
    for (i, row) in out.chunks_mut(len).enumerate() {
        row.fill(bias[i]);
        for j in 0..h {
            let wij = w_out[i * h + j];
            if wij == 0.0 {
                continue;
            }
            for (o, &v) in row.iter_mut().zip(&y[j * len..(j + 1) * len]) {
                *o += wij * v;
            }
        }
    }
    out
}

/// Per-layer values needed for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    pub u_spec: Vec<CVec>,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
}

/// Kernel spectra of one layer, computed once per batch.
#[derive(Clone, Debug)]
pub struct LayerKernels {
    pub plan: ConvPlan,
    pub k_re: Vec<Vec<f64>>,
    pub k_spec: Vec<CVec>,
}

impl LayerKernels {
    pub fn new(lp: &LayerParams, len: usize) -> Result<Self> {
        let plan = ConvPlan::new(len);
        let mut k_re = Vec::with_capacity(lp.width());
        let mut k_spec = Vec::with_capacity(lp.width());
        for (feature, p) in lp.dss.iter().enumerate() {
            let k = kernel_re(p, len).map_err(|e| e.at_feature(0, feature))?;
            if k.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("kernel of feature {feature}")).at_feature(0, feature));
            }
            k_spec.push(plan.spectrum(&k));
            k_re.push(k);
        }
        Ok(LayerKernels { plan, k_re, k_spec })
    }
}

/// Forward pass on `H x L` row-major input, returning the output and the
/// values the backward pass needs.
pub fn layer_forward_cached(lp: &LayerParams, kern: &LayerKernels, u: &[f64]) -> (Vec<f64>, LayerCache) {
    let h = lp.width();
    let len = kern.plan.len();
    assert_eq!(u.len(), h * len, "layer input shape");
    let mut u_spec = Vec::with_capacity(h);
    let mut pre = Vec::with_capacity(h * len);
    for (i, p) in lp.dss.iter().enumerate() {
        let ui = &u[i * len..(i + 1) * len];
        let fu = kern.plan.spectrum(ui);
        let y = kern.plan.product(&fu, &kern.k_spec[i]);
        pre.extend(y.iter().zip(ui).map(|(y, u)| y + p.d * u));
        u_spec.push(fu);
    }
    let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
    let out = mix(&act, &lp.w_out, &lp.bias, len);
    (out, LayerCache { u_spec, pre, act })
}

/// Layer parameter gradients, with the kernel gradient kept as `dL/dRe K`
/// so it can be accumulated over a batch before the kernel backward.
#[derive(Clone, Debug)]
pub struct LayerGrad {
    pub dk: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    pub w_out: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros(h: usize, len: usize) -> Self {
        LayerGrad { dk: vec![vec![0.0; len]; h], d: vec![0.0; h], w_out: vec![0.0; h * h], bias: vec![0.0; h] }
    }

    pub fn add_assign(&mut self, other: &LayerGrad) {
        for (a, b) in self.dk.iter_mut().zip(&other.dk) {
            add_into(a, b);
        }
        add_into(&mut self.d, &other.d);
        add_into(&mut self.w_out, &other.w_out);
        add_into(&mut self.bias, &other.bias);
    }
}

pub(crate) fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Backward through mix, GELU, skip term and convolution. Returns the input
/// gradient and adds parameter gradients into `grad`.
pub fn layer_backward(
    lp: &LayerParams,
    kern: &LayerKernels,
    u: &[f64],
    cache: &LayerCache,
    d_out: &[f64],
    grad: &mut LayerGrad,
) -> Vec<f64> {
    let h = lp.width();
    let len = kern.plan.len();
    for i in 0..h {
        let row = &d_out[i * len..(i + 1) * len];
        grad.bias[i] += row.iter().sum::<f64>();
        for j in 0..h {
            let a = &cache.act[j * len..(j + 1) * len];
            grad.w_out[i * h + j] += row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    let mut dz = vec![0.0; h * len];
    for j in 0..h {
        let dzj = &mut dz[j * len..(j + 1) * len];
        for i in 0..h {
            let wij = lp.w_out[i * h + j];
            if wij == 0.0 {
                continue;
            }
            for (o, &x) in dzj.iter_mut().zip(&d_out[i * len..(i + 1) * len]) {
                *o += wij * x;
            }
        }
        for (o, &z) in dzj.iter_mut().zip(&cache.pre[j * len..(j + 1) * len]) {
            *o *= gelu_grad(z);
        }
    }
    let mut du = vec![0.0; h * len];
    for j in 0..h {
        let dzj = &dz[j * len..(j + 1) * len];
        let uj = &u[j * len..(j + 1) * len];
        let p = &lp.dss[j];
        grad.d[j] += dzj.iter().zip(uj).map(|(a, b)| a * b).sum::<f64>();
        let g_rev = kern.plan.spectrum_rev(dzj);
        let dk = kern.plan.product_rev(&g_rev, &cache.u_spec[j]);
        add_into(&mut grad.dk[j], &dk);
        let dconv = kern.plan.product_rev(&g_rev, &kern.k_spec[j]);
        for ((o, a), b) in du[j * len..(j + 1) * len].iter_mut().zip(&dconv).zip(dzj) {
            *o = a + p.d * b;
        }
    }
    du
}

/// Whole-sequence evaluation: kernel, FFT convolution, GELU connection, mix.
pub fn layer_forward_conv(lp: &LayerParams, u: &[f64], len: usize) -> Result<Vec<f64>> {
    lp.validate()?;
    if u.len() != lp.width() * len {
        return Err(Error::Shape(format!("{} inputs for H={} and L={len}", u.len(), lp.width())));
    }
    let kern = LayerKernels::new(lp, len)?;
    Ok(layer_forward_cached(lp, &kern, u).0)
}

/// Discretized layer for step-by-step evaluation.
#[derive(Clone, Debug)]
pub struct RecurrentLayer {
    pub disc: Vec<DiscreteSsm>,
    pub d: Vec<f64>,
    pub w_out: Vec<f64>,
    pub bias: Vec<f64>,
}

impl RecurrentLayer {
    /// `len` is the sequence length the SOFTMAX `B` was built for.
    pub fn new(lp: &LayerParams, len: usize) -> Result<Self> {
        lp.validate()?;
        let disc = lp
            .dss
            .iter()
            .enumerate()
            .map(|(feature, p)| materialize_ssm(p, len).and_then(|s| discretize(&s)).map_err(|e| e.at_feature(0, feature)))
            .collect::<Result<Vec<_>>>()?;
        Ok(RecurrentLayer {
            disc,
            d: lp.dss.iter().map(|p| p.d).collect(),
            w_out: lp.w_out.clone(),
            bias: lp.bias.clone(),
        })
    }
}

/// One time step for all features: O(HN + H^2) work, no allocation beyond
/// the returned vector.
pub fn layer_forward_recurrent(layer: &RecurrentLayer, st: &mut LayerState, u: &[f64]) -> Result<Vec<f64>> {
    let h = layer.d.len();
    if u.len() != h || st.x.len() != h {
        return Err(Error::Shape(format!("step input of {} for H={h}", u.len())));
    }
    let mut act = vec![0.0; h];
    for i in 0..h {
        let d = &layer.disc[i];
        let x = &mut st.x[i];
        if x.len() != d.abar.len() {
            return Err(Error::Shape(format!("state of feature {i} has {} entries", x.len())));
        }
        let y = crate::ssm::recurrent_step(d, x, u[i]);
        act[i] = gelu(y.re + layer.d[i] * u[i]);
    }
    Ok(mix(&act, &layer.w_out, &layer.bias, 1))
}

/// `k,re,im` CSV of a kernel.
pub fn kernel_csv(k: &[C64]) -> String {
    let mut out = String::from("k,re,im\n");
    for (i, z) in k.iter().enumerate() {
        out.push_str(&format!("{i},{:.17e},{:.17e}\n", z.re, z.im));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::random_stable_system;
    use crate::linalg::testutil::rng;
    use crate::linalg::{c64, max_abs_diff};
    use crate::ssm::impulse_kernel;
    use proptest::prelude::*;
    use rand::Rng;

    fn scalar(variant: Variant, re: f64) -> DssParams {
        DssParams {
            variant,
            lambda_re: vec![re],
            lambda_im: vec![0.0],
            w: vec![c64(1.0, 0.0)],
            log_delta: 2f64.ln().ln(),
            d: 0.0,
        }
    }

    pub(crate) fn random_params(rng: &mut impl Rng, variant: Variant, n: usize) -> DssParams {
        DssParams {
            variant,
            lambda_re: (0..n)
                .map(|_| match variant {
                    Variant::Exp => rng.random_range(-2.0..0.5),
                    Variant::Softmax => rng.random_range(-1.0..0.3),
                })
                .collect(),
            lambda_im: (0..n).map(|_| rng.random_range(-4.0..4.0)).collect(),
            w: (0..n).map(|_| c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect(),
            log_delta: rng.random_range(0.001f64.ln()..0.1f64.ln()),
            d: rng.random_range(-1.0..1.0),
        }
    }

    pub(crate) fn random_layer(rng: &mut impl Rng, variant: Variant, h: usize, n: usize) -> LayerParams {
        LayerParams {
            dss: (0..h).map(|_| random_params(rng, variant, n)).collect(),
            w_out: (0..h * h).map(|_| rng.random_range(-1.0..1.0) / (h as f64).sqrt()).collect(),
            bias: (0..h).map(|_| rng.random_range(-0.5..0.5)).collect(),
        }
    }

    #[test]
    fn materialize_examples() {
        let s = materialize_ssm(&scalar(Variant::Exp, 0.0), 8).unwrap();
        assert_eq!(s.lambda[0], c64(-1.0, 0.0));
        let mut rng = rng(1);
        let p = random_params(&mut rng, Variant::Exp, 5);
        assert!(materialize_ssm(&p, 3).unwrap().b.iter().all(|&b| b == c64(1.0, 0.0)));
        let s = materialize_ssm(&scalar(Variant::Softmax, -1.0), 2).unwrap();
        assert!((s.b[0] - c64(-4.0 / 3.0, 0.0)).norm() < 1e-14);
        let mut big = scalar(Variant::Softmax, 1.0);
        big.log_delta = 0.0;
        assert!(matches!(materialize_ssm(&big, 1000), Err(Error::Overflow(_))));
    }

    #[test]
    fn scalar_kernels() {
        let k = kernel_exp(&scalar(Variant::Exp, 0.0), 2).unwrap();
        assert!(max_abs_diff(&k, &[c64(0.5, 0.0), c64(0.25, 0.0)]) < 1e-15);
        let mut zero = scalar(Variant::Exp, 0.0);
        zero.w[0] = c64(0.0, 0.0);
        assert!(kernel_exp(&zero, 4).unwrap().iter().all(|z| z.norm() == 0.0));
        let p = scalar(Variant::Softmax, -1.0);
        let direct = impulse_kernel(&materialize_ssm(&p, 2).unwrap(), 2).unwrap();
        let k = kernel_softmax(&p, 2).unwrap();
        assert!(max_abs_diff(&k, &direct) < 1e-12);
        assert!(max_abs_diff(&k, &[c64(-2.0 / 3.0, 0.0), c64(-1.0 / 3.0, 0.0)]) < 1e-15);
        let uniform = softmax_row(c64(0.0, 0.0), 0.1, 8);
        assert!(uniform.iter().all(|s| (s - c64(0.125, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn unstable_softmax_mode_matches_extended_precision() {
        let mut p = scalar(Variant::Softmax, 0.5);
        p.log_delta = 0.0;
        let len = 64;
        let k = kernel_softmax(&p, len).unwrap();
        assert!(k.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
        // real lambda: w/lambda * e^{lambda k} (e^lambda - 1) / (e^{L lambda} - 1) = 2 (e^{1/2} - 1) e^{(k-L)/2} / (1 - e^{-L/2})
        let lam = 0.5f64;
        for (j, z) in k.iter().enumerate() {
            let exact = 2.0 * lam.exp_m1() * (lam * (j as f64 - len as f64)).exp() / (-(-lam * len as f64).exp_m1());
            assert!((z.re - exact).abs() <= 1e-6 * exact.abs().max(1e-300) + 1e-15);
        }
    }

    #[test]
    fn random_kernels_match_oracle() {
        let mut rng = rng(2);
        for variant in [Variant::Exp, Variant::Softmax] {
            for _ in 0..5 {
                let p = random_params(&mut rng, variant, 8);
                let oracle = impulse_kernel(&materialize_ssm(&p, 128).unwrap(), 128).unwrap();
                let k = kernel(&p, 128).unwrap();
                let scale = oracle.iter().map(|z| z.norm()).fold(1.0, f64::max);
                assert!(max_abs_diff(&k, &oracle) <= 1e-10 * scale, "{variant}");
            }
        }
    }

    #[test]
    fn gelu_tails() {
        assert_eq!(nonlinear_connect(&[c64(0.0, 0.0)], &[0.0], 1.0).unwrap(), vec![0.0]);
        assert!((gelu(10.0) - 10.0).abs() < 1e-8);
        assert!(gelu(-10.0).abs() < 1e-8);
        let y = nonlinear_connect(&[c64(4.0, 99.0)], &[3.0], 2.0).unwrap();
        assert!((y[0] - 10.0).abs() < 1e-8);
    }

    #[test]
    fn mix_examples() {
        let mut rng = rng(3);
        let (h, len) = (4, 8);
        let y: Vec<f64> = (0..h * len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut eye = vec![0.0; h * h];
        for i in 0..h {
            eye[i * h + i] = 1.0;
        }
        assert_eq!(mix(&y, &eye, &[0.0; 4], len), y);
        let bias = [1.0, -2.0, 0.5, 3.0];
        let out = mix(&[0.0; 32], &eye, &bias, len);
        assert!(out.chunks(len).zip(bias).all(|(row, b)| row.iter().all(|&x| x == b)));
        let w: Vec<f64> = (0..h * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = mix(&y, &w, &bias, len);
        for i in 0..h {
            for k in 0..len {
                let mut s = bias[i];
                for j in 0..h {
                    s += w[i * h + j] * y[j * len + k];
                }
                assert!((out[i * len + k] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bias_only_layer() {
        let mut rng = rng(4);
        let mut lp = random_layer(&mut rng, Variant::Exp, 3, 4);
        lp.w_out.fill(0.0);
        let u: Vec<f64> = (0..3 * 10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = layer_forward_conv(&lp, &u, 10).unwrap();
        assert!(out.chunks(10).zip(&lp.bias).all(|(row, b)| row.iter().all(|x| x == b)));
        let rec = RecurrentLayer::new(&lp, 10).unwrap();
        let mut st = LayerState::zeros(&lp);
        assert_eq!(layer_forward_recurrent(&rec, &mut st, &[0.0; 3]).unwrap(), lp.bias);
    }

    #[test]
    fn impulse_reproduces_first_column() {
        let mut rng = rng(5);
        let (h, len) = (3, 16);
        let lp = random_layer(&mut rng, Variant::Softmax, h, 4);
        let mut u = vec![0.0; h * len];
        for i in 0..h {
            u[i * len] = 1.0;
        }
        let conv = layer_forward_conv(&lp, &u, len).unwrap();
        let rec = RecurrentLayer::new(&lp, len).unwrap();
        let mut st = LayerState::zeros(&lp);
        for k in 0..len {
            let uk: Vec<f64> = (0..h).map(|i| u[i * len + k]).collect();
            let out = layer_forward_recurrent(&rec, &mut st, &uk).unwrap();
            for i in 0..h {
                assert!((out[i] - conv[i * len + k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_feature_layer_is_scalar_chain() {
        let mut rng = rng(6);
        let lp = random_layer(&mut rng, Variant::Exp, 1, 3);
        let len = 12;
        let u: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = kernel_exp(&lp.dss[0], len).unwrap();
        let y: CVec = (0..len).map(|j| (0..=j).map(|i| k[i] * u[j - i]).sum()).collect();
        let act = nonlinear_connect(&y, &u, lp.dss[0].d).unwrap();
        let expect: Vec<f64> = act.iter().map(|a| lp.w_out[0] * a + lp.bias[0]).collect();
        let out = layer_forward_conv(&lp, &u, len).unwrap();
        assert!(out.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn raw_system_matches_both_parameterizations() {
        let mut rng = rng(7);
        let len = 256;
        for _ in 0..10 {
            let sys = random_stable_system(&mut rng, 8);
            let raw = impulse_kernel(&sys, len).unwrap();
            let wt: CVec = sys.c.iter().zip(&sys.b).map(|(c, b)| c * b).collect();
            let exp = DssParams {
                variant: Variant::Exp,
                lambda_re: sys.lambda.iter().map(|l| (-l.re).ln()).collect(),
                lambda_im: sys.lambda.iter().map(|l| l.im).collect(),
                w: wt.clone(),
                log_delta: sys.delta.ln(),
                d: 0.0,
            };
            let soft = DssParams {
                variant: Variant::Softmax,
                lambda_re: sys.lambda.iter().map(|l| l.re).collect(),
                w: wt.iter().zip(&sys.lambda).map(|(w, l)| w * cexpm1(l * (len as f64 * sys.delta))).collect(),
                ..exp.clone()
            };
            assert!(max_abs_diff(&kernel_exp(&exp, len).unwrap(), &raw) <= 1e-8);
            assert!(max_abs_diff(&kernel_softmax(&soft, len).unwrap(), &raw) <= 1e-8);
        }
    }

    fn fd_kernel_grad(p: &DssParams, g: &[f64]) -> DssGrad {
        let len = g.len();
        let loss = |q: &DssParams| -> f64 { kernel_re(q, len).unwrap().iter().zip(g).map(|(a, b)| a * b).sum() };
        let h = 1e-6;
        let diff = |f: &dyn Fn(&mut DssParams, f64)| {
            let mut a = p.clone();
            f(&mut a, h);
            let mut b = p.clone();
            f(&mut b, -h);
            (loss(&a) - loss(&b)) / (2.0 * h)
        };
        let n = p.order();
        DssGrad {
            lambda_re: (0..n).map(|i| diff(&|q: &mut DssParams, e| q.lambda_re[i] += e)).collect(),
            lambda_im: (0..n).map(|i| diff(&|q: &mut DssParams, e| q.lambda_im[i] += e)).collect(),
            w: (0..n)
                .map(|i| {
                    c64(diff(&|q: &mut DssParams, e| q.w[i].re += e), diff(&|q: &mut DssParams, e| q.w[i].im += e))
                })
                .collect(),
            log_delta: diff(&|q: &mut DssParams, e| q.log_delta += e),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn kernel_gradients_match_differences(seed in any::<u64>(), soft in any::<bool>()) {
            let mut rng = rng(seed);
            let variant = if soft { Variant::Softmax } else { Variant::Exp };
            let mut p = random_params(&mut rng, variant, 3);
            p.log_delta = rng.random_range(-3.0..-1.0);
            let g: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let an = kernel_backward(&p, &g);
            let fd = fd_kernel_grad(&p, &g);
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1.0);
            for i in 0..3 {
                prop_assert!(close(an.lambda_re[i], fd.lambda_re[i]), "re {} {}", an.lambda_re[i], fd.lambda_re[i]);
                prop_assert!(close(an.lambda_im[i], fd.lambda_im[i]), "im {} {}", an.lambda_im[i], fd.lambda_im[i]);
                prop_assert!(close(an.w[i].re, fd.w[i].re) && close(an.w[i].im, fd.w[i].im));
            }
            prop_assert!(close(an.log_delta, fd.log_delta), "dt {} {}", an.log_delta, fd.log_delta);
        }

        #[test]
        fn mix_is_affine(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = rng(seed);
            let (h, len) = (3, 5);
            let w: Vec<f64> = (0..h * h).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y1: Vec<f64> = (0..h * len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y2: Vec<f64> = (0..h * len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let comb: Vec<f64> = y1.iter().zip(&y2).map(|(x, y)| a * x + b * y).collect();
            let lhs = mix(&comb, &w, &bias, len);
            let m1 = mix(&y1, &w, &bias, len);
            let m2 = mix(&y2, &w, &bias, len);
            for i in 0..h {
                for k in 0..len {
                    let rhs = a * m1[i * len + k] + b * m2[i * len + k] - (a + b - 1.0) * bias[i];
                    prop_assert!((lhs[i * len + k] - rhs).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn softmax_kernels_finite_up_to_unit_real_part(seed in any::<u64>(), re in -1.0f64..=1.0) {
            let mut rng = rng(seed);
            let mut p = random_params(&mut rng, Variant::Softmax, 4);
            p.lambda_re.fill(re);
            p.log_delta = 0.0;
            let k = kernel_softmax(&p, 1024).unwrap();
            prop_assert!(k.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
        }
    }
}
