use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use super::{CVec, C64};
use crate::error::{Error, Result};

/// Power-of-two FFT plan (forward and inverse) shared across threads.
#[derive(Clone)]
pub struct FftPlan {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftPlan").field("n", &self.n).finish()
    }
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::BadLength(n));
        }
        let mut planner = FftPlanner::new();
        Ok(FftPlan { n, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Unnormalized forward DFT in place.
    pub fn forward(&self, buf: &mut [C64]) {
        assert_eq!(buf.len(), self.n, "buffer length does not match plan");
        self.fwd.process(buf);
    }

    /// Inverse DFT in place, including the `1/n` factor.
    pub fn inverse(&self, buf: &mut [C64]) {
        assert_eq!(buf.len(), self.n, "buffer length does not match plan");
        self.inv.process(buf);
        let s = 1.0 / self.n as f64;
        for z in buf.iter_mut() {
            *z *= s;
        }
    }
}

/// Causal convolution of real length-`L` sequences through cached spectra.
///
/// `conv(a, b)[k] = sum_{i<=k} a[i] b[k-i]`; the adjoint with respect to
/// either operand is a correlation, obtained as `rev(conv(rev(g), other))`.
#[derive(Clone, Debug)]
pub struct ConvPlan {
    len: usize,
    plan: FftPlan,
}

impl ConvPlan {
    pub fn new(len: usize) -> Self {
        let n = (2 * len.max(1)).next_power_of_two();
        ConvPlan { len, plan: FftPlan::new(n).expect("power of two") }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Spectrum of the zero-padded sequence.
    pub fn spectrum(&self, x: &[f64]) -> CVec {
        assert_eq!(x.len(), self.len, "sequence length does not match plan");
        let mut buf = vec![C64::new(0.0, 0.0); self.plan.len()];
        for (b, &v) in buf.iter_mut().zip(x) {
            b.re = v;
        }
        self.plan.forward(&mut buf);
        buf
    }

    /// Spectrum of the reversed, zero-padded sequence.
    pub fn spectrum_rev(&self, x: &[f64]) -> CVec {
        assert_eq!(x.len(), self.len, "sequence length does not match plan");
        let mut buf = vec![C64::new(0.0, 0.0); self.plan.len()];
        for (b, &v) in buf.iter_mut().zip(x.iter().rev()) {
            b.re = v;
        }
        self.plan.forward(&mut buf);
        buf
    }

    /// First `L` samples of the product's inverse transform.
    pub fn product(&self, fa: &[C64], fb: &[C64]) -> Vec<f64> {
        let mut buf: CVec = fa.iter().zip(fb).map(|(a, b)| a * b).collect();
        self.plan.inverse(&mut buf);
        buf[..self.len].iter().map(|z| z.re).collect()
    }

    /// Same as [`ConvPlan::product`] with the output reversed.
    pub fn product_rev(&self, fa: &[C64], fb: &[C64]) -> Vec<f64> {
        let mut out = self.product(fa, fb);
        out.reverse();
        out
    }

    pub fn convolve(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        self.product(&self.spectrum(a), &self.spectrum(b))
    }
}

pub fn fft(v: &[C64]) -> Result<CVec> {
    let plan = FftPlan::new(v.len())?;
    let mut out = v.to_vec();
    plan.forward(&mut out);
    Ok(out)
}

pub fn ifft(v: &[C64]) -> Result<CVec> {
    let plan = FftPlan::new(v.len())?;
    let mut out = v.to_vec();
    plan.inverse(&mut out);
    Ok(out)
}

/// Causal prefix of the linear convolution: `out[k] = sum_{i<=k} a[i] b[k-i]`
/// for `k < L`, computed with a zero-padded FFT of length `>= 2L`.
pub fn linear_convolution(a: &[C64], b: &[C64]) -> CVec {
    assert_eq!(a.len(), b.len(), "convolution operands must have equal length");
    let l = a.len();
    if l == 0 {
        return Vec::new();
    }
    let n = (2 * l).next_power_of_two();
    let plan = FftPlan::new(n).expect("power of two");
    let zero = C64::new(0.0, 0.0);
    let mut fa = a.to_vec();
    fa.resize(n, zero);
    let mut fb = b.to_vec();
    fb.resize(n, zero);
    plan.forward(&mut fa);
    plan.forward(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    plan.inverse(&mut fa);
    fa.truncate(l);
    fa
}

/// Direct O(L^2) causal convolution.
pub fn naive_convolution(a: &[C64], b: &[C64]) -> CVec {
    let l = a.len().min(b.len());
    (0..l).map(|k| (0..=k).map(|i| a[i] * b[k - i]).sum()).collect()
}
