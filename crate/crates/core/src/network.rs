//! Full classifier: byte embedding, residual DSS layers with layer
//! normalization, masked mean pooling and an affine head. Also the JSON
//! checkpoint format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance::ReductionReport;
use crate::dss::{layer_forward_cached, LayerCache, LayerKernels, LayerParams, Variant};
use crate::error::{Error, Result};
use crate::hippo::{init_lambda, skew_hippo_eigs};
use crate::linalg::C64;
use crate::serial;

pub const FORMAT_VERSION: u32 = 1;
pub const BYTE_VOCAB: usize = 257;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Prenorm,
    Postnorm,
}

impl FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "prenorm" => Ok(NormMode::Prenorm),
            "postnorm" => Ok(NormMode::Postnorm),
            other => Err(Error::Config(format!("unknown norm mode `{other}` (expected prenorm or postnorm)"))),
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::Prenorm => "prenorm",
            NormMode::Postnorm => "postnorm",
        })
    }
}

/// How the diagonal eigenvalues of a fresh model are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaInit {
    Hippo,
    Random,
}

impl FromStr for LambdaInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hippo" => Ok(LambdaInit::Hippo),
            "random" => Ok(LambdaInit::Random),
            other => Err(Error::Config(format!("unknown init `{other}` (expected hippo or random)"))),
        }
    }
}

impl fmt::Display for LambdaInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LambdaInit::Hippo => "hippo",
            LambdaInit::Random => "random",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub h: usize,
    pub n: usize,
    pub variant: Variant,
    pub norm_mode: NormMode,
    pub l: usize,
    pub vocab: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            h: 8,
            n: 16,
            variant: Variant::Exp,
            norm_mode: NormMode::Prenorm,
            l: 256,
            vocab: BYTE_VOCAB,
            n_classes: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("h", self.h),
            ("n", self.n),
            ("l", self.l),
            ("vocab", self.vocab),
            ("n_classes", self.n_classes),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// The last vocabulary entry is the pad token.
    pub fn pad_token(&self) -> u32 {
        (self.vocab - 1) as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    #[serde(with = "serial::reals")]
    pub scale: Vec<f64>,
    #[serde(with = "serial::reals")]
    pub shift: Vec<f64>,
}

impl NormParams {
    pub fn identity(h: usize) -> Self {
        NormParams { scale: vec![1.0; h], shift: vec![0.0; h] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `vocab x H`, row-major.
    #[serde(with = "serial::reals")]
    pub embedding: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub norms: Vec<NormParams>,
    pub final_norm: Option<NormParams>,
    /// `H x n_classes`, row-major.
    #[serde(with = "serial::reals")]
    pub head_w: Vec<f64>,
    #[serde(with = "serial::reals")]
    pub head_b: Vec<f64>,
}

/// Gradients share the parameter layout; `w` gradients hold `dL/dRe w` and
/// `dL/dIm w` in their real and imaginary parts.
pub type GradientSet = ModelParams;

/// Name, decay flag and values of one flattened parameter tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub decay: bool,
    pub values: &'a [f64],
}

fn normal(rng: &mut impl Rng, std: f64) -> f64 {
    Normal::new(0.0, std).expect("positive std").sample(rng)
}

/// Draws `(Lambda_re, Lambda_im)` for one kernel of order `n`.
pub fn draw_lambda(rng: &mut impl Rng, variant: Variant, init: LambdaInit, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    match init {
        LambdaInit::Hippo => init_lambda(variant, &skew_hippo_eigs(n)?),
        LambdaInit::Random => Ok(match variant {
            Variant::Exp => {
                // Re lambda ~ U(-1, 0), kept strictly negative
                let re = (0..n).map(|_| (1.0 - rng.random::<f64>()).ln()).collect();
                (re, (0..n).map(|_| normal(rng, 1.0)).collect())
            }
            Variant::Softmax => {
                let re = (0..n).map(|_| normal(rng, 1.0)).collect();
                (re, (0..n).map(|_| normal(rng, 1.0)).collect())
            }
        }),
    }
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, init: LambdaInit, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.h;
        let s = 1.0 / (h as f64).sqrt();
        let embedding = (0..cfg.vocab * h).map(|_| normal(rng, s)).collect();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let mut dss = Vec::with_capacity(h);
            for _ in 0..h {
                let (lambda_re, lambda_im) = draw_lambda(rng, cfg.variant, init, cfg.n)?;
                let w = (0..cfg.n).map(|_| C64::new(normal(rng, 1.0), normal(rng, 1.0))).collect();
                let log_delta = rng.random_range(0.001f64.ln()..0.1f64.ln());
                let d = normal(rng, 1.0);
                dss.push(crate::dss::DssParams { variant: cfg.variant, lambda_re, lambda_im, w, log_delta, d });
            }
            let w_out = (0..h * h).map(|_| normal(rng, s)).collect();
            layers.push(LayerParams { dss, w_out, bias: vec![0.0; h] });
        }
        let head_w = (0..h * cfg.n_classes).map(|_| normal(rng, s)).collect();
        Ok(ModelParams {
            embedding,
            layers,
            norms: (0..cfg.n_layers).map(|_| NormParams::identity(h)).collect(),
            final_norm: (cfg.norm_mode == NormMode::Prenorm).then(|| NormParams::identity(h)),
            head_w,
            head_b: vec![0.0; cfg.n_classes],
        })
    }

    /// All-zero tensors with the same layout.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(&mut |_, _, v| v.fill(0.0));
        z
    }

    /// Visits every tensor in a fixed order.
    pub fn for_each(&self, f: &mut dyn FnMut(TensorView<'_>)) {
        let mut view = |name: String, decay: bool, values: &[f64]| f(TensorView { name, decay, values });
        view("embedding".into(), true, &self.embedding);
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, p) in layer.dss.iter().enumerate() {
                let pre = format!("layers.{l}.dss.{h}");
                view(format!("{pre}.lambda_re"), true, &p.lambda_re);
                view(format!("{pre}.lambda_im"), true, &p.lambda_im);
                let w: Vec<f64> = p.w.iter().flat_map(|z| [z.re, z.im]).collect();
                view(format!("{pre}.w"), true, &w);
                view(format!("{pre}.log_delta"), true, &[p.log_delta]);
                view(format!("{pre}.d"), true, &[p.d]);
            }
            view(format!("layers.{l}.w_out"), true, &layer.w_out);
            view(format!("layers.{l}.bias"), false, &layer.bias);
            view(format!("norms.{l}.scale"), false, &self.norms[l].scale);
            view(format!("norms.{l}.shift"), false, &self.norms[l].shift);
        }
        if let Some(n) = &self.final_norm {
            view("final_norm.scale".into(), false, &n.scale);
            view("final_norm.shift".into(), false, &n.shift);
        }
        view("head_w".into(), true, &self.head_w);
        view("head_b".into(), false, &self.head_b);
    }

    /// Mutable counterpart of [`ModelParams::for_each`], same order.
    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, bool, &mut [f64])) {
        f("embedding", true, &mut self.embedding);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, p) in layer.dss.iter_mut().enumerate() {
                let pre = format!("layers.{l}.dss.{h}");
                f(&format!("{pre}.lambda_re"), true, &mut p.lambda_re);
                f(&format!("{pre}.lambda_im"), true, &mut p.lambda_im);
                let mut w: Vec<f64> = p.w.iter().flat_map(|z| [z.re, z.im]).collect();
                f(&format!("{pre}.w"), true, &mut w);
                for (z, pair) in p.w.iter_mut().zip(w.chunks(2)) {
                    *z = C64::new(pair[0], pair[1]);
                }
                let mut s = [p.log_delta];
                f(&format!("{pre}.log_delta"), true, &mut s);
                p.log_delta = s[0];
                let mut s = [p.d];
                f(&format!("{pre}.d"), true, &mut s);
                p.d = s[0];
            }
            f(&format!("layers.{l}.w_out"), true, &mut layer.w_out);
            f(&format!("layers.{l}.bias"), false, &mut layer.bias);
            f(&format!("norms.{l}.scale"), false, &mut self.norms[l].scale);
            f(&format!("norms.{l}.shift"), false, &mut self.norms[l].shift);
        }
        if let Some(n) = &mut self.final_norm {
            f("final_norm.scale", false, &mut n.scale);
            f("final_norm.shift", false, &mut n.shift);
        }
        f("head_w", true, &mut self.head_w);
        f("head_b", false, &mut self.head_b);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each(&mut |t| out.extend_from_slice(t.values));
        out
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        self.for_each(&mut |t| out.extend(std::iter::repeat_n(t.decay, t.values.len())));
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.for_each_mut(&mut |_, _, v| {
            v.copy_from_slice(&flat[off..off + v.len()]);
            off += v.len();
        });
        assert_eq!(off, flat.len(), "flat parameter vector length");
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |t| n += t.values.len());
        n
    }

    /// `(name, offset, len)` of each tensor in the flat layout.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut off = 0;
        self.for_each(&mut |t| {
            out.push((t.name, off, t.values.len()));
            off += t.values.len();
        });
        out
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let h = cfg.h;
        let shape = |what: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                return Err(Error::Shape(format!("{what}: {got} entries, expected {want}")));
            }
            Ok(())
        };
        shape("embedding", self.embedding.len(), cfg.vocab * h)?;
        shape("layers", self.layers.len(), cfg.n_layers)?;
        shape("norms", self.norms.len(), cfg.n_layers)?;
        for (l, layer) in self.layers.iter().enumerate() {
            shape(&format!("layer {l} features"), layer.dss.len(), h)?;
            layer.validate().map_err(|e| e.in_layer(l))?;
            for (feature, p) in layer.dss.iter().enumerate() {
                if p.variant != cfg.variant {
                    return Err(Error::Config(format!("layer {l} feature {feature} has variant {}", p.variant)));
                }
                shape(&format!("layer {l} feature {feature} order"), p.order(), cfg.n)?;
            }
            shape(&format!("norm {l} scale"), self.norms[l].scale.len(), h)?;
            shape(&format!("norm {l} shift"), self.norms[l].shift.len(), h)?;
        }
        match (&self.final_norm, cfg.norm_mode) {
            (Some(n), NormMode::Prenorm) => {
                shape("final norm scale", n.scale.len(), h)?;
                shape("final norm shift", n.shift.len(), h)?;
            }
            (None, NormMode::Postnorm) => {}
            _ => return Err(Error::Config("final norm must be present exactly in prenorm mode".into())),
        }
        shape("head weights", self.head_w.len(), h * cfg.n_classes)?;
        shape("head bias", self.head_b.len(), cfg.n_classes)?;
        if self.flatten().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }
}

/// Column `k` of the `H x L` output is the embedding row of `tokens[k]`.
pub fn embed(embedding: &[f64], h: usize, vocab: usize, tokens: &[u32]) -> Result<Vec<f64>> {
    let len = tokens.len();
    let mut out = vec![0.0; h * len];
    for (k, &t) in tokens.iter().enumerate() {
        if t as usize >= vocab {
            return Err(Error::TokenOutOfRange { token: t as usize, vocab });
        }
        let row = &embedding[t as usize * h..(t as usize + 1) * h];
        for (i, &v) in row.iter().enumerate() {
            out[i * len + k] = v;
        }
    }
    Ok(out)
}

/// Per-timestep normalization statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalizes each column of an `H x L` array over its `H` entries.
pub fn layer_norm(x: &[f64], h: usize, len: usize, p: &NormParams) -> (Vec<f64>, NormCache) {
    let mut xhat = vec![0.0; h * len];
    let mut rstd = vec![0.0; len];
    let mut y = vec![0.0; h * len];
    for k in 0..len {
        let mean = (0..h).map(|i| x[i * len + k]).sum::<f64>() / h as f64;
        let var = (0..h).map(|i| (x[i * len + k] - mean).powi(2)).sum::<f64>() / h as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[k] = r;
        for i in 0..h {
            let xh = (x[i * len + k] - mean) * r;
            xhat[i * len + k] = xh;
            y[i * len + k] = xh * p.scale[i] + p.shift[i];
        }
    }
    (y, NormCache { xhat, rstd })
}

/// Returns the input gradient and adds into the scale and shift gradients.
pub fn layer_norm_backward(c: &NormCache, p: &NormParams, dy: &[f64], h: usize, grad: &mut NormParams) -> Vec<f64> {
    let len = c.rstd.len();
    let mut dx = vec![0.0; h * len];
    let mut dxh = vec![0.0; h];
    for k in 0..len {
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..h {
            let g = dy[i * len + k];
            let xh = c.xhat[i * len + k];
            grad.scale[i] += g * xh;
            grad.shift[i] += g;
            dxh[i] = g * p.scale[i];
            m1 += dxh[i];
            m2 += dxh[i] * xh;
        }
        m1 /= h as f64;
        m2 /= h as f64;
        for i in 0..h {
            dx[i * len + k] = c.rstd[k] * (dxh[i] - m1 - c.xhat[i * len + k] * m2);
        }
    }
    dx
}

/// Kernel spectra for every layer, built once per parameter version.
pub struct ModelKernels {
    pub layers: Vec<LayerKernels>,
}

impl ModelKernels {
    pub fn new(params: &ModelParams, len: usize) -> Result<Self> {
        let layers = params
            .layers
            .iter()
            .enumerate()
            .map(|(l, lp)| LayerKernels::new(lp, len).map_err(|e| e.in_layer(l)))
            .collect::<Result<_>>()?;
        Ok(ModelKernels { layers })
    }
}

/// Intermediate values of one sample's forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub tokens: Vec<u32>,
    /// Input of each residual block.
    pub x: Vec<Vec<f64>>,
    /// Input to each DSS layer (normalized in prenorm mode).
    pub dss_in: Vec<Vec<f64>>,
    pub dss: Vec<LayerCache>,
    pub norms: Vec<NormCache>,
    pub mask: Vec<bool>,
    pub pooled: Vec<f64>,
    pub final_norm: Option<NormCache>,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Positions included in the mean pool: non-pad tokens, or all positions if
/// the sequence is entirely padding.
pub fn pool_mask(tokens: &[u32], pad: u32) -> Vec<bool> {
    let mask: Vec<bool> = tokens.iter().map(|&t| t != pad).collect();
    if mask.iter().any(|&m| m) {
        mask
    } else {
        vec![true; tokens.len()]
    }
}

pub fn forward_sample(
    params: &ModelParams,
    cfg: &ModelConfig,
    kernels: &ModelKernels,
    tokens: &[u32],
) -> Result<ForwardCache> {
    let (h, len) = (cfg.h, tokens.len());
    if len != kernels.layers.first().map_or(len, |k| k.plan.len()) {
        return Err(Error::Shape(format!("sequence of length {len} for a model built at L={}", cfg.l)));
    }
    let mut x = embed(&params.embedding, h, cfg.vocab, tokens)?;
    let mut xs = Vec::with_capacity(cfg.n_layers);
    let mut dss_in = Vec::with_capacity(cfg.n_layers);
    let mut dss = Vec::with_capacity(cfg.n_layers);
    let mut norms = Vec::with_capacity(cfg.n_layers);
    for (l, lp) in params.layers.iter().enumerate() {
        match cfg.norm_mode {
            NormMode::Prenorm => {
                let (v, nc) = layer_norm(&x, h, len, &params.norms[l]);
                let (o, lc) = layer_forward_cached(lp, &kernels.layers[l], &v);
                let next: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
                xs.push(std::mem::replace(&mut x, next));
                dss_in.push(v);
                dss.push(lc);
                norms.push(nc);
            }
            NormMode::Postnorm => {
                let (o, lc) = layer_forward_cached(lp, &kernels.layers[l], &x);
                let s: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
                let (next, nc) = layer_norm(&s, h, len, &params.norms[l]);
                let prev = std::mem::replace(&mut x, next);
                dss_in.push(prev.clone());
                xs.push(prev);
                dss.push(lc);
                norms.push(nc);
            }
        }
    }
    let mask = pool_mask(tokens, cfg.pad_token());
    let count = mask.iter().filter(|&&m| m).count() as f64;
    let pooled: Vec<f64> = (0..h)
        .map(|i| x[i * len..(i + 1) * len].iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>() / count)
        .collect();
    let (features, final_norm) = match &params.final_norm {
        Some(p) => {
            let (f, c) = layer_norm(&pooled, h, 1, p);
            (f, Some(c))
        }
        None => (pooled.clone(), None),
    };
    let c = cfg.n_classes;
    let logits = (0..c)
        .map(|j| params.head_b[j] + (0..h).map(|i| features[i] * params.head_w[i * c + j]).sum::<f64>())
        .collect();
    xs.push(x);
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        x: xs,
        dss_in,
        dss,
        norms,
        mask,
        pooled,
        final_norm,
        features,
        logits,
    })
}

/// Logits for each sequence, in batch order.
pub fn model_forward(params: &ModelParams, cfg: &ModelConfig, batch: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    params.validate(cfg)?;
    let len = batch.first().map_or(cfg.l, |t| t.len());
    let kernels = ModelKernels::new(params, len)?;
    batch
        .par_iter()
        .map(|t| forward_sample(params, cfg, &kernels, t).map(|c| c.logits))
        .collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Mean negative log-likelihood of the labels.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} logit rows for {} labels", logits.len(), labels.len())));
    }
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        if y >= z.len() {
            return Err(Error::BadLabel { label: y, n_classes: z.len() });
        }
        total -= log_softmax(z)[y];
    }
    Ok(total / logits.len() as f64)
}

/// Index of the largest logit (first on ties).
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Reduced,
    Retrained,
}

/// Reduction outcome for one feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureReduction {
    pub layer: usize,
    pub feature: usize,
    pub report: ReductionReport,
    pub diag_cond: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub stage: Stage,
    pub init: String,
    pub parent_hash: Option<String>,
    pub rng_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction: Option<Vec<FeatureReduction>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: ModelParams,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams, provenance: Provenance) -> Result<Self> {
        params.validate(&config)?;
        Ok(Checkpoint { format_version: FORMAT_VERSION, config, params, provenance })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        ck.params.validate(&ck.config)?;
        Ok(ck)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks that `parent` is the checkpoint this one was derived from.
    pub fn verify_parent(&self, parent: &Checkpoint) -> Result<()> {
        let want = parent.content_hash();
        match &self.provenance.parent_hash {
            Some(h) if *h == want => Ok(()),
            Some(h) => Err(Error::Checkpoint(format!("parent hash {h} does not match {want}"))),
            None => Err(Error::Checkpoint("checkpoint records no parent".into())),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
