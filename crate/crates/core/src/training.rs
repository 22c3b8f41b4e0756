//! Reverse-mode gradients of the classifier, AdamW, and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::dss::{add_into, kernel_backward, layer_backward, LayerGrad};
use crate::error::{Error, Result};
use crate::network::{
    argmax, forward_sample, layer_norm_backward, log_softmax, ModelConfig, ModelKernels, ModelParams, NormMode,
    NormParams, GradientSet,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a finite non-negative number, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        if matches!(self.clip, Some(c) if c <= 0.0) {
            return Err(Error::Config("clip must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample gradient before the kernel pull-back.
struct SampleGrad {
    loss: f64,
    embedding: Vec<f64>,
    layers: Vec<LayerGrad>,
    norms: Vec<NormParams>,
    final_norm: Option<NormParams>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
}

impl SampleGrad {
    fn zeros(params: &ModelParams, cfg: &ModelConfig, len: usize) -> Self {
        let h = cfg.h;
        let zero_norm = || NormParams { scale: vec![0.0; h], shift: vec![0.0; h] };
        SampleGrad {
            loss: 0.0,
            embedding: vec![0.0; params.embedding.len()],
            layers: (0..cfg.n_layers).map(|_| LayerGrad::zeros(h, len)).collect(),
            norms: (0..cfg.n_layers).map(|_| zero_norm()).collect(),
            final_norm: params.final_norm.as_ref().map(|_| zero_norm()),
            head_w: vec![0.0; params.head_w.len()],
            head_b: vec![0.0; params.head_b.len()],
        }
    }

    fn add_assign(&mut self, o: &SampleGrad) {
        self.loss += o.loss;
        add_into(&mut self.embedding, &o.embedding);
        for (a, b) in self.layers.iter_mut().zip(&o.layers) {
            a.add_assign(b);
        }
        for (a, b) in self.norms.iter_mut().zip(&o.norms) {
            add_into(&mut a.scale, &b.scale);
            add_into(&mut a.shift, &b.shift);
        }
        if let (Some(a), Some(b)) = (&mut self.final_norm, &o.final_norm) {
            add_into(&mut a.scale, &b.scale);
            add_into(&mut a.shift, &b.shift);
        }
        add_into(&mut self.head_w, &o.head_w);
        add_into(&mut self.head_b, &o.head_b);
    }
}

fn sample_backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    kernels: &ModelKernels,
    sample: &Sample,
    weight: f64,
) -> Result<SampleGrad> {
    let (h, len, c) = (cfg.h, sample.tokens.len(), cfg.n_classes);
    if sample.label >= c {
        return Err(Error::BadLabel { label: sample.label, n_classes: c });
    }
    let fc = forward_sample(params, cfg, kernels, &sample.tokens)?;
    let mut g = SampleGrad::zeros(params, cfg, len);
    let logp = log_softmax(&fc.logits);
    g.loss = -logp[sample.label] * weight;
    let dlogits: Vec<f64> =
        logp.iter().enumerate().map(|(j, lp)| (lp.exp() - f64::from(j == sample.label)) * weight).collect();
    let mut dfeat = vec![0.0; h];
    for i in 0..h {
        for j in 0..c {
            g.head_w[i * c + j] += fc.features[i] * dlogits[j];
            dfeat[i] += params.head_w[i * c + j] * dlogits[j];
        }
    }
    add_into(&mut g.head_b, &dlogits);
    let dpooled = match (&params.final_norm, &fc.final_norm, &mut g.final_norm) {
        (Some(p), Some(cache), Some(gn)) => layer_norm_backward(cache, p, &dfeat, h, gn),
        _ => dfeat,
    };
    let count = fc.mask.iter().filter(|&&m| m).count() as f64;
    let mut dx = vec![0.0; h * len];
    for i in 0..h {
        for (k, &m) in fc.mask.iter().enumerate() {
            if m {
                dx[i * len + k] = dpooled[i] / count;
            }
        }
    }
    for l in (0..cfg.n_layers).rev() {
        let lp = &params.layers[l];
        let kern = &kernels.layers[l];
        match cfg.norm_mode {
            NormMode::Prenorm => {
                let dv = layer_backward(lp, kern, &fc.dss_in[l], &fc.dss[l], &dx, &mut g.layers[l]);
                let dln = layer_norm_backward(&fc.norms[l], &params.norms[l], &dv, h, &mut g.norms[l]);
                add_into(&mut dx, &dln);
            }
            NormMode::Postnorm => {
                let ds = layer_norm_backward(&fc.norms[l], &params.norms[l], &dx, h, &mut g.norms[l]);
                let du = layer_backward(lp, kern, &fc.dss_in[l], &fc.dss[l], &ds, &mut g.layers[l]);
                dx = ds;
                add_into(&mut dx, &du);
            }
        }
    }
    for (k, &t) in sample.tokens.iter().enumerate() {
        let row = &mut g.embedding[t as usize * h..(t as usize + 1) * h];
        for (i, r) in row.iter_mut().enumerate() {
            *r += dx[i * len + k];
        }
    }
    Ok(g)
}

/// Mean cross-entropy over the batch and its gradient for every tensor.
///
/// Per-sample work may run in parallel; the per-sample gradients are summed
/// in batch order, so the result does not depend on the thread count.
pub fn backward(params: &ModelParams, cfg: &ModelConfig, batch: &[Sample]) -> Result<(f64, GradientSet)> {
    let kernels = ModelKernels::new(params, cfg.l)?;
    backward_with_kernels(params, cfg, &kernels, batch)
}

fn backward_with_kernels(
    params: &ModelParams,
    cfg: &ModelConfig,
    kernels: &ModelKernels,
    batch: &[Sample],
) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let weight = 1.0 / batch.len() as f64;
    let per_sample: Vec<SampleGrad> =
        batch.par_iter().map(|s| sample_backward(params, cfg, kernels, s, weight)).collect::<Result<_>>()?;
    let mut it = per_sample.into_iter();
    let mut total = it.next().expect("non-empty batch");
    for g in it {
        total.add_assign(&g);
    }
    let mut out = params.zeros_like();
    out.embedding = total.embedding;
    for (l, (lg, op)) in total.layers.iter().zip(out.layers.iter_mut()).enumerate() {
        for (i, dp) in op.dss.iter_mut().enumerate() {
            let kg = kernel_backward(&params.layers[l].dss[i], &lg.dk[i]);
            dp.lambda_re = kg.lambda_re;
            dp.lambda_im = kg.lambda_im;
            dp.w = kg.w;
            dp.log_delta = kg.log_delta;
            dp.d = lg.d[i];
        }
        op.w_out.clone_from(&lg.w_out);
        op.bias.clone_from(&lg.bias);
    }
    out.norms = total.norms;
    out.final_norm = total.final_norm;
    out.head_w = total.head_w;
    out.head_b = total.head_b;
    check_finite(&out)?;
    Ok((total.loss, out))
}

fn check_finite(g: &GradientSet) -> Result<()> {
    let mut bad = None;
    g.for_each(&mut |t| {
        if bad.is_none() && t.values.iter().any(|x| !x.is_finite()) {
            bad = Some(t.name);
        }
    });
    match bad {
        Some(name) => Err(Error::NonFiniteGradient(name)),
        None => Ok(()),
    }
}

/// Scales `g` in place so its global norm is at most `max`; returns the
/// norm before scaling.
pub fn clip_global_norm(g: &mut GradientSet, max: f64) -> f64 {
    let norm = g.flatten().iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        g.for_each_mut(&mut |_, _, v| v.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    decay: Vec<bool>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, tc: &TrainConfig) -> Self {
        let n = params.num_params();
        OptimizerState {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            lr: tc.lr,
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.eps,
            weight_decay: tc.weight_decay,
            decay: params.decay_mask(),
        }
    }
}

/// One AdamW update with decoupled weight decay (skipped for norms and biases).
pub fn adamw_step(state: &mut OptimizerState, params: &mut ModelParams, grads: &GradientSet) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut p = params.flatten();
    let g = grads.flatten();
    assert_eq!(p.len(), state.m.len(), "optimizer state does not match parameters");
    for i in 0..p.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g[i] * g[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        if state.decay[i] {
            p[i] -= state.lr * state.weight_decay * p[i];
        }
        p[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
    }
    params.load_flat(&p);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_acc: f64,
}

pub fn metrics_csv(m: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_loss,eval_acc\n");
    for e in m {
        out.push_str(&format!("{},{:.17e},{:.17e}\n", e.epoch, e.train_loss, e.eval_acc));
    }
    out
}

/// Mean loss and accuracy on a dataset.
pub fn evaluate(params: &ModelParams, cfg: &ModelConfig, data: &[Sample]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let kernels = ModelKernels::new(params, cfg.l)?;
    let per: Vec<(f64, bool)> = data
        .par_iter()
        .map(|s| {
            let fc = forward_sample(params, cfg, &kernels, &s.tokens)?;
            if s.label >= cfg.n_classes {
                return Err(Error::BadLabel { label: s.label, n_classes: cfg.n_classes });
            }
            Ok((-log_softmax(&fc.logits)[s.label], argmax(&fc.logits) == s.label))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok((per.iter().map(|p| p.0).sum::<f64>() / n, per.iter().filter(|p| p.1).count() as f64 / n))
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
    pub optimizer: OptimizerState,
}

/// Mini-batch AdamW from `params`. Shuffling is driven by `seed` alone, and
/// the optimizer state starts fresh.
pub fn train_loop(
    params: ModelParams,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train: &[Sample],
    eval: &[Sample],
    seed: u64,
) -> Result<TrainOutcome> {
    tc.validate()?;
    params.validate(cfg)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = params;
    let mut opt = OptimizerState::new(&params, tc);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, mut g) = backward(&params, cfg, &batch)?;
            loss_sum += loss * batch.len() as f64;
            if let Some(c) = tc.clip {
                clip_global_norm(&mut g, c);
            }
            adamw_step(&mut opt, &mut params, &g);
        }
        let eval_acc = if eval.is_empty() { f64::NAN } else { evaluate(&params, cfg, eval)?.1 };
        let m = EpochMetrics { epoch, train_loss: loss_sum / train.len() as f64, eval_acc };
        log::info!("epoch {epoch}: train_loss {:.6} eval_acc {:.4}", m.train_loss, m.eval_acc);
        metrics.push(m);
    }
    Ok(TrainOutcome { params, metrics, optimizer: opt })
}

/// Mean loss of a batch, forward only.
pub fn batch_loss(params: &ModelParams, cfg: &ModelConfig, batch: &[Sample]) -> Result<f64> {
    let kernels = ModelKernels::new(params, cfg.l)?;
    let mut total = 0.0;
    for s in batch {
        let fc = forward_sample(params, cfg, &kernels, &s.tokens)?;
        total -= log_softmax(&fc.logits)[s.label];
    }
    Ok(total / batch.len() as f64)
}

/// Largest relative error per tensor between `grads` and central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub per_tensor: Vec<(String, f64)>,
    pub coords_checked: usize,
}

pub const FD_MAX_PARAMS: usize = 10_000;
pub const FD_COORDS_PER_TENSOR: usize = 64;
/// Floor on the denominator of the relative error.
pub const FD_REL_FLOOR: f64 = 1e-6;

/// Compares `grads` against Richardson-extrapolated central differences
/// (`h = 1e-4 max(|theta|, 1)`) on tensors whose name starts with `selector`.
pub fn finite_diff_compare(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[Sample],
    grads: &GradientSet,
    selector: &str,
) -> Result<FdReport> {
    let n = params.num_params();
    if n > FD_MAX_PARAMS {
        return Err(Error::Config(format!("finite differences limited to {FD_MAX_PARAMS} parameters, model has {n}")));
    }
    let theta = params.flatten();
    let g = grads.flatten();
    let mut probe = params.clone();
    let mut loss_at = |flat: &[f64]| -> Result<f64> {
        probe.load_flat(flat);
        batch_loss(&probe, cfg, batch)
    };
    let mut per_tensor = Vec::new();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (name, off, len) in params.layout() {
        if !name.starts_with(selector) {
            continue;
        }
        let picks: Vec<usize> = if len <= FD_COORDS_PER_TENSOR {
            (0..len).collect()
        } else {
            (0..FD_COORDS_PER_TENSOR).map(|j| j * len / FD_COORDS_PER_TENSOR).collect()
        };
        let mut tensor_worst: f64 = 0.0;
        for j in picks {
            let i = off + j;
            let h = 1e-4 * theta[i].abs().max(1.0);
            let mut x = theta.clone();
            let mut central = |step: f64| -> Result<f64> {
                x[i] = theta[i] + step;
                let a = loss_at(&x)?;
                x[i] = theta[i] - step;
                let b = loss_at(&x)?;
                Ok((a - b) / (2.0 * step))
            };
            let d1 = central(h)?;
            let d2 = central(0.5 * h)?;
            let fd = (4.0 * d2 - d1) / 3.0;
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(FD_REL_FLOOR);
            tensor_worst = tensor_worst.max(rel);
            checked += 1;
        }
        worst = worst.max(tensor_worst);
        per_tensor.push((name, tensor_worst));
    }
    Ok(FdReport { max_rel_error: worst, per_tensor, coords_checked: checked })
}

/// [`finite_diff_compare`] against the analytic gradient.
pub fn finite_diff_check(params: &ModelParams, cfg: &ModelConfig, batch: &[Sample], selector: &str) -> Result<FdReport> {
    let (_, g) = backward(params, cfg, batch)?;
    finite_diff_compare(params, cfg, batch, &g, selector)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dss::Variant;
    use crate::linalg::testutil::rng;
    use crate::network::tests::{random_tokens, tiny_config};
    use crate::network::LambdaInit;
    use rand::Rng;

    pub(crate) fn tiny_batch(cfg: &ModelConfig, seed: u64, n: usize) -> Vec<Sample> {
        let mut r = rng(seed);
        (0..n).map(|_| Sample { tokens: random_tokens(&mut r, cfg), label: r.random_range(0..cfg.n_classes) }).collect()
    }

    #[test]
    fn zero_model_head_bias_gradient() {
        let cfg = ModelConfig { n_classes: 2, ..tiny_config(Variant::Exp, NormMode::Prenorm) };
        let mut p = ModelParams::init(&cfg, LambdaInit::Hippo, &mut rng(1)).unwrap();
        p.head_w.fill(0.0);
        let batch = vec![Sample { label: 0, ..tiny_batch(&cfg, 2, 1).remove(0) }];
        let (loss, g) = backward(&p, &cfg, &batch).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g.head_b, vec![-0.5, 0.5]);
        // head weights are zero, so nothing upstream receives gradient
        assert!(g.embedding.iter().all(|&x| x == 0.0));
        assert!(g.layers[1].w_out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradients_match_differences_on_tiny_models() {
        for variant in [Variant::Exp, Variant::Softmax] {
            for mode in [NormMode::Prenorm, NormMode::Postnorm] {
                let cfg = tiny_config(variant, mode);
                let p = ModelParams::init(&cfg, LambdaInit::Random, &mut rng(3)).unwrap();
                let batch = tiny_batch(&cfg, 4, 3);
                let rep = finite_diff_check(&p, &cfg, &batch, "").unwrap();
                assert!(rep.max_rel_error <= 1e-4, "{variant} {mode}: {:?}", rep.per_tensor);
            }
        }
    }

    #[test]
    fn head_only_check_is_exact_and_corruption_is_caught() {
        let cfg = tiny_config(Variant::Exp, NormMode::Prenorm);
        let p = ModelParams::init(&cfg, LambdaInit::Hippo, &mut rng(5)).unwrap();
        let batch = tiny_batch(&cfg, 6, 2);
        assert!(finite_diff_check(&p, &cfg, &batch, "head").unwrap().max_rel_error <= 1e-8);
        let (_, mut g) = backward(&p, &cfg, &batch).unwrap();
        g.layers[0].dss[1].lambda_im[2] *= 1.1;
        let rep = finite_diff_compare(&p, &cfg, &batch, &g, "layers.0.dss.1").unwrap();
        assert!(rep.max_rel_error > 1e-2);
    }

    #[test]
    fn adamw_closed_forms() {
        let cfg = tiny_config(Variant::Exp, NormMode::Prenorm);
        let p0 = ModelParams::init(&cfg, LambdaInit::Hippo, &mut rng(7)).unwrap();
        let zero = p0.zeros_like();
        let tc = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = p0.clone();
        let mut st = OptimizerState::new(&p, &tc);
        adamw_step(&mut st, &mut p, &zero);
        assert_eq!(p, p0);

        let mut ones = p0.zeros_like();
        ones.for_each_mut(&mut |_, _, v| v.fill(1.0));
        let mut p = p0.clone();
        let mut st = OptimizerState::new(&p, &tc);
        adamw_step(&mut st, &mut p, &ones);
        for (a, b) in p.flatten().iter().zip(p0.flatten()) {
            assert!((a - (b - 1e-3)).abs() < 1e-10);
        }

        let tc = TrainConfig { weight_decay: 0.01, ..Default::default() };
        let mut p = p0.clone();
        let mut st = OptimizerState::new(&p, &tc);
        for _ in 0..3 {
            adamw_step(&mut st, &mut p, &zero);
        }
        let f = (1.0 - 1e-3 * 0.01f64).powi(3);
        for ((a, b), d) in p.flatten().iter().zip(p0.flatten()).zip(p0.decay_mask()) {
            let want = if d { b * f } else { b };
            assert!((a - want).abs() <= 1e-15 * want.abs().max(1.0));
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = tiny_config(Variant::Softmax, NormMode::Postnorm);
        let p = ModelParams::init(&cfg, LambdaInit::Random, &mut rng(8)).unwrap();
        let data = tiny_batch(&cfg, 9, 10);
        let tc = TrainConfig { lr: 0.0, epochs: 2, batch_size: 4, ..Default::default() };
        let out = train_loop(p.clone(), &cfg, &tc, &data, &data, 1).unwrap();
        assert_eq!(out.params, p);
    }

    #[test]
    fn memorizes_one_sample_and_is_deterministic() {
        let cfg = tiny_config(Variant::Exp, NormMode::Prenorm);
        let p = ModelParams::init(&cfg, LambdaInit::Hippo, &mut rng(10)).unwrap();
        let data = tiny_batch(&cfg, 11, 1);
        let tc = TrainConfig { lr: 1e-2, epochs: 200, batch_size: 1, ..Default::default() };
        let a = train_loop(p.clone(), &cfg, &tc, &data, &data, 3).unwrap();
        let last = a.metrics.last().unwrap();
        assert!(batch_loss(&a.params, &cfg, &data).unwrap() < 0.01, "{last:?}");
        let b = train_loop(p, &cfg, &tc, &data, &data, 3).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.params, b.params);
        let losses: Vec<f64> = a.metrics.iter().map(|m| m.train_loss).collect();
        let median = |v: &[f64]| {
            let mut s = v.to_vec();
            s.sort_by(f64::total_cmp);
            s[s.len() / 2]
        };
        assert!(losses.chunks(50).map(median).collect::<Vec<_>>().windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let cfg = tiny_config(Variant::Exp, NormMode::Prenorm);
        let p = ModelParams::init(&cfg, LambdaInit::Hippo, &mut rng(12)).unwrap();
        let mut g = p.clone();
        let before = clip_global_norm(&mut g, 1.0);
        assert!(before > 1.0);
        let after = g.flatten().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
