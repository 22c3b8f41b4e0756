//! Quick property checks across every module, small enough to run from the
//! command line in a few seconds.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::balance::{self, balance, hankel_values, hankel_values_via_product, hinf_error_estimate, ReduceOptions};
use crate::corpus::random_stable_system;
use crate::data::{gen_marked_majority, Sample};
use crate::dss::{
    kernel, layer_forward_conv, layer_forward_recurrent, DssParams, LayerState, RecurrentLayer, Variant,
};
use crate::error::Result;
use crate::hippo::{normal_lowrank_split, skew_hippo_eigs};
use crate::linalg::{general_eig, max_abs_diff, C64};
use crate::network::{Checkpoint, LambdaInit, ModelConfig, ModelParams, NormMode, Provenance, Stage};
use crate::pipeline::compress;
use crate::ssm::{cexpm1, gramians_diagonal, is_stable, lyapunov_residual_p, lyapunov_residual_q};
use crate::training::finite_diff_check;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn(&mut ChaCha8Rng) -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("lyapunov", lyapunov),
    ("balancedness", balancedness),
    ("hankel", hankel),
    ("hinf-bound", hinf_bound),
    ("stability", stability),
    ("kernel-forms", kernel_forms),
    ("recurrent-conv", recurrent_conv),
    ("skew-hippo", skew_hippo),
    ("gradient", gradient),
    ("extraction", extraction),
    ("checkpoint", checkpoint),
];

pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Instant::now();
            let (passed, detail) = match f(&mut rng) {
                Ok(v) => v,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome { name, passed, detail, seconds: t.elapsed().as_secs_f64() }
        })
        .collect()
}

pub fn format_table(rows: &[CheckOutcome]) -> String {
    let mut out = format!("{:<16} {:<6} {:>8}  detail\n", "check", "result", "seconds");
    for r in rows {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("{:<16} {:<6} {:>8.3}  {}\n", r.name, verdict, r.seconds, r.detail));
    }
    out
}

const ORDERS: [usize; 3] = [4, 8, 16];

fn lyapunov(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for i in 0..30 {
        let s = random_stable_system(rng, ORDERS[i % 3]);
        let g = gramians_diagonal(&s)?;
        let a = s.to_dense().a;
        worst = worst.max(lyapunov_residual_p(&a, &s.b, &g.p)).max(lyapunov_residual_q(&a, &s.c, &g.q));
    }
    Ok((worst <= 1e-10, format!("max residual {worst:.2e}")))
}

fn balancedness(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for i in 0..30 {
        let bal = balance(&random_stable_system(rng, ORDERS[i % 3]), &ReduceOptions::default())?;
        let (p, q) = bal.balancedness_residual();
        worst = worst.max(p).max(q);
    }
    Ok((worst <= 1e-7, format!("max relative defect {worst:.2e}")))
}

fn hankel(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for i in 0..30 {
        let g = gramians_diagonal(&random_stable_system(rng, ORDERS[i % 3]))?;
        let a = hankel_values(&g.p, &g.q)?;
        let b = hankel_values_via_product(&g.p, &g.q)?;
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs() / a[0]);
        }
    }
    Ok((worst <= 1e-8, format!("max difference {worst:.2e} of sigma_1")))
}

fn hinf_bound(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let opts = ReduceOptions::default();
    let mut violations = 0;
    let mut cases = 0;
    for i in 0..20 {
        let s = random_stable_system(rng, ORDERS[i % 3]);
        let n = s.order();
        for r in [1, n / 4, n / 2] {
            let (red, rep) = balance::reduce(&s, r, &opts)?;
            let err = hinf_error_estimate(&s, &red, &s.lambda, &opts.grid)?;
            cases += 1;
            if err > rep.upper_bound + 1e-9 {
                violations += 1;
            }
        }
    }
    Ok((violations == 0, format!("{violations} violations in {cases} reductions")))
}

fn stability(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut unstable = 0;
    let mut cases = 0;
    for i in 0..20 {
        let s = random_stable_system(rng, ORDERS[i % 3]);
        let n = s.order();
        for r in [1, n / 4, n / 2] {
            let (red, _) = balance::reduce(&s, r, &ReduceOptions::default())?;
            cases += 1;
            if !is_stable(&red)?.stable {
                unstable += 1;
            }
        }
    }
    Ok((unstable == 0, format!("{unstable} unstable of {cases}")))
}

fn kernel_forms(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let len = 256;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let s = random_stable_system(rng, 8);
        let raw = s.to_dense().impulse_kernel(len)?;
        let wt: Vec<C64> = s.c.iter().zip(&s.b).map(|(c, b)| c * b).collect();
        let exp = DssParams {
            variant: Variant::Exp,
            lambda_re: s.lambda.iter().map(|l| (-l.re).ln()).collect(),
            lambda_im: s.lambda.iter().map(|l| l.im).collect(),
            w: wt.clone(),
            log_delta: s.delta.ln(),
            d: 0.0,
        };
        let soft = DssParams {
            variant: Variant::Softmax,
            lambda_re: s.lambda.iter().map(|l| l.re).collect(),
            w: wt.iter().zip(&s.lambda).map(|(w, l)| w * cexpm1(l * (len as f64 * s.delta))).collect(),
            ..exp.clone()
        };
        worst = worst.max(max_abs_diff(&raw, &kernel(&exp, len)?)).max(max_abs_diff(&raw, &kernel(&soft, len)?));
    }
    Ok((worst <= 1e-8, format!("max kernel difference {worst:.2e}")))
}

fn recurrent_conv(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let (h, len) = (4, 128);
    let cfg = ModelConfig { h, n: 8, l: len, ..ModelConfig::default() };
    let lp = ModelParams::init(&cfg, LambdaInit::Hippo, rng)?.layers.remove(0);
    let u: Vec<f64> = (0..h * len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let conv = layer_forward_conv(&lp, &u, len)?;
    let rec = RecurrentLayer::new(&lp, len)?;
    let mut st = LayerState::zeros(&lp);
    let mut worst: f64 = 0.0;
    for k in 0..len {
        let step: Vec<f64> = (0..h).map(|i| u[i * len + k]).collect();
        let y = layer_forward_recurrent(&rec, &mut st, &step)?;
        for i in 0..h {
            worst = worst.max((y[i] - conv[i * len + k]).abs());
        }
    }
    Ok((worst <= 1e-5, format!("max difference {worst:.2e}")))
}

fn skew_hippo(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let n = 32;
    let dec = normal_lowrank_split(2 * n);
    let recon = dec.reconstruction_error();
    let normal_eigs = general_eig(&dec.normal)?.values;
    let re_dev = normal_eigs.iter().map(|m| (m.re + 0.5).abs()).fold(0.0, f64::max);
    let upper = skew_hippo_eigs(n)?.iter().filter(|m| m.im > 0.0).count();
    let ok = recon <= 1e-12 && re_dev <= 1e-10 && upper == n;
    Ok((ok, format!("reconstruction {recon:.1e}, |Re + 1/2| {re_dev:.1e}, {upper} upper eigenvalues")))
}

fn tiny_model(variant: Variant, norm_mode: NormMode, rng: &mut ChaCha8Rng) -> Result<(ModelConfig, ModelParams, Vec<Sample>)> {
    let cfg = ModelConfig { n_layers: 2, h: 3, n: 4, variant, norm_mode, l: 16, vocab: 17, n_classes: 2, seed: 0 };
    let params = ModelParams::init(&cfg, LambdaInit::Random, rng)?;
    let batch = gen_marked_majority(3, 16, rng.random())?.samples;
    Ok((cfg, params, batch))
}

fn gradient(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for variant in [Variant::Exp, Variant::Softmax] {
        for mode in [NormMode::Prenorm, NormMode::Postnorm] {
            let (cfg, params, batch) = tiny_model(variant, mode, rng)?;
            worst = worst.max(finite_diff_check(&params, &cfg, &batch, "")?.max_rel_error);
        }
    }
    Ok((worst <= 1e-4, format!("max relative error {worst:.2e}")))
}

fn pretrain_checkpoint(cfg: ModelConfig, params: ModelParams) -> Result<Checkpoint> {
    let prov = Provenance {
        stage: Stage::Pretrain,
        init: "hippo".into(),
        parent_hash: None,
        rng_seed: cfg.seed,
        reduction: None,
        notes: BTreeMap::new(),
    };
    Checkpoint::new(cfg, params, prov)
}

fn extraction(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for variant in [Variant::Exp, Variant::Softmax] {
        let cfg = ModelConfig { h: 4, n: 8, l: 64, variant, ..ModelConfig::default() };
        let parent = pretrain_checkpoint(cfg.clone(), ModelParams::init(&cfg, LambdaInit::Hippo, rng)?)?;
        let red = compress(&parent, 4, &ReduceOptions::default())?;
        for f in red.provenance.reduction.iter().flatten() {
            worst = worst.max(f.report.residuals["kernel_fidelity"]);
        }
    }
    Ok((worst <= 1e-8, format!("max kernel difference {worst:.2e}")))
}

fn checkpoint(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let cfg = ModelConfig { h: 4, n: 4, l: 32, ..ModelConfig::default() };
    let ck = pretrain_checkpoint(cfg.clone(), ModelParams::init(&cfg, LambdaInit::Random, rng)?)?;
    let back = Checkpoint::from_json(&ck.to_json())?;
    let exact = back.params.flatten().iter().zip(ck.params.flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((exact && back == ck, format!("{} parameters round-tripped", ck.params.num_params())))
}
