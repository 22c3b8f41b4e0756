//! Acceptance criteria, one PASS/FAIL line each. Set `ACCEPTANCE_ONLY=1,7`
//! to run a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use balred_ssm::balance::{balance, hankel_values, hankel_values_via_product, hinf_error_estimate, reduce, ReduceOptions};
use balred_ssm::corpus::random_stable_system;
use balred_ssm::data::{gen_marked_majority, Sample};
use balred_ssm::dss::{kernel, layer_forward_conv, layer_forward_recurrent, DssParams, LayerState, RecurrentLayer, Variant};
use balred_ssm::hippo::{hippo_legs, normal_lowrank_split};
use balred_ssm::linalg::{general_eig, CMat, CVec, C64};
use balred_ssm::network::{model_forward, Checkpoint, LambdaInit, ModelConfig, ModelParams, NormMode, Provenance, Stage};
use balred_ssm::pipeline::{build_main_training_init, extract_params, reduce_checkpoint, run_pipeline, PipelineConfig};
use balred_ssm::ssm::{cexpm1, gramians_diagonal, is_stable, DenseSsm, DiagonalSsm, TransferFunction};
use balred_ssm::training::{finite_diff_check, train_loop, TrainConfig};

type Verdict = (bool, String);

const ORDERS: [usize; 3] = [4, 16, 64];

fn corpus(seed: u64, count: usize) -> Vec<DiagonalSsm> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| random_stable_system(&mut rng, ORDERS[i % ORDERS.len()])).collect()
}

fn fro(m: &CMat) -> f64 {
    m.as_slice().iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn sub(a: &CMat, b: &CMat) -> CMat {
    CMat::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)] - b[(i, j)])
}

fn mul(a: &CMat, b: &CMat) -> CMat {
    CMat::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum())
}

fn adj(a: &CMat) -> CMat {
    CMat::from_fn(a.cols(), a.rows(), |i, j| a[(j, i)].conj())
}

fn outer(a: &[C64], b: &[C64]) -> CMat {
    CMat::from_fn(a.len(), b.len(), |i, j| a[i] * b[j].conj())
}

fn c1_lyapunov() -> Verdict {
    let mut worst: f64 = 0.0;
    for s in corpus(1, 100) {
        let g = gramians_diagonal(&s).unwrap();
        let a = CMat::diag(&s.lambda);
        let bb = outer(&s.b, &s.b);
        let cc: CVec = s.c.iter().map(|c| c.conj()).collect();
        let ccm = outer(&cc, &cc);
        let (ap, pa) = (mul(&a, &g.p), mul(&g.p, &adj(&a)));
        let (aq, qa) = (mul(&adj(&a), &g.q), mul(&g.q, &a));
        let n = a.rows();
        let rp = fro(&CMat::from_fn(n, n, |i, j| ap[(i, j)] + pa[(i, j)] + bb[(i, j)]));
        let rq = fro(&CMat::from_fn(n, n, |i, j| aq[(i, j)] + qa[(i, j)] + ccm[(i, j)]));
        worst = worst.max(rp / fro(&bb)).max(rq / fro(&ccm));
    }
    (worst <= 1e-10, format!("max relative Lyapunov residual {worst:.2e} (tol 1e-10)"))
}

fn c2_balancedness() -> Verdict {
    let mut worst: f64 = 0.0;
    for s in corpus(2, 100) {
        let bal = balance(&s, &ReduceOptions::default()).unwrap();
        let g = gramians_diagonal(&s).unwrap();
        let sig = CMat::diag_real(&bal.sigma);
        let p = mul(&mul(&bal.t, &g.p), &adj(&bal.t));
        let q = mul(&mul(&adj(&bal.tinv), &g.q), &bal.tinv);
        worst = worst.max(fro(&sub(&p, &sig)) / fro(&sig)).max(fro(&sub(&q, &sig)) / fro(&sig));
    }
    (worst <= 1e-7, format!("max relative balancing defect {worst:.2e} (tol 1e-7)"))
}

fn c3_hankel() -> Verdict {
    let mut worst: f64 = 0.0;
    for s in corpus(2, 100) {
        let g = gramians_diagonal(&s).unwrap();
        let a = hankel_values(&g.p, &g.q).unwrap();
        let b = hankel_values_via_product(&g.p, &g.q).unwrap();
        // independent: sqrt of the eigenvalues of PQ from the general solver
        let mut c: Vec<f64> = general_eig(&mul(&g.p, &g.q)).unwrap().values.iter().map(|z| z.re.max(0.0).sqrt()).collect();
        c.sort_by(|x, y| y.total_cmp(x));
        for i in 0..a.len() {
            worst = worst.max((a[i] - b[i]).abs() / a[0]).max((a[i] - c[i]).abs() / a[0]);
        }
    }
    (worst <= 1e-8, format!("max |sigma - sqrt(eig(PQ))| / sigma_1 = {worst:.2e} (tol 1e-8)"))
}

/// Dense sweep of `|G - G_r|` on `[1e-3, 1e3] * pole scale`, both signs.
fn sweep_error(full: &DiagonalSsm, red: &DenseSsm) -> f64 {
    let scale = full.lambda.iter().map(|l| l.norm()).fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    for k in 0..=2000 {
        let w = scale * 10f64.powf(-3.0 + 6.0 * k as f64 / 2000.0);
        for s in [C64::new(0.0, w), C64::new(0.0, -w)] {
            let g: C64 = full.c.iter().zip(&full.b).zip(&full.lambda).map(|((c, b), l)| c * b / (s - l)).sum();
            worst = worst.max((g - red.transfer(s).unwrap()).norm());
        }
    }
    for l in &full.lambda {
        let s = C64::new(0.0, l.im);
        let g: C64 = full.c.iter().zip(&full.b).zip(&full.lambda).map(|((c, b), l)| c * b / (s - l)).sum();
        worst = worst.max((g - red.transfer(s).unwrap()).norm());
    }
    worst
}

fn c4_hinf_bound() -> Verdict {
    let opts = ReduceOptions::default();
    let (mut violations, mut cases, mut below_lower) = (0, 0, 0);
    let mut tightest = f64::INFINITY;
    for s in corpus(4, 100) {
        let n = s.order();
        for r in [1, n / 4, n / 2] {
            let (red, rep) = reduce(&s, r, &opts).unwrap();
            let err = hinf_error_estimate(&s, &red, &s.lambda, &opts.grid).unwrap().max(sweep_error(&s, &red));
            cases += 1;
            if err > rep.upper_bound + 1e-9 {
                violations += 1;
            }
            if err < rep.lower_bound {
                below_lower += 1;
            }
            tightest = tightest.min(rep.upper_bound - err);
        }
    }
    (
        violations == 0,
        format!(
            "{violations} violations of 2*sum(sigma_tail) in {cases} reductions; min slack {tightest:.2e}; \
             sampled error under sigma_(r+1) in {below_lower} cases (informational)"
        ),
    )
}

fn c5_stability() -> Verdict {
    let (mut unstable, mut cases) = (0, 0);
    let mut margin = f64::NEG_INFINITY;
    for s in corpus(5, 100) {
        let n = s.order();
        for r in [1, n / 4, n / 2] {
            let (red, _) = reduce(&s, r, &ReduceOptions::default()).unwrap();
            let st = is_stable(&red).unwrap();
            let eig_max = general_eig(&red.a).unwrap().values.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
            cases += 1;
            if !st.stable || eig_max >= 0.0 {
                unstable += 1;
            }
            margin = margin.max(eig_max);
        }
    }
    (unstable == 0, format!("{unstable} of {cases} reductions unstable; largest Re(eig) {margin:.3e}"))
}

fn c6_kernel_forms() -> Verdict {
    let len = 256;
    let mut worst: f64 = 0.0;
    for s in corpus(6, 100) {
        let raw = s.to_dense().impulse_kernel(len).unwrap();
        let wt: CVec = s.c.iter().zip(&s.b).map(|(c, b)| c * b).collect();
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
        for k in [kernel(&exp, len).unwrap(), kernel(&soft, len).unwrap()] {
            worst = worst.max(raw.iter().zip(&k).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max));
        }
    }
    (worst <= 1e-8, format!("max kernel difference {worst:.2e} over 100 systems, L=256 (tol 1e-8)"))
}

fn c7_recurrent() -> Verdict {
    let (h, n, len) = (8, 16, 1024);
    let cfg = ModelConfig { h, n, l: len, variant: Variant::Exp, ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let blocks = 4;
    let mut block_time = vec![f64::INFINITY; blocks];
    for _ in 0..5 {
        let lp = ModelParams::init(&cfg, LambdaInit::Random, &mut rng).unwrap().layers.remove(0);
        let u: Vec<f64> = (0..h * len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let conv = layer_forward_conv(&lp, &u, len).unwrap();
        let rec = RecurrentLayer::new(&lp, len).unwrap();
        let mut st = LayerState::zeros(&lp);
        let steps: Vec<Vec<f64>> = (0..len).map(|k| (0..h).map(|i| u[i * len + k]).collect()).collect();
        let mut ys = Vec::with_capacity(len);
        for (b, chunk) in steps.chunks(len / blocks).enumerate() {
            let t = Instant::now();
            for step in chunk {
                ys.push(layer_forward_recurrent(&rec, &mut st, step).unwrap());
            }
            block_time[b] = block_time[b].min(t.elapsed().as_secs_f64() / chunk.len() as f64);
        }
        for (k, y) in ys.iter().enumerate() {
            for i in 0..h {
                worst = worst.max((y[i] - conv[i * len + k]).abs());
            }
        }
    }
    let ratio = block_time.iter().cloned().fold(0.0, f64::max) / block_time.iter().cloned().fold(f64::INFINITY, f64::min);
    (
        worst <= 1e-5 && ratio <= 3.0,
        format!("max |recurrent - conv| {worst:.2e} (tol 1e-5); per-step time ratio across positions {ratio:.2} (tol 3)"),
    )
}

fn c8_skew_hippo() -> Verdict {
    let mut re_dev: f64 = 0.0;
    let mut recon: f64 = 0.0;
    let mut counts_ok = true;
    for np in [8, 32, 64, 128, 256] {
        let dec = normal_lowrank_split(np);
        // independent reconstruction from the raw LegS matrix
        let full = hippo_legs(np);
        let lowrank = CMat::from_fn(np, np, |i, j| C64::new(0.5 * dec.p[i] * dec.q[j], 0.0));
        let rebuilt = sub(&dec.normal, &lowrank);
        recon = recon.max(sub(&full, &rebuilt).as_slice().iter().map(|z| z.norm()).fold(0.0, f64::max));
        let eig = general_eig(&dec.normal).unwrap().values;
        re_dev = re_dev.max(eig.iter().map(|z| (z.re + 0.5).abs()).fold(0.0, f64::max));
        counts_ok &= eig.iter().filter(|z| z.im > 0.0).count() == np / 2;
    }
    (
        re_dev <= 1e-10 && recon <= 1e-12 && counts_ok,
        format!("max |Re + 1/2| {re_dev:.2e} (tol 1e-10); reconstruction {recon:.2e} (tol 1e-12); N' in 8..=256, half in upper plane: {counts_ok}"),
    )
}

fn c9_gradient() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut per = Vec::new();
    for variant in [Variant::Exp, Variant::Softmax] {
        for norm_mode in [NormMode::Prenorm, NormMode::Postnorm] {
            let cfg = ModelConfig { n_layers: 2, h: 3, n: 4, variant, norm_mode, l: 16, vocab: 17, n_classes: 2, seed: 0 };
            let params = ModelParams::init(&cfg, LambdaInit::Random, &mut rng).unwrap();
            let batch = gen_marked_majority(4, 16, rng.random()).unwrap().samples;
            let e = finite_diff_check(&params, &cfg, &batch, "").unwrap().max_rel_error;
            per.push(format!("{variant}/{norm_mode} {e:.1e}"));
            worst = worst.max(e);
        }
    }
    (worst <= 1e-4, format!("max relative error {worst:.2e} (tol 1e-4): {}", per.join(", ")))
}

fn pretrain_ckpt(cfg: &ModelConfig, params: ModelParams) -> Checkpoint {
    let prov = Provenance {
        stage: Stage::Pretrain,
        init: "hippo".into(),
        parent_hash: None,
        rng_seed: cfg.seed,
        reduction: None,
        notes: BTreeMap::new(),
    };
    Checkpoint::new(cfg.clone(), params, prov).unwrap()
}

fn c10_extraction() -> Verdict {
    let mut worst_k: f64 = 0.0;
    let mut worst_logit: f64 = 0.0;
    let mut features = 0;
    for variant in [Variant::Exp, Variant::Softmax] {
        let cfg = ModelConfig { h: 8, n: 16, l: 256, vocab: 17, variant, seed: 10, ..ModelConfig::default() };
        let ds = gen_marked_majority(600, 256, 10).unwrap();
        let (train, probe) = ds.split(1, 0.9).unwrap();
        let init = ModelParams::init(&cfg, LambdaInit::Hippo, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let tc = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let trained = train_loop(init, &cfg, &tc, &train.samples, &[], 10).unwrap().params;
        let parent = pretrain_ckpt(&cfg, trained);
        for r in [4, cfg.n] {
            let reduced = reduce_checkpoint(&parent, r, &ReduceOptions::default()).unwrap();
            let mut extracted = Vec::new();
            for f in &reduced {
                let ex = extract_params(&f.system, variant, cfg.l).unwrap();
                let p = &parent.params.layers[f.layer].dss[f.feature];
                let dss = ex.to_dss(variant, p.log_delta, p.d);
                let dense = f.system.impulse_kernel(cfg.l).unwrap();
                let k = kernel(&dss, cfg.l).unwrap();
                worst_k = worst_k.max(dense.iter().zip(&k).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max));
                features += 1;
                extracted.push(ex);
            }
            if r == cfg.n {
                let red = build_main_training_init(&parent, &reduced, &extracted).unwrap();
                let batch: Vec<Vec<u32>> = probe.samples.iter().map(|s: &Sample| s.tokens.clone()).collect();
                let a = model_forward(&parent.params, &parent.config, &batch).unwrap();
                let b = model_forward(&red.params, &red.config, &batch).unwrap();
                for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
                    worst_logit = worst_logit.max((x - y).abs());
                }
            }
        }
    }
    (
        worst_k <= 1e-8 && worst_logit <= 1e-5,
        format!("max kernel difference {worst_k:.2e} over {features} features (tol 1e-8); r=N logit difference {worst_logit:.2e} (tol 1e-5)"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c11_pipeline() -> Verdict {
    let t = Instant::now();
    let tc = TrainConfig { epochs: 10, ..TrainConfig::default() };
    let (mut proposed, mut hippo, mut random) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let ds = gen_marked_majority(8000, 256, seed).unwrap();
        let (train, eval) = ds.split(seed.wrapping_add(1), 0.8).unwrap();
        let model = ModelConfig { n_layers: 2, h: 8, n: 16, variant: Variant::Exp, l: 256, vocab: 17, seed, ..ModelConfig::default() };
        let pc = PipelineConfig {
            model,
            r: 4,
            stabilize: Default::default(),
            pretrain: tc.clone(),
            retrain: tc.clone(),
            baseline: tc.clone(),
        };
        let out = run_pipeline(&pc, &train.samples, &eval.samples).unwrap();
        for line in out.table.to_csv().lines().skip(1) {
            println!("      seed {seed}: {line}");
        }
        proposed.push(out.retrained.after);
        hippo.push(out.hippo.after);
        random.push(out.random.after);
    }
    let secs = t.elapsed().as_secs_f64();
    let (p, h, r) = (median(proposed), median(hippo), median(random));
    (
        p >= r && p >= h - 0.01 && secs < 1800.0,
        format!("median acc: compressed r=4 {p:.4}, random r=4 {r:.4}, Skew-HiPPO r=4 {h:.4}; runtime {secs:.0} s (budget 1800 s)"),
    )
}

fn cli(dir: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_balred-ssm"))
        .current_dir(dir)
        .args(args)
        .args(["--threads", "1"])
        .env_remove("BALRED_SSM_THREADS")
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

fn c12_reproducibility() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let small = "--set model.l=64 --set model.h=4 --set model.n=8 --set data.n=300 --set pretrain.epochs=2 --set retrain.epochs=2 --set baseline.epochs=2 --set r=3 --seed 12";
    let small: Vec<&str> = small.split(' ').collect();
    for out in ["a", "b"] {
        let args: Vec<&str> = ["pipeline", "--out", out].iter().copied().chain(small.iter().copied()).collect();
        assert_eq!(cli(d, &args), 0);
    }
    let mut files: Vec<String> = std::fs::read_dir(d.join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    let mut differing = Vec::new();
    for f in &files {
        if f == "run.json" {
            continue;
        }
        if std::fs::read(d.join("a").join(f)).unwrap() != std::fs::read(d.join("b").join(f)).unwrap() {
            differing.push(f.clone());
        }
    }
    let mut roundtrip = true;
    for f in files.iter().filter(|f| f.ends_with(".json") && !f.starts_with("compare") && *f != "run.json") {
        let text = std::fs::read_to_string(d.join("a").join(f)).unwrap();
        let ck = Checkpoint::from_json(&text).unwrap();
        roundtrip &= ck.to_json() == text;
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        roundtrip &= back.params.flatten().iter().zip(ck.params.flatten()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    (
        differing.is_empty() && roundtrip && files.len() > 5,
        format!("{} output files compared, {} differ {differing:?}; checkpoint round-trip bit-exact: {roundtrip}", files.len() - 1, differing.len()),
    )
}

type Criterion = (u32, &'static str, f64, fn() -> Verdict);

const CRITERIA: &[Criterion] = &[
    (1, "Lyapunov correctness", 5.0, c1_lyapunov),
    (2, "balancedness", 30.0, c2_balancedness),
    (3, "Hankel cross-check", f64::INFINITY, c3_hankel),
    (4, "H-infinity upper bound", f64::INFINITY, c4_hinf_bound),
    (5, "stability preservation", f64::INFINITY, c5_stability),
    (6, "kernel form equivalence", 10.0, c6_kernel_forms),
    (7, "recurrent/convolutional agreement", f64::INFINITY, c7_recurrent),
    (8, "Skew-HiPPO structure", f64::INFINITY, c8_skew_hippo),
    (9, "gradient check", 120.0, c9_gradient),
    (10, "extraction fidelity", f64::INFINITY, c10_extraction),
    (11, "pipeline trend", 1800.0, c11_pipeline),
    (12, "reproducibility", f64::INFINITY, c12_reproducibility),
];

fn main() {
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // libtest passes flags such as --nocapture; a name filter skips the suite
    if std::env::args().skip(1).any(|a| !a.starts_with('-')) {
        return;
    }
    let mut failed = 0;
    let mut ran = 0;
    for &(id, name, budget, f) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(v) => v,
            Err(p) => {
                let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        let secs = t.elapsed().as_secs_f64();
        let in_budget = secs < budget;
        let pass = ok && in_budget;
        let budget_note = if budget.is_finite() { format!(", budget {budget:.0} s") } else { String::new() };
        println!(
            "[{}] {id:>2} {name}: {detail} ({secs:.2} s{budget_note})",
            if pass { "PASS" } else { "FAIL" }
        );
        ran += 1;
        if !pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
