//! Pre-train, reduce each kernel by balanced truncation, pull the reduced
//! systems back into diagonal form and train again from there.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{self, ReduceOptions, ReductionReport, Stabilize};
use crate::dss::{kernel, materialize_ssm, DssParams, Variant};
use crate::error::{Error, Result};
use crate::linalg::{general_eig, inverse, max_abs_diff, CVec};
use crate::network::{Checkpoint, FeatureReduction, LambdaInit, ModelConfig, ModelParams, Provenance, Stage};
use crate::ssm::{cexpm1, DenseSsm};
use crate::training::{evaluate, train_loop, EpochMetrics, TrainConfig};
use crate::data::Sample;

/// Diagonal parameters recovered from a reduced dense system.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionResult {
    pub m_re: Vec<f64>,
    pub m_im: Vec<f64>,
    pub v: CVec,
    pub diag_cond: f64,
}

impl ExtractionResult {
    pub fn order(&self) -> usize {
        self.v.len()
    }

    pub fn to_dss(&self, variant: Variant, log_delta: f64, d: f64) -> DssParams {
        DssParams {
            variant,
            lambda_re: self.m_re.clone(),
            lambda_im: self.m_im.clone(),
            w: self.v.clone(),
            log_delta,
            d,
        }
    }
}

/// One reduced kernel.
#[derive(Clone, Debug)]
pub struct ReducedFeature {
    pub layer: usize,
    pub feature: usize,
    pub system: DenseSsm,
    pub report: ReductionReport,
}

/// Balanced truncation of every kernel in a pretrained checkpoint to order `r`.
pub fn reduce_checkpoint(ckpt: &Checkpoint, r: usize, opts: &ReduceOptions) -> Result<Vec<ReducedFeature>> {
    if ckpt.provenance.stage != Stage::Pretrain {
        return Err(Error::Config(format!("reduction expects a pretrain checkpoint, got {:?}", ckpt.provenance.stage)));
    }
    let n = ckpt.config.n;
    if r == 0 || r > n {
        return Err(Error::BadOrder { r, n });
    }
    let len = ckpt.config.l;
    let jobs: Vec<(usize, usize, &DssParams)> = ckpt
        .params
        .layers
        .iter()
        .enumerate()
        .flat_map(|(l, lp)| lp.dss.iter().enumerate().map(move |(h, p)| (l, h, p)))
        .collect();
    jobs.par_iter()
        .map(|&(layer, feature, p)| {
            let sys = materialize_ssm(p, len).map_err(|e| e.at_feature(layer, feature))?;
            let (system, report) = balance::reduce(&sys, r, opts).map_err(|e| e.at_feature(layer, feature))?;
            Ok(ReducedFeature { layer, feature, system, report })
        })
        .collect()
}

/// Diagonalizes `red` and maps `(mu, V)` onto the variant's parameters.
pub fn extract_params(red: &DenseSsm, variant: Variant, len: usize) -> Result<ExtractionResult> {
    let eig = general_eig(&red.a)?;
    let vinv = inverse(&eig.vectors)?;
    let cv = eig.vectors.vecmat(&red.c);
    let vb = vinv.matvec(&red.b);
    let delta = red.delta;
    let r = eig.values.len();
    let (mut m_re, mut m_im, mut v) = (Vec::with_capacity(r), Vec::with_capacity(r), Vec::with_capacity(r));
    for (i, &mu) in eig.values.iter().enumerate() {
        let mut vi = cv[i] * vb[i];
        match variant {
            Variant::Exp => {
                if mu.re >= 0.0 {
                    return Err(Error::PositiveRealPart { index: i, re: mu.re });
                }
                m_re.push((-mu.re).ln());
            }
            Variant::Softmax => {
                let z = mu * (len as f64 * delta);
                if z.re > 700.0 {
                    return Err(Error::Overflow(z.re));
                }
                vi *= cexpm1(z);
                m_re.push(mu.re);
            }
        }
        m_im.push(mu.im);
        v.push(vi);
    }
    Ok(ExtractionResult { m_re, m_im, v, diag_cond: eig.cond })
}

/// `max_k |K_dense[k] - K_dss[k]|` over `len` samples.
pub fn kernel_fidelity(red: &DenseSsm, dss: &DssParams, len: usize) -> Result<f64> {
    Ok(max_abs_diff(&red.impulse_kernel(len)?, &kernel(dss, len)?))
}

/// Replaces every kernel of `parent` by its extracted reduced form. All other
/// tensors are copied unchanged.
pub fn build_main_training_init(
    parent: &Checkpoint,
    reduced: &[ReducedFeature],
    extracted: &[ExtractionResult],
) -> Result<Checkpoint> {
    if reduced.len() != extracted.len() {
        return Err(Error::Shape(format!("{} reductions but {} extractions", reduced.len(), extracted.len())));
    }
    let r = extracted.first().map(ExtractionResult::order).ok_or(Error::Config("nothing to assemble".into()))?;
    let mut params = parent.params.clone();
    let mut seen = vec![vec![false; parent.config.h]; parent.config.n_layers];
    let mut records = Vec::with_capacity(reduced.len());
    for (red, ex) in reduced.iter().zip(extracted) {
        let slot = params
            .layers
            .get_mut(red.layer)
            .and_then(|lp| lp.dss.get_mut(red.feature))
            .ok_or_else(|| Error::Shape(format!("no kernel at layer {} feature {}", red.layer, red.feature)))?;
        *slot = ex.to_dss(slot.variant, slot.log_delta, slot.d);
        seen[red.layer][red.feature] = true;
        records.push(FeatureReduction {
            layer: red.layer,
            feature: red.feature,
            report: red.report.clone(),
            diag_cond: ex.diag_cond,
        });
    }
    if let Some((l, row)) = seen.iter().enumerate().find(|(_, row)| row.contains(&false)) {
        let h = row.iter().position(|s| !s).unwrap_or(0);
        return Err(Error::Config(format!("kernel at layer {l} feature {h} was not reduced")));
    }
    let config = ModelConfig { n: r, ..parent.config.clone() };
    let provenance = Provenance {
        stage: Stage::Reduced,
        init: "reduced".into(),
        parent_hash: Some(parent.content_hash()),
        rng_seed: parent.provenance.rng_seed,
        reduction: Some(records),
        notes: BTreeMap::new(),
    };
    Checkpoint::new(config, params, provenance)
}

/// Reduction, extraction and assembly in one call. Each feature's kernel
/// fidelity is stored in its report under `kernel_fidelity`.
pub fn compress(parent: &Checkpoint, r: usize, opts: &ReduceOptions) -> Result<Checkpoint> {
    let len = parent.config.l;
    let variant = parent.config.variant;
    let mut reduced = reduce_checkpoint(parent, r, opts)?;
    let extracted: Vec<ExtractionResult> = reduced
        .par_iter_mut()
        .map(|red| {
            let tag = |e: Error| e.at_feature(red.layer, red.feature);
            let ex = extract_params(&red.system, variant, len).map_err(tag)?;
            let p = &parent.params.layers[red.layer].dss[red.feature];
            let fid = kernel_fidelity(&red.system, &ex.to_dss(variant, p.log_delta, p.d), len).map_err(tag)?;
            red.report.residuals.insert("kernel_fidelity".into(), fid);
            Ok(ex)
        })
        .collect::<Result<_>>()?;
    build_main_training_init(parent, &reduced, &extracted)
}

/// Training run that records its starting and final eval accuracy.
#[derive(Clone, Debug)]
pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    pub before: f64,
    pub after: f64,
}

/// Trains `params` and wraps the result as a checkpoint. The optimizer state
/// always starts fresh.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    cfg: &ModelConfig,
    params: ModelParams,
    tc: &TrainConfig,
    train: &[Sample],
    eval: &[Sample],
    seed: u64,
    mut provenance: Provenance,
) -> Result<StageResult> {
    let before = evaluate(&params, cfg, eval)?.1;
    let out = train_loop(params, cfg, tc, train, eval, seed)?;
    let after = out.metrics.last().map_or(before, |m| m.eval_acc);
    provenance.notes.insert("before_acc".into(), format!("{before:.17e}"));
    provenance.notes.insert("after_acc".into(), format!("{after:.17e}"));
    provenance.notes.insert("train_config".into(), serde_json::to_string(tc).expect("train config serializes"));
    Ok(StageResult { checkpoint: Checkpoint::new(cfg.clone(), out.params, provenance)?, metrics: out.metrics, before, after })
}

/// Fresh model of order `n` trained from scratch.
pub fn train_from_scratch(
    cfg: &ModelConfig,
    init: LambdaInit,
    tc: &TrainConfig,
    train: &[Sample],
    eval: &[Sample],
) -> Result<StageResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(cfg, init, &mut rng)?;
    let prov = Provenance {
        stage: Stage::Pretrain,
        init: init.to_string(),
        parent_hash: None,
        rng_seed: cfg.seed,
        reduction: None,
        notes: BTreeMap::new(),
    };
    train_stage(cfg, params, tc, train, eval, shuffle_seed(cfg.seed), prov)
}

/// Continues training a reduced checkpoint.
pub fn retrain(reduced: &Checkpoint, tc: &TrainConfig, train: &[Sample], eval: &[Sample]) -> Result<StageResult> {
    if reduced.provenance.stage != Stage::Reduced {
        return Err(Error::Config(format!("retraining expects a reduced checkpoint, got {:?}", reduced.provenance.stage)));
    }
    let prov = Provenance {
        stage: Stage::Retrained,
        init: "reduced".into(),
        parent_hash: Some(reduced.content_hash()),
        rng_seed: reduced.config.seed,
        reduction: None,
        notes: BTreeMap::new(),
    };
    let seed = shuffle_seed(reduced.config.seed ^ 0x5eed_0002);
    train_stage(&reduced.config, reduced.params.clone(), tc, train, eval, seed, prov)
}

fn shuffle_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub r: usize,
    #[serde(default)]
    pub stabilize: Stabilize,
    #[serde(default)]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub retrain: TrainConfig,
    #[serde(default)]
    pub baseline: TrainConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for tc in [&self.pretrain, &self.retrain, &self.baseline] {
            tc.validate()?;
        }
        if self.r == 0 || self.r > self.model.n {
            return Err(Error::BadOrder { r: self.r, n: self.model.n });
        }
        Ok(())
    }

    pub fn reduce_options(&self) -> ReduceOptions {
        ReduceOptions { stabilize: self.stabilize, ..ReduceOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub n: usize,
    pub before: f64,
    pub after: f64,
}

/// Eval accuracy of each model at initialization and after training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn push(&mut self, model: &str, n: usize, before: f64, after: f64) {
        self.rows.push(ComparisonRow { model: model.into(), n, before, after });
    }

    pub fn get(&self, model: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,n,before,after\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6},{:.6}\n", r.model, r.n, r.before, r.after));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        s
    }
}

pub struct PipelineOutcome {
    pub pretrain: StageResult,
    pub reduced: Checkpoint,
    pub retrained: StageResult,
    pub hippo: StageResult,
    pub random: StageResult,
    pub table: ComparisonTable,
}

/// All four stages plus Skew-HiPPO and random baselines at order `r`.
pub fn run_pipeline(pc: &PipelineConfig, train: &[Sample], eval: &[Sample]) -> Result<PipelineOutcome> {
    pc.validate()?;
    let pretrain = train_from_scratch(&pc.model, LambdaInit::Hippo, &pc.pretrain, train, eval)?;
    log::info!("pretrain done: acc {:.4}", pretrain.after);
    let reduced = compress(&pretrain.checkpoint, pc.r, &pc.reduce_options())?;
    let retrained = retrain(&reduced, &pc.retrain, train, eval)?;
    log::info!("retrain done: acc {:.4}", retrained.after);
    let small = ModelConfig { n: pc.r, ..pc.model.clone() };
    let hippo = train_from_scratch(&ModelConfig { seed: small.seed ^ 0x5eed_0003, ..small.clone() }, LambdaInit::Hippo, &pc.baseline, train, eval)?;
    let random = train_from_scratch(&ModelConfig { seed: small.seed ^ 0x5eed_0004, ..small }, LambdaInit::Random, &pc.baseline, train, eval)?;
    log::info!("baselines done: hippo {:.4} random {:.4}", hippo.after, random.after);

    let mut table = ComparisonTable::default();
    table.push("pretrain", pc.model.n, pretrain.before, pretrain.after);
    table.push("proposed", pc.r, retrained.before, retrained.after);
    table.push("hippo", pc.r, hippo.before, hippo.after);
    table.push("random", pc.r, random.before, random.after);
    Ok(PipelineOutcome { pretrain, reduced, retrained, hippo, random, table })
}
