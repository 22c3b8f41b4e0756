//! Command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::balance::{hankel_csv, hankel_values, stabilize, ReduceOptions, Stabilize};
use crate::data::{gen_adding_problem, gen_marked_majority, load_cache, read_text_csv, Dataset};
use crate::dss::{kernel, kernel_csv, materialize_ssm};
use crate::error::{Error, Result};
use crate::hippo::{eigs_csv, skew_hippo_eigs};
use crate::network::{sha256_hex, Checkpoint, LambdaInit, ModelConfig};
use crate::pipeline::{compress, retrain, run_pipeline, train_from_scratch, ComparisonTable, PipelineConfig, StageResult};
use crate::selftest;
use crate::ssm::{gramians_diagonal, lyapunov_residual_p, lyapunov_residual_q};
use crate::training::{evaluate, metrics_csv, TrainConfig};

pub const GRAMIAN_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[default]
    MarkedMajority,
    Adding,
    Csv,
    Cache,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub kind: DataKind,
    /// Sample count for the synthetic generators.
    pub n: usize,
    /// Input file for `csv` and `cache`.
    pub path: Option<PathBuf>,
    pub split_frac: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec { kind: DataKind::MarkedMajority, n: 8000, path: None, split_frac: 0.8 }
    }
}

/// Everything a run needs. Loaded as defaults, then the `--config` file,
/// then `--set` overrides, then `--seed` and `--out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub retrain: TrainConfig,
    pub baseline: TrainConfig,
    pub data: DataSpec,
    pub r: usize,
    pub stabilize: Stabilize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            retrain: TrainConfig::default(),
            baseline: TrainConfig::default(),
            data: DataSpec::default(),
            r: 4,
            stabilize: Stabilize::Error,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()?;
        if !(self.data.split_frac > 0.0 && self.data.split_frac < 1.0) {
            return Err(Error::Config(format!("data.split_frac must lie in (0, 1), got {}", self.data.split_frac)));
        }
        if matches!(self.data.kind, DataKind::Csv | DataKind::Cache) && self.data.path.is_none() {
            return Err(Error::Config("data.path is required for csv and cache data".into()));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            model: self.model.clone(),
            r: self.r,
            stabilize: self.stabilize,
            pretrain: self.pretrain.clone(),
            retrain: self.retrain.clone(),
            baseline: self.baseline.clone(),
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Overwrites `base` with every field present in `patch`. Keys unknown to
/// `base` are kept so that deserialization can reject them.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`; the value is read as JSON and falls back to a string.
pub fn apply_set(cfg: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("`{assignment}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = cfg;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))?;
    }
    *node = value;
    Ok(())
}

pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut v = serde_json::to_value(RunConfig::default()).expect("config serializes");
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        merge(&mut v, patch);
    }
    for s in sets {
        apply_set(&mut v, s)?;
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

/// Train and eval splits described by `spec`, checked against the model.
pub fn load_data(spec: &DataSpec, model: &ModelConfig) -> Result<(Dataset, Dataset)> {
    let seed = model.seed;
    let ds = match spec.kind {
        DataKind::MarkedMajority => gen_marked_majority(spec.n, model.l, seed)?,
        DataKind::Adding => gen_adding_problem(spec.n, model.l, seed)?,
        DataKind::Csv => read_text_csv(spec.path.as_deref().unwrap_or(Path::new("")), model.l)?,
        DataKind::Cache => load_cache(spec.path.as_deref().unwrap_or(Path::new("")))?,
    };
    if ds.len != model.l {
        return Err(Error::Config(format!("dataset length {} differs from model.l = {}", ds.len, model.l)));
    }
    if ds.n_classes > model.n_classes {
        return Err(Error::Config(format!("dataset has {} classes, model.n_classes = {}", ds.n_classes, model.n_classes)));
    }
    if let Some(&t) = ds.samples.iter().flat_map(|s| &s.tokens).find(|&&t| t as usize >= model.vocab) {
        return Err(Error::TokenOutOfRange { token: t as usize, vocab: model.vocab });
    }
    ds.split(seed.wrapping_add(1), spec.split_frac)
}

#[derive(Parser, Debug)]
#[command(name = "balred-ssm", version, about = "Diagonal state-space models with balanced-truncation compression")]
pub struct Cli {
    /// JSON run configuration (partial files are merged into the defaults).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration entry, e.g. `--set model.h=16`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Seed for model initialization, data generation and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "BALRED_SSM_THREADS", default_value_t = 1)]
    pub threads: usize,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct FeatureArgs {
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub h: usize,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a full-order model from scratch.
    Pretrain {
        #[arg(long, default_value = "hippo")]
        init: LambdaInit,
    },
    /// Reduce every kernel of a pretrained checkpoint to order r.
    Reduce {
        checkpoint: PathBuf,
        #[arg(long)]
        r: Option<usize>,
        #[arg(long)]
        stabilize: Option<Stabilize>,
    },
    /// Continue training a reduced checkpoint.
    Retrain { checkpoint: PathBuf },
    /// Train a baseline of order n from scratch.
    Baseline {
        #[arg(long)]
        init: LambdaInit,
        #[arg(long)]
        n: usize,
    },
    /// Run pretrain, reduce, retrain and both baselines.
    Pipeline,
    /// Loss and accuracy on the eval split.
    Eval { checkpoint: PathBuf },
    /// Accuracy table over several checkpoints.
    Compare {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Convolution kernel of one feature as `k,re,im` CSV.
    KernelDump(FeatureArgs),
    /// Hankel singular values of one feature as `index,sigma` CSV.
    HankelDump {
        #[command(flatten)]
        feature: FeatureArgs,
        #[arg(long)]
        stabilize: Option<Stabilize>,
    },
    /// Largest Lyapunov residual over all features.
    GramianCheck { checkpoint: PathBuf },
    /// Skew-HiPPO eigenvalues as `index,re,im` CSV.
    HippoDump {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Property checks of every module.
    Selftest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Reduce { .. } => "reduce",
            Command::Retrain { .. } => "retrain",
            Command::Baseline { .. } => "baseline",
            Command::Pipeline => "pipeline",
            Command::Eval { .. } => "eval",
            Command::Compare { .. } => "compare",
            Command::KernelDump(_) => "kernel-dump",
            Command::HankelDump { .. } => "hankel-dump",
            Command::GramianCheck { .. } => "gramian-check",
            Command::HippoDump { .. } => "hippo-dump",
            Command::Selftest => "selftest",
        }
    }
}

/// Exit status of a command that ran to completion.
enum Status {
    Ok,
    Failed,
}

/// Files read and written by one invocation.
#[derive(Default)]
struct Manifest {
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Manifest {
    fn read(&mut self, path: &Path) -> Result<String> {
        let text = std::fs::read_to_string(path)?;
        self.inputs.insert(path.display().to_string(), sha256_hex(text.as_bytes()));
        Ok(text)
    }

    fn checkpoint(&mut self, path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_json(&self.read(path)?)
    }

    fn write(&mut self, path: &Path, text: &str) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, text)?;
        self.outputs.insert(path.display().to_string(), sha256_hex(text.as_bytes()));
        Ok(())
    }

    /// To `path` if given, else stdout.
    fn emit(&mut self, path: Option<&Path>, text: &str) -> Result<()> {
        match path {
            Some(p) => self.write(p, text),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    threads: usize,
    config_hash: String,
    config: &'a RunConfig,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

/// Parses `argv`, runs the command and returns the process exit code:
/// 0 on success, 1 for usage or validation errors, 2 for numerical failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(Status::Ok) => 0,
        Ok(Status::Failed) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = load_config(cli.config.as_deref(), &cli.sets)?;
    if let Some(s) = cli.seed {
        cfg.model.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Status> {
    let mut cfg = resolve_config(cli)?;
    let mut man = Manifest::default();
    let out = cfg.out_dir.clone();
    let status = match &cli.command {
        Command::Pretrain { init } => {
            let (train, eval) = load_data(&cfg.data, &cfg.model)?;
            let res = train_from_scratch(&cfg.model, *init, &cfg.pretrain, &train.samples, &eval.samples)?;
            save_stage(&mut man, &out, "pretrain", &res)?;
            Status::Ok
        }
        Command::Reduce { checkpoint, r, stabilize } => {
            let parent = man.checkpoint(checkpoint)?;
            cfg.r = r.unwrap_or(cfg.r);
            cfg.stabilize = stabilize.unwrap_or(cfg.stabilize);
            let opts = ReduceOptions { stabilize: cfg.stabilize, ..ReduceOptions::default() };
            let red = compress(&parent, cfg.r, &opts)?;
            let reports = serde_json::to_string_pretty(&red.provenance.reduction).expect("reports serialize");
            man.write(&out.join("reduced.json"), &red.to_json())?;
            man.write(&out.join("reduction.json"), &(reports + "\n"))?;
            Status::Ok
        }
        Command::Retrain { checkpoint } => {
            let reduced = man.checkpoint(checkpoint)?;
            let model = ModelConfig { seed: cfg.model.seed, ..reduced.config.clone() };
            let (train, eval) = load_data(&cfg.data, &model)?;
            let res = retrain(&reduced, &cfg.retrain, &train.samples, &eval.samples)?;
            save_stage(&mut man, &out, "retrained", &res)?;
            Status::Ok
        }
        Command::Baseline { init, n } => {
            let model = ModelConfig { n: *n, ..cfg.model.clone() };
            let (train, eval) = load_data(&cfg.data, &model)?;
            let res = train_from_scratch(&model, *init, &cfg.baseline, &train.samples, &eval.samples)?;
            save_stage(&mut man, &out, &format!("baseline-{init}-{n}"), &res)?;
            Status::Ok
        }
        Command::Pipeline => {
            let (train, eval) = load_data(&cfg.data, &cfg.model)?;
            let res = run_pipeline(&cfg.pipeline(), &train.samples, &eval.samples)?;
            save_stage(&mut man, &out, "pretrain", &res.pretrain)?;
            man.write(&out.join("reduced.json"), &res.reduced.to_json())?;
            save_stage(&mut man, &out, "retrained", &res.retrained)?;
            save_stage(&mut man, &out, &format!("baseline-hippo-{}", cfg.r), &res.hippo)?;
            save_stage(&mut man, &out, &format!("baseline-random-{}", cfg.r), &res.random)?;
            write_table(&mut man, &out, &res.table)?;
            print!("{}", res.table.to_csv());
            Status::Ok
        }
        Command::Eval { checkpoint } => {
            let ck = man.checkpoint(checkpoint)?;
            let (_, eval) = load_data(&cfg.data, &ModelConfig { seed: cfg.model.seed, ..ck.config.clone() })?;
            let (loss, acc) = evaluate(&ck.params, &ck.config, &eval.samples)?;
            println!("{}", serde_json::json!({ "loss": loss, "accuracy": acc, "samples": eval.len() }));
            Status::Ok
        }
        Command::Compare { checkpoints } => {
            let mut table = ComparisonTable::default();
            for path in checkpoints {
                let ck = man.checkpoint(path)?;
                let (_, eval) = load_data(&cfg.data, &ModelConfig { seed: cfg.model.seed, ..ck.config.clone() })?;
                let after = evaluate(&ck.params, &ck.config, &eval.samples)?.1;
                let before = ck.provenance.notes.get("before_acc").and_then(|s| s.parse().ok()).unwrap_or(f64::NAN);
                let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into());
                table.push(&name, ck.config.n, before, after);
            }
            write_table(&mut man, &out, &table)?;
            print!("{}", table.to_csv());
            Status::Ok
        }
        Command::KernelDump(f) => {
            let ck = man.checkpoint(&f.checkpoint)?;
            let k = kernel(feature(&ck, f.layer, f.h)?, ck.config.l)?;
            man.emit(f.output.as_deref(), &kernel_csv(&k))?;
            Status::Ok
        }
        Command::HankelDump { feature: f, stabilize: policy } => {
            let ck = man.checkpoint(&f.checkpoint)?;
            let sys = materialize_ssm(feature(&ck, f.layer, f.h)?, ck.config.l)?;
            let (sys, _) = stabilize(&sys, policy.unwrap_or(cfg.stabilize))?;
            let g = gramians_diagonal(&sys)?;
            man.emit(f.output.as_deref(), &hankel_csv(&hankel_values(&g.p, &g.q)?))?;
            Status::Ok
        }
        Command::GramianCheck { checkpoint } => {
            let ck = man.checkpoint(checkpoint)?;
            let mut worst: f64 = 0.0;
            for (l, lp) in ck.params.layers.iter().enumerate() {
                for (h, p) in lp.dss.iter().enumerate() {
                    let tag = |e: Error| e.at_feature(l, h);
                    let sys = materialize_ssm(p, ck.config.l).map_err(tag)?;
                    let g = gramians_diagonal(&sys).map_err(tag)?;
                    let a = sys.to_dense().a;
                    worst = worst.max(lyapunov_residual_p(&a, &sys.b, &g.p)).max(lyapunov_residual_q(&a, &sys.c, &g.q));
                }
            }
            let ok = worst <= GRAMIAN_TOL;
            println!("max lyapunov residual {worst:.3e} ({})", if ok { "ok" } else { "exceeds 1e-10" });
            if ok {
                Status::Ok
            } else {
                Status::Failed
            }
        }
        Command::HippoDump { n, output } => {
            man.emit(output.as_deref(), &eigs_csv(&skew_hippo_eigs(*n)?))?;
            Status::Ok
        }
        Command::Selftest => {
            let rows = selftest::run_all(cfg.model.seed);
            print!("{}", selftest::format_table(&rows));
            if rows.iter().all(|r| r.passed) {
                Status::Ok
            } else {
                Status::Failed
            }
        }
    };
    let record = RunRecord {
        command: cli.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.model.seed,
        threads: cli.threads,
        config_hash: cfg.hash(),
        config: &cfg,
        inputs: &man.inputs,
        outputs: &man.outputs,
    };
    let text = serde_json::to_string_pretty(&record).expect("manifest serializes") + "\n";
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("run.json"), text)?;
    Ok(status)
}

fn feature(ck: &Checkpoint, layer: usize, h: usize) -> Result<&crate::dss::DssParams> {
    ck.params
        .layers
        .get(layer)
        .and_then(|lp| lp.dss.get(h))
        .ok_or_else(|| Error::Config(format!("no feature h={h} in layer {layer}")))
}

fn save_stage(man: &mut Manifest, out: &Path, name: &str, res: &StageResult) -> Result<()> {
    man.write(&out.join(format!("{name}.json")), &res.checkpoint.to_json())?;
    man.write(&out.join(format!("{name}_metrics.csv")), &metrics_csv(&res.metrics))
}

fn write_table(man: &mut Manifest, out: &Path, table: &ComparisonTable) -> Result<()> {
    man.write(&out.join("compare.csv"), &table.to_csv())?;
    man.write(&out.join("compare.json"), &table.to_json())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_overrides_nested_keys() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        apply_set(&mut v, "model.h=16").unwrap();
        apply_set(&mut v, "data.kind=adding").unwrap();
        apply_set(&mut v, "pretrain.clip=null").unwrap();
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.model.h, 16);
        assert_eq!(cfg.data.kind, DataKind::Adding);
        assert_eq!(cfg.pretrain.clip, None);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        assert!(matches!(apply_set(&mut v, "model.width=3"), Err(Error::Config(_))));
        assert!(matches!(apply_set(&mut v, "nonsense"), Err(Error::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model": {"h": 4, "depth": 2}}"#).unwrap();
        assert!(matches!(load_config(Some(&p), &[]), Err(Error::Config(_))));
        std::fs::write(&p, r#"{"model": {"h": 4}, "r": 2}"#).unwrap();
        let cfg = load_config(Some(&p), &[]).unwrap();
        assert_eq!((cfg.model.h, cfg.r, cfg.model.n), (4, 2, 16));
    }

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
        let bad = RunConfig { r: 17, ..RunConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn data_checked_against_model() {
        let spec = DataSpec { n: 20, ..DataSpec::default() };
        let model = ModelConfig { l: 16, ..ModelConfig::default() };
        let (train, eval) = load_data(&spec, &model).unwrap();
        assert_eq!(train.len() + eval.len(), 20);
        let small = ModelConfig { vocab: 8, ..model.clone() };
        assert!(matches!(load_data(&spec, &small), Err(Error::TokenOutOfRange { .. })));
        let adding = DataSpec { kind: DataKind::Adding, ..spec };
        assert!(matches!(load_data(&adding, &model), Err(Error::Config(_))));
    }
}
