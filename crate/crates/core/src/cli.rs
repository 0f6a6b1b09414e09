//! Command-line driver: `mtem gen-data|train|eval|gradcheck|bench`.
//!
//! Every run is described by a flat TOML config. Each key can also be given
//! as a flag of the same name (`t_max` becomes `--t-max`); flags win.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    evaluate, gen_synthetic_shift, load_jsonl, load_jsonl_with_labels, write_jsonl, Metrics,
    ShiftData, ShiftSpec,
};
use crate::error::{MtemError, Result};
use crate::meta::{
    hypergrad_psi_taylor, mtem_train, self_train_baseline, source_only_train, streams,
    EntropyIndexTable, LearningRateSchedules, MtemConfig, PsiStats, SelfTrainMode,
    SelfTrainOptions, TargetItem, TrainResult,
};
use crate::model::{
    grad_theta_supervised_batch, grad_theta_tsallis_batch, init_params, load_checkpoint,
    save_checkpoint, LabeledExample, ParameterVector, SparseFeatures, TsallisExample,
};
use crate::oracle::{
    compare, compare_maps, exact_hypergrad_psi_fd, fd_grad_theta, fd_scalar, GradComparison,
    H_SCALAR, H_THETA, REL_ERROR_FLOOR,
};
use crate::sampler::TemperatureSchedule;
use crate::tsallis::{
    tsallis_loss, tsallis_loss_from_prob, tsallis_loss_grad_from_prob, tsallis_loss_grad_psi,
    EntropyIndex, PredictionProbs,
};

pub const SOURCE_FILE: &str = "source.jsonl";
pub const TARGET_UNLABELED_FILE: &str = "target_unlabeled.jsonl";
pub const TARGET_EVAL_FILE: &str = "target_eval.jsonl";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const BENCH_REPORT_FILE: &str = "bench_report.json";
pub const BENCH_TABLE_FILE: &str = "bench_table.txt";

/// Name of the closed-form entropy-index gradient check in the gradcheck table.
pub const PSI_GRAD_CHECK: &str = "entropy-index gradient (closed form vs fd)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SourceOnly,
    SelfTrainGibbs,
    SelfTrainTsallis,
    /// MTEM with the outer loop switched off (ψ fixed at its initial value).
    MtemNoMeta,
    Mtem,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::SourceOnly => "source-only",
            Method::SelfTrainGibbs => "self-train-gibbs",
            Method::SelfTrainTsallis => "self-train-tsallis",
            Method::MtemNoMeta => "mtem-no-meta",
            Method::Mtem => "mtem",
        }
    }

    fn has_psi_table(self) -> bool {
        matches!(self, Method::Mtem | Method::MtemNoMeta)
    }
}

#[derive(Debug, Parser)]
#[command(name = "mtem", version, about = "Meta-learned Tsallis entropy minimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic domain-shift corpus as JSON lines.
    GenData(Overrides),
    /// Train one method and evaluate it on the target evaluation split.
    Train(Overrides),
    /// Evaluate a checkpoint on a labeled dataset.
    Eval(Overrides),
    /// Check every closed-form and approximated gradient against oracles.
    Gradcheck(Overrides),
    /// Run every (method, seed) pair and write a comparison report.
    Bench(Overrides),
}

/// Config file path plus one flag per config key.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Overrides {
    /// TOML config file.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory holding source / target_unlabeled / target_eval JSON lines.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,

    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n_shared_features: Option<usize>,
    #[arg(long)]
    pub n_domain_features: Option<usize>,
    #[arg(long)]
    pub shift_strength: Option<f64>,
    #[arg(long)]
    pub label_noise: Option<f64>,
    #[arg(long)]
    pub n_source: Option<usize>,
    #[arg(long)]
    pub n_target: Option<usize>,
    #[arg(long)]
    pub tokens_per_instance: Option<usize>,
    #[arg(long)]
    pub signal_rate: Option<f64>,

    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub k2: Option<f64>,
    #[arg(long)]
    pub beta_max: Option<f64>,
    #[arg(long)]
    pub psi_init: Option<f64>,
    #[arg(long)]
    pub psi_min_gap: Option<f64>,
    #[arg(long)]
    pub psi_max: Option<f64>,
    #[arg(long)]
    pub kappa_max: Option<f64>,
    #[arg(long)]
    pub kappa_min: Option<f64>,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub batch_size_target: Option<usize>,
    #[arg(long)]
    pub batch_size_valid: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub eps_rule_scale: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub source_weight: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,

    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,

    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Number of random problems per gradcheck family.
    #[arg(long)]
    pub problems: Option<usize>,

    /// Perturbs the closed-form entropy-index gradient (negative control).
    #[arg(long, hide = true)]
    #[serde(skip)]
    pub corrupt_psi_grad: bool,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub method: Method,
    pub out: PathBuf,
    pub data_dir: Option<PathBuf>,

    pub d: usize,
    pub k: usize,
    pub n_shared_features: usize,
    pub n_domain_features: usize,
    pub shift_strength: f64,
    pub label_noise: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub tokens_per_instance: usize,
    pub signal_rate: f64,

    pub k1: f64,
    pub k2: f64,
    pub beta_max: f64,
    pub psi_init: f64,
    pub psi_min_gap: f64,
    pub psi_max: f64,
    pub kappa_max: f64,
    pub kappa_min: f64,
    pub s: f64,
    pub batch_size_target: usize,
    pub batch_size_valid: usize,
    pub t_max: usize,
    pub eps_rule_scale: f64,
    /// Source-only steps that produce the starting point of every method.
    pub warmup_steps: usize,
    /// Weight of the source term in MTEM's `θ` updates.
    pub source_weight: f64,
    /// Fixed entropy index of `self-train-tsallis`.
    pub alpha: Option<f64>,
    /// Target weight of the joint self-training baselines.
    pub lambda: f64,

    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,

    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub problems: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = ShiftSpec::default();
        let m = MtemConfig::default();
        RunConfig {
            seed: None,
            method: Method::Mtem,
            out: PathBuf::from("mtem-out"),
            data_dir: None,
            d: spec.d,
            k: spec.k,
            n_shared_features: spec.n_shared_features,
            n_domain_features: spec.n_domain_features,
            shift_strength: spec.shift_strength,
            label_noise: spec.label_noise,
            n_source: spec.n_source,
            n_target: spec.n_target,
            tokens_per_instance: spec.tokens_per_instance,
            signal_rate: spec.signal_rate,
            k1: m.schedules.k1,
            k2: m.schedules.k2,
            beta_max: m.schedules.beta_max,
            psi_init: m.psi_init,
            psi_min_gap: m.psi_min_gap,
            psi_max: m.psi_max,
            kappa_max: m.temp.kappa_max,
            kappa_min: m.temp.kappa_min,
            s: m.temp.s,
            batch_size_target: m.batch_size_target,
            batch_size_valid: m.batch_size_valid,
            t_max: m.t_max,
            eps_rule_scale: m.eps_rule_scale,
            warmup_steps: 500,
            source_weight: m.source_weight,
            alpha: Some(2.0),
            lambda: 1.0,
            methods: vec![
                Method::SourceOnly,
                Method::SelfTrainGibbs,
                Method::SelfTrainTsallis,
                Method::MtemNoMeta,
                Method::Mtem,
            ],
            seeds: vec![0, 1, 2, 3, 4],
            checkpoint: None,
            dataset: None,
            problems: 20,
        }
    }
}

impl RunConfig {
    /// Reads `overrides.config` (if any) and applies the flags on top.
    pub fn resolve(overrides: &Overrides) -> Result<Self> {
        let mut table = match &overrides.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| MtemError::io(path, e))?;
                text.parse::<toml::Table>().map_err(|e| MtemError::Parse {
                    path: path.clone(),
                    line: 0,
                    message: e.to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        let flags = toml::Table::try_from(overrides)
            .map_err(|e| MtemError::config("flags", e.to_string()))?;
        table.extend(flags);
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| MtemError::config("config", e.message().to_string()))?;
        Ok(config)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| MtemError::config("seed", "is required (config key or --seed)"))
    }

    pub fn shift_spec(&self) -> ShiftSpec {
        ShiftSpec {
            d: self.d,
            k: self.k,
            n_shared_features: self.n_shared_features,
            n_domain_features: self.n_domain_features,
            shift_strength: self.shift_strength,
            label_noise: self.label_noise,
            n_source: self.n_source,
            n_target: self.n_target,
            tokens_per_instance: self.tokens_per_instance,
            signal_rate: self.signal_rate,
        }
    }

    pub fn mtem_config(&self, seed: u64) -> MtemConfig {
        MtemConfig {
            schedules: LearningRateSchedules {
                k1: self.k1,
                k2: self.k2,
                beta_max: self.beta_max,
            },
            psi_init: self.psi_init,
            psi_min_gap: self.psi_min_gap,
            psi_max: self.psi_max,
            temp: TemperatureSchedule {
                kappa_max: self.kappa_max,
                kappa_min: self.kappa_min,
                s: self.s,
                t_max: self.t_max.max(1),
            },
            batch_size_target: self.batch_size_target,
            batch_size_valid: self.batch_size_valid,
            t_max: self.t_max,
            eps_rule_scale: self.eps_rule_scale,
            seed,
            update_psi: true,
            source_weight: self.source_weight,
        }
    }

    fn validate_method(&self, method: Method) -> Result<()> {
        if method == Method::SelfTrainTsallis {
            let alpha = self
                .alpha
                .ok_or_else(|| MtemError::config("alpha", "required for self-train-tsallis"))?;
            EntropyIndex::new(alpha).map_err(|e| MtemError::config("alpha", e.to_string()))?;
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(MtemError::config("lambda", "must be non-negative"));
        }
        let mut check = self.mtem_config(0);
        check.t_max = check.t_max.max(1);
        check.validate()
    }
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_std: Option<f64>,
}

impl MetricsReport {
    fn new(metrics: &Metrics, psi: Option<PsiStats>) -> Self {
        MetricsReport {
            accuracy: metrics.accuracy,
            macro_f1: metrics.macro_f1,
            per_class_f1: metrics.per_class_f1.clone(),
            psi_mean: psi.map(|s| s.mean),
            psi_std: psi.map(|s| s.std),
        }
    }
}

/// Output of one trained (method, seed) pair.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub result: TrainResult,
    pub metrics: Metrics,
    pub psi: Option<PsiStats>,
}

impl RunOutcome {
    pub fn report(&self) -> MetricsReport {
        MetricsReport::new(&self.metrics, self.psi)
    }
}

/// Generated corpus, or the three JSON-lines files under `data_dir`.
pub fn load_data(config: &RunConfig, seed: u64) -> Result<ShiftData> {
    match &config.data_dir {
        Some(dir) => {
            let source = load_jsonl(&dir.join(SOURCE_FILE), config.d, Some(config.k))?;
            let names = source.label_names().to_vec();
            let target_unlabeled =
                load_jsonl_with_labels(&dir.join(TARGET_UNLABELED_FILE), config.d, &names)?;
            let target_eval = load_jsonl_with_labels(&dir.join(TARGET_EVAL_FILE), config.d, &names)?;
            Ok(ShiftData {
                source,
                target_unlabeled,
                target_eval,
            })
        }
        None => gen_synthetic_shift(&config.shift_spec(), seed.wrapping_add(streams::DATA)),
    }
}

/// Warm start on the source, then the method's own training loop.
pub fn run_method(
    config: &RunConfig,
    method: Method,
    seed: u64,
    data: &ShiftData,
) -> Result<RunOutcome> {
    config.validate_method(method)?;
    let mcfg = config.mtem_config(seed);
    let source = &data.source;
    let params0 = init_params(source.num_classes(), source.dim(), seed.wrapping_add(streams::INIT))?;

    let warm = || -> Result<ParameterVector> {
        if config.warmup_steps == 0 {
            return Ok(params0.clone());
        }
        let warm_cfg = MtemConfig {
            t_max: config.warmup_steps,
            ..mcfg.clone()
        };
        Ok(source_only_train(&warm_cfg, source, &params0)?.params)
    };

    let target = &data.target_unlabeled;
    let result = match method {
        Method::SourceOnly => {
            let cfg = MtemConfig {
                t_max: config.warmup_steps + config.t_max,
                ..mcfg
            };
            source_only_train(&cfg, source, &params0)?
        }
        Method::Mtem => mtem_train(&mcfg, source, target, &warm()?)?,
        Method::MtemNoMeta => {
            let cfg = MtemConfig {
                update_psi: false,
                ..mcfg
            };
            mtem_train(&cfg, source, target, &warm()?)?
        }
        Method::SelfTrainGibbs | Method::SelfTrainTsallis => {
            let mode = if method == Method::SelfTrainGibbs {
                SelfTrainMode::GibbsGreedy
            } else {
                SelfTrainMode::FixedTsallis(EntropyIndex::new(config.alpha.unwrap_or_default())?)
            };
            let options = SelfTrainOptions {
                mode,
                lambda: config.lambda,
            };
            self_train_baseline(&mcfg, source, target, &warm()?, options)?
        }
    };
    let metrics = evaluate(&result.params, &data.target_eval)?;
    let psi = if method.has_psi_table() {
        result.psi.as_ref().and_then(EntropyIndexTable::stats)
    } else {
        None
    };
    Ok(RunOutcome {
        result,
        metrics,
        psi,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MtemError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| MtemError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialise");
    s.push('\n');
    s
}

fn write_run_outputs(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join(TRACE_FILE), outcome.result.trace_csv())?;
    write_file(&dir.join(METRICS_FILE), to_json(&outcome.report()))
}

pub fn cmd_gen_data(config: &RunConfig) -> Result<()> {
    let seed = config.seed()?;
    let spec = config.shift_spec();
    spec.validate()?;
    let data = gen_synthetic_shift(&spec, seed.wrapping_add(streams::DATA))?;
    create_dir(&config.out)?;
    for (name, ds) in [
        (SOURCE_FILE, &data.source),
        (TARGET_UNLABELED_FILE, &data.target_unlabeled),
        (TARGET_EVAL_FILE, &data.target_eval),
    ] {
        write_jsonl(ds, &config.out.join(name))?;
        println!("{name}: {} instances", ds.len());
    }
    Ok(())
}

pub fn cmd_train(config: &RunConfig) -> Result<RunOutcome> {
    let seed = config.seed()?;
    let data = load_data(config, seed)?;
    let outcome = run_method(config, config.method, seed, &data)?;
    write_run_outputs(&config.out, &outcome)?;
    save_checkpoint(&outcome.result.params, &config.out.join(CHECKPOINT_FILE))?;
    println!(
        "{} seed {seed}: accuracy {:.4} macro_f1 {:.4}",
        config.method.name(),
        outcome.metrics.accuracy,
        outcome.metrics.macro_f1
    );
    Ok(outcome)
}

pub fn cmd_eval(config: &RunConfig) -> Result<MetricsReport> {
    let ckpt = config
        .checkpoint
        .as_ref()
        .ok_or_else(|| MtemError::config("checkpoint", "required for eval"))?;
    let dataset = config
        .dataset
        .as_ref()
        .ok_or_else(|| MtemError::config("dataset", "required for eval"))?;
    let params = load_checkpoint(ckpt)?;
    if params.dim() != config.d {
        return Err(MtemError::DimensionMismatch {
            what: "feature dimension d (checkpoint vs data)",
            expected: params.dim(),
            found: config.d,
        });
    }
    let data = load_jsonl(dataset, config.d, Some(config.k))?;
    let metrics = evaluate(&params, &data)?;
    let report = MetricsReport::new(&metrics, None);
    print!("{}", to_json(&report));
    Ok(report)
}

/// One row of the gradcheck table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: &'static str,
    pub cases: usize,
    pub comparison: GradComparison,
    pub passed: bool,
    pub tolerance: &'static str,
}

struct Aggregate {
    cases: usize,
    min_cosine: f64,
    max_rel: f64,
    max_abs: f64,
    sign_ok: bool,
}

impl Aggregate {
    fn new() -> Self {
        Aggregate {
            cases: 0,
            min_cosine: 1.0,
            max_rel: 0.0,
            max_abs: 0.0,
            sign_ok: true,
        }
    }

    fn add(&mut self, c: GradComparison) {
        self.cases += 1;
        self.min_cosine = self.min_cosine.min(c.cosine_similarity);
        self.max_rel = self.max_rel.max(c.max_relative_error);
        self.max_abs = self.max_abs.max(c.max_absolute_error);
    }

    fn comparison(&self) -> GradComparison {
        GradComparison {
            cosine_similarity: self.min_cosine,
            max_relative_error: self.max_rel,
            max_absolute_error: self.max_abs,
        }
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize, min_entry: f64) -> PredictionProbs {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let free = 1.0 - k as f64 * min_entry;
    PredictionProbs::new(raw.iter().map(|v| min_entry + free * v / total).collect())
        .expect("construction lies on the simplex")
}

fn random_params(rng: &mut ChaCha8Rng, k: usize, d: usize, scale: f64) -> ParameterVector {
    let data = (0..k * d + k).map(|_| rng.random_range(-scale..scale)).collect();
    ParameterVector::from_flat(k, d, data).expect("finite by construction")
}

fn random_features(rng: &mut ChaCha8Rng, d: usize) -> SparseFeatures {
    let mut entries = Vec::new();
    for j in 0..d as u32 {
        if rng.random_bool(0.7) {
            entries.push((j, rng.random_range(-1.0..1.0)));
        }
    }
    SparseFeatures::new(d, entries).expect("sorted by construction")
}

/// Runs every gradient check; `corrupt_psi_grad` scales the closed-form
/// entropy-index gradient by 1.001 as a negative control.
pub fn gradcheck_suite(seed: u64, problems: usize, corrupt_psi_grad: bool) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();

    // dℓ/dp_z against differences of the loss in p_z.
    let mut closed = Vec::new();
    let mut fd = Vec::new();
    for _ in 0..problems * 50 {
        let pz = rng.random_range(0.05..0.95);
        let psi = EntropyIndex::new(rng.random_range(1.1..4.0))?;
        closed.push(tsallis_loss_grad_from_prob(pz, psi));
        fd.push(fd_scalar(|q| Ok(tsallis_loss_from_prob(q, psi)), pz, H_SCALAR)?);
    }
    let c = compare(&closed, &fd)?;
    rows.push(CheckRow {
        name: "loss gradient in p_z (closed form vs fd)",
        cases: closed.len(),
        comparison: c,
        passed: c.max_relative_error < 1e-5,
        tolerance: "max rel < 1e-5",
    });

    // dℓ/dψ against differences in ψ.
    let mut closed = Vec::new();
    let mut fd = Vec::new();
    for _ in 0..problems * 50 {
        let k = rng.random_range(2..=5);
        let p = random_simplex(&mut rng, k, 0.0);
        let y = rng.random_range(0..k);
        let psi = rng.random_range(1.1..8.0);
        let mut g = tsallis_loss_grad_psi(&p, y, EntropyIndex::new(psi)?)?;
        if corrupt_psi_grad {
            g *= 1.001;
        }
        closed.push(g);
        fd.push(fd_scalar(|a| tsallis_loss(&p, y, EntropyIndex::new(a)?), psi, H_SCALAR)?);
    }
    let c = compare(&closed, &fd)?;
    rows.push(CheckRow {
        name: PSI_GRAD_CHECK,
        cases: closed.len(),
        comparison: c,
        passed: c.max_relative_error < 1e-5,
        tolerance: "max rel < 1e-5",
    });

    // θ gradients of both batch losses.
    let mut tsallis_agg = Aggregate::new();
    let mut supervised_agg = Aggregate::new();
    for _ in 0..problems {
        let k = rng.random_range(2..=3);
        let d = rng.random_range(1..=10);
        let theta = random_params(&mut rng, k, d, 1.0);
        let n = rng.random_range(1..=4);
        let xs: Vec<SparseFeatures> = (0..n).map(|_| random_features(&mut rng, d)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let psis: Vec<EntropyIndex> = (0..n)
            .map(|_| EntropyIndex::new(rng.random_range(1.1..4.0)))
            .collect::<Result<_>>()?;
        let tsallis: Vec<TsallisExample> = (0..n)
            .map(|i| TsallisExample {
                features: &xs[i],
                label: labels[i],
                psi: psis[i],
            })
            .collect();
        let supervised: Vec<LabeledExample> = (0..n)
            .map(|i| LabeledExample {
                features: &xs[i],
                label: labels[i],
            })
            .collect();
        let (_, g) = grad_theta_tsallis_batch(&theta, &tsallis)?;
        let num = fd_grad_theta(|t| Ok(grad_theta_tsallis_batch(t, &tsallis)?.0), &theta, H_THETA)?;
        tsallis_agg.add(compare(g.as_slice(), num.as_slice())?);
        let (_, g) = grad_theta_supervised_batch(&theta, &supervised)?;
        let num =
            fd_grad_theta(|t| Ok(grad_theta_supervised_batch(t, &supervised)?.0), &theta, H_THETA)?;
        supervised_agg.add(compare(g.as_slice(), num.as_slice())?);
    }
    for (name, agg) in [
        ("θ gradient of the Tsallis batch loss", &tsallis_agg),
        ("θ gradient of the supervised batch loss", &supervised_agg),
    ] {
        let c = agg.comparison();
        rows.push(CheckRow {
            name,
            cases: agg.cases,
            comparison: c,
            passed: c.max_relative_error < 1e-4,
            tolerance: "max rel < 1e-4",
        });
    }

    // Taylor hypergradient against the exact ψ-perturbation oracle.
    let mut agg = Aggregate::new();
    for _ in 0..problems {
        let d = rng.random_range(2..=5);
        let theta = random_params(&mut rng, 2, d, 1.0);
        let nb = rng.random_range(1..=3);
        let nv = rng.random_range(1..=4);
        let xb: Vec<SparseFeatures> = (0..nb).map(|_| random_features(&mut rng, d)).collect();
        let xv: Vec<SparseFeatures> = (0..nv).map(|_| random_features(&mut rng, d)).collect();
        let mut psi = EntropyIndexTable::new(nb, 2.0)?;
        let mut batch = Vec::with_capacity(nb);
        for (i, x) in xb.iter().enumerate() {
            psi = psi.with_value(i, rng.random_range(1.2..5.0))?;
            batch.push(TargetItem {
                id: i,
                features: x,
                pseudo: rng.random_range(0..2),
            });
        }
        let valid: Vec<LabeledExample> = xv
            .iter()
            .map(|x| LabeledExample {
                features: x,
                label: rng.random_range(0..2),
            })
            .collect();
        let eta = rng.random_range(0.1..1.0);
        let taylor = hypergrad_psi_taylor(&theta, &batch, &valid, &psi, eta, 0.01)?;
        let exact = exact_hypergrad_psi_fd(&theta, &batch, &valid, &psi, eta, H_SCALAR)?;
        agg.add(compare_maps(&exact, &taylor)?);
        for (a, b) in exact.values().zip(taylor.values()) {
            if a.abs() > REL_ERROR_FLOOR && a.signum() != b.signum() {
                agg.sign_ok = false;
            }
        }
    }
    let c = agg.comparison();
    rows.push(CheckRow {
        name: "Taylor hypergradient vs exact ψ perturbation",
        cases: agg.cases,
        comparison: c,
        passed: c.cosine_similarity > 0.99 && agg.sign_ok,
        tolerance: "min cosine > 0.99, signs agree",
    });

    Ok(rows)
}

pub fn format_gradcheck_table(rows: &[CheckRow]) -> String {
    let mut out = format!(
        "{:<46} {:>6} {:>12} {:>12} {:>12}  {:<32} {}\n",
        "check", "cases", "cosine", "max_rel", "max_abs", "tolerance", "status"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<46} {:>6} {:>12.8} {:>12.3e} {:>12.3e}  {:<32} {}\n",
            r.name,
            r.cases,
            r.comparison.cosine_similarity,
            r.comparison.max_relative_error,
            r.comparison.max_absolute_error,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    out
}

/// Returns whether every check passed.
pub fn cmd_gradcheck(config: &RunConfig, corrupt_psi_grad: bool) -> Result<bool> {
    let seed = config.seed.unwrap_or(0);
    let rows = gradcheck_suite(seed, config.problems.max(1), corrupt_psi_grad)?;
    print!("{}", format_gradcheck_table(&rows));
    let failed: Vec<&CheckRow> = rows.iter().filter(|r| !r.passed).collect();
    for r in &failed {
        eprintln!(
            "gradcheck failed: {} (cosine {}, max rel {:e}, max abs {:e}; need {})",
            r.name,
            r.comparison.cosine_similarity,
            r.comparison.max_relative_error,
            r.comparison.max_absolute_error,
            r.tolerance
        );
    }
    Ok(failed.is_empty())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub method: Method,
    pub seed: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<PsiStats>,
    /// Trace path relative to the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub failed: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: RunConfig,
    pub cells: Vec<BenchCell>,
    pub summary: Vec<MethodSummary>,
}

impl BenchReport {
    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(|c| c.metrics.is_none())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn summarise(methods: &[Method], cells: &[BenchCell]) -> Vec<MethodSummary> {
    methods
        .iter()
        .map(|&method| {
            let mine: Vec<&BenchCell> = cells.iter().filter(|c| c.method == method).collect();
            let ok: Vec<&MetricsReport> = mine.iter().filter_map(|c| c.metrics.as_ref()).collect();
            let (accuracy_mean, accuracy_std) =
                mean_std(&ok.iter().map(|m| m.accuracy).collect::<Vec<_>>());
            let (macro_f1_mean, macro_f1_std) =
                mean_std(&ok.iter().map(|m| m.macro_f1).collect::<Vec<_>>());
            let psi_means: Vec<f64> = mine.iter().filter_map(|c| c.psi.map(|p| p.mean)).collect();
            let psi_stds: Vec<f64> = mine.iter().filter_map(|c| c.psi.map(|p| p.std)).collect();
            MethodSummary {
                method,
                runs: mine.len(),
                failed: mine.len() - ok.len(),
                accuracy_mean,
                accuracy_std,
                macro_f1_mean,
                macro_f1_std,
                psi_mean: (!psi_means.is_empty()).then(|| mean_std(&psi_means).0),
                psi_std: (!psi_stds.is_empty()).then(|| mean_std(&psi_stds).0),
            }
        })
        .collect()
}

pub fn format_bench_table(report: &BenchReport) -> String {
    let mut out = format!(
        "{:<20} {:>5} {:>18} {:>18} {:>16}\n",
        "method", "runs", "accuracy", "macro_f1", "psi mean (std)"
    );
    for s in &report.summary {
        let psi = match (s.psi_mean, s.psi_std) {
            (Some(m), Some(sd)) => format!("{m:.3} ({sd:.3})"),
            _ => "-".to_string(),
        };
        out.push_str(&format!(
            "{:<20} {:>5} {:>9.4} ± {:<6.4} {:>9.4} ± {:<6.4} {:>16}\n",
            s.method.name(),
            s.runs - s.failed,
            s.accuracy_mean,
            s.accuracy_std,
            s.macro_f1_mean,
            s.macro_f1_std,
            psi
        ));
    }
    out
}

/// Runs every (method, seed) cell. Each seed gets its own generated corpus,
/// shared by all methods at that seed.
pub fn run_bench(config: &RunConfig) -> Result<BenchReport> {
    if config.methods.is_empty() {
        return Err(MtemError::config("methods", "at least one method is required"));
    }
    if config.seeds.is_empty() {
        return Err(MtemError::config("seeds", "at least one seed is required"));
    }
    create_dir(&config.out)?;
    let mut cells = Vec::new();
    for &seed in &config.seeds {
        let data = load_data(config, seed);
        for &method in &config.methods {
            let rel = format!("{}/seed-{seed}", method.name());
            let outcome = data
                .as_ref()
                .map_err(|e| MtemError::domain(e.to_string()))
                .and_then(|data| run_method(config, method, seed, data))
                .and_then(|o| write_run_outputs(&config.out.join(&rel), &o).map(|_| o));
            cells.push(match outcome {
                Ok(o) => BenchCell {
                    method,
                    seed,
                    status: "ok".into(),
                    error: None,
                    metrics: Some(o.report()),
                    psi: o.psi,
                    trace: Some(format!("{rel}/{TRACE_FILE}")),
                },
                Err(e) => BenchCell {
                    method,
                    seed,
                    status: "failed".into(),
                    error: Some(e.to_string()),
                    metrics: None,
                    psi: None,
                    trace: None,
                },
            });
        }
    }
    let summary = summarise(&config.methods, &cells);
    Ok(BenchReport {
        config: config.clone(),
        cells,
        summary,
    })
}

pub fn cmd_bench(config: &RunConfig) -> Result<BenchReport> {
    let report = run_bench(config)?;
    write_file(&config.out.join(BENCH_REPORT_FILE), to_json(&report))?;
    let table = format_bench_table(&report);
    write_file(&config.out.join(BENCH_TABLE_FILE), &table)?;
    print!("{table}");
    for cell in report.cells.iter().filter(|c| c.metrics.is_none()) {
        eprintln!(
            "cell {} seed {} failed: {}",
            cell.method.name(),
            cell.seed,
            cell.error.as_deref().unwrap_or("unknown error")
        );
    }
    Ok(report)
}

/// Exit status for an error: 2 for I/O and configuration problems, 1 otherwise.
pub fn exit_code(err: &MtemError) -> i32 {
    match err {
        MtemError::Io { .. }
        | MtemError::Parse { .. }
        | MtemError::Checkpoint { .. }
        | MtemError::InvalidConfig { .. } => 2,
        MtemError::Step { source, .. } => exit_code(source),
        _ => 1,
    }
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let (overrides, command) = match &cli.command {
        Command::GenData(o) => (o, "gen-data"),
        Command::Train(o) => (o, "train"),
        Command::Eval(o) => (o, "eval"),
        Command::Gradcheck(o) => (o, "gradcheck"),
        Command::Bench(o) => (o, "bench"),
    };
    let outcome = RunConfig::resolve(overrides).and_then(|config| match cli.command {
        Command::GenData(_) => cmd_gen_data(&config).map(|_| true),
        Command::Train(_) => cmd_train(&config).map(|_| true),
        Command::Eval(_) => cmd_eval(&config).map(|_| true),
        Command::Gradcheck(_) => cmd_gradcheck(&config, overrides.corrupt_psi_grad),
        Command::Bench(_) => cmd_bench(&config).map(|r| !r.any_failed()),
    });
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("mtem {command}: {e}");
            exit_code(&e)
        }
    }
}
