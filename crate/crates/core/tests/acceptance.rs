//! Acceptance run: one line per criterion, nonzero exit if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtem::cli::{load_data, run_method, Method, RunConfig, RunOutcome};
use mtem::meta::{hypergrad_psi_taylor, EntropyIndexTable, TargetItem, TraceRecord};
use mtem::model::{
    grad_theta_supervised_batch, grad_theta_tsallis_batch, supervised_loss, LabeledExample,
    ParameterVector, SparseFeatures, TsallisExample,
};
use mtem::oracle::exact_hypergrad_psi_fd;
use mtem::sampler::{temperature_at, TemperatureSchedule};
use mtem::tsallis::{
    cross_entropy, entropy_via_expectation, gibbs_entropy, tsallis_entropy, tsallis_loss,
    tsallis_loss_grad_psi, EntropyIndex, PredictionProbs,
};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn within(v: Verdict, elapsed: Duration, limit: Duration) -> Verdict {
    let passed = v.passed && elapsed < limit;
    verdict(
        passed,
        format!("{}; {:.2?} (limit {:.0?})", v.detail, elapsed, limit),
    )
}

fn timed(limit: Duration, f: impl FnOnce() -> Verdict) -> Verdict {
    let start = Instant::now();
    let v = f();
    within(v, start.elapsed(), limit)
}

fn psi(v: f64) -> EntropyIndex {
    EntropyIndex::new(v).unwrap()
}

fn simplex(rng: &mut ChaCha8Rng, k: usize, min: f64) -> PredictionProbs {
    let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-9).collect();
    let total: f64 = w.iter().sum();
    let free = 1.0 - min * k as f64;
    PredictionProbs::new(w.iter().map(|v| min + free * v / total).collect()).unwrap()
}

fn features(rng: &mut ChaCha8Rng, d: usize) -> SparseFeatures {
    let mut entries = Vec::new();
    for j in 0..d as u32 {
        if rng.random::<f64>() < 0.7 {
            entries.push((j, rng.random_range(-1.0..1.0)));
        }
    }
    SparseFeatures::new(d, entries).unwrap()
}

fn params(rng: &mut ChaCha8Rng, k: usize, d: usize) -> ParameterVector {
    let v = (0..k * d + k).map(|_| rng.random_range(-1.0..1.0)).collect();
    ParameterVector::from_flat(k, d, v).unwrap()
}

/// Central differences over every coordinate; returns the worst relative
/// error against `analytic` (coordinates below 1e-8 skipped).
fn fd_max_rel(
    loss: impl Fn(&ParameterVector) -> f64,
    theta: &ParameterVector,
    analytic: &ParameterVector,
) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, (&v, &g)) in theta.as_slice().iter().zip(analytic.as_slice()).enumerate() {
        let up = loss(&theta.with_coordinate(i, v + h));
        let down = loss(&theta.with_coordinate(i, v - h));
        let fd = (up - down) / (2.0 * h);
        if fd.abs() > 1e-8 {
            worst = worst.max((fd - g).abs() / fd.abs());
        }
    }
    worst
}

fn limit_recovery() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let near = psi(1.0 + 1e-5);
    let (mut worst_e, mut worst_l) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let k = rng.random_range(2..=10);
        let p = simplex(&mut rng, k, 0.01);
        let y = rng.random_range(0..k);
        worst_e = worst_e.max((tsallis_entropy(&p, near) - gibbs_entropy(&p)).abs());
        worst_l = worst_l.max((tsallis_loss(&p, y, near).unwrap() - cross_entropy(&p, y).unwrap()).abs());
    }
    verdict(
        worst_e < 1e-4 && worst_l < 1e-4,
        format!("max entropy gap {worst_e:.2e}, max loss gap {worst_l:.2e}"),
    )
}

fn expectation_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..=10);
        let p = simplex(&mut rng, k, 0.0);
        let a = psi(rng.random_range(1.001..10.0));
        worst = worst.max((entropy_via_expectation(&p, a) - tsallis_entropy(&p, a)).abs());
    }
    verdict(worst < 1e-10, format!("max gap {worst:.2e}"))
}

fn psi_gradient() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..=5);
        let p = simplex(&mut rng, k, 0.0);
        let y = rng.random_range(0..k);
        let a = rng.random_range(1.1..8.0);
        let closed = tsallis_loss_grad_psi(&p, y, psi(a)).unwrap();
        let fd = (tsallis_loss(&p, y, psi(a + h)).unwrap() - tsallis_loss(&p, y, psi(a - h)).unwrap())
            / (2.0 * h);
        worst = worst.max((closed - fd).abs() / fd.abs().max(1e-12));
    }
    let p = PredictionProbs::new(vec![0.7, 0.3]).unwrap();
    let worked = tsallis_loss_grad_psi(&p, 0, psi(2.0)).unwrap();
    verdict(
        worst < 1e-5 && (worked + 0.0503275).abs() < 5e-8,
        format!("max rel {worst:.2e}, worked value {worked:.7}"),
    )
}

fn model_gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (mut worst_t, mut worst_s) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let k = rng.random_range(2..=3);
        let d = rng.random_range(1..=10);
        let theta = params(&mut rng, k, d);
        let n = rng.random_range(1..=4);
        let xs: Vec<SparseFeatures> = (0..n).map(|_| features(&mut rng, d)).collect();
        let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let ps: Vec<EntropyIndex> = (0..n).map(|_| psi(rng.random_range(1.1..5.0))).collect();
        let tsallis: Vec<TsallisExample<'_>> = (0..n)
            .map(|i| TsallisExample { features: &xs[i], label: ys[i], psi: ps[i] })
            .collect();
        let labeled: Vec<LabeledExample<'_>> = (0..n)
            .map(|i| LabeledExample { features: &xs[i], label: ys[i] })
            .collect();
        let (_, g) = grad_theta_tsallis_batch(&theta, &tsallis).unwrap();
        worst_t = worst_t.max(fd_max_rel(
            |t| grad_theta_tsallis_batch(t, &tsallis).unwrap().0,
            &theta,
            &g,
        ));
        let (_, g) = grad_theta_supervised_batch(&theta, &labeled).unwrap();
        worst_s = worst_s.max(fd_max_rel(|t| supervised_loss(t, &labeled).unwrap(), &theta, &g));
    }
    verdict(
        worst_t < 1e-4 && worst_s < 1e-4,
        format!("max rel tsallis {worst_t:.2e}, supervised {worst_s:.2e}"),
    )
}

fn taylor_hypergradient() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut min_cos = 1.0f64;
    let mut sign_flips = 0;
    for _ in 0..20 {
        let d = rng.random_range(2..=5);
        let theta = params(&mut rng, 2, d);
        let nb = rng.random_range(1..=3);
        let xb: Vec<SparseFeatures> = (0..nb).map(|_| features(&mut rng, d)).collect();
        let xv: Vec<SparseFeatures> = (0..4).map(|_| features(&mut rng, d)).collect();
        let mut table = EntropyIndexTable::new(nb, 2.0).unwrap();
        for i in 0..nb {
            table = table.with_value(i, rng.random_range(1.2..4.0)).unwrap();
        }
        let batch: Vec<TargetItem<'_>> = xb
            .iter()
            .enumerate()
            .map(|(id, x)| TargetItem { id, features: x, pseudo: rng.random_range(0..2) })
            .collect();
        let valid: Vec<LabeledExample<'_>> = xv
            .iter()
            .map(|x| LabeledExample { features: x, label: rng.random_range(0..2) })
            .collect();
        let eta = rng.random_range(0.1..1.0);
        let taylor = hypergrad_psi_taylor(&theta, &batch, &valid, &table, eta, 0.01).unwrap();
        let exact = exact_hypergrad_psi_fd(&theta, &batch, &valid, &table, eta, 1e-4).unwrap();
        let (mut dot, mut na, mut nt) = (0.0, 0.0, 0.0);
        for (id, e) in &exact {
            let t = taylor[id];
            dot += e * t;
            na += e * e;
            nt += t * t;
            if e.abs() > 1e-8 && e.signum() != t.signum() {
                sign_flips += 1;
            }
        }
        let cos = if na == 0.0 && nt == 0.0 { 1.0 } else { dot / (na.sqrt() * nt.sqrt()) };
        min_cos = min_cos.min(cos);
    }
    verdict(
        min_cos > 0.99 && sign_flips == 0,
        format!("min cosine {min_cos:.6}, sign disagreements {sign_flips}"),
    )
}

fn temperature_schedule() -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    for (kmax, kmin, t_max) in [(2.0, 0.5, 2000), (5.0, 1.0, 100), (1.0, 0.1, 7)] {
        let sched = TemperatureSchedule::new(kmax, kmin, 10.0, t_max).unwrap();
        let tol = 1e-3 * (kmax - kmin);
        let start = temperature_at(&sched, 0).unwrap();
        let end = temperature_at(&sched, t_max).unwrap();
        ok &= start >= kmax - tol && end <= kmin + tol;
        if t_max % 2 == 0 {
            ok &= temperature_at(&sched, t_max / 2).unwrap() == (kmax + kmin) / 2.0;
        }
        let ks: Vec<f64> = (0..=t_max).map(|t| temperature_at(&sched, t).unwrap()).collect();
        ok &= ks.windows(2).all(|w| w[1] <= w[0]);
        notes.push(format!("[{start:.4}, {end:.4}]"));
    }
    verdict(ok, format!("endpoints {}", notes.join(" ")))
}

/// Every method on every seed of the default benchmark.
struct Bench {
    runs: BTreeMap<(Method, u64), RunOutcome>,
    elapsed: BTreeMap<Method, Duration>,
    seeds: Vec<u64>,
}

impl Bench {
    fn run(methods: &[Method]) -> Bench {
        let config = RunConfig::default();
        let mut runs = BTreeMap::new();
        let mut elapsed = BTreeMap::new();
        for &seed in &config.seeds {
            let data = load_data(&config, seed).unwrap();
            for &m in methods {
                let start = Instant::now();
                let outcome = run_method(&config, m, seed, &data).unwrap();
                *elapsed.entry(m).or_insert(Duration::ZERO) += start.elapsed();
                runs.insert((m, seed), outcome);
            }
        }
        Bench { runs, elapsed, seeds: config.seeds }
    }

    fn mean_accuracy(&self, m: Method) -> f64 {
        let accs: Vec<f64> = self.seeds.iter().map(|s| self.runs[&(m, *s)].metrics.accuracy).collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    }

    fn time(&self, methods: &[Method]) -> Duration {
        methods.iter().map(|m| self.elapsed[m]).sum()
    }
}

/// Mean of `field` over the first and last tenth of a trace.
fn trend(trace: &[TraceRecord], field: fn(&TraceRecord) -> f64) -> (f64, f64) {
    let n = (trace.len() / 10).max(1);
    let mean = |rs: &[TraceRecord]| rs.iter().map(field).sum::<f64>() / rs.len() as f64;
    (mean(&trace[..n]), mean(&trace[trace.len() - n..]))
}

fn trend_criterion(bench: &Bench, field: fn(&TraceRecord) -> f64) -> Verdict {
    let mut holds = 0;
    let mut notes = Vec::new();
    for s in &bench.seeds {
        let trace = &bench.runs[&(Method::Mtem, *s)].result.trace;
        let (first, last) = trend(trace, field);
        if trace.len() == 2000 && last < first {
            holds += 1;
        }
        notes.push(format!("{:.1e}->{:.1e}", first, last));
    }
    verdict(
        holds == bench.seeds.len(),
        format!("{holds}/{} seeds decrease: {}", bench.seeds.len(), notes.join(" ")),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let sec = Duration::from_secs;

    results.push((1, "limit recovery", timed(sec(1), limit_recovery)));
    results.push((2, "expectation identity", timed(sec(1), expectation_identity)));
    results.push((3, "closed-form index gradient", timed(sec(1), psi_gradient)));
    results.push((4, "model gradient checks", timed(sec(5), model_gradients)));
    results.push((5, "Taylor vs exact hypergradient", timed(sec(10), taylor_hypergradient)));
    results.push((6, "temperature schedule", timed(sec(1), temperature_schedule)));

    let bench = Bench::run(&[
        Method::SourceOnly,
        Method::SelfTrainGibbs,
        Method::MtemNoMeta,
        Method::Mtem,
    ]);
    let mtem_time = bench.time(&[Method::Mtem]);
    results.push((
        7,
        "index-gradient trend",
        within(trend_criterion(&bench, |r| r.grad_psi_sq), mtem_time, sec(120)),
    ));
    results.push((
        8,
        "target-gradient trend",
        within(trend_criterion(&bench, |r| r.grad_theta_sq), mtem_time, sec(120)),
    ));

    let (src, gibbs, no_meta, full) = (
        bench.mean_accuracy(Method::SourceOnly),
        bench.mean_accuracy(Method::SelfTrainGibbs),
        bench.mean_accuracy(Method::MtemNoMeta),
        bench.mean_accuracy(Method::Mtem),
    );
    results.push((
        9,
        "directional adaptation",
        within(
            verdict(
                full >= gibbs && full >= src + 0.01,
                format!("mtem {full:.4}, gibbs-greedy {gibbs:.4}, source-only {src:.4}"),
            ),
            bench.time(&[Method::SourceOnly, Method::SelfTrainGibbs, Method::Mtem]),
            sec(300),
        ),
    ));
    results.push((
        10,
        "ablation directionality",
        verdict(no_meta <= full, format!("no-meta {no_meta:.4} vs mtem {full:.4}")),
    ));

    results.push((11, "bench determinism", bench_determinism()));

    let mut out_of_bounds = 0;
    let mut logged = 0;
    for ((m, _), outcome) in &bench.runs {
        if !matches!(m, Method::Mtem | Method::MtemNoMeta) {
            continue;
        }
        for r in &outcome.result.trace {
            for v in [r.psi_min, r.psi_max, r.psi_mean].into_iter().flatten() {
                logged += 1;
                if !(1.001..=10.0).contains(&v) {
                    out_of_bounds += 1;
                }
            }
        }
        for v in outcome.result.psi.as_ref().map(|t| t.values()).unwrap_or(&[]) {
            logged += 1;
            if !(1.001..=10.0).contains(v) {
                out_of_bounds += 1;
            }
        }
    }
    results.push((
        12,
        "index bounds",
        verdict(
            out_of_bounds == 0 && logged > 0,
            format!("{logged} logged values, {out_of_bounds} outside [1.001, 10]"),
        ),
    ));

    let mut failed = 0;
    for (n, name, v) in &results {
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag}  {name}: {}", v.detail);
        failed += usize::from(!v.passed);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn bench_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    let run = || {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_mtem"))
            .args(["bench", "--methods", "source-only,mtem", "--seeds", "0,1"])
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success());
        std::fs::read(out.join("bench_report.json")).unwrap()
    };
    let (a, b) = (run(), run());
    verdict(a == b, format!("{} bytes, identical: {}", a.len(), a == b))
}
