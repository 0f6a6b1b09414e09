//! End-to-end properties of the synthetic shift generator, measured with a
//! source-trained classifier.

use mtem::data::{evaluate, gen_synthetic_shift, ShiftSpec};
use mtem::meta::{source_only_train, MtemConfig};
use mtem::model::init_params;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// (held-out source accuracy, target accuracy) for a source-only model
/// trained on the first 80% of the source domain.
fn source_vs_target(spec: &ShiftSpec, seed: u64) -> (f64, f64) {
    let data = gen_synthetic_shift(spec, seed).unwrap();
    let n = data.source.len();
    let cut = n * 4 / 5;
    let train = data.source.subset(&(0..cut).collect::<Vec<_>>()).unwrap();
    let heldout = data.source.subset(&(cut..n).collect::<Vec<_>>()).unwrap();
    let cfg = MtemConfig {
        t_max: 1500,
        seed,
        ..MtemConfig::default()
    };
    let params0 = init_params(spec.k, spec.d, seed + 1).unwrap();
    let params = source_only_train(&cfg, &train, &params0).unwrap().params;
    (
        evaluate(&params, &heldout).unwrap().accuracy,
        evaluate(&params, &data.target_eval).unwrap().accuracy,
    )
}

fn mean_over_seeds(spec: &ShiftSpec) -> (f64, f64) {
    let runs: Vec<_> = SEEDS.iter().map(|&s| source_vs_target(spec, s)).collect();
    let n = runs.len() as f64;
    (
        runs.iter().map(|r| r.0).sum::<f64>() / n,
        runs.iter().map(|r| r.1).sum::<f64>() / n,
    )
}

#[test]
fn no_shift_means_no_gap() {
    let spec = ShiftSpec {
        shift_strength: 0.0,
        ..ShiftSpec::default()
    };
    let (src, tgt) = mean_over_seeds(&spec);
    assert!((src - tgt).abs() <= 0.02, "heldout {src:.4} vs target {tgt:.4}");
}

#[test]
fn full_shift_without_shared_features_is_chance() {
    let spec = ShiftSpec {
        shift_strength: 1.0,
        n_shared_features: 0,
        ..ShiftSpec::default()
    };
    let (_, tgt) = mean_over_seeds(&spec);
    assert!((tgt - 0.5).abs() <= 0.05, "target accuracy {tgt:.4}");
}

#[test]
fn default_shift_has_a_five_point_gap() {
    let (src, tgt) = mean_over_seeds(&ShiftSpec::default());
    assert!(src - tgt >= 0.05, "heldout {src:.4} vs target {tgt:.4}");
}

#[test]
fn gap_grows_with_shift_strength() {
    let gaps: Vec<f64> = [0.0, 0.3, 0.6, 0.9]
        .iter()
        .map(|&shift| {
            let spec = ShiftSpec {
                shift_strength: shift,
                ..ShiftSpec::default()
            };
            let (src, tgt) = mean_over_seeds(&spec);
            src - tgt
        })
        .collect();
    for w in gaps.windows(2) {
        assert!(w[1] >= w[0], "gaps {gaps:?}");
    }
}
