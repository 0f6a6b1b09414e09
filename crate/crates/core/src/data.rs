//! Datasets: synthetic domain-shift generation, hashed bag-of-words text
//! ingestion, JSON-lines exchange, batch sampling and evaluation metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MtemError, Result};
use crate::model::{predict, ParameterVector, SparseFeatures};
use crate::sampler::RngState;
use crate::tsallis::ClassIndex;

/// Fraction of the generated target domain handed out as unlabeled training data.
pub const TARGET_UNLABELED_FRACTION: f64 = 0.7;

pub const SOURCE_DOMAIN: &str = "source";
pub const TARGET_DOMAIN: &str = "target";

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub features: SparseFeatures,
    pub label: Option<ClassIndex>,
    pub domain: String,
}

/// An ordered, immutable collection of instances sharing one feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: Vec<Instance>,
    dim: usize,
    num_classes: usize,
    label_names: Vec<String>,
}

impl Dataset {
    /// Checks that ids are `0..n` in order, dimensions agree and labels are `< K`.
    pub fn new(
        instances: Vec<Instance>,
        dim: usize,
        num_classes: usize,
        label_names: Vec<String>,
    ) -> Result<Self> {
        if label_names.len() != num_classes {
            return Err(MtemError::DimensionMismatch {
                what: "label name count",
                expected: num_classes,
                found: label_names.len(),
            });
        }
        for (pos, inst) in instances.iter().enumerate() {
            if inst.id != pos {
                return Err(MtemError::domain(format!(
                    "instance ids must be dense from 0; position {pos} has id {}",
                    inst.id
                )));
            }
            if inst.features.dim() != dim {
                return Err(MtemError::DimensionMismatch {
                    what: "instance feature dimension",
                    expected: dim,
                    found: inst.features.dim(),
                });
            }
            if let Some(y) = inst.label {
                if y >= num_classes {
                    return Err(MtemError::domain(format!(
                        "instance {pos} has label {y} but K = {num_classes}"
                    )));
                }
            }
        }
        Ok(Dataset {
            instances,
            dim,
            num_classes,
            label_names,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn get(&self, id: usize) -> Option<&Instance> {
        self.instances.get(id)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.instances.iter().all(|i| i.label.is_some())
    }

    /// A copy holding `ids` (in that order), renumbered densely from 0.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        let instances = ids
            .iter()
            .enumerate()
            .map(|(new_id, old)| {
                self.instances
                    .get(*old)
                    .map(|inst| Instance {
                        id: new_id,
                        ..inst.clone()
                    })
                    .ok_or_else(|| MtemError::domain(format!("no instance with id {old}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(instances, self.dim, self.num_classes, self.label_names.clone())
    }
}

/// Default class names for generated data: `"0"`, `"1"`, ...
pub fn numeric_label_names(k: usize) -> Vec<String> {
    (0..k).map(|c| c.to_string()).collect()
}

/// Parameters of the synthetic domain-shift generator.
///
/// Feature layout: `[0, n_shared)` carries class signal in both domains,
/// the next `n_domain` features carry it only in the source domain, the next
/// `n_domain` only in the target domain; the rest are pure noise. Every
/// instance is a bag of `tokens_per_instance` draws; each draw is a class
/// word with probability `signal_rate`, otherwise a uniformly random feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftSpec {
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
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            d: 200,
            k: 2,
            n_shared_features: 40,
            n_domain_features: 40,
            shift_strength: 0.6,
            label_noise: 0.0,
            n_source: 2000,
            n_target: 2000,
            tokens_per_instance: 20,
            signal_rate: 0.3,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(MtemError::config("k", "need at least 2 classes"));
        }
        if self.n_shared_features > self.d {
            return Err(MtemError::config(
                "n_shared_features",
                format!("{} exceeds d = {}", self.n_shared_features, self.d),
            ));
        }
        if self.n_domain_features == 0 {
            return Err(MtemError::config("n_domain_features", "must be positive"));
        }
        if self.n_shared_features + 2 * self.n_domain_features > self.d {
            return Err(MtemError::config(
                "n_domain_features",
                format!(
                    "n_shared_features + 2·n_domain_features = {} exceeds d = {}",
                    self.n_shared_features + 2 * self.n_domain_features,
                    self.d
                ),
            ));
        }
        if self.n_shared_features > 0 && self.n_shared_features < self.k {
            return Err(MtemError::config(
                "n_shared_features",
                "needs at least one feature per class (or zero)",
            ));
        }
        if self.n_domain_features < self.k {
            return Err(MtemError::config(
                "n_domain_features",
                "needs at least one feature per class",
            ));
        }
        if !(0.0..=1.0).contains(&self.shift_strength) {
            return Err(MtemError::config("shift_strength", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(MtemError::config("label_noise", "must lie in [0, 1]"));
        }
        if self.n_source == 0 {
            return Err(MtemError::config("n_source", "must be positive"));
        }
        if self.n_target < 2 {
            return Err(MtemError::config("n_target", "must be at least 2"));
        }
        if self.tokens_per_instance == 0 {
            return Err(MtemError::config("tokens_per_instance", "must be positive"));
        }
        if !(self.signal_rate > 0.0 && self.signal_rate <= 1.0) {
            return Err(MtemError::config("signal_rate", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Number of unlabeled / evaluation target instances (7:3 split).
    pub fn target_split(&self) -> (usize, usize) {
        let unlabeled = (self.n_target as f64 * TARGET_UNLABELED_FRACTION).round() as usize;
        let unlabeled = unlabeled.clamp(1, self.n_target - 1);
        (unlabeled, self.n_target - unlabeled)
    }
}

/// Output of [`gen_synthetic_shift`].
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftData {
    pub source: Dataset,
    pub target_unlabeled: Dataset,
    pub target_eval: Dataset,
}

struct Generator<'a> {
    spec: &'a ShiftSpec,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    /// A random feature of `class` inside the block `[start, start + len)`.
    /// Block features are assigned to classes round-robin.
    fn class_word(&mut self, start: usize, len: usize, class: usize) -> usize {
        let k = self.spec.k;
        let per_class = (len - class).div_ceil(k);
        start + class + k * self.rng.random_range(0..per_class)
    }

    /// Draws one bag of words. `shared_keep` scales the shared-block signal,
    /// `source_weight` / `target_weight` split the domain-block signal.
    fn bag(
        &mut self,
        label: usize,
        shared_keep: f64,
        source_weight: f64,
        target_weight: f64,
    ) -> SparseFeatures {
        let spec = self.spec;
        let (n_sh, n_dom) = (spec.n_shared_features, spec.n_domain_features);
        let shared_share = n_sh as f64 / (n_sh + n_dom) as f64;
        let p_shared = spec.signal_rate * shared_share * shared_keep;
        let p_source = spec.signal_rate * (1.0 - shared_share) * source_weight;
        let p_target = spec.signal_rate * (1.0 - shared_share) * target_weight;

        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        for _ in 0..spec.tokens_per_instance {
            let u: f64 = self.rng.random();
            let feature = if u < p_shared {
                self.class_word(0, n_sh, label)
            } else if u < p_shared + p_source {
                self.class_word(n_sh, n_dom, label)
            } else if u < p_shared + p_source + p_target {
                self.class_word(n_sh + n_dom, n_dom, label)
            } else {
                self.rng.random_range(0..spec.d)
            };
            *counts.entry(feature as u32).or_insert(0.0) += 1.0;
        }
        normalized(spec.d, counts)
    }

    fn label(&mut self) -> (usize, usize) {
        let k = self.spec.k;
        let truth = self.rng.random_range(0..k);
        let observed = if self.rng.random::<f64>() < self.spec.label_noise {
            (truth + 1 + self.rng.random_range(0..k - 1)) % k
        } else {
            truth
        };
        (truth, observed)
    }
}

fn normalized(dim: usize, counts: BTreeMap<u32, f64>) -> SparseFeatures {
    let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
    let entries = counts.into_iter().map(|(i, c)| (i, c / norm)).collect();
    SparseFeatures::new(dim, entries).expect("generated features are valid")
}

/// Generates a labeled source domain and a shifted target domain split 7:3
/// into unlabeled training data and labeled evaluation data.
///
/// Each target instance draws its own shift magnitude `m ~ U[0, shift]`,
/// which removes that fraction of its shared-block signal. Independently,
/// the domain-specific signal of target instances is split `1 - shift` /
/// `shift` between the source-only and target-only blocks.
pub fn gen_synthetic_shift(spec: &ShiftSpec, seed: u64) -> Result<ShiftData> {
    spec.validate()?;
    let mut gen = Generator {
        spec,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let names = numeric_label_names(spec.k);

    let source = (0..spec.n_source)
        .map(|id| {
            let (_, label) = gen.label();
            Instance {
                id,
                features: gen.bag(label, 1.0, 1.0, 0.0),
                label: Some(label),
                domain: SOURCE_DOMAIN.to_string(),
            }
        })
        .collect();

    let shift = spec.shift_strength;
    let (n_unlabeled, _) = spec.target_split();
    let mut unlabeled = Vec::with_capacity(n_unlabeled);
    let mut eval = Vec::with_capacity(spec.n_target - n_unlabeled);
    for i in 0..spec.n_target {
        let (_, label) = gen.label();
        let magnitude = shift * gen.rng.random::<f64>();
        let features = gen.bag(label, 1.0 - magnitude, 1.0 - shift, shift);
        if i < n_unlabeled {
            unlabeled.push(Instance {
                id: i,
                features,
                label: None,
                domain: TARGET_DOMAIN.to_string(),
            });
        } else {
            eval.push(Instance {
                id: i - n_unlabeled,
                features,
                label: Some(label),
                domain: TARGET_DOMAIN.to_string(),
            });
        }
    }

    Ok(ShiftData {
        source: Dataset::new(source, spec.d, spec.k, names.clone())?,
        target_unlabeled: Dataset::new(unlabeled, spec.d, spec.k, names.clone())?,
        target_eval: Dataset::new(eval, spec.d, spec.k, names)?,
    })
}

/// 64-bit FNV-1a of `token`'s UTF-8 bytes.
pub fn fnv1a64(token: &str) -> u64 {
    let mut hasher = FnvHasher::default();
    hasher.write(token.as_bytes());
    hasher.finish()
}

/// Hashed, L2-normalised bag of words.
///
/// Text is lowercased and split on every non-alphanumeric character; each
/// token goes to bucket `fnv1a64(token) mod d`.
pub fn featurize_text(text: &str, d: usize) -> SparseFeatures {
    let lower = text.to_lowercase();
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let bucket = (fnv1a64(token) % d as u64) as u32;
        *counts.entry(bucket).or_insert(0.0) += 1.0;
    }
    if counts.is_empty() {
        return SparseFeatures::empty(d);
    }
    normalized(d, counts)
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<(u32, f64)>>,
}

type Row = (SparseFeatures, Option<String>, Option<String>);

fn read_rows(path: &Path, d: usize) -> Result<Vec<Row>> {
    let file = fs::File::open(path).map_err(|e| MtemError::io(path, e))?;
    let parse_err = |line: usize, message: String| MtemError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| MtemError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        let features = match (&record.features, &record.text) {
            (Some(pairs), _) => SparseFeatures::new(d, pairs.clone())
                .map_err(|e| parse_err(line_no, e.to_string()))?,
            (None, Some(text)) => featurize_text(text, d),
            (None, None) => {
                return Err(parse_err(line_no, "record has neither \"text\" nor \"features\"".into()))
            }
        };
        rows.push((features, record.label, record.domain));
    }
    Ok(rows)
}

fn build_dataset(
    path: &Path,
    rows: Vec<Row>,
    d: usize,
    label_names: Vec<String>,
) -> Result<Dataset> {
    let index: BTreeMap<&str, usize> = label_names
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut instances = Vec::with_capacity(rows.len());
    for (id, (features, label, domain)) in rows.into_iter().enumerate() {
        let label = match label {
            Some(l) => Some(*index.get(l.as_str()).ok_or_else(|| {
                MtemError::domain(format!("{}: unknown label {l:?}", path.display()))
            })?),
            None => None,
        };
        instances.push(Instance {
            id,
            features,
            label,
            domain: domain.unwrap_or_default(),
        });
    }
    let k = label_names.len();
    Dataset::new(instances, d, k, label_names)
}

/// Reads a JSON-lines dataset. Records carry `"text"`, optionally `"label"`
/// and `"domain"`, and optionally pre-computed `"features"` (pairs of
/// index and value) which take precedence over the text. Labels are
/// numbered through their sorted vocabulary; `k` fixes the class count.
pub fn load_jsonl(path: &Path, d: usize, k: Option<usize>) -> Result<Dataset> {
    let rows = read_rows(path, d)?;
    let vocab: BTreeSet<&str> = rows.iter().filter_map(|r| r.1.as_deref()).collect();
    let num_classes = match k {
        Some(k) if vocab.len() > k => {
            return Err(MtemError::domain(format!(
                "{}: {} distinct labels exceed the configured K = {k}",
                path.display(),
                vocab.len()
            )))
        }
        Some(k) => k,
        None => vocab.len(),
    };
    let mut label_names: Vec<String> = vocab.iter().map(|s| s.to_string()).collect();
    // Pad missing class names so K stays as configured.
    let mut extra = 0;
    while label_names.len() < num_classes {
        let candidate = format!("{}", label_names.len() + extra);
        if !label_names.contains(&candidate) {
            label_names.push(candidate);
        } else {
            extra += 1;
        }
    }
    build_dataset(path, rows, d, label_names)
}

/// Like [`load_jsonl`] but numbers labels through a given vocabulary, so
/// splits of one corpus agree on class indices.
pub fn load_jsonl_with_labels(path: &Path, d: usize, label_names: &[String]) -> Result<Dataset> {
    let rows = read_rows(path, d)?;
    build_dataset(path, rows, d, label_names.to_vec())
}

/// Writes a dataset as JSON lines with pre-computed `"features"`.
pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| MtemError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for inst in dataset.instances() {
        let record = JsonRecord {
            text: Some(String::new()),
            label: inst.label.map(|y| dataset.label_names[y].clone()),
            domain: Some(inst.domain.clone()),
            features: Some(inst.features.entries().to_vec()),
        };
        let line = serde_json::to_string(&record).expect("records serialise");
        writeln!(out, "{line}").map_err(|e| MtemError::io(path, e))?;
    }
    out.flush().map_err(|e| MtemError::io(path, e))
}

/// Uniform sample with replacement.
pub fn sample_batch<'a>(
    dataset: &'a Dataset,
    size: usize,
    rng: &mut RngState,
) -> Result<Vec<&'a Instance>> {
    if dataset.is_empty() {
        return Err(MtemError::Empty("dataset"));
    }
    if size == 0 {
        return Err(MtemError::config("batch size", "must be at least 1"));
    }
    Ok((0..size)
        .map(|_| &dataset.instances[rng.index(dataset.len())])
        .collect())
}

/// Classification quality on a labeled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    /// Metrics of a `K × K` confusion matrix indexed `[true][predicted]`.
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let k = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
        let per_class_f1: Vec<f64> = (0..k)
            .map(|c| {
                let tp = confusion[c][c] as f64;
                let predicted: u64 = (0..k).map(|r| confusion[r][c]).sum();
                let actual: u64 = confusion[c].iter().sum();
                let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
                let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
                if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                }
            })
            .collect();
        let macro_f1 = if k > 0 {
            per_class_f1.iter().sum::<f64>() / k as f64
        } else {
            0.0
        };
        Metrics {
            accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
            macro_f1,
            per_class_f1,
            confusion,
        }
    }
}

/// Greedy (`κ = 1`) predictions scored against the labels.
pub fn evaluate(params: &ParameterVector, dataset: &Dataset) -> Result<Metrics> {
    if dataset.dim() != params.dim() {
        return Err(MtemError::DimensionMismatch {
            what: "feature dimension d (checkpoint vs data)",
            expected: params.dim(),
            found: dataset.dim(),
        });
    }
    let k = params.num_classes();
    if dataset.num_classes() > k {
        return Err(MtemError::DimensionMismatch {
            what: "number of classes K (checkpoint vs data)",
            expected: k,
            found: dataset.num_classes(),
        });
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for inst in dataset.instances() {
        let truth = inst.label.ok_or_else(|| {
            MtemError::domain(format!("instance {} is unlabeled; evaluation needs labels", inst.id))
        })?;
        let pred = predict(params, &inst.features, 1.0)?.argmax();
        confusion[truth][pred] += 1;
    }
    Ok(Metrics::from_confusion(confusion))
}
