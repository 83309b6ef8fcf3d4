//! Seeded synthetic multi-label scenarios.
//!
//! Ground truth is linear: class `c` has a unit direction `u_c` and a
//! threshold `τ_c`, and `y_c = 1` iff `x · u_c > τ_c`. Client training and
//! validation labels are then flipped independently with probability
//! `label_noise`; the test and batch-norm statistics splits keep clean labels.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::registry::{default_class_names, ClassRegistry};
use crate::seeds;
use crate::tensor::Tensor2;

/// Size of the held-out split used for batch-norm reference statistics.
pub const STATS_SPLIT_SIZE: usize = 1024;
const MAX_THRESHOLD_ATTEMPTS: u64 = 100;
/// Thresholds are drawn so that unshifted prevalence lies in [25%, 50%].
const MAX_THRESHOLD: f64 = 0.674_489_750_196_081_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Stats,
}

/// Features and binary labels of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor2,
    pub y: Tensor2,
    pub split: Split,
}

impl LabeledSet {
    pub fn new(x: Tensor2, y: Tensor2, split: Split) -> Result<Self> {
        if x.rows() != y.rows() {
            return config(format!("{} feature rows but {} label rows", x.rows(), y.rows()));
        }
        if y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return config("labels must be 0 or 1");
        }
        Ok(Self { x, y, split })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column `c` contains both a positive and a negative label.
    pub fn has_both_labels(&self, c: usize) -> bool {
        let col = self.y.column(c);
        col.contains(&1.0) && col.contains(&0.0)
    }

    pub fn prevalence(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        self.y.column_sums().into_iter().map(|s| s / n).collect()
    }

    /// Keeps only the label columns `classes`, in that order.
    pub fn restrict(&self, classes: &[usize]) -> LabeledSet {
        LabeledSet {
            x: self.x.clone(),
            y: self.y.select_cols(classes),
            split: self.split,
        }
    }

    pub fn concat(parts: &[&LabeledSet]) -> Result<LabeledSet> {
        let split = parts.first().map_or(Split::Train, |p| p.split);
        let xs: Vec<&Tensor2> = parts.iter().map(|p| &p.x).collect();
        let ys: Vec<&Tensor2> = parts.iter().map(|p| &p.y).collect();
        LabeledSet::new(Tensor2::vstack(&xs)?, Tensor2::vstack(&ys)?, split)
    }
}

/// Copies the columns in `classes` and zeroes every other column.
pub fn mask_missing_as_negative(y: &Tensor2, classes: &[usize]) -> Tensor2 {
    let mut keep = vec![false; y.cols()];
    for &c in classes {
        if c < keep.len() {
            keep[c] = true;
        }
    }
    let mut out = y.clone();
    for r in 0..out.rows() {
        for (v, &k) in out.row_mut(r).iter_mut().zip(&keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
    out
}

/// How classes are distributed over clients.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Assignment {
    /// Per-client class names.
    Explicit { clients: Vec<Vec<String>> },
    /// `shared` classes held by every client, `partial` classes each held by
    /// two neighbouring clients, and `unique` classes split into contiguous
    /// per-client blocks.
    Generated {
        shared: usize,
        #[serde(default)]
        partial: usize,
        unique: usize,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Skew {
    #[default]
    Iid,
    /// Each client's features are offset by a random vector of this norm.
    FeatureShift(f64),
}

fn default_label_noise() -> f64 {
    0.05
}

fn default_n_test() -> usize {
    2000
}

fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Samples per client, split into train and validation.
    pub n_per_client: usize,
    pub d: usize,
    #[serde(rename = "M")]
    pub num_classes: usize,
    #[serde(rename = "K")]
    pub num_clients: usize,
    pub assignment: Assignment,
    #[serde(default)]
    pub skew: Skew,
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
    pub seed: u64,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

impl ScenarioSpec {
    /// Scenario with a generated class assignment and default sizes.
    pub fn generated(num_clients: usize, shared: usize, partial: usize, unique: usize, seed: u64) -> Self {
        Self {
            n_per_client: 500,
            d: 20,
            num_classes: shared + partial + unique,
            num_clients,
            assignment: Assignment::Generated { shared, partial, unique },
            skew: Skew::Iid,
            label_noise: default_label_noise(),
            seed,
            n_test: default_n_test(),
            val_fraction: default_val_fraction(),
            class_names: None,
        }
    }

    pub fn n_val(&self) -> usize {
        (self.n_per_client as f64 * self.val_fraction).round() as usize
    }

    pub fn n_train(&self) -> usize {
        self.n_per_client - self.n_val()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| default_class_names(self.num_classes))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return config("K must be >= 1");
        }
        if self.num_classes == 0 {
            return config("M must be >= 1");
        }
        if self.d == 0 {
            return config("d must be >= 1");
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return config(format!("label_noise {} must lie in [0, 0.5)", self.label_noise));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return config("val_fraction must lie in (0, 1)");
        }
        if self.n_val() < 2 || self.n_train() < 2 {
            return config(format!(
                "n_per_client = {} leaves too few train/val samples",
                self.n_per_client
            ));
        }
        if self.n_test < 2 {
            return config("n_test must be >= 2");
        }
        if let Skew::FeatureShift(s) = self.skew {
            if s < 0.0 || !s.is_finite() {
                return config("feature_shift magnitude must be finite and >= 0");
            }
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return config(format!("class_names lists {} names but M = {}", names.len(), self.num_classes));
            }
        }
        self.registry().map(|_| ())
    }

    /// Resolves the assignment into a validated registry.
    pub fn registry(&self) -> Result<ClassRegistry> {
        let names = self.class_names();
        let k = self.num_clients;
        let lists = match &self.assignment {
            Assignment::Explicit { clients } => {
                if clients.len() != k {
                    return config(format!("assignment lists {} clients but K = {k}", clients.len()));
                }
                clients
                    .iter()
                    .map(|cls| {
                        cls.iter()
                            .map(|name| {
                                names.iter().position(|n| n == name).ok_or_else(|| {
                                    Error::Config(format!("assignment names unknown class `{name}`"))
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            &Assignment::Generated { shared, partial, unique } => {
                if shared + partial + unique != self.num_classes {
                    return config(format!(
                        "shared + partial + unique = {} but M = {}",
                        shared + partial + unique,
                        self.num_classes
                    ));
                }
                if partial > 0 && k < 3 {
                    return config("partially shared classes need K >= 3");
                }
                generated_assignment(k, shared, partial, unique)
            }
        };
        ClassRegistry::new(names, lists)
    }
}

/// Class layout: client 0's unique block, then shared, then partial, then the
/// remaining unique blocks.
fn generated_assignment(k: usize, shared: usize, partial: usize, unique: usize) -> Vec<Vec<usize>> {
    let block = |i: usize| unique / k + usize::from(i < unique % k);
    let mut lists = vec![Vec::new(); k];
    let mut next = 0;
    let take = |next: &mut usize, n: usize| {
        let r = *next..*next + n;
        *next += n;
        r
    };
    lists[0].extend(take(&mut next, block(0)));
    for c in take(&mut next, shared) {
        lists.iter_mut().for_each(|l| l.push(c));
    }
    for (i, c) in take(&mut next, partial).enumerate() {
        lists[i % k].push(c);
        lists[(i + 1) % k].push(c);
    }
    for (i, list) in lists.iter_mut().enumerate().skip(1) {
        list.extend(take(&mut next, block(i)));
    }
    lists
}

/// The linear labeling rule and per-client feature offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `M × d`, one unit direction per class.
    pub directions: Tensor2,
    pub thresholds: Vec<f64>,
    /// `K × d`.
    pub offsets: Tensor2,
}

impl GroundTruth {
    pub fn label(&self, x: &[f64], c: usize) -> f64 {
        let dot: f64 = x.iter().zip(self.directions.row(c)).map(|(a, b)| a * b).sum();
        if dot > self.thresholds[c] {
            1.0
        } else {
            0.0
        }
    }
}

/// One client's private data with labels for all `M` classes.
///
/// Training code never reads these directly; it uses
/// [`ClientData::local_view`] or [`ClientData::missing_as_negative_view`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub train: LabeledSet,
    pub val: LabeledSet,
}

impl ClientData {
    /// Labels restricted to `classes` (`n × |C_k|`).
    pub fn local_view(&self, classes: &[usize]) -> (LabeledSet, LabeledSet) {
        (self.train.restrict(classes), self.val.restrict(classes))
    }

    /// All `M` label columns with non-local classes set to 0.
    pub fn missing_as_negative_view(&self, classes: &[usize]) -> (LabeledSet, LabeledSet) {
        let mask = |s: &LabeledSet| LabeledSet {
            x: s.x.clone(),
            y: mask_missing_as_negative(&s.y, classes),
            split: s.split,
        };
        (mask(&self.train), mask(&self.val))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub registry: ClassRegistry,
    pub truth: GroundTruth,
    /// Pooled test set with clean labels for all `M` classes.
    pub test: LabeledSet,
    /// Held-out split for batch-norm reference statistics.
    pub stats: LabeledSet,
    pub clients: Vec<ClientData>,
    /// Threshold draws needed before every split had both label values.
    pub attempts: u64,
}

/// Realized sizes and prevalences, recorded in run manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStats {
    pub n_test: usize,
    pub test_prevalence: Vec<f64>,
    pub clients: Vec<ClientStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientStats {
    pub n_train: usize,
    pub n_val: usize,
    /// Prevalence of each locally held class in the training split.
    pub train_prevalence: Vec<f64>,
}

impl Scenario {
    pub fn stats(&self) -> ScenarioStats {
        ScenarioStats {
            n_test: self.test.len(),
            test_prevalence: self.test.prevalence(),
            clients: self
                .clients
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let prev = c.train.prevalence();
                    let local = self.registry.client_classes(k).unwrap_or(&[]);
                    ClientStats {
                        n_train: c.train.len(),
                        n_val: c.val.len(),
                        train_prevalence: local.iter().map(|&i| prev[i]).collect(),
                    }
                })
                .collect(),
        }
    }
}

fn unit_vector(rng: &mut seeds::Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sample_features(rng: &mut seeds::Rng, n: usize, d: usize) -> Tensor2 {
    let data = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    Tensor2::from_vec(n, d, data).expect("n*d entries")
}

fn add_offset(x: &mut Tensor2, r: usize, offset: &[f64]) {
    for (v, o) in x.row_mut(r).iter_mut().zip(offset) {
        *v += o;
    }
}

/// Pooled split: each row is drawn in a uniformly chosen client domain.
fn pooled_features(rng: &mut seeds::Rng, n: usize, d: usize, offsets: &Tensor2, shifted: bool) -> Tensor2 {
    let mut x = sample_features(rng, n, d);
    if shifted {
        for r in 0..n {
            let k = rng.random_range(0..offsets.rows());
            add_offset(&mut x, r, offsets.row(k));
        }
    }
    x
}

fn label(truth: &GroundTruth, x: &Tensor2, noise: f64, rng: Option<&mut seeds::Rng>) -> Tensor2 {
    let m = truth.thresholds.len();
    let mut y = Tensor2::zeros(x.rows(), m);
    for r in 0..x.rows() {
        for c in 0..m {
            y.set(r, c, truth.label(x.row(r), c));
        }
    }
    if let Some(rng) = rng {
        if noise > 0.0 {
            for v in y.data_mut() {
                if rng.random::<f64>() < noise {
                    *v = 1.0 - *v;
                }
            }
        }
    }
    y
}

/// Generates the registry, the pooled test and statistics splits, and every
/// client's train/validation data. Deterministic in `spec`.
///
/// Feature matrices depend only on `(seed, K, d, sizes, skew)`, never on the
/// class assignment.
pub fn generate_synthetic(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let registry = spec.registry()?;
    let (m, d, k) = (spec.num_classes, spec.d, spec.num_clients);

    let mut directions = Tensor2::zeros(m, d);
    for c in 0..m {
        let u = unit_vector(&mut seeds::stream(spec.seed, "data.direction", c as u64), d);
        directions.row_mut(c).copy_from_slice(&u);
    }
    let (shifted, sigma) = match spec.skew {
        Skew::Iid => (false, 0.0),
        Skew::FeatureShift(s) => (s > 0.0, s),
    };
    let mut offsets = Tensor2::zeros(k, d);
    if shifted {
        for i in 0..k {
            let u = unit_vector(&mut seeds::stream(spec.seed, "data.offset", i as u64), d);
            for (o, v) in offsets.row_mut(i).iter_mut().zip(u) {
                *o = sigma * v;
            }
        }
    }

    let mut rng = seeds::stream(spec.seed, "data.samples", 0);
    let test_x = pooled_features(&mut rng, spec.n_test, d, &offsets, shifted);
    let stats_x = pooled_features(&mut rng, STATS_SPLIT_SIZE, d, &offsets, shifted);
    let (n_train, n_val) = (spec.n_train(), spec.n_val());
    let client_x: Vec<(Tensor2, Tensor2)> = (0..k)
        .map(|i| {
            let mut x = sample_features(&mut rng, spec.n_per_client, d);
            for r in 0..x.rows() {
                add_offset(&mut x, r, offsets.row(i));
            }
            let train: Vec<usize> = (0..n_train).collect();
            let val: Vec<usize> = (n_train..n_train + n_val).collect();
            (x.select_rows(&train), x.select_rows(&val))
        })
        .collect();

    let threshold_dist = Uniform::new(0.0, MAX_THRESHOLD).expect("valid range");
    let mut failure = String::new();
    for attempt in 0..MAX_THRESHOLD_ATTEMPTS {
        let mut trng = seeds::stream(spec.seed, "data.threshold", attempt);
        let thresholds: Vec<f64> = (0..m).map(|_| threshold_dist.sample(&mut trng)).collect();
        let truth = GroundTruth {
            directions: directions.clone(),
            thresholds,
            offsets: offsets.clone(),
        };
        let mut nrng = seeds::stream(spec.seed, "data.noise", attempt);
        let test = LabeledSet::new(test_x.clone(), label(&truth, &test_x, 0.0, None), Split::Test)?;
        let stats = LabeledSet::new(stats_x.clone(), label(&truth, &stats_x, 0.0, None), Split::Stats)?;
        let mut clients = Vec::with_capacity(k);
        for (tx, vx) in &client_x {
            let ty = label(&truth, tx, spec.label_noise, Some(&mut nrng));
            let vy = label(&truth, vx, spec.label_noise, Some(&mut nrng));
            clients.push(ClientData {
                train: LabeledSet::new(tx.clone(), ty, Split::Train)?,
                val: LabeledSet::new(vx.clone(), vy, Split::Val)?,
            });
        }
        let mut ok = true;
        'check: for c in 0..m {
            if !test.has_both_labels(c) {
                failure = format!("class {c} lacks a positive or negative in the test split");
                ok = false;
                break 'check;
            }
            for (i, cd) in clients.iter().enumerate() {
                for set in [&cd.train, &cd.val] {
                    if !set.has_both_labels(c) {
                        failure = format!(
                            "class {c} lacks a positive or negative in client {i} {:?} split",
                            set.split
                        );
                        ok = false;
                        break 'check;
                    }
                }
            }
        }
        if ok {
            return Ok(Scenario {
                spec: spec.clone(),
                registry,
                truth,
                test,
                stats,
                clients,
                attempts: attempt + 1,
            });
        }
    }
    Err(Error::Data(format!(
        "no valid thresholds after {MAX_THRESHOLD_ATTEMPTS} attempts; last failure: {failure}"
    )))
}

/// Client counts of the number-of-clients ladder.
pub const CLIENT_LADDER: [usize; 7] = [2, 3, 4, 5, 6, 8, 10];
/// Shared-class counts of the number-of-shared-classes ladder.
pub const SHARED_LADDER: [usize; 7] = [0, 1, 2, 4, 8, 12, 14];
/// Class count used by both ladders.
pub const LADDER_CLASSES: usize = 14;
/// Total samples split across the clients of the number-of-clients ladder.
pub const LADDER_TOTAL_SAMPLES: usize = 6000;
const LADDER_SHARED_CLASSES: usize = 4;

fn ladder_spec(k: usize, n_per_client: usize, shared: usize, seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        n_per_client,
        ..ScenarioSpec::generated(k, shared, 0, LADDER_CLASSES - shared, seed)
    }
}

/// IID scenarios with `K ∈ {2,3,4,5,6,8,10}`; every client holds
/// `LADDER_TOTAL_SAMPLES / K` samples.
pub fn effect_of_clients_scenarios(base_seed: u64) -> Vec<ScenarioSpec> {
    CLIENT_LADDER
        .iter()
        .map(|&k| ladder_spec(k, LADDER_TOTAL_SAMPLES / k, LADDER_SHARED_CLASSES, base_seed))
        .collect()
}

/// IID scenarios with `K = 4` and `{0,1,2,4,8,12,14}` shared classes; only
/// the class assignment changes along the ladder.
pub fn effect_of_shared_classes_scenarios(base_seed: u64) -> Vec<ScenarioSpec> {
    SHARED_LADDER
        .iter()
        .map(|&s| ladder_spec(4, LADDER_TOTAL_SAMPLES / 4, s, base_seed))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct DumpManifest {
    spec: ScenarioSpec,
    registry: ClassRegistry,
    truth: GroundTruth,
    attempts: u64,
    stats: ScenarioStats,
}

fn write_matrix(path: &Path, t: &Tensor2) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in 0..t.rows() {
        w.write_record(t.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix(path: &Path, cols: usize) -> Result<Tensor2> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() != cols {
            return config(format!("{}: expected {cols} columns, found {}", path.display(), rec.len()));
        }
        for field in rec.iter() {
            data.push(
                field
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            );
        }
        rows += 1;
    }
    Tensor2::from_vec(rows, cols, data)
}

fn set_files(dir: &Path, name: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    (dir.join(format!("{name}_x.csv")), dir.join(format!("{name}_y.csv")))
}

/// Writes every split as `<split>_x.csv` / `<split>_y.csv` plus `manifest.json`.
pub fn dump_scenario(scenario: &Scenario, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut sets: Vec<(String, &LabeledSet)> = vec![("test".into(), &scenario.test), ("stats".into(), &scenario.stats)];
    for (k, c) in scenario.clients.iter().enumerate() {
        sets.push((format!("client{k}_train"), &c.train));
        sets.push((format!("client{k}_val"), &c.val));
    }
    for (name, set) in sets {
        let (xp, yp) = set_files(dir, &name);
        write_matrix(&xp, &set.x)?;
        write_matrix(&yp, &set.y)?;
    }
    let manifest = DumpManifest {
        spec: scenario.spec.clone(),
        registry: scenario.registry.clone(),
        truth: scenario.truth.clone(),
        attempts: scenario.attempts,
        stats: scenario.stats(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a directory written by [`dump_scenario`].
pub fn load_scenario(dir: &Path) -> Result<Scenario> {
    let manifest: DumpManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let (d, m) = (manifest.spec.d, manifest.spec.num_classes);
    let load = |name: &str, split: Split| -> Result<LabeledSet> {
        let (xp, yp) = set_files(dir, name);
        LabeledSet::new(read_matrix(&xp, d)?, read_matrix(&yp, m)?, split)
    };
    let clients = (0..manifest.spec.num_clients)
        .map(|k| {
            Ok(ClientData {
                train: load(&format!("client{k}_train"), Split::Train)?,
                val: load(&format!("client{k}_val"), Split::Val)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scenario {
        test: load("test", Split::Test)?,
        stats: load("stats", Split::Stats)?,
        clients,
        spec: manifest.spec,
        registry: manifest.registry,
        truth: manifest.truth,
        attempts: manifest.attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ScenarioSpec {
        ScenarioSpec {
            n_per_client: 200,
            n_test: 300,
            ..ScenarioSpec::generated(3, 1, 1, 3, 42)
        }
    }

    #[test]
    fn generator_assignment_matches_two_client_example() {
        let spec = ScenarioSpec::generated(2, 1, 0, 2, 0);
        let reg = spec.registry().unwrap();
        assert_eq!(reg.client_classes(0).unwrap(), &[0, 1]);
        assert_eq!(reg.client_classes(1).unwrap(), &[1, 2]);
    }

    #[test]
    fn generated_assignment_regimes() {
        let reg = ScenarioSpec::generated(4, 1, 3, 4, 0).registry().unwrap();
        let p = reg.sharing_profile();
        assert_eq!(p.shared_by_all.len(), 1);
        assert_eq!(p.partially_shared.len(), 3);
        assert_eq!(p.unique.len(), 4);
        assert!(ScenarioSpec::generated(2, 1, 1, 2, 0).registry().is_err());
        assert!(ScenarioSpec::generated(4, 0, 0, 2, 0).registry().is_err());
    }

    #[test]
    fn explicit_assignment_by_name() {
        let spec = ScenarioSpec {
            assignment: Assignment::Explicit {
                clients: vec![vec!["b".into(), "a".into()], vec!["c".into()]],
            },
            class_names: Some(vec!["a".into(), "b".into(), "c".into()]),
            ..ScenarioSpec::generated(2, 0, 0, 3, 0)
        };
        let reg = spec.registry().unwrap();
        assert_eq!(reg.client_classes(0).unwrap(), &[0, 1]);
        let bad = ScenarioSpec {
            assignment: Assignment::Explicit {
                clients: vec![vec!["a".into(), "z".into()], vec!["c".into()]],
            },
            ..spec
        };
        assert!(bad.registry().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&ScenarioSpec { seed: 43, ..small_spec() }).unwrap();
        assert_ne!(a.test.x, c.test.x);
    }

    #[test]
    fn noiseless_labels_follow_the_linear_rule() {
        let s = generate_synthetic(&ScenarioSpec {
            label_noise: 0.0,
            ..small_spec()
        })
        .unwrap();
        for cd in &s.clients {
            for r in 0..cd.train.len() {
                for c in 0..s.spec.num_classes {
                    assert_eq!(cd.train.y.get(r, c), s.truth.label(cd.train.x.row(r), c));
                }
            }
        }
    }

    #[test]
    fn splits_have_both_labels_and_expected_sizes() {
        let s = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(s.test.len(), 300);
        assert_eq!(s.stats.len(), STATS_SPLIT_SIZE);
        for cd in &s.clients {
            assert_eq!(cd.train.len(), 160);
            assert_eq!(cd.val.len(), 40);
            for c in 0..s.spec.num_classes {
                assert!(cd.train.has_both_labels(c));
                assert!(cd.val.has_both_labels(c));
            }
        }
    }

    #[test]
    fn impossible_split_fails_with_diagnostic() {
        // A two-sample validation split almost never holds both labels for
        // all twelve classes.
        let spec = ScenarioSpec {
            n_per_client: 10,
            val_fraction: 0.2,
            ..ScenarioSpec::generated(2, 12, 0, 0, 5)
        };
        match generate_synthetic(&spec) {
            Err(Error::Data(msg)) => assert!(msg.contains("100 attempts"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn mask_missing_as_negative_contract() {
        let y = Tensor2::from_rows(&[[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]]).unwrap();
        assert_eq!(mask_missing_as_negative(&y, &[0, 1, 2]), y);
        let m = mask_missing_as_negative(&y, &[0]);
        assert_eq!(m.column_sums(), vec![1.0, 0.0, 0.0]);
        let m = mask_missing_as_negative(&y, &[1, 2]);
        assert_eq!(m.column_sums(), vec![0.0, 2.0, 1.0]);
    }

    #[test]
    fn views_restrict_or_mask() {
        let s = generate_synthetic(&small_spec()).unwrap();
        let classes = s.registry.client_classes(1).unwrap();
        let (train, _) = s.clients[1].local_view(classes);
        assert_eq!(train.y.cols(), classes.len());
        let (train_m, _) = s.clients[1].missing_as_negative_view(classes);
        assert_eq!(train_m.y.cols(), s.spec.num_classes);
        for c in 0..s.spec.num_classes {
            let sum = train_m.y.column(c).iter().sum::<f64>();
            if !classes.contains(&c) {
                assert_eq!(sum, 0.0);
            }
        }
    }

    #[test]
    fn client_ladder_keeps_total_samples() {
        let specs = effect_of_clients_scenarios(1);
        assert_eq!(specs.iter().map(|s| s.num_clients).collect::<Vec<_>>(), CLIENT_LADDER);
        for s in &specs {
            assert_eq!(s.n_per_client * s.num_clients, LADDER_TOTAL_SAMPLES);
            let reg = s.registry().unwrap();
            assert_eq!(reg.num_classes(), LADDER_CLASSES);
        }
        assert_eq!(specs[0].n_per_client, LADDER_TOTAL_SAMPLES / 2);
        assert_eq!(specs[6].n_per_client, LADDER_TOTAL_SAMPLES / 10);
    }

    #[test]
    fn shared_ladder_only_changes_masking() {
        let specs = effect_of_shared_classes_scenarios(3);
        assert_eq!(specs.len(), 7);
        let first = specs.first().unwrap().registry().unwrap().sharing_profile();
        assert!(first.shared_by_all.is_empty());
        let last = specs.last().unwrap().registry().unwrap().sharing_profile();
        assert!(last.unique.is_empty());
        let small: Vec<ScenarioSpec> = specs
            .into_iter()
            .map(|s| ScenarioSpec { n_per_client: 100, n_test: 200, label_noise: 0.0, ..s })
            .collect();
        let base = generate_synthetic(&small[0]).unwrap();
        for s in &small[1..] {
            assert_eq!(s.num_clients, 4);
            let g = generate_synthetic(s).unwrap();
            assert_eq!(g.test.x, base.test.x);
            for (a, b) in g.clients.iter().zip(&base.clients) {
                assert_eq!(a.train.x, b.train.x);
                assert_eq!(a.val.x, b.val.x);
            }
        }
    }

    #[test]
    fn dump_and_load_roundtrip() {
        let s = generate_synthetic(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_scenario(&s, dir.path()).unwrap();
        let back = load_scenario(dir.path()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn spec_validation() {
        assert!(ScenarioSpec { label_noise: 0.5, ..small_spec() }.validate().is_err());
        assert!(ScenarioSpec { num_clients: 0, ..small_spec() }.validate().is_err());
        assert!(ScenarioSpec { n_per_client: 3, ..small_spec() }.validate().is_err());
        assert!(ScenarioSpec { skew: Skew::FeatureShift(-1.0), ..small_spec() }.validate().is_err());
        small_spec().validate().unwrap();
    }
}
