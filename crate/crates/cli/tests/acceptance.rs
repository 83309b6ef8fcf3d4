//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedsurg_cli::{cmd_ablation, cmd_run, AblationArgs, Overrides};
use fedsurg_core::aggregation::{surgical_head_update, HeadRef};
use fedsurg_core::data::{generate_synthetic, ScenarioSpec};
use fedsurg_core::metrics::{auroc, evaluate};
use fedsurg_core::model::init_model;
use fedsurg_core::nn::{backward, forward, masked_bce_loss, Architecture, Mode};
use fedsurg_core::registry::ClassRegistry;
use fedsurg_core::seeds;
use fedsurg_core::simulator::{run, RunOptions, Simulation};
use fedsurg_core::suite::AblationKind;
use fedsurg_core::tensor::Tensor2;
use fedsurg_core::{ExperimentConfig, Method};
use rand::Rng;

/// Convergence scenario: K=4, M=8 with 2 shared, 2 partially shared and 4
/// unique classes.
const CONVERGENCE_CONFIG: &str = r#"
method = "surgical"
strategy = "fedavg"
T = 100
E = 1
lr = 0.05
warmup_lr = 0.05

[scenario]
K = 4
M = 8
d = 20
n_per_client = 2000
label_noise = 0.05
seed = 0
assignment = { shared = 2, partial = 2, unique = 4 }
"#;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let pass = out.pass && in_time;
    println!(
        "[{}] {id} {name}: {} ({:.1}s, limit {}s)",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    pass
}

fn convergence_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(CONVERGENCE_CONFIG).unwrap()
}

fn fedavg_reduction() -> Outcome {
    let spec = ScenarioSpec {
        n_per_client: 400,
        n_test: 500,
        ..ScenarioSpec::generated(4, 6, 0, 0, 1)
    };
    let mut base = ExperimentConfig::new(Method::Surgical, spec);
    base.total_epochs = 20;
    let mut vanilla = base.clone();
    vanilla.method = Method::VanillaFl;
    let mut a = Simulation::new(base, RunOptions::default()).unwrap();
    let mut b = Simulation::new(vanilla, RunOptions::default()).unwrap();
    let mut identical = 0;
    for _ in 0..20 {
        a.step_round().unwrap();
        b.step_round().unwrap();
        if a.global().is_some() && a.global() == b.global() {
            identical += 1;
        }
    }
    Outcome {
        pass: identical == 20,
        detail: format!("{identical}/20 rounds bit-identical"),
    }
}

fn random_case(rng: &mut seeds::Rng) -> (ClassRegistry, Vec<(Tensor2, Vec<f64>)>, usize) {
    let m = rng.random_range(1..=10);
    let k = rng.random_range(1..=8);
    let n = rng.random_range(1..=6);
    let mut lists: Vec<Vec<usize>> = (0..k)
        .map(|_| (0..m).filter(|_| rng.random_bool(0.4)).collect())
        .collect();
    for c in 0..m {
        if !lists.iter().any(|l| l.contains(&c)) {
            let owner = rng.random_range(0..k);
            lists[owner].push(c);
        }
    }
    for l in lists.iter_mut() {
        if l.is_empty() {
            l.push(rng.random_range(0..m));
        }
    }
    let registry = ClassRegistry::from_indices(m, lists).unwrap();
    let heads = (0..k)
        .map(|kk| {
            let width = registry.client_classes(kk).unwrap().len();
            let w = (0..n * width).map(|_| rng.random_range(-5.0..5.0)).collect();
            let b = (0..width).map(|_| rng.random_range(-5.0..5.0)).collect();
            (Tensor2::from_vec(n, width, w).unwrap(), b)
        })
        .collect();
    (registry, heads, n)
}

fn column_of(w: &Tensor2, b: &[f64], j: usize) -> Vec<f64> {
    let mut col = w.column(j);
    col.push(b[j]);
    col
}

fn head_algebra() -> Outcome {
    let mut rng = seeds::stream(2, "acceptance.heads", 0);
    let mut violations = 0;
    for _ in 0..1000 {
        let (registry, heads, n) = random_case(&mut rng);
        let refs: Vec<HeadRef<'_>> = heads.iter().map(|(w, b)| HeadRef { w, b }).collect();
        let (gw, gb) = surgical_head_update(&refs, &registry, None).unwrap();
        for c in 0..registry.num_classes() {
            let holders = registry.clients_with_class(c).unwrap();
            let cols: Vec<Vec<f64>> = holders
                .iter()
                .map(|&k| {
                    let j = registry.global_to_local(k, c).unwrap().unwrap();
                    column_of(&heads[k].0, &heads[k].1, j)
                })
                .collect();
            let mut mean = vec![0.0; n + 1];
            for col in &cols {
                mean.iter_mut().zip(col).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= holders.len() as f64);
            let got = column_of(&gw, &gb, c);
            if got != mean || (holders.len() == 1 && got != cols[0]) {
                violations += 1;
            }
        }
        // Shift every column of clients lacking class c; column c must not move.
        let c = rng.random_range(0..registry.num_classes());
        let shifted: Vec<(Tensor2, Vec<f64>)> = heads
            .iter()
            .enumerate()
            .map(|(k, (w, b))| {
                if registry.global_to_local(k, c).unwrap().is_some() {
                    (w.clone(), b.clone())
                } else {
                    (w.map(|v| v + 1.5), b.iter().map(|v| v - 2.5).collect())
                }
            })
            .collect();
        let refs: Vec<HeadRef<'_>> = shifted.iter().map(|(w, b)| HeadRef { w, b }).collect();
        let (sw, sb) = surgical_head_update(&refs, &registry, None).unwrap();
        if column_of(&sw, &sb, c) != column_of(&gw, &gb, c) {
            violations += 1;
        }
    }
    Outcome {
        pass: violations == 0,
        detail: format!("1000 random registries, {violations} violations"),
    }
}

fn gradient_check() -> Outcome {
    let arch = Architecture::from_descriptors(4, &["dense:6", "relu"]).unwrap();
    let params = init_model(&arch, &[0, 1, 2], 3, 5).unwrap();
    let mut rng = seeds::stream(3, "acceptance.gradient", 0);
    let x = Tensor2::from_vec(8, 4, (0..32).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let y = Tensor2::from_vec(8, 3, (0..24).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect()).unwrap();
    let mask = [0, 1, 2];
    let loss = |p: &fedsurg_core::model::ParamSet| {
        masked_bce_loss(&forward(p, &x, Mode::Train).unwrap().output, &y, &mask).unwrap()
    };
    let analytic = backward(&params, &forward(&params, &x, Mode::Train).unwrap(), &y, &mask)
        .unwrap()
        .flatten();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = params.clone();
        *plus.trainable_value_mut(i).unwrap() += h;
        let mut minus = params.clone();
        *minus.trainable_value_mut(i).unwrap() -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let scale = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / scale);
    }
    Outcome {
        pass: worst < 1e-4,
        detail: format!("{} parameters, max relative error {worst:.2e}", analytic.len()),
    }
}

fn auroc_oracle() -> Outcome {
    let mut rng = seeds::stream(4, "acceptance.auroc", 0);
    let mut mismatches = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..=64);
        let levels = rng.random_range(1..=8);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.125).collect();
        let labels: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let (mut twice, mut pos, mut neg) = (0u64, 0u64, 0u64);
        for i in 0..n {
            if labels[i] == 1.0 {
                pos += 1;
                for j in 0..n {
                    if labels[j] == 0.0 {
                        twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                            std::cmp::Ordering::Greater => 2,
                            std::cmp::Ordering::Equal => 1,
                            std::cmp::Ordering::Less => 0,
                        };
                    }
                }
            } else {
                neg += 1;
            }
        }
        let brute = (pos > 0 && neg > 0).then(|| twice as f64 / (2 * pos * neg) as f64);
        let fast = auroc(&scores, &labels);
        if fast != brute {
            mismatches += 1;
            continue;
        }
        if let Some(a) = fast {
            let flipped: Vec<f64> = labels.iter().map(|v| 1.0 - v).collect();
            let b = auroc(&scores, &flipped).unwrap();
            let cubed: Vec<f64> = scores.iter().map(|s| 2.0 * s * s * s + 1.0).collect();
            if (a + b - 1.0).abs() > 1e-15 || auroc(&cubed, &labels) != Some(a) {
                mismatches += 1;
            }
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("500 tied instances, {mismatches} mismatches"),
    }
}

fn convergence() -> Outcome {
    let out = run(&convergence_config(), RunOptions::default()).unwrap();
    let mean = out.evaluation.global.as_ref().and_then(|g| g.mean_auroc).unwrap_or(0.0);
    let r5 = out.reports[4].mean_val_loss;
    let r100 = out.reports[99].mean_val_loss;
    Outcome {
        pass: mean >= 0.90 && r100 < r5,
        detail: format!("mean AUROC {mean:.4} (>= 0.90), val BCE round 5 {r5:.4} -> round 100 {r100:.4}"),
    }
}

fn unique_class_pattern() -> Outcome {
    let mut sums = [0.0; 3];
    let methods = [Method::Surgical, Method::VanillaFl, Method::FlPartialLoss];
    for seed in 0..5 {
        let base = convergence_config().with_seed(seed);
        for (i, m) in methods.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.method = *m;
            let out = run(&cfg, RunOptions::default()).unwrap();
            sums[i] += out.evaluation.global.unwrap().group_mean("unique").unwrap();
        }
    }
    let [s, v, p] = sums.map(|x| x / 5.0);
    Outcome {
        pass: s - v >= 0.05 && s >= p - 0.02,
        detail: format!("unique-class AUROC surgical {s:.4}, vanilla_fl {v:.4}, fl_partial_loss {p:.4}"),
    }
}

fn ablation_shape(dir: &Path) -> Outcome {
    let args = AblationArgs {
        kind: AblationKind::Clients,
        repeats: 3,
        template: None,
        total_epochs: None,
        lr: Some(0.05),
    };
    cmd_ablation(&args, dir, &Overrides::default()).unwrap();
    let mut rd = csv::Reader::from_path(dir.join("summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    let value = |k: &str, m: &str| -> f64 {
        rows.iter()
            .find(|r| &r[2] == k && &r[3] == m)
            .map(|r| r[5].parse().unwrap())
            .unwrap()
    };
    let mut worst_gap = f64::INFINITY;
    let mut detail = Vec::new();
    for k in AblationKind::Clients.ladder() {
        let k = k.to_string();
        let gap = value(&k, "surgical") - value(&k, "vanilla_fl");
        worst_gap = worst_gap.min(gap);
        detail.push(format!("K={k}:{gap:+.3}"));
    }
    Outcome {
        pass: rows.len() == 28 && worst_gap >= 0.0,
        detail: format!("surgical - vanilla_fl mean AUROC {}", detail.join(" ")),
    }
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = dir.join("convergence.toml");
    fs::write(&cfg, CONVERGENCE_CONFIG).unwrap();
    let seq = dir.join("sequential");
    let par = dir.join("parallel");
    let again = dir.join("again");
    cmd_run(&cfg, &seq, &Overrides::default()).unwrap();
    cmd_run(&cfg, &again, &Overrides::default()).unwrap();
    cmd_run(&cfg, &par, &Overrides { seed: None, parallel_clients: 4 }).unwrap();
    let read = |d: &Path| fs::read(d.join("rounds.csv")).unwrap();
    let base = read(&seq);
    let rerun = read(&again) == base;
    let parallel = read(&par) == base;
    Outcome {
        pass: rerun && parallel,
        detail: format!("rerun identical: {rerun}, --parallel-clients 4 identical: {parallel}"),
    }
}

fn pfl_undefined() -> Outcome {
    let spec = ScenarioSpec {
        n_per_client: 300,
        n_test: 500,
        ..ScenarioSpec::generated(3, 1, 1, 3, 6)
    };
    let mut cfg = ExperimentConfig::new(Method::Pfl, spec.clone());
    cfg.total_epochs = 5;
    let out = run(&cfg, RunOptions::default()).unwrap();
    let scenario = generate_synthetic(&spec).unwrap();
    let all: Vec<usize> = (0..spec.num_classes).collect();
    let mut full_undefined = out.global.is_none() && out.evaluation.global.is_none();
    let mut local_defined = true;
    for (k, (p, heads)) in out.client_models.iter().zip(&out.client_head_classes).enumerate() {
        let full = evaluate(p, heads, &scenario.test, &all, None).unwrap();
        full_undefined &= full.mean_auroc.is_none();
        full_undefined &= out.evaluation.client_full[k].mean_auroc.is_none();
        let local = evaluate(p, heads, &scenario.test, scenario.registry.client_classes(k).unwrap(), None).unwrap();
        local_defined &= local.mean_auroc.is_some();
    }
    full_undefined &= out.reports.iter().all(|r| r.mean_auroc.is_none());
    Outcome {
        pass: full_undefined && local_defined,
        detail: format!("full-class mean undefined: {full_undefined}, local-class mean defined: {local_defined}"),
    }
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let secs = Duration::from_secs;
    let results = [
        check(1, "FedAvg reduction", secs(30), fedavg_reduction),
        check(2, "per-class head algebra", secs(10), head_algebra),
        check(3, "gradient correctness", secs(10), gradient_check),
        check(4, "AUROC oracle", secs(5), auroc_oracle),
        check(5, "desk-scale convergence", secs(180), convergence),
        check(6, "unique-class pattern", secs(900), unique_class_pattern),
        check(7, "ablation shape (clients)", secs(1800), || ablation_shape(&dir.path().join("ablation"))),
        check(8, "determinism", secs(600), || determinism(dir.path())),
        check(9, "PFL undefined full-class mean", secs(60), pfl_undefined),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
