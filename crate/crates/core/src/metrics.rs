//! Per-class AUROC, class-group means and paired t-tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{contract, Result};
use crate::model::ParamSet;
use crate::nn::{forward, Mode};
use crate::registry::{ClassGroup, SharingProfile};

/// Rank-based (Mann-Whitney) AUROC with ties counted one half.
///
/// Returns `None` unless `labels` holds at least one 0 and one 1.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, kept integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]].total_cmp(&scores[order[i]]).is_eq() {
            j += 1;
        }
        // Ranks i+1..=j share the average (i+1+j)/2.
        let twice_avg = (i + 1 + j) as u128;
        let pos = order[i..j].iter().filter(|&&k| labels[k] == 1.0).count() as u128;
        twice_rank_sum += pos * twice_avg;
        i = j;
    }
    let p = n_pos as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Some(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

fn mean_of_defined(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.into_iter().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Outcome of evaluating one model on a labeled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// AUROC per requested global class; `None` where undefined.
    pub per_class_auroc: BTreeMap<usize, Option<f64>>,
    /// Requested classes the model has no output for.
    pub uncovered: Vec<usize>,
    /// Requested classes whose labels lack a positive or a negative.
    pub excluded: Vec<usize>,
    /// Mean over defined classes; `None` if any class is uncovered.
    pub mean_auroc: Option<f64>,
    /// Means per class group, restricted to the evaluated subset.
    pub group_means: BTreeMap<String, Option<f64>>,
}

impl EvalResult {
    /// Mean AUROC over `classes` under the same rules as `mean_auroc`.
    pub fn subset_mean(&self, classes: &[usize]) -> Option<f64> {
        let mut values = Vec::new();
        for c in classes {
            match self.per_class_auroc.get(c) {
                None => continue,
                Some(_) if self.uncovered.contains(c) => return None,
                Some(Some(v)) => values.push(*v),
                Some(None) => {}
            }
        }
        mean_of_defined(values)
    }

    pub fn group_mean(&self, group: &str) -> Option<f64> {
        self.group_means.get(group).copied().flatten()
    }
}

/// Evaluates `model` in eval mode on `test` over the global classes `subset`.
///
/// `head_classes[j]` is the global class predicted by head column `j`; `test`
/// must carry labels for all global classes. Group means use `profile` when
/// given.
pub fn evaluate(
    model: &ParamSet,
    head_classes: &[usize],
    test: &LabeledSet,
    subset: &[usize],
    profile: Option<&SharingProfile>,
) -> Result<EvalResult> {
    if head_classes.len() != model.head_width() {
        return contract(format!(
            "{} head classes for a head of width {}",
            head_classes.len(),
            model.head_width()
        ));
    }
    if let Some(&c) = subset.iter().find(|&&c| c >= test.y.cols()) {
        return contract(format!("class {c} outside the {} labeled classes", test.y.cols()));
    }
    let fwd = forward(model, &test.x, Mode::Eval)?;
    let mut per_class = BTreeMap::new();
    let mut uncovered = Vec::new();
    let mut excluded = Vec::new();
    for &c in subset {
        let value = match head_classes.iter().position(|&h| h == c) {
            None => {
                uncovered.push(c);
                None
            }
            Some(j) => {
                let v = auroc(&fwd.logits.column(j), &test.y.column(c));
                if v.is_none() {
                    excluded.push(c);
                }
                v
            }
        };
        per_class.insert(c, value);
    }
    let mut result = EvalResult {
        per_class_auroc: per_class,
        uncovered,
        excluded,
        mean_auroc: None,
        group_means: BTreeMap::new(),
    };
    result.mean_auroc = result.subset_mean(subset);
    if let Some(profile) = profile {
        for group in [ClassGroup::SharedByAll, ClassGroup::PartiallyShared, ClassGroup::Unique] {
            let members: Vec<usize> = profile
                .group(group, test.y.cols())
                .into_iter()
                .filter(|c| subset.contains(c))
                .collect();
            result.group_means.insert(group.name().to_string(), result.subset_mean(&members));
        }
    }
    Ok(result)
}

/// Paired t-test result.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub df: usize,
    /// All differences were zero; `t = 0` and `p = 1` by convention.
    pub degenerate: bool,
}

/// Paired two-sided t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return contract(format!("paired samples of lengths {} and {}", a.len(), b.len()));
    }
    if a.len() < 2 {
        return contract("paired t-test needs at least two pairs");
    }
    let n = a.len();
    let df = n - 1;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Ok(TTest {
            t: 0.0,
            p: 1.0,
            df,
            degenerate: true,
        });
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / df as f64;
    let se = (var / n as f64).sqrt();
    let t = if se == 0.0 { mean.signum() * f64::INFINITY } else { mean / se };
    Ok(TTest {
        t,
        p: student_t_two_sided(t, df as f64),
        df,
        degenerate: false,
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Student's t cumulative distribution function.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * student_t_two_sided(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Significance marker for a p-value.
pub fn significance_stars(p: f64) -> &'static str {
    if p <= 0.001 {
        "***"
    } else if p <= 0.01 {
        "**"
    } else if p <= 0.05 {
        "*"
    } else {
        "ns"
    }
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, sd))
}
