//! Multi-method comparisons and the two ablation ladders.

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::data::{
    effect_of_clients_scenarios, effect_of_shared_classes_scenarios, ScenarioSpec, CLIENT_LADDER, SHARED_LADDER,
};
use crate::error::{config, Error, Result};
use crate::metrics::{mean_sd, paired_ttest, TTest};
use crate::registry::{ClassGroup, ClassRegistry};
use crate::simulator::{run, RunOptions, RunOutcome};

/// A column group of the comparison table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupSpec {
    /// `all`, `shared_by_all`, `partially_shared`, `unique` or `local`.
    Named(String),
    /// Named set of classes, evaluated on the global model.
    Custom { name: String, classes: Vec<String> },
}

impl GroupSpec {
    pub fn name(&self) -> &str {
        match self {
            GroupSpec::Named(n) => n,
            GroupSpec::Custom { name, .. } => name,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            GroupSpec::Named(n) if n == "local" || ClassGroup::parse(n).is_some() => Ok(()),
            GroupSpec::Named(n) => config(format!("unknown class group `{n}`")),
            GroupSpec::Custom { classes, name } if classes.is_empty() => {
                config(format!("custom group `{name}` lists no classes"))
            }
            GroupSpec::Custom { .. } => Ok(()),
        }
    }
}

/// What a p-value pairs over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Per-class AUROCs (averaged over repeats).
    #[default]
    Classes,
    /// Per-repeat group means.
    Iterations,
}

fn default_groups() -> Vec<GroupSpec> {
    ["all", "shared_by_all", "partially_shared", "unique", "local"]
        .iter()
        .map(|s| GroupSpec::Named(s.to_string()))
        .collect()
}

fn default_repeats() -> usize {
    1
}

/// How members are compared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    /// Member name every other row is tested against.
    #[serde(default)]
    pub reference: Option<String>,
    #[serde(default = "default_groups")]
    pub groups: Vec<GroupSpec>,
    #[serde(default)]
    pub pairing: Pairing,
    /// Runs per member; repeat `r` uses seed `base + r`.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

impl Default for Comparison {
    fn default() -> Self {
        Self {
            reference: None,
            groups: default_groups(),
            pairing: Pairing::default(),
            repeats: default_repeats(),
        }
    }
}

impl Comparison {
    pub fn validate(&self, members: &[SuiteMember]) -> Result<()> {
        if self.repeats == 0 {
            return config("repeats must be >= 1");
        }
        for g in &self.groups {
            g.validate()?;
        }
        if let Some(r) = &self.reference {
            if !members.iter().any(|m| &m.name == r) {
                return config(format!("reference `{r}` is not a suite member"));
            }
        }
        let mut names: Vec<&str> = members.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return config("suite member names must be unique");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteMember {
    pub name: String,
    pub config: ExperimentConfig,
}

/// Values of one group for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupValues {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Extracts `group` from a finished run.
pub fn group_values(outcome: &RunOutcome, group: &GroupSpec) -> Result<GroupValues> {
    let eval = &outcome.evaluation;
    let from_global = |classes: &[usize]| -> GroupValues {
        match &eval.global {
            None => GroupValues {
                per_class: vec![None; classes.len()],
                mean: None,
            },
            Some(g) => GroupValues {
                per_class: classes
                    .iter()
                    .map(|c| g.per_class_auroc.get(c).copied().flatten())
                    .collect(),
                mean: g.subset_mean(classes),
            },
        }
    };
    let registry = &outcome.registry;
    Ok(match group {
        GroupSpec::Named(n) if n == "local" => GroupValues {
            per_class: eval.local_per_class(),
            mean: eval.local_mean(),
        },
        GroupSpec::Named(n) => {
            let g = ClassGroup::parse(n).ok_or_else(|| Error::Config(format!("unknown class group `{n}`")))?;
            from_global(&registry.sharing_profile().group(g, registry.num_classes()))
        }
        GroupSpec::Custom { classes, .. } => {
            let idx = class_indices(registry, classes)?;
            from_global(&idx)
        }
    })
}

fn class_indices(registry: &ClassRegistry, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            registry
                .class_index(n)
                .ok_or_else(|| Error::Config(format!("custom group names unknown class `{n}`")))
        })
        .collect()
}

/// One cell group of a comparison row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCell {
    pub group: String,
    /// Mean over repeats of the group mean.
    pub mean: Option<f64>,
    /// Spread over the pairing unit: classes or repeats.
    pub sd: Option<f64>,
    /// Test against the reference row; `None` for the reference itself and
    /// where too few pairs are defined.
    pub test: Option<TTest>,
    pub is_reference: bool,
}

impl GroupCell {
    /// `ref`, a significance marker, or `NA`.
    pub fn significance(&self) -> &'static str {
        if self.is_reference {
            "ref"
        } else {
            self.test.map_or("NA", |t| crate::metrics::significance_stars(t.p))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub name: String,
    pub method: Method,
    /// Failure diagnostic; cells are empty when set.
    pub error: Option<String>,
    pub cells: Vec<GroupCell>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteTable {
    pub groups: Vec<String>,
    pub rows: Vec<SuiteRow>,
}

impl SuiteTable {
    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }

    pub fn row(&self, name: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Per-member, per-group values over repeats.
struct MemberValues {
    groups: Vec<Vec<GroupValues>>,
}

fn average_per_class(runs: &[GroupValues]) -> Vec<Option<f64>> {
    let len = runs.first().map_or(0, |r| r.per_class.len());
    (0..len)
        .map(|i| {
            let vals: Option<Vec<f64>> = runs.iter().map(|r| r.per_class.get(i).copied().flatten()).collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

fn repeat_means(runs: &[GroupValues]) -> Option<Vec<f64>> {
    runs.iter().map(|r| r.mean).collect()
}

fn paired(a: &[Option<f64>], b: &[Option<f64>]) -> Option<TTest> {
    if a.len() != b.len() {
        return None;
    }
    let (x, y): (Vec<f64>, Vec<f64>) = a
        .iter()
        .zip(b)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .unzip();
    if x.len() < 2 {
        return None;
    }
    paired_ttest(&x, &y).ok()
}

fn build_cells(comparison: &Comparison, values: &MemberValues, reference: Option<&MemberValues>, is_ref: bool) -> Vec<GroupCell> {
    comparison
        .groups
        .iter()
        .enumerate()
        .map(|(gi, g)| {
            let runs = &values.groups[gi];
            let means = repeat_means(runs);
            let mean = means.as_ref().and_then(|m| mean_sd(m)).map(|(m, _)| m);
            let per_class = average_per_class(runs);
            let sd = match comparison.pairing {
                Pairing::Classes => {
                    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
                    mean_sd(&defined).map(|(_, s)| s)
                }
                Pairing::Iterations => means
                    .as_ref()
                    .filter(|m| m.len() >= 2)
                    .and_then(|m| mean_sd(m))
                    .map(|(_, s)| s),
            };
            let test = match (reference, is_ref) {
                (Some(r), false) => {
                    let rruns = &r.groups[gi];
                    match comparison.pairing {
                        Pairing::Classes => paired(&per_class, &average_per_class(rruns)),
                        Pairing::Iterations => {
                            let a: Vec<Option<f64>> = runs.iter().map(|v| v.mean).collect();
                            let b: Vec<Option<f64>> = rruns.iter().map(|v| v.mean).collect();
                            paired(&a, &b)
                        }
                    }
                }
                _ => None,
            };
            GroupCell {
                group: g.name().to_string(),
                mean,
                sd,
                test,
                is_reference: is_ref,
            }
        })
        .collect()
}

fn run_member(member: &SuiteMember, comparison: &Comparison, options: RunOptions) -> Result<MemberValues> {
    let base = member.config.scenario.seed;
    let mut groups = vec![Vec::new(); comparison.groups.len()];
    for r in 0..comparison.repeats {
        let cfg = member.config.clone().with_seed(base + r as u64);
        let outcome = run(&cfg, options)?;
        for (gi, g) in comparison.groups.iter().enumerate() {
            groups[gi].push(group_values(&outcome, g)?);
        }
    }
    Ok(MemberValues { groups })
}

/// Runs every member and builds the comparison table.
///
/// A failing member yields a row carrying its error; the others still run.
pub fn run_suite(members: &[SuiteMember], comparison: &Comparison, options: RunOptions) -> Result<SuiteTable> {
    comparison.validate(members)?;
    let results: Vec<Result<MemberValues>> = members.iter().map(|m| run_member(m, comparison, options)).collect();
    let reference = comparison.reference.as_ref().and_then(|name| {
        members
            .iter()
            .position(|m| &m.name == name)
            .and_then(|i| results[i].as_ref().ok())
    });
    let rows = members
        .iter()
        .zip(&results)
        .map(|(m, r)| {
            let is_ref = comparison.reference.as_deref() == Some(m.name.as_str());
            match r {
                Ok(values) => SuiteRow {
                    name: m.name.clone(),
                    method: m.config.method,
                    error: None,
                    cells: build_cells(comparison, values, reference, is_ref),
                },
                Err(e) => SuiteRow {
                    name: m.name.clone(),
                    method: m.config.method,
                    error: Some(e.to_string()),
                    cells: Vec::new(),
                },
            }
        })
        .collect();
    Ok(SuiteTable {
        groups: comparison.groups.iter().map(|g| g.name().to_string()).collect(),
        rows,
    })
}

/// Which ladder an ablation walks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Clients,
    SharedClasses,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Clients => "clients",
            AblationKind::SharedClasses => "shared_classes",
        }
    }

    /// Ladder positions: client counts or shared-class counts.
    pub fn ladder(self) -> &'static [usize] {
        match self {
            AblationKind::Clients => &CLIENT_LADDER,
            AblationKind::SharedClasses => &SHARED_LADDER,
        }
    }

    pub fn scenarios(self, seed: u64) -> Vec<ScenarioSpec> {
        match self {
            AblationKind::Clients => effect_of_clients_scenarios(seed),
            AblationKind::SharedClasses => effect_of_shared_classes_scenarios(seed),
        }
    }
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clients" => Ok(AblationKind::Clients),
            "shared_classes" => Ok(AblationKind::SharedClasses),
            _ => config(format!("unknown ablation kind `{s}` (expected clients or shared_classes)")),
        }
    }
}

/// Methods run at every ablation rung.
pub const ABLATION_METHODS: [Method; 4] = [
    Method::Surgical,
    Method::VanillaFl,
    Method::FlPartialLoss,
    Method::Centralized,
];

/// Suite members for one rung, built from the hyperparameters of `template`.
pub fn ablation_members(template: &ExperimentConfig, scenario: &ScenarioSpec) -> Vec<SuiteMember> {
    ABLATION_METHODS
        .iter()
        .map(|&method| {
            let mut config = template.clone();
            config.method = method;
            config.scenario = scenario.clone();
            config.seeds = crate::seeds::SeedBundle::from_base(scenario.seed);
            SuiteMember {
                name: method.name().to_string(),
                config,
            }
        })
        .collect()
}

/// One rung of an ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRung {
    /// `K` or the shared-class count.
    pub x: usize,
    pub members: Vec<SuiteMember>,
    pub table: SuiteTable,
}

/// Runs every rung of `kind` with `repeats` seeds starting at `seed`.
///
/// Rung tables compare against surgical, pairing over repeats.
pub fn run_ablation(
    kind: AblationKind,
    template: &ExperimentConfig,
    seed: u64,
    repeats: usize,
    options: RunOptions,
) -> Result<Vec<AblationRung>> {
    let comparison = Comparison {
        reference: Some(Method::Surgical.name().to_string()),
        groups: ["all", "shared_by_all", "unique"]
            .iter()
            .map(|s| GroupSpec::Named(s.to_string()))
            .collect(),
        pairing: Pairing::Iterations,
        repeats,
    };
    kind.scenarios(seed)
        .into_iter()
        .zip(kind.ladder())
        .map(|(scenario, &x)| {
            let members = ablation_members(template, &scenario);
            let table = run_suite(&members, &comparison, options)?;
            Ok(AblationRung { x, members, table })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn member(name: &str, method: Method) -> SuiteMember {
        let spec = ScenarioSpec {
            n_per_client: 100,
            d: 5,
            n_test: 200,
            ..ScenarioSpec::generated(3, 1, 0, 3, 9)
        };
        let mut config = ExperimentConfig::new(method, spec);
        config.total_epochs = 3;
        config.warmup_epochs = 1;
        SuiteMember {
            name: name.to_string(),
            config,
        }
    }

    #[test]
    fn empty_suite_is_empty_table() {
        let t = run_suite(&[], &Comparison::default(), RunOptions::default()).unwrap();
        assert!(t.rows.is_empty());
    }

    #[test]
    fn table_shape_and_reference_marker() {
        let members: Vec<SuiteMember> = [Method::Surgical, Method::VanillaFl, Method::FlPartialLoss, Method::Centralized]
            .iter()
            .map(|&m| member(m.name(), m))
            .collect();
        let comparison = Comparison {
            reference: Some("surgical".into()),
            ..Comparison::default()
        };
        let t = run_suite(&members, &comparison, RunOptions::default()).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.groups.len(), 5);
        let r = t.row("surgical").unwrap();
        assert!(r.cells.iter().all(|c| c.significance() == "ref"));
        let v = t.row("vanilla_fl").unwrap();
        assert!(v.cells[0].test.is_some());
        assert!(v.cells[0].mean.is_some());
        let again = run_suite(&members, &comparison, RunOptions::default()).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn failing_member_is_marked() {
        let mut bad = member("broken", Method::Surgical);
        bad.config.lr = 1e308;
        bad.config.warmup_epochs = 0;
        let good = member("ok", Method::Surgical);
        let t = run_suite(&[bad, good], &Comparison::default(), RunOptions::default()).unwrap();
        assert!(t.failed());
        assert!(t.rows[0].error.is_some());
        assert!(t.rows[1].error.is_none());
    }

    #[test]
    fn iterations_pairing_uses_repeats() {
        let members = vec![member("surgical", Method::Surgical), member("pfl", Method::Pfl)];
        let comparison = Comparison {
            reference: Some("surgical".into()),
            groups: vec![GroupSpec::Named("local".into()), GroupSpec::Named("all".into())],
            pairing: Pairing::Iterations,
            repeats: 2,
        };
        let t = run_suite(&members, &comparison, RunOptions::default()).unwrap();
        let pfl = t.row("pfl").unwrap();
        assert!(pfl.cells[0].test.is_some());
        assert!(pfl.cells[0].sd.is_some());
        assert_eq!(pfl.cells[1].mean, None);
        assert_eq!(pfl.cells[1].significance(), "NA");
    }

    #[test]
    fn rejects_bad_comparisons() {
        let members = vec![member("a", Method::Surgical)];
        let mut c = Comparison {
            reference: Some("zzz".into()),
            ..Comparison::default()
        };
        assert!(c.validate(&members).is_err());
        c.reference = None;
        c.groups = vec![GroupSpec::Named("nope".into())];
        assert!(c.validate(&members).is_err());
        c.groups = default_groups();
        c.repeats = 0;
        assert!(c.validate(&members).is_err());
        let dup = vec![member("a", Method::Surgical), member("a", Method::Pfl)];
        assert!(Comparison::default().validate(&dup).is_err());
    }

    #[test]
    fn ladders_have_seven_rungs() {
        assert_eq!(AblationKind::Clients.ladder(), &[2, 3, 4, 5, 6, 8, 10]);
        assert_eq!(AblationKind::SharedClasses.ladder(), &[0, 1, 2, 4, 8, 12, 14]);
        assert_eq!(AblationKind::Clients.scenarios(0).len(), 7);
        assert_eq!("clients".parse::<AblationKind>().unwrap(), AblationKind::Clients);
        assert!("servers".parse::<AblationKind>().is_err());
    }
}
