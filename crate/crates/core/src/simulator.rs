//! Round-by-round orchestration of every training method.
//!
//! A [`Simulation`] owns the clients of one experiment. Each round every
//! client trains `E` local epochs, the server aggregates (for federated
//! methods), and a [`RoundReport`] records losses and global-model AUROC.
//! The round with the lowest mean local validation loss is kept as the
//! final model.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{server_update, BnReference, HeadRule, StrategyKind};
use crate::config::{ExperimentConfig, Method};
use crate::data::{generate_synthetic, LabeledSet, Scenario, ScenarioStats};
use crate::error::{self, Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{init_model, ClientState, LossMode, ParamSet};
use crate::nn::{forward, Mode};
use crate::registry::ClassRegistry;

/// Execution options that never change results.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads for client training within a round; 0 or 1 runs
    /// clients sequentially.
    pub parallel_clients: usize,
}

/// A global model and the round that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    pub params: ParamSet,
    pub round: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based round index.
    pub round: usize,
    /// Mean minibatch loss of each client this round.
    pub train_loss: Vec<f64>,
    /// Validation loss of each client's model after the server update.
    pub val_loss: Vec<f64>,
    pub mean_val_loss: f64,
    /// Global-model test AUROC per class; all `None` without a global model.
    pub per_class_auroc: Vec<Option<f64>>,
    pub mean_auroc: Option<f64>,
    pub wall_time_secs: f64,
}

/// Mean AUROC of a client's model over its own classes, per client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    /// Round whose models were selected.
    pub best_round: usize,
    /// Global model on every class, with class-group means.
    pub global: Option<EvalResult>,
    /// Client `k`'s model (the global one when it exists) on `C_k`.
    pub local: Vec<EvalResult>,
    /// Each client's own model on every class; only for methods without a
    /// global model.
    pub client_full: Vec<EvalResult>,
}

impl RunEvaluation {
    /// Mean over clients of the local-class mean AUROC.
    pub fn local_mean(&self) -> Option<f64> {
        let values: Option<Vec<f64>> = self.local.iter().map(|e| e.mean_auroc).collect();
        let values = values?;
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    /// Per-class AUROCs pooled over clients' local evaluations, in client
    /// then class order.
    pub fn local_per_class(&self) -> Vec<Option<f64>> {
        self.local
            .iter()
            .flat_map(|e| e.per_class_auroc.values().copied())
            .collect()
    }
}

/// Everything produced by one run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub registry: ClassRegistry,
    pub scenario_stats: ScenarioStats,
    pub reports: Vec<RoundReport>,
    /// Selected global model, if the method produces one.
    pub global: Option<GlobalModel>,
    /// Client models from the selected round.
    pub client_models: Vec<ParamSet>,
    /// Global class of each head column, per client.
    pub client_head_classes: Vec<Vec<usize>>,
    pub evaluation: RunEvaluation,
}

#[derive(Clone, Debug)]
struct Snapshot {
    round: usize,
    mean_val_loss: f64,
    global: Option<ParamSet>,
    clients: Vec<ParamSet>,
}

/// Reference batch-norm statistics: batch statistics of one train-mode
/// forward pass of `params` over `set`.
pub fn reference_bn_statistics(params: &ParamSet, set: &LabeledSet) -> Result<Vec<BnReference>> {
    let fwd = forward(params, &set.x, Mode::Train)?;
    Ok(fwd
        .batch_statistics()
        .into_iter()
        .flatten()
        .map(|(running_mean, running_var)| BnReference {
            running_mean,
            running_var,
        })
        .collect())
}

/// A running experiment.
pub struct Simulation {
    config: ExperimentConfig,
    scenario: Scenario,
    clients: Vec<ClientState>,
    loss_mode: LossMode,
    head_rule: Option<HeadRule>,
    reference_bn: Option<Vec<BnReference>>,
    weights: Option<Vec<f64>>,
    global: Option<ParamSet>,
    round: usize,
    warmed_up: bool,
    reports: Vec<RoundReport>,
    best: Option<Snapshot>,
    pool: Option<rayon::ThreadPool>,
}

impl Simulation {
    /// Generates the scenario described by `config` and sets up clients.
    pub fn new(config: ExperimentConfig, options: RunOptions) -> Result<Self> {
        config.validate()?;
        let scenario = generate_synthetic(&config.scenario)?;
        Self::with_scenario(config, scenario, options)
    }

    /// Sets up clients on an existing scenario.
    pub fn with_scenario(config: ExperimentConfig, scenario: Scenario, options: RunOptions) -> Result<Self> {
        config.validate()?;
        if scenario.spec != config.scenario {
            return error::config("scenario does not match the configuration");
        }
        let arch = config.architecture()?;
        let registry = &scenario.registry;
        let m = registry.num_classes();
        let all: Vec<usize> = (0..m).collect();
        let init = config.seeds.init;
        let shuffle = config.seeds.shuffle;

        let (loss_mode, head_rule) = match config.method {
            Method::Surgical => (LossMode::LocalClasses, Some(HeadRule::Surgical)),
            Method::VanillaFl => (LossMode::AllClassesNegatives, Some(HeadRule::FedAvg)),
            Method::FlPartialLoss => (LossMode::LocalClasses, Some(HeadRule::FedAvg)),
            Method::Pfl => (LossMode::LocalClasses, Some(HeadRule::Personal)),
            Method::Centralized => (LossMode::AllClassesNegatives, None),
            Method::Individual => (LossMode::LocalClasses, None),
        };

        let mut clients = Vec::new();
        if config.method == Method::Centralized {
            let mut trains = Vec::new();
            let mut vals = Vec::new();
            for (k, data) in scenario.clients.iter().enumerate() {
                let (t, v) = data.missing_as_negative_view(registry.client_classes(k)?);
                trains.push(t);
                vals.push(v);
            }
            let train = LabeledSet::concat(&trains.iter().collect::<Vec<_>>())?;
            let val = LabeledSet::concat(&vals.iter().collect::<Vec<_>>())?;
            let params = init_model(&arch, &all, m, init)?;
            clients.push(ClientState::new(0, params, all.clone(), all.clone(), train, val, shuffle)?);
        } else {
            for (k, data) in scenario.clients.iter().enumerate() {
                let classes = registry.client_classes(k)?.to_vec();
                let (head_classes, (train, val)) = match config.method {
                    Method::VanillaFl | Method::FlPartialLoss => {
                        (all.clone(), data.missing_as_negative_view(&classes))
                    }
                    _ => (classes.clone(), data.local_view(&classes)),
                };
                let params = init_model(&arch, &head_classes, m, init)?;
                clients.push(ClientState::new(k, params, classes, head_classes, train, val, shuffle)?);
            }
        }

        let reference_bn = if config.method.is_federated() && config.strategy == StrategyKind::FedBnPlus {
            let initial = init_model(&arch, &all, m, init)?;
            Some(reference_bn_statistics(&initial, &scenario.stats)?)
        } else {
            None
        };
        let weights = config
            .sample_weighted
            .then(|| clients.iter().map(|c| c.train.len() as f64).collect());
        let pool = if options.parallel_clients > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(options.parallel_clients)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };

        Ok(Self {
            config,
            scenario,
            clients,
            loss_mode,
            head_rule,
            reference_bn,
            weights,
            global: None,
            round: 0,
            warmed_up: false,
            reports: Vec::new(),
            best: None,
            pool,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    /// Current global model, if any.
    pub fn global(&self) -> Option<&ParamSet> {
        self.global.as_ref()
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.config.rounds()
    }

    /// Runs `f` on every client, in parallel when a pool exists, and
    /// returns results in client order.
    fn on_clients<F>(&mut self, f: F) -> Result<Vec<f64>>
    where
        F: Fn(&mut ClientState) -> Result<f64> + Sync + Send,
    {
        let round = self.round + 1;
        let wrap = |k: usize, r: Result<f64>| {
            r.map_err(|e| match e {
                Error::Numeric { layer, message } => Error::Diverged {
                    round,
                    client: k,
                    message: format!("layer {layer}: {message}"),
                },
                other => other,
            })
        };
        let results: Vec<Result<f64>> = match &self.pool {
            Some(pool) => pool.install(|| self.clients.par_iter_mut().map(&f).collect()),
            None => self.clients.iter_mut().map(f).collect(),
        };
        results.into_iter().enumerate().map(|(k, r)| wrap(k, r)).collect()
    }

    fn warm_up(&mut self) -> Result<()> {
        if self.config.warmup_epochs > 0 {
            let (epochs, lr, bs, mode) = (
                self.config.warmup_epochs,
                self.config.warmup_lr,
                self.config.batch_size,
                self.loss_mode,
            );
            self.on_clients(|c| c.head_warmup(epochs, lr, bs, mode))?;
        }
        self.warmed_up = true;
        Ok(())
    }

    fn global_auroc(&self) -> Result<(Vec<Option<f64>>, Option<f64>)> {
        let m = self.scenario.registry.num_classes();
        match &self.global {
            None => Ok((vec![None; m], None)),
            Some(g) => {
                let all: Vec<usize> = (0..m).collect();
                let r = evaluate(g, &all, &self.scenario.test, &all, None)?;
                Ok((r.per_class_auroc.values().copied().collect(), r.mean_auroc))
            }
        }
    }

    /// Runs one round: local training, aggregation, validation, report.
    pub fn step_round(&mut self) -> Result<&RoundReport> {
        if self.is_finished() {
            return error::config("all rounds have already run");
        }
        let started = Instant::now();
        if !self.warmed_up {
            self.warm_up()?;
        }
        let (e, lr, bs, mode) = (
            self.config.epochs_per_round,
            self.config.lr,
            self.config.batch_size,
            self.loss_mode,
        );
        let train_loss = self.on_clients(|c| c.local_train(e, lr, bs, mode))?;

        match self.head_rule {
            Some(rule) => {
                let params: Vec<&ParamSet> = self.clients.iter().map(|c| &c.params).collect();
                let update = server_update(
                    &params,
                    &self.scenario.registry,
                    self.config.strategy,
                    rule,
                    self.reference_bn.as_deref(),
                    self.weights.as_deref(),
                )?;
                for (c, p) in self.clients.iter_mut().zip(update.clients) {
                    c.params = p;
                }
                self.global = update.global;
            }
            None if self.config.method == Method::Centralized => {
                self.global = Some(self.clients[0].params.clone());
            }
            None => {}
        }
        self.round += 1;

        let val_loss = self.on_clients(|c| c.validation_loss(mode))?;
        let mean_val_loss = val_loss.iter().sum::<f64>() / val_loss.len() as f64;
        let (per_class_auroc, mean_auroc) = self.global_auroc()?;

        if self.best.as_ref().is_none_or(|b| mean_val_loss < b.mean_val_loss) {
            self.best = Some(Snapshot {
                round: self.round,
                mean_val_loss,
                global: self.global.clone(),
                clients: self.clients.iter().map(|c| c.params.clone()).collect(),
            });
        }
        self.reports.push(RoundReport {
            round: self.round,
            train_loss,
            val_loss,
            mean_val_loss,
            per_class_auroc,
            mean_auroc,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
        Ok(self.reports.last().expect("just pushed"))
    }

    /// Runs the remaining rounds, trains the `T mod E` leftover epochs, and
    /// evaluates the selected models.
    pub fn finish(mut self) -> Result<RunOutcome> {
        while !self.is_finished() {
            self.step_round()?;
        }
        let leftover = self.config.total_epochs - self.config.rounds() * self.config.epochs_per_round;
        if leftover > 0 {
            let (lr, bs, mode) = (self.config.lr, self.config.batch_size, self.loss_mode);
            self.on_clients(|c| c.local_train(leftover, lr, bs, mode))?;
        }
        let best = self.best.take().expect("at least one round runs");
        let client_head_classes: Vec<Vec<usize>> = self.clients.iter().map(|c| c.head_classes.clone()).collect();
        let evaluation = evaluate_selection(
            &self.scenario,
            best.round,
            best.global.as_ref(),
            &best.clients,
            &client_head_classes,
        )?;
        Ok(RunOutcome {
            scenario_stats: self.scenario.stats(),
            registry: self.scenario.registry.clone(),
            config: self.config,
            reports: self.reports,
            global: best.global.map(|params| GlobalModel {
                params,
                round: best.round,
            }),
            client_models: best.clients,
            client_head_classes,
            evaluation,
        })
    }
}

fn evaluate_selection(
    scenario: &Scenario,
    best_round: usize,
    global: Option<&ParamSet>,
    clients: &[ParamSet],
    head_classes: &[Vec<usize>],
) -> Result<RunEvaluation> {
    let registry = &scenario.registry;
    let m = registry.num_classes();
    let all: Vec<usize> = (0..m).collect();
    let profile = registry.sharing_profile();
    let test = &scenario.test;
    let mut out = RunEvaluation {
        best_round,
        global: None,
        local: Vec::new(),
        client_full: Vec::new(),
    };
    match global {
        Some(g) => {
            out.global = Some(evaluate(g, &all, test, &all, Some(&profile))?);
            for k in 0..registry.num_clients() {
                out.local.push(evaluate(g, &all, test, registry.client_classes(k)?, Some(&profile))?);
            }
        }
        None => {
            for (k, (p, heads)) in clients.iter().zip(head_classes).enumerate() {
                out.local.push(evaluate(p, heads, test, registry.client_classes(k)?, Some(&profile))?);
                out.client_full.push(evaluate(p, heads, test, &all, Some(&profile))?);
            }
        }
    }
    Ok(out)
}

/// Runs every round of `config` on a freshly generated scenario.
pub fn run(config: &ExperimentConfig, options: RunOptions) -> Result<RunOutcome> {
    Simulation::new(config.clone(), options)?.finish()
}

/// Runs a surgical-aggregation experiment.
pub fn run_surgical(config: &ExperimentConfig, options: RunOptions) -> Result<RunOutcome> {
    if config.method != Method::Surgical {
        return error::config(format!("run_surgical called with method {}", config.method));
    }
    run(config, options)
}

/// Runs one of the baseline methods.
pub fn run_baseline(config: &ExperimentConfig, options: RunOptions) -> Result<RunOutcome> {
    if config.method == Method::Surgical {
        return error::config("run_baseline called with method surgical");
    }
    run(config, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ScenarioSpec;

    fn small(method: Method, k: usize, shared: usize, unique: usize) -> ExperimentConfig {
        let spec = ScenarioSpec {
            n_per_client: 120,
            d: 6,
            n_test: 200,
            ..ScenarioSpec::generated(k, shared, 0, unique, 3)
        };
        let mut c = ExperimentConfig::new(method, spec);
        c.total_epochs = 4;
        c.warmup_epochs = 1;
        c
    }

    #[test]
    fn floor_round_count() {
        let mut c = small(Method::Surgical, 2, 1, 2);
        c.total_epochs = 10;
        c.epochs_per_round = 3;
        let out = run(&c, RunOptions::default()).unwrap();
        assert_eq!(out.reports.len(), 3);
        assert_eq!(out.reports.iter().map(|r| r.round).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn surgical_heads_keep_local_width() {
        let c = small(Method::Surgical, 3, 1, 3);
        let mut sim = Simulation::new(c, RunOptions::default()).unwrap();
        sim.step_round().unwrap();
        for (k, client) in sim.clients().iter().enumerate() {
            let width = sim.scenario().registry.client_classes(k).unwrap().len();
            assert_eq!(client.params.head_width(), width);
        }
        assert_eq!(sim.global().unwrap().head_width(), 4);
    }

    #[test]
    fn pfl_has_no_global_model() {
        let out = run(&small(Method::Pfl, 2, 1, 2), RunOptions::default()).unwrap();
        assert!(out.global.is_none());
        assert!(out.evaluation.global.is_none());
        assert!(out.reports.iter().all(|r| r.mean_auroc.is_none()));
        for e in &out.evaluation.client_full {
            assert_eq!(e.mean_auroc, None);
        }
        assert!(out.evaluation.local.iter().all(|e| e.mean_auroc.is_some()));
    }

    #[test]
    fn centralized_single_client_matches_individual() {
        let a = run(&small(Method::Centralized, 1, 2, 0), RunOptions::default()).unwrap();
        let b = run(&small(Method::Individual, 1, 2, 0), RunOptions::default()).unwrap();
        assert_eq!(a.client_models, b.client_models);
        assert_eq!(a.reports.len(), b.reports.len());
        for (x, y) in a.reports.iter().zip(&b.reports) {
            assert_eq!(x.train_loss, y.train_loss);
            assert_eq!(x.val_loss, y.val_loss);
        }
    }

    #[test]
    fn surgical_single_client_one_epoch_is_centralized() {
        let mut s = small(Method::Surgical, 1, 2, 0);
        s.total_epochs = 1;
        let mut c = s.clone();
        c.method = Method::Centralized;
        let a = run(&s, RunOptions::default()).unwrap();
        let b = run(&c, RunOptions::default()).unwrap();
        assert_eq!(a.global.unwrap().params, b.global.unwrap().params);
    }

    #[test]
    fn partial_and_vanilla_agree_when_homogeneous() {
        let a = run(&small(Method::VanillaFl, 3, 2, 0), RunOptions::default()).unwrap();
        let b = run(&small(Method::FlPartialLoss, 3, 2, 0), RunOptions::default()).unwrap();
        assert_eq!(a.client_models, b.client_models);
        assert_eq!(a.reports[3].val_loss, b.reports[3].val_loss);
    }

    #[test]
    fn parallel_matches_sequential() {
        let c = small(Method::Surgical, 3, 1, 3);
        let a = run(&c, RunOptions::default()).unwrap();
        let b = run(&c, RunOptions { parallel_clients: 3 }).unwrap();
        assert_eq!(a.client_models, b.client_models);
        for (x, y) in a.reports.iter().zip(&b.reports) {
            assert_eq!(x.val_loss, y.val_loss);
            assert_eq!(x.per_class_auroc, y.per_class_auroc);
        }
    }

    #[test]
    fn best_round_has_lowest_validation_loss() {
        let out = run(&small(Method::Surgical, 2, 1, 2), RunOptions::default()).unwrap();
        let best = out.evaluation.best_round;
        let min = out.reports.iter().map(|r| r.mean_val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.reports[best - 1].mean_val_loss, min);
        assert_eq!(out.global.unwrap().round, best);
    }

    #[test]
    fn divergence_names_round_and_client() {
        let mut c = small(Method::Surgical, 2, 1, 2);
        c.lr = 1e308;
        c.warmup_epochs = 0;
        match run(&c, RunOptions::default()) {
            Err(Error::Diverged { round, .. }) => assert_eq!(round, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn fedbn_plus_global_uses_reference_stats() {
        let mut c = small(Method::Surgical, 2, 1, 2);
        c.strategy = StrategyKind::FedBnPlus;
        let mut sim = Simulation::new(c, RunOptions::default()).unwrap();
        sim.step_round().unwrap();
        let g = sim.global().unwrap().batchnorm_layers().next().unwrap().clone();
        let arch = sim.config().architecture().unwrap();
        let init = init_model(&arch, &[0, 1, 2], 3, sim.config().seeds.init).unwrap();
        let reference = reference_bn_statistics(&init, &sim.scenario().stats).unwrap();
        assert_eq!(g.running_mean, reference[0].running_mean);
        assert_eq!(g.running_var, reference[0].running_var);
        let own = sim.clients()[0].params.batchnorm_layers().next().unwrap();
        assert_ne!(own.running_mean, g.running_mean);
    }
}
