//! Server-side aggregation.
//!
//! The feature extractor is averaged conventionally (FedAvg, or FedBN+ with
//! reference batch-norm statistics for the global model). The classification
//! head is built class by class: the global column for class `c` is the mean
//! of the columns for `c` over exactly the clients holding `c`, and each
//! client gets back only the columns of its own classes.
//!
//! All means sum in client-index order. A mean over identical values returns
//! that value exactly.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::model::{FeatureLayer, ParamSet};
use crate::nn::BatchNormState;
use crate::registry::ClassRegistry;
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Average every feature tensor, batch-norm statistics included.
    #[serde(rename = "fedavg")]
    FedAvg,
    /// Average weights; batch-norm running statistics stay with each client
    /// and no global model exists.
    #[serde(rename = "fedbn")]
    FedBn,
    /// As FedBN, with reference statistics for the global model.
    #[serde(rename = "fedbn_plus")]
    FedBnPlus,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedBn => "fedbn",
            StrategyKind::FedBnPlus => "fedbn_plus",
        }
    }

    pub fn keeps_local_bn_stats(self) -> bool {
        !matches!(self, StrategyKind::FedAvg)
    }
}

/// How the server combines classification heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadRule {
    /// Per-class mean over the clients holding each class.
    Surgical,
    /// Elementwise mean of equally shaped full heads.
    FedAvg,
    /// Heads are never aggregated.
    Personal,
}

/// Running statistics assigned to one batch-norm layer of the global model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnReference {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

fn check_weights(weights: Option<&[f64]>, count: usize) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != count {
            return contract(format!("{} weights for {count} clients", w.len()));
        }
        if w.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
            return config("aggregation weights must be positive and finite");
        }
    }
    Ok(())
}

/// Mean of `values` in order; weighted when `weights` is given.
fn ordered_mean(values: &[f64], weights: Option<&[f64]>) -> f64 {
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return first;
    }
    match weights {
        None => values.iter().fold(0.0, |acc, &v| acc + v) / values.len() as f64,
        Some(w) => {
            let num = values.iter().zip(w).fold(0.0, |acc, (&v, &w)| acc + w * v);
            let den = w.iter().fold(0.0, |acc, &w| acc + w);
            num / den
        }
    }
}

/// Elementwise ordered mean of equally long slices.
fn average_slices(slices: &[&[f64]], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let len = slices[0].len();
    if slices.iter().any(|s| s.len() != len) {
        return contract("averaged tensors differ in length");
    }
    let mut column = vec![0.0; slices.len()];
    Ok((0..len)
        .map(|i| {
            for (dst, s) in column.iter_mut().zip(slices) {
                *dst = s[i];
            }
            ordered_mean(&column, weights)
        })
        .collect())
}

fn average_tensors(ts: &[&Tensor2], weights: Option<&[f64]>) -> Result<Tensor2> {
    let shape = ts[0].shape();
    if ts.iter().any(|t| t.shape() != shape) {
        return contract("averaged tensors differ in shape");
    }
    let slices: Vec<&[f64]> = ts.iter().map(|t| t.data()).collect();
    Tensor2::from_vec(shape.0, shape.1, average_slices(&slices, weights)?)
}

/// Elementwise mean of every feature tensor, batch-norm affine parameters
/// and running statistics included.
pub fn fedavg_feature(locals: &[&[FeatureLayer]], weights: Option<&[f64]>) -> Result<Vec<FeatureLayer>> {
    if locals.is_empty() {
        return contract("feature aggregation needs at least one client");
    }
    check_weights(weights, locals.len())?;
    let depth = locals[0].len();
    if locals.iter().any(|l| l.len() != depth) {
        return contract("clients disagree on feature extractor depth");
    }
    let mut out = Vec::with_capacity(depth);
    for i in 0..depth {
        let layers: Vec<&FeatureLayer> = locals.iter().map(|l| &l[i]).collect();
        out.push(match layers[0] {
            FeatureLayer::Dense { .. } => {
                let mut ws = Vec::with_capacity(layers.len());
                let mut bs = Vec::with_capacity(layers.len());
                for l in &layers {
                    match l {
                        FeatureLayer::Dense { w, b } => {
                            ws.push(w);
                            bs.push(b.as_slice());
                        }
                        _ => return contract(format!("layer {i} kind differs across clients")),
                    }
                }
                FeatureLayer::Dense {
                    w: average_tensors(&ws, weights)?,
                    b: average_slices(&bs, weights)?,
                }
            }
            FeatureLayer::BatchNorm(first) => {
                let mut states = Vec::with_capacity(layers.len());
                for l in &layers {
                    match l {
                        FeatureLayer::BatchNorm(s) => states.push(s),
                        _ => return contract(format!("layer {i} kind differs across clients")),
                    }
                }
                let field = |f: fn(&BatchNormState) -> &[f64]| -> Result<Vec<f64>> {
                    let v: Vec<&[f64]> = states.iter().map(|s| f(s)).collect();
                    average_slices(&v, weights)
                };
                FeatureLayer::BatchNorm(BatchNormState {
                    gamma: field(|s| &s.gamma)?,
                    beta: field(|s| &s.beta)?,
                    running_mean: field(|s| &s.running_mean)?,
                    running_var: field(|s| &s.running_var)?,
                    momentum: first.momentum,
                    epsilon: first.epsilon,
                })
            }
            FeatureLayer::Relu => {
                if layers.iter().any(|l| !matches!(l, FeatureLayer::Relu)) {
                    return contract(format!("layer {i} kind differs across clients"));
                }
                FeatureLayer::Relu
            }
        });
    }
    Ok(out)
}

/// [`fedavg_feature`], with the batch-norm running statistics replaced by
/// `reference` (one entry per batch-norm layer, in order).
pub fn fedbn_plus_feature(
    locals: &[&[FeatureLayer]],
    reference: Option<&[BnReference]>,
    weights: Option<&[f64]>,
) -> Result<Vec<FeatureLayer>> {
    let Some(reference) = reference else {
        return config("fedbn_plus needs reference batch-norm statistics");
    };
    let mut global = fedavg_feature(locals, weights)?;
    let bn_layers = global.iter().filter(|l| matches!(l, FeatureLayer::BatchNorm(_))).count();
    if bn_layers != reference.len() {
        return config(format!(
            "{} reference statistics for {bn_layers} batch-norm layers",
            reference.len()
        ));
    }
    let mut refs = reference.iter();
    for layer in &mut global {
        if let FeatureLayer::BatchNorm(s) = layer {
            let r = refs.next().expect("counted above");
            if r.running_mean.len() != s.dim() || r.running_var.len() != s.dim() {
                return config("reference statistics width mismatch");
            }
            s.running_mean = r.running_mean.clone();
            s.running_var = r.running_var.clone();
        }
    }
    Ok(global)
}

/// A client's classification head, borrowed for aggregation.
#[derive(Clone, Copy, Debug)]
pub struct HeadRef<'a> {
    pub w: &'a Tensor2,
    pub b: &'a [f64],
}

impl<'a> From<&'a ParamSet> for HeadRef<'a> {
    fn from(p: &'a ParamSet) -> Self {
        HeadRef {
            w: &p.head_w,
            b: &p.head_b,
        }
    }
}

/// Builds the global `N × M` head from local `N × |C_k|` heads.
///
/// `heads[k]` belongs to client `k`. Column `c` of the result (bias entry
/// included) is the mean of client columns for `c` over the clients that
/// hold `c`; a class held by one client passes through unchanged.
pub fn surgical_head_update(
    heads: &[HeadRef<'_>],
    registry: &ClassRegistry,
    weights: Option<&[f64]>,
) -> Result<(Tensor2, Vec<f64>)> {
    if heads.len() != registry.num_clients() {
        return contract(format!(
            "{} heads for {} registered clients",
            heads.len(),
            registry.num_clients()
        ));
    }
    check_weights(weights, heads.len())?;
    let n = heads[0].w.rows();
    for (k, h) in heads.iter().enumerate() {
        let width = registry.client_classes(k)?.len();
        if h.w.cols() != width || h.b.len() != width || h.w.rows() != n {
            return contract(format!(
                "client {k} head is {:?} with {} biases, expected {n}x{width}",
                h.w.shape(),
                h.b.len()
            ));
        }
    }
    let m = registry.num_classes();
    let mut global_w = Tensor2::zeros(n, m);
    let mut global_b = vec![0.0; m];
    let mut values = Vec::with_capacity(heads.len());
    let mut ws = Vec::with_capacity(heads.len());
    for c in 0..m {
        let holders = registry.clients_with_class(c)?;
        let locals: Vec<(usize, usize)> = holders
            .iter()
            .map(|&k| Ok((k, registry.global_to_local(k, c)?.expect("holder owns class"))))
            .collect::<Result<_>>()?;
        ws.clear();
        if let Some(w) = weights {
            ws.extend(holders.iter().map(|&k| w[k]));
        }
        let w = weights.map(|_| ws.as_slice());
        for r in 0..n {
            values.clear();
            values.extend(locals.iter().map(|&(k, j)| heads[k].w.get(r, j)));
            global_w.set(r, c, ordered_mean(&values, w));
        }
        values.clear();
        values.extend(locals.iter().map(|&(k, j)| heads[k].b[j]));
        global_b[c] = ordered_mean(&values, w);
    }
    Ok((global_w, global_b))
}

/// Plain elementwise FedAvg of equally shaped heads.
pub fn fedavg_head(heads: &[HeadRef<'_>], weights: Option<&[f64]>) -> Result<(Tensor2, Vec<f64>)> {
    if heads.is_empty() {
        return contract("head aggregation needs at least one client");
    }
    check_weights(weights, heads.len())?;
    let ws: Vec<&Tensor2> = heads.iter().map(|h| h.w).collect();
    let bs: Vec<&[f64]> = heads.iter().map(|h| h.b).collect();
    Ok((average_tensors(&ws, weights)?, average_slices(&bs, weights)?))
}

/// Client `k`'s head: global columns of `C_k`, in local order.
pub fn reconstruct_client_head(
    global_w: &Tensor2,
    global_b: &[f64],
    registry: &ClassRegistry,
    k: usize,
) -> Result<(Tensor2, Vec<f64>)> {
    if global_w.cols() != registry.num_classes() || global_b.len() != registry.num_classes() {
        return contract("global head width differs from the class count");
    }
    let classes = registry.client_classes(k)?;
    Ok((
        global_w.select_cols(classes),
        classes.iter().map(|&c| global_b[c]).collect(),
    ))
}

/// Result of one server round.
#[derive(Clone, Debug)]
pub struct ServerUpdate {
    /// Global model, when the method and strategy define one.
    pub global: Option<ParamSet>,
    /// Parameters to send back, indexed by client.
    pub clients: Vec<ParamSet>,
}

/// Aggregates one round of client models.
///
/// Every returned client model carries the global feature weights. Under
/// FedBN and FedBN+ each client keeps its own batch-norm running statistics.
/// Heads are combined per `head_rule`; under [`HeadRule::Surgical`] each
/// client receives only the columns of its own classes.
pub fn server_update(
    clients: &[&ParamSet],
    registry: &ClassRegistry,
    strategy: StrategyKind,
    head_rule: HeadRule,
    reference_bn: Option<&[BnReference]>,
    weights: Option<&[f64]>,
) -> Result<ServerUpdate> {
    if clients.len() != registry.num_clients() {
        return contract(format!(
            "{} client models for {} registered clients",
            clients.len(),
            registry.num_clients()
        ));
    }
    let locals: Vec<&[FeatureLayer]> = clients.iter().map(|p| p.feature.as_slice()).collect();
    let global_feature = match strategy {
        StrategyKind::FedAvg | StrategyKind::FedBn => fedavg_feature(&locals, weights)?,
        StrategyKind::FedBnPlus => fedbn_plus_feature(&locals, reference_bn, weights)?,
    };
    let heads: Vec<HeadRef<'_>> = clients.iter().map(|p| HeadRef::from(*p)).collect();
    let global_head = match head_rule {
        HeadRule::Surgical => Some(surgical_head_update(&heads, registry, weights)?),
        HeadRule::FedAvg => Some(fedavg_head(&heads, weights)?),
        HeadRule::Personal => None,
    };

    let mut out = Vec::with_capacity(clients.len());
    for (k, local) in clients.iter().enumerate() {
        let mut feature = global_feature.clone();
        if strategy.keeps_local_bn_stats() {
            for (g, l) in feature.iter_mut().zip(&local.feature) {
                if let (FeatureLayer::BatchNorm(gs), FeatureLayer::BatchNorm(ls)) = (g, l) {
                    gs.running_mean = ls.running_mean.clone();
                    gs.running_var = ls.running_var.clone();
                }
            }
        }
        let (head_w, head_b) = match (&global_head, head_rule) {
            (Some((w, b)), HeadRule::Surgical) => reconstruct_client_head(w, b, registry, k)?,
            (Some((w, b)), _) => (w.clone(), b.clone()),
            (None, _) => (local.head_w.clone(), local.head_b.clone()),
        };
        out.push(ParamSet {
            input_dim: local.input_dim,
            feature,
            head_w,
            head_b,
        });
    }

    let global = match (global_head, strategy) {
        (Some((head_w, head_b)), StrategyKind::FedAvg | StrategyKind::FedBnPlus) => Some(ParamSet {
            input_dim: clients[0].input_dim,
            feature: global_feature,
            head_w,
            head_b,
        }),
        _ => None,
    };
    Ok(ServerUpdate { global, clients: out })
}
