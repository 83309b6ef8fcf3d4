use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::model::{FeatureLayer, ParamSet};

use super::backward::{LayerGrad, ParamGrad};

/// Parameter groups that can be frozen during an update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    FeatureExtractor,
    Head,
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature_extractor" => Ok(Self::FeatureExtractor),
            "head" => Ok(Self::Head),
            other => config(format!("unknown parameter group `{other}`")),
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FeatureExtractor => "feature_extractor",
            Self::Head => "head",
        })
    }
}

fn step(values: &mut [f64], grads: &[f64], lr: f64) {
    for (v, g) in values.iter_mut().zip(grads) {
        *v -= lr * g;
    }
}

/// Plain SGD, `p ← p − lr·g`, on every group not listed in `frozen`.
///
/// Batch-norm running statistics are not trainable and never change here.
pub fn sgd_step(params: &mut ParamSet, grads: &ParamGrad, lr: f64, frozen: &[ParamGroup]) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return config(format!("learning rate {lr} must be finite and non-negative"));
    }
    if grads.feature.len() != params.feature.len()
        || grads.head_w.shape() != params.head_w.shape()
        || grads.head_b.len() != params.head_b.len()
    {
        return contract("gradient shape does not match parameters");
    }
    if !frozen.contains(&ParamGroup::FeatureExtractor) {
        for (i, (layer, g)) in params.feature.iter_mut().zip(&grads.feature).enumerate() {
            match (layer, g) {
                (FeatureLayer::Dense { w, b }, LayerGrad::Dense { w: gw, b: gb })
                    if w.shape() == gw.shape() && b.len() == gb.len() =>
                {
                    step(w.data_mut(), gw.data(), lr);
                    step(b, gb, lr);
                }
                (FeatureLayer::BatchNorm(s), LayerGrad::BatchNorm { gamma, beta })
                    if s.gamma.len() == gamma.len() && s.beta.len() == beta.len() =>
                {
                    step(&mut s.gamma, gamma, lr);
                    step(&mut s.beta, beta, lr);
                }
                (FeatureLayer::Relu, LayerGrad::None) => {}
                _ => return contract(format!("gradient kind mismatch at layer {i}")),
            }
        }
    }
    if !frozen.contains(&ParamGroup::Head) {
        step(params.head_w.data_mut(), grads.head_w.data(), lr);
        step(&mut params.head_b, &grads.head_b, lr);
    }
    Ok(())
}
