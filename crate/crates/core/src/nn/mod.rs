//! Minimal dense network kernel.
//!
//! A classifier is a feature extractor (a stack of dense, batch-norm and ReLU
//! layers) followed by a dense classification head and an element-wise
//! sigmoid. Dense weights are stored `in_dim × out_dim` so a batch `x`
//! (`n × in_dim`) maps to `x · W + b`; the head matrix therefore has one
//! column per class.

mod backward;
mod batchnorm;
mod forward;
mod loss;
mod sgd;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

pub use backward::{backward, LayerGrad, ParamGrad};
pub use batchnorm::BatchNormState;
pub use forward::{forward, predict, sigmoid, Forward};
pub use loss::{bce_term, masked_bce_loss, validate_mask, PROB_CLAMP};
pub use sgd::{sgd_step, ParamGroup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Batchnorm,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            in_dim,
            out_dim,
        }
    }

    pub fn batchnorm(dim: usize) -> Self {
        Self {
            kind: LayerKind::Batchnorm,
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn relu(dim: usize) -> Self {
        Self {
            kind: LayerKind::Relu,
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn sigmoid(dim: usize) -> Self {
        Self {
            kind: LayerKind::Sigmoid,
            in_dim: dim,
            out_dim: dim,
        }
    }
}

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm normalizes with batch statistics.
    Train,
    /// Batch-norm normalizes with running statistics.
    Eval,
}

/// Shape of the feature extractor; the head is appended per client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    input_dim: usize,
    feature: Vec<LayerSpec>,
}

/// Default feature extractor: dense(d→32), batch-norm, ReLU, dense(32→16), ReLU.
pub const DEFAULT_FEATURE_LAYERS: [&str; 5] = ["dense:32", "batchnorm", "relu", "dense:16", "relu"];

impl Architecture {
    pub fn new(input_dim: usize, feature: Vec<LayerSpec>) -> Result<Self> {
        if input_dim == 0 {
            return config("input dimension must be >= 1");
        }
        let mut width = input_dim;
        for (i, spec) in feature.iter().enumerate() {
            if spec.in_dim != width {
                return config(format!(
                    "layer {i} expects input width {} but receives {width}",
                    spec.in_dim
                ));
            }
            match spec.kind {
                LayerKind::Dense if spec.out_dim == 0 => {
                    return config(format!("dense layer {i} needs out_dim >= 1"));
                }
                LayerKind::Batchnorm | LayerKind::Relu if spec.in_dim != spec.out_dim => {
                    return config(format!("layer {i} must preserve width"));
                }
                LayerKind::Sigmoid => {
                    return config("sigmoid is only allowed as the final classifier layer");
                }
                _ => {}
            }
            width = spec.out_dim;
        }
        Ok(Self { input_dim, feature })
    }

    /// Parses descriptors such as `"dense:32"`, `"batchnorm"`, `"relu"`.
    pub fn from_descriptors<S: AsRef<str>>(input_dim: usize, layers: &[S]) -> Result<Self> {
        let mut width = input_dim;
        let mut specs = Vec::with_capacity(layers.len());
        for raw in layers {
            let raw = raw.as_ref().trim();
            let spec = match raw.split_once(':') {
                Some(("dense", n)) => {
                    let out: usize = n
                        .parse()
                        .map_err(|_| Error::Config(format!("bad dense width in `{raw}`")))?;
                    LayerSpec::dense(width, out)
                }
                None if raw == "batchnorm" => LayerSpec::batchnorm(width),
                None if raw == "relu" => LayerSpec::relu(width),
                _ => return config(format!("unknown layer descriptor `{raw}`")),
            };
            width = spec.out_dim;
            specs.push(spec);
        }
        Self::new(input_dim, specs)
    }

    pub fn default_for(input_dim: usize) -> Result<Self> {
        Self::from_descriptors(input_dim, &DEFAULT_FEATURE_LAYERS)
    }

    /// A model without hidden layers: the head acts directly on the input.
    pub fn logistic(input_dim: usize) -> Result<Self> {
        Self::new(input_dim, Vec::new())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_layers(&self) -> &[LayerSpec] {
        &self.feature
    }

    /// Width of the representation fed to the head (`N`).
    pub fn feature_dim(&self) -> usize {
        self.feature.last().map_or(self.input_dim, |s| s.out_dim)
    }

    /// Full layer list for a classifier with `head_width` outputs.
    pub fn layer_specs(&self, head_width: usize) -> Vec<LayerSpec> {
        let n = self.feature_dim();
        let mut specs = self.feature.clone();
        specs.push(LayerSpec::dense(n, head_width));
        specs.push(LayerSpec::sigmoid(head_width));
        specs
    }

    pub fn descriptors(&self) -> Vec<String> {
        self.feature
            .iter()
            .map(|s| match s.kind {
                LayerKind::Dense => format!("dense:{}", s.out_dim),
                LayerKind::Batchnorm => "batchnorm".to_owned(),
                LayerKind::Relu => "relu".to_owned(),
                LayerKind::Sigmoid => "sigmoid".to_owned(),
            })
            .collect()
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Dense => "dense",
            LayerKind::Batchnorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
        };
        f.write_str(s)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "eval" => Ok(Mode::Eval),
            other => config(format!("unknown mode `{other}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture_shape() {
        let arch = Architecture::default_for(20).unwrap();
        assert_eq!(arch.feature_dim(), 16);
        let specs = arch.layer_specs(3);
        assert_eq!(specs.len(), 7);
        assert_eq!(specs[5], LayerSpec::dense(16, 3));
        assert_eq!(specs.last().unwrap().kind, LayerKind::Sigmoid);
        assert_eq!(arch.descriptors(), DEFAULT_FEATURE_LAYERS);
    }

    #[test]
    fn rejects_bad_layers() {
        assert!(Architecture::from_descriptors(4, &["dense:0"]).is_err());
        assert!(Architecture::from_descriptors(4, &["conv:3"]).is_err());
        assert!(Architecture::new(4, vec![LayerSpec::batchnorm(3)]).is_err());
        assert!(Architecture::new(4, vec![LayerSpec::sigmoid(4)]).is_err());
        assert!(Architecture::new(4, vec![LayerSpec { kind: LayerKind::Relu, in_dim: 4, out_dim: 2 }]).is_err());
    }

    #[test]
    fn logistic_has_no_feature_layers() {
        let arch = Architecture::logistic(5).unwrap();
        assert_eq!(arch.feature_dim(), 5);
        assert_eq!(arch.layer_specs(2).len(), 2);
    }
}
