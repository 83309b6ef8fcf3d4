use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::nn::{Architecture, BatchNormState, Forward, LayerKind, LayerSpec};
use crate::seeds;
use crate::tensor::Tensor2;

/// One layer of the feature extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureLayer {
    /// `x · w + b`, with `w` stored `in_dim × out_dim`.
    Dense { w: Tensor2, b: Vec<f64> },
    BatchNorm(BatchNormState),
    Relu,
}

/// Parameters of a classifier.
///
/// `head_w` is `N × M_k`: column `j` holds the weights of the `j`-th class
/// the owner predicts, and `head_b[j]` its bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub input_dim: usize,
    pub feature: Vec<FeatureLayer>,
    pub head_w: Tensor2,
    pub head_b: Vec<f64>,
}

fn xavier(fan_in: usize, fan_out: usize) -> Uniform<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Uniform::new_inclusive(-limit, limit).expect("finite Xavier bound")
}

/// Glorot-uniform dense weights, zero biases, identity batch-norm.
///
/// Feature layers depend only on `(arch, seed)`. Head column `j` is drawn
/// from a stream keyed by its global class `head_classes[j]` (with fan-out
/// `num_classes`), so any two models sharing a class and a seed start with
/// the same column for it.
pub fn init_model(arch: &Architecture, head_classes: &[usize], num_classes: usize, seed: u64) -> Result<ParamSet> {
    if head_classes.is_empty() {
        return config("a classifier needs at least one head class");
    }
    if let Some(&c) = head_classes.iter().find(|&&c| c >= num_classes) {
        return config(format!("head class {c} out of range for {num_classes} classes"));
    }
    let mut feature = Vec::with_capacity(arch.feature_layers().len());
    for (i, spec) in arch.feature_layers().iter().enumerate() {
        feature.push(match spec.kind {
            LayerKind::Dense => {
                let mut rng = seeds::stream(seed, "init.feature", i as u64);
                let dist = xavier(spec.in_dim, spec.out_dim);
                let data = (0..spec.in_dim * spec.out_dim).map(|_| dist.sample(&mut rng)).collect();
                FeatureLayer::Dense {
                    w: Tensor2::from_vec(spec.in_dim, spec.out_dim, data)?,
                    b: vec![0.0; spec.out_dim],
                }
            }
            LayerKind::Batchnorm => FeatureLayer::BatchNorm(BatchNormState::new(spec.out_dim)),
            LayerKind::Relu => FeatureLayer::Relu,
            LayerKind::Sigmoid => return config("sigmoid inside the feature extractor"),
        });
    }
    let n = arch.feature_dim();
    let mut head_w = Tensor2::zeros(n, head_classes.len());
    let dist = xavier(n, num_classes);
    for (j, &c) in head_classes.iter().enumerate() {
        let mut rng = seeds::stream(seed, "init.head", c as u64);
        for r in 0..n {
            head_w.set(r, j, rng.sample(dist));
        }
    }
    Ok(ParamSet {
        input_dim: arch.input_dim(),
        feature,
        head_w,
        head_b: vec![0.0; head_classes.len()],
    })
}

impl ParamSet {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Width of the head input (`N`).
    pub fn feature_dim(&self) -> usize {
        self.head_w.rows()
    }

    pub fn head_width(&self) -> usize {
        self.head_w.cols()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut width = self.input_dim;
        let mut specs: Vec<LayerSpec> = self
            .feature
            .iter()
            .map(|l| {
                let spec = match l {
                    FeatureLayer::Dense { w, .. } => LayerSpec::dense(w.rows(), w.cols()),
                    FeatureLayer::BatchNorm(s) => LayerSpec::batchnorm(s.dim()),
                    FeatureLayer::Relu => LayerSpec::relu(width),
                };
                width = spec.out_dim;
                spec
            })
            .collect();
        specs.push(LayerSpec::dense(self.feature_dim(), self.head_width()));
        specs.push(LayerSpec::sigmoid(self.head_width()));
        specs
    }

    /// Checks that layer widths chain and every value is finite.
    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_dim;
        for (i, layer) in self.feature.iter().enumerate() {
            match layer {
                FeatureLayer::Dense { w, b } => {
                    if w.rows() != width || b.len() != w.cols() {
                        return contract(format!("dense layer {i} has inconsistent shape"));
                    }
                    if !w.is_finite() || b.iter().any(|v| !v.is_finite()) {
                        return contract(format!("dense layer {i} holds non-finite values"));
                    }
                    width = w.cols();
                }
                FeatureLayer::BatchNorm(s) => {
                    s.validate()?;
                    if s.dim() != width {
                        return contract(format!("batch-norm layer {i} has width {}", s.dim()));
                    }
                }
                FeatureLayer::Relu => {}
            }
        }
        if self.head_w.rows() != width || self.head_b.len() != self.head_w.cols() {
            return contract("classification head has inconsistent shape");
        }
        if !self.head_w.is_finite() || self.head_b.iter().any(|v| !v.is_finite()) {
            return contract("classification head holds non-finite values");
        }
        Ok(())
    }

    pub fn batchnorm_layers(&self) -> impl Iterator<Item = &BatchNormState> {
        self.feature.iter().filter_map(|l| match l {
            FeatureLayer::BatchNorm(s) => Some(s),
            _ => None,
        })
    }

    /// Applies the running-statistics update recorded by a train-mode forward.
    pub fn apply_batch_statistics(&mut self, fwd: &Forward) -> Result<()> {
        let stats = fwd.batch_statistics();
        if stats.len() != self.feature.len() {
            return contract("forward cache does not match model depth");
        }
        for (layer, stat) in self.feature.iter_mut().zip(stats) {
            if let (FeatureLayer::BatchNorm(s), Some((mean, var))) = (layer, stat) {
                s.update_running(&mean, &var);
            }
        }
        Ok(())
    }

    /// Head column `local_col` followed by its bias entry (length `N + 1`).
    pub fn class_column(&self, local_col: usize) -> Result<Vec<f64>> {
        if local_col >= self.head_width() {
            return contract(format!(
                "head column {local_col} out of range for width {}",
                self.head_width()
            ));
        }
        let mut v = self.head_w.column(local_col);
        v.push(self.head_b[local_col]);
        Ok(v)
    }

    pub fn set_class_column(&mut self, local_col: usize, v: &[f64]) -> Result<()> {
        let n = self.feature_dim();
        if local_col >= self.head_width() {
            return contract(format!(
                "head column {local_col} out of range for width {}",
                self.head_width()
            ));
        }
        if v.len() != n + 1 {
            return contract(format!("class column needs {} values, got {}", n + 1, v.len()));
        }
        for (r, &x) in v[..n].iter().enumerate() {
            self.head_w.set(r, local_col, x);
        }
        self.head_b[local_col] = v[n];
        Ok(())
    }

    /// All trainable values in a fixed order: feature layers (dense `w`
    /// then `b`, batch-norm `gamma` then `beta`), then `head_w`, `head_b`.
    pub fn trainable_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.feature {
            match layer {
                FeatureLayer::Dense { w, b } => {
                    out.extend_from_slice(w.data());
                    out.extend_from_slice(b);
                }
                FeatureLayer::BatchNorm(s) => {
                    out.extend_from_slice(&s.gamma);
                    out.extend_from_slice(&s.beta);
                }
                FeatureLayer::Relu => {}
            }
        }
        out.extend_from_slice(self.head_w.data());
        out.extend_from_slice(&self.head_b);
        out
    }

    /// Mutable access to the `index`-th value of [`Self::trainable_values`].
    pub fn trainable_value_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for layer in &mut self.feature {
            let slots: [&mut [f64]; 2] = match layer {
                FeatureLayer::Dense { w, b } => [w.data_mut(), b.as_mut_slice()],
                FeatureLayer::BatchNorm(s) => [s.gamma.as_mut_slice(), s.beta.as_mut_slice()],
                FeatureLayer::Relu => continue,
            };
            for slot in slots {
                if index < slot.len() {
                    return Some(&mut slot[index]);
                }
                index -= slot.len();
            }
        }
        for slot in [self.head_w.data_mut(), self.head_b.as_mut_slice()] {
            if index < slot.len() {
                return Some(&mut slot[index]);
            }
            index -= slot.len();
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ParamSet {
        let arch = Architecture::default_for(4).unwrap();
        init_model(&arch, &[0, 2], 3, 11).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(small(), small());
        let arch = Architecture::default_for(4).unwrap();
        assert_ne!(small(), init_model(&arch, &[0, 2], 3, 12).unwrap());
    }

    #[test]
    fn init_biases_zero_and_bn_identity() {
        let p = small();
        assert!(p.head_b.iter().all(|&b| b == 0.0));
        for layer in &p.feature {
            match layer {
                FeatureLayer::Dense { b, .. } => assert!(b.iter().all(|&v| v == 0.0)),
                FeatureLayer::BatchNorm(s) => {
                    assert!(s.running_var.iter().all(|&v| v == 1.0));
                    assert!(s.running_mean.iter().all(|&v| v == 0.0));
                    assert!(s.gamma.iter().all(|&v| v == 1.0));
                    assert!(s.beta.iter().all(|&v| v == 0.0));
                }
                FeatureLayer::Relu => {}
            }
        }
        p.validate().unwrap();
    }

    #[test]
    fn xavier_bounds_hold() {
        let arch = Architecture::default_for(20).unwrap();
        let p = init_model(&arch, &[0, 1, 2], 8, 3).unwrap();
        if let FeatureLayer::Dense { w, .. } = &p.feature[0] {
            let limit = (6.0f64 / 52.0).sqrt();
            assert!(w.data().iter().all(|v| v.abs() <= limit));
        } else {
            panic!("first layer should be dense");
        }
        let limit = (6.0f64 / 24.0).sqrt();
        assert!(p.head_w.data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn shared_classes_start_identical_across_clients() {
        let arch = Architecture::default_for(6).unwrap();
        let a = init_model(&arch, &[0, 1], 3, 5).unwrap();
        let b = init_model(&arch, &[1, 2], 3, 5).unwrap();
        assert_eq!(a.feature, b.feature);
        assert_eq!(a.class_column(1).unwrap(), b.class_column(0).unwrap());
        assert_ne!(a.class_column(0).unwrap(), b.class_column(1).unwrap());
    }

    #[test]
    fn class_column_access() {
        let mut p = ParamSet {
            input_dim: 2,
            feature: vec![],
            head_w: Tensor2::from_rows(&[[1.0, 3.0], [2.0, 4.0]]).unwrap(),
            head_b: vec![5.0, 6.0],
        };
        assert_eq!(p.class_column(0).unwrap(), vec![1.0, 2.0, 5.0]);
        assert_eq!(p.class_column(1).unwrap(), vec![3.0, 4.0, 6.0]);
        assert!(p.class_column(2).is_err());

        let v = vec![0.1, -0.7, 9.25];
        p.set_class_column(1, &v).unwrap();
        assert_eq!(p.class_column(1).unwrap(), v);
        assert_eq!(p.class_column(0).unwrap(), vec![1.0, 2.0, 5.0]);
        assert!(p.set_class_column(0, &[1.0]).is_err());
        assert!(p.set_class_column(5, &v).is_err());
    }

    #[test]
    fn trainable_indexing_matches_flat_order() {
        let mut p = small();
        let flat = p.trainable_values();
        for (i, &v) in flat.iter().enumerate() {
            assert_eq!(*p.trainable_value_mut(i).unwrap(), v);
        }
        assert!(p.trainable_value_mut(flat.len()).is_none());
    }
}
