use crate::error::{contract, Result};
use crate::model::{FeatureLayer, ParamSet};
use crate::tensor::Tensor2;

use super::forward::Forward;
use super::loss::validate_mask;
use super::Mode;

/// Gradient of one feature layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrad {
    Dense { w: Tensor2, b: Vec<f64> },
    BatchNorm { gamma: Vec<f64>, beta: Vec<f64> },
    None,
}

/// Gradient of the masked loss with respect to every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub feature: Vec<LayerGrad>,
    pub head_w: Tensor2,
    pub head_b: Vec<f64>,
}

impl ParamGrad {
    /// Flattened gradient, in the order of [`ParamSet::trainable_values`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.feature {
            match g {
                LayerGrad::Dense { w, b } => {
                    out.extend_from_slice(w.data());
                    out.extend_from_slice(b);
                }
                LayerGrad::BatchNorm { gamma, beta } => {
                    out.extend_from_slice(gamma);
                    out.extend_from_slice(beta);
                }
                LayerGrad::None => {}
            }
        }
        out.extend_from_slice(self.head_w.data());
        out.extend_from_slice(&self.head_b);
        out
    }
}

/// Backpropagates [`super::masked_bce_loss`] through the classifier.
///
/// Head columns outside `mask` receive exactly zero gradient.
pub fn backward(params: &ParamSet, fwd: &Forward, y: &Tensor2, mask: &[usize]) -> Result<ParamGrad> {
    let layers = &params.feature;
    if fwd.activations.len() != layers.len() + 1 || fwd.bn.len() != layers.len() {
        return contract("forward cache does not match model depth");
    }
    if fwd.output.shape() != y.shape() || y.cols() != params.head_w.cols() {
        return contract(format!(
            "stale forward cache: output {:?}, labels {:?}, head {:?}",
            fwd.output.shape(),
            y.shape(),
            params.head_w.shape()
        ));
    }
    validate_mask(mask, y.cols())?;
    let n = y.rows();
    let scale = 1.0 / (n as f64 * mask.len() as f64);

    // dL/dlogit = (p - y) / (n |mask|) on masked columns.
    let mut dz = Tensor2::zeros(n, y.cols());
    for r in 0..n {
        let (pr, yr) = (fwd.output.row(r), y.row(r));
        let dr = dz.row_mut(r);
        for &c in mask {
            dr[c] = (pr[c] - yr[c]) * scale;
        }
    }

    let head_in = &fwd.activations[layers.len()];
    let head_w = head_in.t_matmul(&dz)?;
    let head_b = dz.column_sums();
    let mut dh = dz.matmul_t(&params.head_w)?;

    let mut feature = vec![LayerGrad::None; layers.len()];
    for i in (0..layers.len()).rev() {
        let input = &fwd.activations[i];
        if input.rows() != n {
            return contract(format!("stale activation at layer {i}"));
        }
        match &layers[i] {
            FeatureLayer::Dense { w, .. } => {
                if input.cols() != w.rows() || dh.cols() != w.cols() {
                    return contract(format!("stale activation at dense layer {i}"));
                }
                let gw = input.t_matmul(&dh)?;
                let gb = dh.column_sums();
                let dx = if i > 0 { dh.matmul_t(w)? } else { Tensor2::zeros(0, 0) };
                feature[i] = LayerGrad::Dense { w: gw, b: gb };
                dh = dx;
            }
            FeatureLayer::BatchNorm(state) => {
                let d = state.dim();
                if dh.cols() != d || input.cols() != d {
                    return contract(format!("stale activation at batch-norm layer {i}"));
                }
                let mut dgamma = vec![0.0; d];
                let dbeta = dh.column_sums();
                let mut dx = Tensor2::zeros(n, d);
                match (fwd.mode, &fwd.bn[i]) {
                    (Mode::Train, Some(cache)) => {
                        let nf = n as f64;
                        let mut sum_dxhat = vec![0.0; d];
                        let mut sum_dxhat_xhat = vec![0.0; d];
                        for r in 0..n {
                            let (dr, xr) = (dh.row(r), cache.xhat.row(r));
                            for j in 0..d {
                                dgamma[j] += dr[j] * xr[j];
                                let dxhat = dr[j] * state.gamma[j];
                                sum_dxhat[j] += dxhat;
                                sum_dxhat_xhat[j] += dxhat * xr[j];
                            }
                        }
                        for r in 0..n {
                            let xr = cache.xhat.row(r);
                            let dr = dh.row(r);
                            let out = dx.row_mut(r);
                            for j in 0..d {
                                let dxhat = dr[j] * state.gamma[j];
                                out[j] = cache.inv_std[j] / nf
                                    * (nf * dxhat - sum_dxhat[j] - xr[j] * sum_dxhat_xhat[j]);
                            }
                        }
                    }
                    (Mode::Eval, None) => {
                        for r in 0..n {
                            let (dr, xr) = (dh.row(r), input.row(r));
                            let out = dx.row_mut(r);
                            for j in 0..d {
                                let inv = 1.0 / (state.running_var[j] + state.epsilon).sqrt();
                                dgamma[j] += dr[j] * (xr[j] - state.running_mean[j]) * inv;
                                out[j] = dr[j] * state.gamma[j] * inv;
                            }
                        }
                    }
                    _ => return contract(format!("batch-norm cache missing at layer {i}")),
                }
                feature[i] = LayerGrad::BatchNorm {
                    gamma: dgamma,
                    beta: dbeta,
                };
                dh = dx;
            }
            FeatureLayer::Relu => {
                if dh.shape() != input.shape() {
                    return contract(format!("stale activation at relu layer {i}"));
                }
                for (g, &x) in dh.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
        }
    }
    Ok(ParamGrad {
        feature,
        head_w,
        head_b,
    })
}
