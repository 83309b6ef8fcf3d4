use crate::error::{contract, Error, Result};
use crate::model::{FeatureLayer, ParamSet};
use crate::tensor::Tensor2;

use super::Mode;

/// Numerically stable logistic function; `sigmoid(0.0) == 0.5` exactly.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Batch statistics recorded by a train-mode batch-norm layer.
#[derive(Clone, Debug)]
pub(crate) struct BnBatch {
    pub mean: Vec<f64>,
    /// Biased variance, used for normalization.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub xhat: Tensor2,
}

/// Everything a backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Input of every feature layer, followed by the head input.
    pub activations: Vec<Tensor2>,
    /// Head pre-activations.
    pub logits: Tensor2,
    /// Sigmoid probabilities.
    pub output: Tensor2,
    pub(crate) bn: Vec<Option<BnBatch>>,
    pub(crate) mode: Mode,
}

impl Forward {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Batch mean and unbiased variance of every train-mode batch-norm layer,
    /// indexed by feature layer.
    pub fn batch_statistics(&self) -> Vec<Option<(Vec<f64>, Vec<f64>)>> {
        self.bn
            .iter()
            .map(|b| {
                b.as_ref().map(|b| {
                    let n = b.xhat.rows();
                    let scale = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                    (b.mean.clone(), b.var.iter().map(|v| v * scale).collect())
                })
            })
            .collect()
    }
}

fn check_finite(t: &Tensor2, layer: usize) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer,
            message: "non-finite activation".to_owned(),
        })
    }
}

/// Runs the classifier on a batch.
///
/// Does not mutate `params`: in train mode the batch statistics are recorded
/// in the returned [`Forward`] and applied with
/// [`ParamSet::apply_batch_statistics`].
pub fn forward(params: &ParamSet, x: &Tensor2, mode: Mode) -> Result<Forward> {
    if x.cols() != params.input_dim() {
        return Err(Error::Config(format!(
            "input has {} features, model expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let mut activations = Vec::with_capacity(params.feature.len() + 1);
    let mut bn = Vec::with_capacity(params.feature.len());
    let mut h = x.clone();
    for (i, layer) in params.feature.iter().enumerate() {
        let next = match layer {
            FeatureLayer::Dense { w, b } => {
                let mut z = h.matmul(w)?;
                z.add_row_vector(b);
                bn.push(None);
                z
            }
            FeatureLayer::BatchNorm(state) => {
                if h.cols() != state.dim() {
                    return contract(format!("batch-norm layer {i} width mismatch"));
                }
                let (out, cache) = batchnorm_forward(state, &h, mode);
                bn.push(cache);
                out
            }
            FeatureLayer::Relu => {
                bn.push(None);
                h.map(|v| v.max(0.0))
            }
        };
        check_finite(&next, i)?;
        activations.push(std::mem::replace(&mut h, next));
    }
    let head_layer = params.feature.len();
    let mut logits = h.matmul(&params.head_w)?;
    logits.add_row_vector(&params.head_b);
    check_finite(&logits, head_layer)?;
    activations.push(h);
    let output = logits.map(sigmoid);
    check_finite(&output, head_layer + 1)?;
    Ok(Forward {
        activations,
        logits,
        output,
        bn,
        mode,
    })
}

/// Eval-mode probabilities.
pub fn predict(params: &ParamSet, x: &Tensor2) -> Result<Tensor2> {
    Ok(forward(params, x, Mode::Eval)?.output)
}

fn batchnorm_forward(
    state: &crate::nn::BatchNormState,
    h: &Tensor2,
    mode: Mode,
) -> (Tensor2, Option<BnBatch>) {
    let (n, d) = h.shape();
    match mode {
        Mode::Eval => {
            let mut out = h.clone();
            for r in 0..n {
                for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                    let inv = 1.0 / (state.running_var[j] + state.epsilon).sqrt();
                    *v = state.gamma[j] * (*v - state.running_mean[j]) * inv + state.beta[j];
                }
            }
            (out, None)
        }
        Mode::Train => {
            let nf = n as f64;
            let mean: Vec<f64> = h.column_sums().into_iter().map(|s| s / nf).collect();
            let mut var = vec![0.0; d];
            for r in 0..n {
                for ((v, &x), &m) in var.iter_mut().zip(h.row(r)).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|v| *v /= nf);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
            let mut xhat = h.clone();
            let mut out = h.clone();
            for r in 0..n {
                let xr = xhat.row_mut(r);
                for j in 0..d {
                    xr[j] = (xr[j] - mean[j]) * inv_std[j];
                }
                let or = out.row_mut(r);
                for j in 0..d {
                    or[j] = state.gamma[j] * xr[j] + state.beta[j];
                }
            }
            (
                out,
                Some(BnBatch {
                    mean,
                    var,
                    inv_std,
                    xhat,
                }),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, BatchNormState};

    fn logistic_identity() -> ParamSet {
        ParamSet {
            input_dim: 2,
            feature: vec![],
            head_w: Tensor2::identity(2),
            head_b: vec![0.0, 0.0],
        }
    }

    #[test]
    fn identity_head_passes_inputs_to_logits() {
        let x = Tensor2::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let f = forward(&logistic_identity(), &x, Mode::Eval).unwrap();
        assert_eq!(f.logits.data(), &[1.0, 2.0]);
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn wrong_width_is_a_config_error() {
        let x = Tensor2::zeros(1, 3);
        assert!(matches!(forward(&logistic_identity(), &x, Mode::Eval), Err(Error::Config(_))));
    }

    #[test]
    fn overflow_reports_layer() {
        let mut p = logistic_identity();
        p.head_w.set(0, 0, f64::MAX);
        let x = Tensor2::from_rows(&[vec![10.0, 0.0]]).unwrap();
        match forward(&p, &x, Mode::Eval) {
            Err(Error::Numeric { layer, .. }) => assert_eq!(layer, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn train_mode_normalizes_with_batch_statistics() {
        let p = ParamSet {
            input_dim: 1,
            feature: vec![FeatureLayer::BatchNorm(BatchNormState::new(1))],
            head_w: Tensor2::identity(1),
            head_b: vec![0.0],
        };
        let x = Tensor2::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let f = forward(&p, &x, Mode::Train).unwrap();
        let eps = crate::nn::batchnorm::DEFAULT_EPSILON;
        let expect = 1.0 / (1.0 + eps).sqrt();
        assert!((f.logits.get(0, 0) + expect).abs() < 1e-12);
        assert!((f.logits.get(1, 0) - expect).abs() < 1e-12);
        let stats = f.batch_statistics();
        let (m, v) = stats[0].as_ref().unwrap();
        assert_eq!(m, &vec![2.0]);
        assert_eq!(v, &vec![2.0]);
        // Eval mode with fresh running stats (0, 1) is nearly the identity.
        let e = forward(&p, &x, Mode::Eval).unwrap();
        assert!((e.logits.get(1, 0) - 3.0 / (1.0 + eps).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn forward_does_not_touch_running_stats() {
        let arch = Architecture::default_for(3).unwrap();
        let p = crate::model::init_model(&arch, &[0], 1, 1).unwrap();
        let before = p.clone();
        let x = Tensor2::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, -1.0, 2.0]]).unwrap();
        forward(&p, &x, Mode::Train).unwrap();
        assert_eq!(p, before);
    }
}
