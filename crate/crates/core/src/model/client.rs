use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{config, contract, Error, Result};
use crate::nn::{backward, forward, masked_bce_loss, sgd_step, Mode, ParamGroup};
use crate::seeds::{self, Rng};

use super::ParamSet;

/// Which head columns enter the local loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Only columns of classes the client holds labels for.
    LocalClasses,
    /// Every head column; absent classes count as negatives.
    AllClassesNegatives,
}

/// One client's model, data views and private shuffle stream.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub params: ParamSet,
    /// `C_k`, sorted global class indices.
    pub classes: Vec<usize>,
    /// Global class predicted by each head column.
    pub head_classes: Vec<usize>,
    /// Label columns aligned with `head_classes`.
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub epoch_counter: usize,
    rng: Rng,
}

impl ClientState {
    pub fn new(
        id: usize,
        params: ParamSet,
        classes: Vec<usize>,
        head_classes: Vec<usize>,
        train: LabeledSet,
        val: LabeledSet,
        shuffle_seed: u64,
    ) -> Result<Self> {
        if params.head_width() != head_classes.len() {
            return contract(format!(
                "client {id}: head width {} but {} head classes",
                params.head_width(),
                head_classes.len()
            ));
        }
        if train.y.cols() != head_classes.len() || val.y.cols() != head_classes.len() {
            return contract(format!("client {id}: label columns do not match the head"));
        }
        if classes.is_empty() || classes.iter().any(|c| !head_classes.contains(c)) {
            return contract(format!("client {id}: local classes are not all in the head"));
        }
        if train.is_empty() {
            return config(format!("client {id} has no training samples"));
        }
        Ok(Self {
            id,
            params,
            classes,
            head_classes,
            train,
            val,
            epoch_counter: 0,
            rng: seeds::stream(shuffle_seed, "shuffle", id as u64),
        })
    }

    /// Head columns entering the loss under `mode`.
    pub fn loss_mask(&self, mode: LossMode) -> Vec<usize> {
        match mode {
            LossMode::AllClassesNegatives => (0..self.head_classes.len()).collect(),
            LossMode::LocalClasses => self
                .head_classes
                .iter()
                .enumerate()
                .filter(|(_, c)| self.classes.binary_search(c).is_ok())
                .map(|(j, _)| j)
                .collect(),
        }
    }

    fn run_epochs(
        &mut self,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        mode: LossMode,
        frozen: &[ParamGroup],
    ) -> Result<f64> {
        if batch_size == 0 {
            return config("batch_size must be >= 1");
        }
        let mask = self.loss_mask(mode);
        let n = self.train.len();
        let (mut total, mut batches) = (0.0, 0usize);
        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(batch_size) {
                let x = self.train.x.select_rows(chunk);
                let y = self.train.y.select_rows(chunk);
                let fwd = forward(&self.params, &x, Mode::Train)?;
                let loss = masked_bce_loss(&fwd.output, &y, &mask)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric {
                        layer: self.params.feature.len() + 1,
                        message: format!("client {}: non-finite training loss", self.id),
                    });
                }
                let grads = backward(&self.params, &fwd, &y, &mask)?;
                self.params.apply_batch_statistics(&fwd)?;
                sgd_step(&mut self.params, &grads, lr, frozen)?;
                total += loss;
                batches += 1;
            }
        }
        Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
    }

    /// Head-only training with the feature extractor frozen.
    ///
    /// Batch-norm running statistics still update. Does not advance
    /// `epoch_counter`.
    pub fn head_warmup(&mut self, epochs: usize, lr: f64, batch_size: usize, mode: LossMode) -> Result<f64> {
        self.run_epochs(epochs, lr, batch_size, mode, &[ParamGroup::FeatureExtractor])
    }

    /// `epochs` shuffled passes of minibatch SGD over the training split.
    ///
    /// Returns the mean minibatch loss.
    pub fn local_train(&mut self, epochs: usize, lr: f64, batch_size: usize, mode: LossMode) -> Result<f64> {
        if epochs == 0 {
            return config("local training needs at least one epoch");
        }
        let loss = self.run_epochs(epochs, lr, batch_size, mode, &[])?;
        self.epoch_counter += epochs;
        Ok(loss)
    }

    /// Eval-mode loss on the validation split.
    pub fn validation_loss(&self, mode: LossMode) -> Result<f64> {
        let fwd = forward(&self.params, &self.val.x, Mode::Eval)?;
        masked_bce_loss(&fwd.output, &self.val.y, &self.loss_mask(mode))
    }
}
