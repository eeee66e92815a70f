use std::fmt::Write as _;

use super::{AdamConfig, AdamState};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{LossComponents, Model, ModelConfig};
use crate::rng::SeedStreams;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainRecipe {
    pub fn from_config(config: &ModelConfig) -> Self {
        Self {
            epochs: config.epochs,
            batch_size: config.batch_size,
            seed: config.seed,
            shuffle: true,
        }
    }
}

/// Passed to the observer after every optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    /// Zero-based epoch.
    pub epoch: usize,
    /// Steps completed so far, counting this one.
    pub step: u64,
    pub loss: LossComponents,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// One-based.
    pub epoch: usize,
    pub mean_total_loss: f64,
    pub mean_ce: f64,
    pub mean_recon_dpl3: f64,
    pub mean_recon_dpl6: f64,
    /// Accuracy of the predictions made during the epoch's forward passes.
    pub train_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "epoch,mean_total_loss,mean_ce,mean_recon_dpl3,mean_recon_dpl6,train_acc";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                e.epoch,
                e.mean_total_loss,
                e.mean_ce,
                e.mean_recon_dpl3,
                e.mean_recon_dpl6,
                e.train_acc
            )
            .unwrap();
        }
        s
    }
}

/// Mini-batch Adam over `dataset`. Batch means are weighted by batch size so
/// a short final batch counts proportionally.
///
/// On a non-finite loss or gradient the error is returned before the
/// offending update is applied, so `model` keeps the last good parameters.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    dataset: &Dataset,
    recipe: &TrainRecipe,
    mut observer: impl FnMut(&StepInfo, &Model<T>),
) -> Result<TrainLog> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if dataset.classes != model.config().class_count {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model expects {}",
            dataset.classes,
            model.config().class_count
        )));
    }
    let s = model.config().input_size;
    if dataset.image_shape() != [1, s, s] {
        return Err(Error::shape("train", dataset.image_shape(), &[1, s, s]));
    }
    let mut adam = AdamState::new(AdamConfig {
        lr: model.config().lr,
        ..AdamConfig::default()
    });
    let mut shuffle_rng = SeedStreams::new(recipe.seed).stream("shuffle");
    let mut log = TrainLog::default();
    for epoch in 0..recipe.epochs {
        let order = if recipe.shuffle {
            batches(dataset.len(), recipe.batch_size, Some(&mut shuffle_rng))?
        } else {
            batches(dataset.len(), recipe.batch_size, None)?
        };
        let mut sums = [0.0f64; 4];
        let mut correct = 0usize;
        for indices in &order {
            let batch = dataset.batch::<T>(indices)?;
            let (loss, cache) = model
                .forward_loss(&batch.images, &batch.targets)
                .map_err(|e| annotate(e, epoch, adam.steps_taken()))?;
            let grads = model.backward(&cache, &batch.targets)?;
            adam.step(&mut model.parameters_mut(), &grads)
                .map_err(|e| annotate(e, epoch, adam.steps_taken()))?;

            let b = indices.len() as f64;
            for (acc, v) in sums.iter_mut().zip([
                loss.total,
                loss.cross_entropy,
                loss.recon_dpl3,
                loss.recon_dpl6,
            ]) {
                *acc += v * b;
            }
            let c = cache.logits.cols();
            for (row, &label) in cache.logits.data().chunks(c).zip(&batch.labels) {
                if argmax(row) == label {
                    correct += 1;
                }
            }
            observer(
                &StepInfo {
                    epoch,
                    step: adam.steps_taken(),
                    loss,
                },
                model,
            );
        }
        let n = dataset.len() as f64;
        log.epochs.push(EpochStats {
            epoch: epoch + 1,
            mean_total_loss: sums[0] / n,
            mean_ce: sums[1] / n,
            mean_recon_dpl3: sums[2] / n,
            mean_recon_dpl6: sums[3] / n,
            train_acc: correct as f64 / n,
        });
    }
    Ok(log)
}

fn annotate(e: Error, epoch: usize, step: u64) -> Error {
    match e {
        Error::NonFinite(what) => {
            Error::NonFinite(format!("{what} (epoch {}, step {})", epoch + 1, step + 1))
        }
        other => other,
    }
}

pub(crate) fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
