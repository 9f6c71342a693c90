//! Sequence-at-a-time training loop: one Adam update per sequence, a fresh
//! shuffle every epoch, per-epoch train/validation history, early stopping
//! on validation loss, and retention of the best-validation parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::{LabeledExample, Vocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::tape::Tape;

/// A labeled sequence already mapped to token ids.
#[derive(Debug, Clone)]
pub struct EncodedExample {
    pub ids: Vec<usize>,
    pub labels: Vec<crate::data::Label>,
}

/// Maps examples through the vocabulary (unknown tokens become id 0).
pub fn encode_examples(vocab: &Vocab, examples: &[LabeledExample]) -> Vec<EncodedExample> {
    examples
        .iter()
        .map(|ex| EncodedExample {
            ids: vocab.encode(&ex.tokens),
            labels: ex.labels.clone(),
        })
        .collect()
}

/// One epoch of history.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sequence training loss, in visit order.
    pub train_loss: f64,
    /// Mean per-sequence loss on the validation set.
    pub val_loss: f64,
    /// Exact-match fraction on the validation set.
    pub val_sentence_acc: f64,
}

/// What [`train`] leaves behind besides the updated model parameters.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    /// Epoch whose parameters the model now holds.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// True when patience ran out before the epoch budget did.
    pub stopped_early: bool,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let salt = (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_add(1));
    order.shuffle(&mut rng);
    order
}

fn mean_loss(model: &Model, examples: &[EncodedExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::new();
        let loss = model.sequence_loss(&mut tape, &ex.ids, &ex.labels)?;
        total += tape.value(loss).item();
    }
    Ok(total / examples.len() as f64)
}

fn sentence_accuracy(model: &Model, examples: &[EncodedExample]) -> Result<f64> {
    let mut exact = 0usize;
    for ex in examples {
        if model.decode(&ex.ids)? == ex.labels {
            exact += 1;
        }
    }
    Ok(exact as f64 / examples.len() as f64)
}

/// Trains the model in place. Visits the training set in a freshly shuffled
/// order each epoch, applying one Adam update per sequence. After every
/// epoch the validation set is scored; when it has not improved for
/// `patience` consecutive epochs, training stops. On return the model holds
/// the parameters of its best-validation epoch.
///
/// An empty validation slice falls back to scoring the training set, so
/// deliberate overfitting runs report training-set accuracy in the history.
pub fn train(
    model: &mut Model,
    config: &TrainConfig,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let val_set = if val_set.is_empty() {
        train_set
    } else {
        val_set
    };

    let mut adam = Adam::new(&model.store, config.lr);
    let mut history = Vec::new();
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = model.store.snapshot();
    let mut since_improve = 0usize;
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        let mut epoch_total = 0.0;
        for (k, &i) in epoch_order(train_set.len(), config.seed, epoch)
            .iter()
            .enumerate()
        {
            let ex = &train_set[i];
            model.store.zero_grads();
            let mut tape = Tape::new();
            let loss = model
                .sequence_loss(&mut tape, &ex.ids, &ex.labels)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!(
                        "{what} at epoch {epoch}, sequence {k} (corpus index {i})"
                    )),
                    other => other,
                })?;
            epoch_total += tape.value(loss).item();
            tape.backward(loss);
            tape.accumulate_param_grads(&mut model.store);
            adam.step(&mut model.store);
        }

        let stats = EpochStats {
            epoch,
            train_loss: epoch_total / train_set.len() as f64,
            val_loss: mean_loss(model, val_set)?,
            val_sentence_acc: sentence_accuracy(model, val_set)?,
        };
        let improved = stats.val_loss < best_val_loss;
        if improved {
            best_val_loss = stats.val_loss;
            best_epoch = epoch;
            best_params = model.store.snapshot();
            since_improve = 0;
        } else {
            since_improve += 1;
        }
        history.push(stats);

        if let Some(patience) = config.patience {
            if since_improve >= patience {
                stopped_early = true;
                break;
            }
        }
    }

    model.store.restore(&best_params);
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss,
        stopped_early,
    })
}
