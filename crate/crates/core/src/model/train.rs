use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Adam, Tensor};
use crate::volume::{sample_training_sequence, SlicePose, SliceStack};

use super::{LossMode, Model};

/// Losses above this abort training.
const DIVERGENCE_LIMIT: f64 = 1e6;

const EPOCH_STREAM: u64 = 0x7261_696e;
const VALIDATION_STREAM: u64 = 0x7661_6c69;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: Option<f64>,
}

pub struct TrainData {
    pub train: Vec<SliceStack>,
    /// Fixed held-out sequences scored after every epoch.
    pub validation: Vec<Vec<SlicePose>>,
}

/// One sequence per stack, drawn deterministically from `seed`.
pub fn validation_sequences(stacks: &[SliceStack], m: usize, seed: u64) -> Result<Vec<Vec<SlicePose>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(VALIDATION_STREAM);
    stacks
        .iter()
        .map(|s| Ok(sample_training_sequence(s, m.min(s.num_poses()), &mut rng)?.entries))
        .collect()
}

fn mean_nll(model: &Model<f32>, seqs: &[Vec<SlicePose>]) -> Result<Option<f64>> {
    if seqs.is_empty() {
        return Ok(None);
    }
    let losses = seqs
        .par_iter()
        .map(|s| model.sequence_nll(s, LossMode::Full))
        .collect::<Result<Vec<f32>>>()?;
    Ok(Some(
        losses.iter().map(|&l| l as f64).sum::<f64>() / losses.len() as f64,
    ))
}

/// Trains from the model's current epoch up to `config.epochs`.
///
/// Each epoch visits the training stacks once in shuffled order, one random
/// sequence per stack, `batch_size` stacks per optimizer step. Batch elements
/// run in parallel; their gradients are summed in batch order so the result
/// does not depend on the thread count. A non-finite or exploding loss
/// restores the parameters from the end of the last completed epoch and
/// returns [`Error::Divergence`].
///
/// Optimizer moments are not part of the model, so a resumed run restarts
/// them from zero.
pub fn train(model: &mut Model<f32>, data: &TrainData, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
    let config = model.config().clone();
    if data.train.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two training volumes, got {}",
            data.train.len()
        )));
    }
    for s in &data.train {
        if s.num_poses() != config.num_poses() {
            return Err(Error::InvalidArgument(format!(
                "subject {} has {} slices, model expects {}",
                s.subject,
                s.num_poses(),
                config.num_poses()
            )));
        }
    }
    let mut flow_opt = Adam::new(config.optimizer, model.flow().params().tensors());
    let mut proc_opt = Adam::new(config.process_optimizer(), model.process().params().tensors());
    let n_flow = model.flow().params().len();
    let mut last_good = model.clone();

    for epoch in model.epochs_trained()..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(EPOCH_STREAM + epoch as u64);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| sample_training_sequence(&data.train[i], config.sequence_length, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let results: Vec<Result<(f32, Vec<Tensor<f32>>)>> = batch
                .par_iter()
                .map(|s| model.sequence_nll_grad(&s.entries, config.loss))
                .collect();

            let scale = 1.0 / batch.len() as f32;
            let mut loss = 0.0f64;
            let mut grads: Option<Vec<Tensor<f32>>> = None;
            let mut failure = None;
            for r in results {
                match r {
                    Ok((l, g)) => {
                        loss += l as f64;
                        match grads.as_mut() {
                            None => grads = Some(g),
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&g) {
                                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                                        *x += y;
                                    }
                                }
                            }
                        }
                    }
                    Err(e @ (Error::NonFinite(_) | Error::NumericOverflow(_))) => {
                        log::warn!("epoch {} step {}: {e}", epoch + 1, step + 1);
                        failure = Some(f64::NAN);
                    }
                    Err(e) => return Err(e),
                }
            }
            let loss = failure.unwrap_or(loss / batch.len() as f64);
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                *model = last_good;
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    step: step + 1,
                    loss,
                });
            }
            let mut grads = grads.expect("non-empty batch");
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            let (fg, pg) = grads.split_at(n_flow);
            flow_opt.step(model.flow_mut().params_mut().tensors_mut(), fg)?;
            proc_opt.step(model.process_mut().params_mut().tensors_mut(), pg)?;
            epoch_loss += loss;
            steps += 1;
        }

        let record = EpochRecord {
            epoch: epoch + 1,
            train_nll: epoch_loss / steps as f64,
            val_nll: mean_nll(model, &data.validation)?,
        };
        log::info!(
            "epoch {} train_nll {:.3} val_nll {}",
            record.epoch,
            record.train_nll,
            record.val_nll.map_or("-".into(), |v| format!("{v:.3}"))
        );
        model.history.push(record.clone());
        on_epoch(&record);
        last_good = model.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::volume::{generate_phantom, PhantomSpec};

    fn stacks(n: usize, seed: u64) -> Vec<SliceStack> {
        (0..n)
            .map(|i| {
                let spec = PhantomSpec {
                    shape: [12, 8, 8],
                    ..PhantomSpec::default()
                }
                .with_seed(seed + i as u64);
                SliceStack::from_volume(&generate_phantom(&spec).unwrap(), 0.75, 6).unwrap()
            })
            .collect()
    }

    fn config() -> crate::model::ModelConfig {
        let mut cfg = tiny_config(8, 8, 6);
        cfg.flow.hidden_channels = 8;
        cfg.epochs = 6;
        cfg.batch_size = 4;
        cfg.optimizer.learning_rate = 3e-3;
        cfg
    }

    fn data() -> TrainData {
        let val = stacks(4, 100);
        TrainData {
            train: stacks(12, 0),
            validation: validation_sequences(&val, 3, 9).unwrap(),
        }
    }

    #[test]
    fn loss_decreases_and_is_reproducible() {
        let data = data();
        let mut a = Model::<f32>::new(config()).unwrap();
        let untrained = a.clone();
        train(&mut a, &data, |_| {}).unwrap();
        let h = a.history();
        assert_eq!(h.len(), 6);
        assert!(h[5].train_nll < h[0].train_nll, "{h:?}");
        assert!(h[5].val_nll.unwrap() < mean_nll(&untrained, &data.validation).unwrap().unwrap());

        let mut b = Model::<f32>::new(config()).unwrap();
        train(&mut b, &data, |_| {}).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resuming_extends_the_history() {
        let data = data();
        let mut cfg = config();
        cfg.epochs = 2;
        let mut m = Model::<f32>::new(cfg.clone()).unwrap();
        train(&mut m, &data, |_| {}).unwrap();
        cfg.epochs = 4;
        m.set_training(&cfg).unwrap();
        let mut seen = Vec::new();
        train(&mut m, &data, |r| seen.push(r.epoch)).unwrap();
        assert_eq!(seen, vec![3, 4]);
        assert_eq!(m.history().len(), 4);
    }

    #[test]
    fn divergence_restores_last_epoch() {
        let data = data();
        let mut cfg = config();
        cfg.epochs = 3;
        cfg.optimizer.learning_rate = 1e6;
        let mut m = Model::<f32>::new(cfg).unwrap();
        let err = train(&mut m, &data, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
        assert!(m.named_params().all(|(_, t)| t.is_finite()));
    }

    #[test]
    fn too_few_volumes_rejected() {
        let mut m = Model::<f32>::new(config()).unwrap();
        let data = TrainData {
            train: stacks(1, 0),
            validation: Vec::new(),
        };
        assert!(train(&mut m, &data, |_| {}).is_err());
    }
}
