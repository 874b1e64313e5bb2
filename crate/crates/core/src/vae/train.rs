use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grad::loss_and_gradients;
use super::{standard_normal, VaeModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            patience: 10,
            max_epochs: 500,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-frame negative ELBO over the epoch's minibatches.
    pub train_loss: f64,
    pub validation_loss: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: VaeModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(model: &VaeModel, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .tensors()
            .iter()
            .map(|(_, _, t)| vec![0.0; t.len()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Descent step on `model` along `grads`.
    fn update(&mut self, model: &mut VaeModel, grads: &VaeModel) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let grads = grads.tensors();
        for (ti, param) in model.tensors_mut().into_iter().enumerate() {
            let g = grads[ti].2;
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for i in 0..param.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

fn select_columns(data: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    data.select(Axis(1), idx)
}

/// Mean per-frame loss over `data` with fixed noise, in batches.
fn evaluate(model: &VaeModel, data: &Array2<f64>, noise: &Array2<f64>, batch: usize) -> Result<f64> {
    let n = data.ncols();
    let mut total = 0.0;
    let mut lo = 0;
    while lo < n {
        let hi = (lo + batch).min(n);
        let l = loss_and_gradients(
            model,
            &data.slice(ndarray::s![.., lo..hi]),
            &noise.slice(ndarray::s![.., lo..hi]),
        )?;
        total += l.loss * (hi - lo) as f64;
        lo = hi;
    }
    Ok(total / n as f64)
}

/// Trains `model` by Adam on minibatches of power-spectrogram frames
/// (`F × M`, one frame per column), with early stopping on a held-out split.
pub fn train(model: VaeModel, frames: &Array2<f64>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let n = frames.ncols();
    if n == 0 {
        return Err(Error::EmptyInput("training dataset"));
    }
    if frames.nrows() != model.n_freqs() {
        return Err(Error::DimensionMismatch {
            what: "dataset rows vs model frequency bins",
            expected: model.n_freqs(),
            got: frames.nrows(),
        });
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::InvalidArgument(
            "batch size and max epochs must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {} outside [0, 1)",
            cfg.validation_fraction
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = (cfg.validation_fraction * n as f64).round() as usize;
    let (val_idx, train_idx) = if n_val == 0 || n_val >= n {
        // Too small to split: validate on the training frames.
        (order.clone(), order)
    } else {
        let (v, t) = order.split_at(n_val);
        (v.to_vec(), t.to_vec())
    };
    let val = select_columns(frames, &val_idx);
    let val_noise = standard_normal(&mut rng, model.latent_dim(), val.ncols());

    let mut model = model;
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut train_idx = train_idx;
    let start = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch = select_columns(frames, chunk);
            let noise = standard_normal(&mut rng, model.latent_dim(), chunk.len());
            let step = loss_and_gradients(&model, &batch.view(), &noise.view()).map_err(|e| {
                Error::InvalidArgument(format!("training diverged at epoch {epoch}: {e}"))
            })?;
            epoch_loss += step.loss * chunk.len() as f64;
            adam.update(&mut model, &step.gradients);
        }
        let train_loss = epoch_loss / train_idx.len() as f64;
        let validation_loss = evaluate(&model, &val, &val_noise, cfg.batch_size).map_err(|e| {
            Error::InvalidArgument(format!("validation diverged at epoch {epoch}: {e}"))
        })?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });

        if validation_loss < best_loss {
            best_loss = validation_loss;
            best = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model: best,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn frames(f: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((f, n), || rng.random_range(0.1..4.0))
    }

    #[test]
    fn single_frame_training_improves_elbo() {
        let data = frames(8, 1, 3);
        let cfg = TrainConfig {
            patience: 1000,
            max_epochs: 200,
            ..Default::default()
        };
        let out = train(VaeModel::new(8, 2, 1), &data, &cfg).unwrap();
        let first = out.history.first().unwrap().train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn zero_patience_stops_at_first_non_improvement() {
        let data = frames(6, 40, 4);
        let cfg = TrainConfig {
            patience: 0,
            max_epochs: 1000,
            learning_rate: 0.05,
            batch_size: 8,
            ..Default::default()
        };
        let out = train(VaeModel::new(6, 2, 2), &data, &cfg).unwrap();
        let h = &out.history;
        let last = h.len() - 1;
        // Every epoch but the last improved on the best so far.
        for i in 1..last {
            assert!(h[i].validation_loss < h[i - 1].validation_loss);
        }
        if h.len() < cfg.max_epochs {
            let best_before = h[..last]
                .iter()
                .map(|r| r.validation_loss)
                .fold(f64::INFINITY, f64::min);
            assert!(h[last].validation_loss >= best_before);
            assert_eq!(out.best_epoch, last);
        }
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let data = frames(6, 30, 5);
        let cfg = TrainConfig {
            max_epochs: 5,
            batch_size: 7,
            ..Default::default()
        };
        let a = train(VaeModel::new(6, 2, 2), &data, &cfg).unwrap();
        let b = train(VaeModel::new(6, 2, 2), &data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(
            a.history.iter().map(|r| r.validation_loss).collect::<Vec<_>>(),
            b.history.iter().map(|r| r.validation_loss).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_empty_or_mismatched_data() {
        let cfg = TrainConfig::default();
        assert!(train(VaeModel::new(6, 2, 2), &Array2::zeros((6, 0)), &cfg).is_err());
        assert!(train(VaeModel::new(6, 2, 2), &frames(5, 10, 1), &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut data = frames(6, 10, 1);
        data[[0, 0]] = f64::INFINITY;
        let err = train(VaeModel::new(6, 2, 2), &data, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("diverged"));
    }
}
