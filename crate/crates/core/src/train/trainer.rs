use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{encode_targets, Adam, Dataset, Image, LossKind, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate_dataset;
use crate::graph::{Graph, Mode};
use crate::network::{Model, ModelParams, HEATMAP_STRIDE};
use crate::tensor::{Scalar, Tensor};
use crate::train::augment;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_nme: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub params: ModelParams<T>,
    pub log: Vec<EpochLog>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn final_val_nme(&self) -> Option<f64> {
        self.log.last().and_then(|l| l.val_nme)
    }
}

struct Batch<T: Scalar> {
    images: Tensor<T>,
    targets: Tensor<T>,
    mask: Vec<T>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sample order of `epoch`; augmentation of sample `i` in `epoch` draws from
/// its own stream, so batches do not depend on loader timing.
fn make_batch<T: Scalar>(
    data: &Dataset,
    idx: &[usize],
    epoch: usize,
    cfg: &TrainConfig,
    input_size: usize,
) -> Result<Batch<T>> {
    let aug = cfg.augment();
    let mut images = Vec::with_capacity(idx.len());
    let mut sets = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &data.samples[i];
        let mut rng = rng_for(cfg.seed, ((epoch as u64) << 32) | i as u64);
        let (img, lm) = augment(&s.image, &s.landmarks, &aug, data.layout, input_size, &mut rng)?;
        images.push(img);
        sets.push(lm);
    }
    let refs: Vec<&Image> = images.iter().collect();
    let hm = input_size / HEATMAP_STRIDE;
    let (targets, mask) = encode_targets(&sets, (hm, hm), HEATMAP_STRIDE, cfg.gaussian_sigma)?;
    Ok(Batch {
        images: Image::batch(&refs)?,
        targets: targets.heatmaps,
        mask,
    })
}

fn step<T: Scalar>(
    model: &Model,
    params: &mut ModelParams<T>,
    adam: &mut Adam,
    batch: &Batch<T>,
    loss: LossKind,
    lr: f64,
) -> Result<f64> {
    let (value, grads, stats) = {
        let mut g = Graph::with_params(&*params);
        g.set_mode(Mode::Train).set_track_params(true);
        let x = g.input(batch.images.clone());
        let y = model.forward(&mut g, x)?;
        let l = match loss {
            LossKind::Mse => g.mse_loss(y, &batch.targets, Some(&batch.mask))?,
            LossKind::Bce => g.bce_with_logits(y, &batch.targets, Some(&batch.mask))?,
        };
        let value = g.value(l).data()[0].to_f64_lossy();
        if !value.is_finite() {
            let op = g.first_non_finite().unwrap_or_else(|| "loss".into());
            return Err(Error::Numeric { op });
        }
        g.backward(l)?;
        let grads = g.param_grads();
        if let Some((name, _)) = grads.iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric {
                op: format!("gradient of {name}"),
            });
        }
        (value, grads, g.take_stat_updates())
    };
    adam.step(params, &grads, lr)?;
    params.apply_stat_updates(&stats)?;
    Ok(value)
}

/// Runs `cfg.epochs` epochs of Adam on `data`, evaluating NME (normalized by
/// landmarks `norm`) on `val` after each epoch. Batches are prepared on a
/// loader thread through a bounded queue.
pub fn train<T: Scalar>(
    model: &Model,
    params: ModelParams<T>,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    norm: (usize, usize),
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    model.check_params(&params)?;
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let landmarks = model.config().landmarks;
    if let Some(s) = data.samples.iter().find(|s| s.landmarks.len() != landmarks) {
        return Err(Error::config(format!(
            "training sample has {} landmarks, model predicts {landmarks}",
            s.landmarks.len()
        )));
    }
    if norm.0 >= landmarks || norm.1 >= landmarks {
        return Err(Error::config(format!(
            "normalization indices {norm:?} out of range for {landmarks} landmarks"
        )));
    }
    let input_size = model.config().input_size;
    let schedule = cfg.schedule();
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);

    let mut params = params;
    let mut adam = Adam::new(cfg.adam());
    let mut log = Vec::with_capacity(cfg.epochs);

    std::thread::scope(|s| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Batch<T>>>(cfg.prefetch);
        s.spawn(move || {
            for epoch in 0..cfg.epochs {
                let mut order: Vec<usize> = (0..data.len()).collect();
                order.shuffle(&mut rng_for(cfg.seed, u64::MAX - epoch as u64));
                for idx in order.chunks(cfg.batch_size) {
                    let b = make_batch(data, idx, epoch, cfg, input_size);
                    let failed = b.is_err();
                    if tx.send(b).is_err() || failed {
                        return;
                    }
                }
            }
        });

        for epoch in 0..cfg.epochs {
            let start = Instant::now();
            let lr = schedule.lr(epoch);
            let mut total = 0.0;
            for _ in 0..batches_per_epoch {
                let batch = rx
                    .recv()
                    .map_err(|_| Error::Usage("data loader stopped early".into()))??;
                total += step(model, &mut params, &mut adam, &batch, cfg.loss, lr)?;
            }
            let val_nme = match val {
                Some(v) => Some(evaluate_dataset(model, &params, v, norm)?.overall),
                None => None,
            };
            let entry = EpochLog {
                epoch,
                lr,
                loss: total / batches_per_epoch as f64,
                val_nme,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {epoch}: lr {lr:.2e} loss {:.6} val NME {:?}",
                entry.loss,
                entry.val_nme
            );
            on_epoch(&entry);
            log.push(entry);
        }
        Ok(())
    })?;

    Ok(TrainOutcome { params, log })
}
