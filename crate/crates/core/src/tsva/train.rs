use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::focus::select_sharper;
use crate::image::Image;
use crate::nn::{adam_step, seeded_rng, AdamState, Mode, Tape, Tensor4, DEFAULT_LEARNING_RATE};
use crate::phantom::PatchRecord;
use crate::scalar::Scalar;
use crate::tsva::TsvaModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    /// Start from the identity map (output = `y1`) by zeroing the final
    /// projection before the first step.
    pub zero_init_output: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 20,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            zero_init_output: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-image summed squared error over the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Wall time, left out of checkpoints so reruns stay byte-identical.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Snapshot with the lowest validation loss.
    pub best: TsvaModel<T>,
    pub best_epoch: usize,
    pub last: TsvaModel<T>,
    pub optimizer: AdamState<T>,
    pub history: Vec<EpochLog>,
}

fn batch<T: Scalar>(records: &[&PatchRecord<T>]) -> Result<(Tensor4<T>, Tensor4<T>, Tensor4<T>)> {
    let pick = |f: fn(&PatchRecord<T>) -> &Image<T>| {
        let imgs: Vec<&Image<T>> = records.iter().map(|r| f(r)).collect();
        Tensor4::from_images(&imgs)
    };
    Ok((pick(|r| &r.y1)?, pick(|r| &r.y2)?, pick(|r| &r.ground_truth)?))
}

/// Mean per-image summed squared error in evaluation mode.
pub fn validation_loss<T: Scalar>(model: &TsvaModel<T>, records: &[PatchRecord<T>], batch_size: usize) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let (y1, y2, gt) = batch(&refs)?;
        let out = model.predict(&y1, &y2)?;
        let sse: f64 = out
            .as_slice()
            .iter()
            .zip(gt.as_slice())
            .map(|(&a, &b)| (a - b).to_f64_lossy().powi(2))
            .sum();
        total += sse;
    }
    Ok(total / records.len() as f64)
}

/// Mini-batch ADAM on the batch-mean of per-image summed squared errors.
///
/// `on_epoch` sees each epoch's log as it completes.
pub fn train<T: Scalar>(
    model: TsvaModel<T>,
    train_set: &[PatchRecord<T>],
    val_set: &[PatchRecord<T>],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(Error::domain("epochs and batch_size must be >= 1"));
    }
    if !(opts.learning_rate > 0.0) {
        return Err(Error::domain("learning rate must be positive"));
    }
    let mut model = model;
    if opts.zero_init_output {
        model.zero_output_projection();
    }
    let mut optimizer = AdamState::new(&model.params, opts.learning_rate);
    let mut history = Vec::with_capacity(opts.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=opts.epochs {
        let started = Instant::now();
        order.shuffle(&mut seeded_rng(opts.seed, 1000 + epoch as u64));
        let mut sum = 0.0;
        for idx in order.chunks(opts.batch_size) {
            let refs: Vec<_> = idx.iter().map(|&i| &train_set[i]).collect();
            let (y1, y2, gt) = batch(&refs)?;
            let mut tape = Tape::new();
            let (a, b, t) = (tape.input(y1), tape.input(y2), tape.input(gt));
            let out = model.forward_on_tape(&mut tape, a, b, Mode::Train)?;
            let loss = tape.mse_loss(out, t)?;
            let value = tape.value(loss).as_slice()[0].to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("training loss became {value} in epoch {epoch}")));
            }
            sum += value * refs.len() as f64;
            model.params.zero_grads();
            tape.backward(loss, &mut model.params)?;
            adam_step(&mut model.params, &mut optimizer);
        }
        let val_loss = if val_set.is_empty() {
            f64::NAN
        } else {
            validation_loss(&model, val_set, opts.batch_size)?
        };
        let log = EpochLog {
            epoch,
            train_loss: sum / train_set.len() as f64,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        history.push(log);
        if val_set.is_empty() || val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = model.clone();
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        optimizer,
        history,
    })
}

/// Pads with mirrored edges so both sides are multiples of `m`.
fn pad_to_multiple<T: Scalar>(img: &Image<T>, m: usize) -> Image<T> {
    let (w, h) = img.dims();
    img.pad_reflect((m - w % m) % m, (m - h % m) % m)
}

/// Fuses two captures of one field of view of any size.
///
/// The sharper capture (by Brenner score) becomes `y1`. The output is not
/// clamped; exporters clamp to `[0, 1]`.
pub fn infer<T: Scalar>(model: &TsvaModel<T>, a: &Image<T>, b: &Image<T>) -> Result<Image<T>> {
    Ok(infer_batch(model, &[(a, b)])?.remove(0))
}

/// [`infer`] for several same-sized pairs in one pass.
pub fn infer_batch<T: Scalar>(model: &TsvaModel<T>, pairs: &[(&Image<T>, &Image<T>)]) -> Result<Vec<Image<T>>> {
    let first = pairs.first().ok_or_else(|| Error::shape("no image pairs"))?;
    let (w, h) = first.0.dims();
    let m = model.config.size_multiple();
    let mut y1s = Vec::with_capacity(pairs.len());
    let mut y2s = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        a.check_same_shape(b, "capture pair")?;
        if a.dims() != (w, h) {
            return Err(Error::shape("pairs in a batch must share one shape"));
        }
        let (s, t) = select_sharper(a, b)?;
        y1s.push(pad_to_multiple(&s, m));
        y2s.push(pad_to_multiple(&t, m));
    }
    let y1 = Tensor4::from_images(&y1s.iter().collect::<Vec<_>>())?;
    let y2 = Tensor4::from_images(&y2s.iter().collect::<Vec<_>>())?;
    let out = model.predict(&y1, &y2)?;
    (0..pairs.len()).map(|n| out.image(n, 0).crop(0, 0, w, h)).collect()
}
