use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::image_grads;
use super::{init_params, random_mask, MaeConfig, MaeParams, MaskPlan};
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, clip_global_norm, cosine_lr, LrSchedule, OptimizerState, Tensor};
use crate::par;
use crate::raster::RasterDataset;

/// Images per parallel gradient job. Fixed so the summation order, and thus
/// every bit of the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: MaeParams<f32>,
    /// Mean masked loss per epoch.
    pub history: Vec<f64>,
    pub steps: u64,
}

/// Streaming shuffle through a buffer of `buffer` slots: the buffer fills in
/// input order, each later arrival evicts a uniformly chosen slot, and the
/// remainder drains in random order.
pub fn shuffle_order(n: usize, buffer: usize, rng: &mut impl Rng) -> Vec<usize> {
    let buffer = buffer.max(1);
    let mut slots: Vec<usize> = Vec::with_capacity(buffer.min(n));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if slots.len() < buffer {
            slots.push(i);
        } else {
            let k = rng.random_range(0..buffer);
            out.push(std::mem::replace(&mut slots[k], i));
        }
    }
    while !slots.is_empty() {
        let k = rng.random_range(0..slots.len());
        out.push(slots.swap_remove(k));
    }
    out
}

pub fn pretrain(dataset: &RasterDataset, cfg: &MaeConfig, seed: u64) -> Result<TrainOutcome> {
    pretrain_with(dataset, cfg, seed, |_, _| {})
}

struct Job {
    image: usize,
    plan: MaskPlan,
    dropout_seed: u64,
}

struct Partial {
    loss: f64,
    count: usize,
    grads: Option<Vec<Tensor<f32>>>,
}

fn run_chunk(params: &MaeParams<f32>, images: &[Tensor<f32>], dataset: &RasterDataset, jobs: &[Job]) -> Result<Partial> {
    let mut part = Partial { loss: 0.0, count: 0, grads: None };
    for job in jobs {
        let presence = params.config.exclude_absent.then(|| dataset.images[job.image].presence.as_slice());
        let res = image_grads(params, &images[job.image], presence, &job.plan, job.dropout_seed).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} on image {}", dataset.images[job.image].parent)),
            other => other,
        })?;
        let Some((loss, grads)) = res else { continue };
        part.loss += loss;
        part.count += 1;
        match &mut part.grads {
            Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            None => part.grads = Some(grads),
        }
    }
    Ok(part)
}

/// Trains from a fresh seeded initialization. `on_epoch(epoch, mean_loss)`
/// runs after every epoch.
pub fn pretrain_with(
    dataset: &RasterDataset,
    cfg: &MaeConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("raster dataset"));
    }
    if dataset.grid_side() != cfg.grid || dataset.feature_dim != cfg.feature_dim {
        return Err(Error::invalid(format!(
            "dataset grid {} / features {} do not match config grid {} / features {}",
            dataset.grid_side(),
            dataset.feature_dim,
            cfg.grid,
            cfg.feature_dim
        )));
    }
    let mut params: MaeParams<f32> = init_params(cfg, seed)?;
    let mut state = OptimizerState::new(&params.set, cfg.adamw);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let images: Vec<Tensor<f32>> = dataset.images.iter().map(|im| im.patches(cfg.feature_dim)).collect();
    let n = images.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let schedule = LrSchedule { initial_lr: cfg.initial_lr, alpha: cfg.lr_alpha, total_steps: cfg.epochs as u64 * steps_per_epoch };
    let mut step = 0u64;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = shuffle_order(n, cfg.shuffle_buffer, &mut rng);
        let (mut epoch_loss, mut epoch_count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut jobs = Vec::with_capacity(batch.len());
            for &image in batch {
                let plan = random_mask(cfg.patches(), cfg.mask_ratio, &mut rng)?;
                jobs.push(Job { image, plan, dropout_seed: rng.random() });
            }
            let chunks: Vec<&[Job]> = jobs.chunks(GRAD_CHUNK).collect();
            let parts = par::try_map(&chunks, |c| run_chunk(&params, &images, dataset, c))?;

            let mut total = Partial { loss: 0.0, count: 0, grads: None };
            for p in parts {
                total.loss += p.loss;
                total.count += p.count;
                if let Some(g) = p.grads {
                    match &mut total.grads {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                        None => total.grads = Some(g),
                    }
                }
            }
            let Some(mut grads) = total.grads else {
                step += 1;
                continue;
            };
            let inv = 1.0 / total.count as f32;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            let batch_loss = total.loss / total.count as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {batch_loss} at epoch {epoch}, step {step}")));
            }
            clip_global_norm(&mut grads, cfg.clip_norm)
                .map_err(|_| Error::NonFinite(format!("gradient at epoch {epoch}, step {step}, batch loss {batch_loss}")))?;
            adamw_step(&mut params.set, &grads, &mut state, cosine_lr(step, &schedule))?;
            step += 1;
            epoch_loss += total.loss;
            epoch_count += total.count;
        }
        let mean = if epoch_count == 0 { 0.0 } else { epoch_loss / epoch_count as f64 };
        log::info!("epoch {} loss {mean:.6}", epoch + 1);
        on_epoch(epoch, mean);
        history.push(mean);
    }
    params.validate()?;
    Ok(TrainOutcome { params, history, steps: step })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (n, buf) in [(0, 3), (5, 1), (10, 3), (10, 100)] {
            let mut o = shuffle_order(n, buf, &mut rng);
            o.sort_unstable();
            assert_eq!(o, (0..n).collect::<Vec<_>>());
        }
        assert_eq!(shuffle_order(5, 1, &mut rng), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn shuffle_buffer_bounds_displacement() {
        // an item can only leave after at least its index minus buffer arrivals
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let o = shuffle_order(1000, 10, &mut rng);
        for (pos, &item) in o.iter().enumerate() {
            assert!(item <= pos + 10);
        }
    }
}
