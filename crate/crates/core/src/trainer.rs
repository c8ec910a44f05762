//! Video-level training: per batch, every video's S clips run through the
//! shared network, their fused score produces the loss, and the summed
//! clip gradients drive one optimizer step.

use crate::consensus::{aggregate, aggregate_backward, TemporalModel};
use crate::error::Result;
use crate::layers::{softmax, softmax_backward, softmax_cross_entropy, Mode};
use crate::optim::SgdMomentum;
use crate::rng::{derive_seed, rng_from};
use crate::sampler::{assemble_clips, Draw, SamplerConfig, VideoSample};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;

pub struct TrainState {
    pub model: TemporalModel,
    pub optim: SgdMomentum,
    pub sampler: SamplerConfig,
    /// One mask slot per model parameter; masked coordinates stay zero.
    pub masks: Option<Vec<Option<Vec<bool>>>>,
    pub base_seed: u64,
}

impl TrainState {
    pub fn new(model: TemporalModel, lr: f64, momentum: f64, sampler: SamplerConfig, base_seed: u64) -> Self {
        let optim = SgdMomentum::new(lr, momentum, &model.param_shapes());
        Self { model, optim, sampler, masks: None, base_seed }
    }

    /// Gradients of the mean video loss over one batch, in parameter order.
    /// Work is parallel over videos; the reduction is a fixed-order fold.
    fn batch_gradients(
        &self,
        batch: &[&VideoSample],
        step_seed: u64,
    ) -> Result<(f64, Vec<Tensor>)> {
        let per_video: Vec<(f64, Vec<Tensor>, Option<Tensor>)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, video)| self.video_gradients(video, derive_seed(step_seed, &[i as u64])))
            .collect::<Result<Vec<_>>>()?;

        let net_param_count = self.model.net.params().len();
        let has_agg_param = self.model.agg.param().is_some();
        let mut total_loss = 0.0;
        let mut grads: Vec<Tensor> = self
            .model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        for (loss, net_grads, agg_grad) in &per_video {
            total_loss += loss;
            debug_assert_eq!(net_grads.len(), net_param_count);
            for (acc, g) in grads.iter_mut().zip(net_grads.iter()) {
                acc.add_assign(g);
            }
            if has_agg_param {
                if let Some(g) = agg_grad {
                    grads[net_param_count].add_assign(g);
                }
            }
        }
        // gradients accumulate as a sum over the batch; the loss reports
        // as a mean
        Ok((total_loss / batch.len() as f64, grads))
    }

    /// Loss and gradients for a single video's consensus forward/backward.
    fn video_gradients(
        &self,
        video: &VideoSample,
        seed: u64,
    ) -> Result<(f64, Vec<Tensor>, Option<Tensor>)> {
        let mut rng = rng_from(seed);
        let clips = assemble_clips(video, &self.sampler, &mut Draw::Random(&mut rng))?;

        let mut raw_scores = Vec::with_capacity(clips.tensors.len());
        let mut caches = Vec::with_capacity(clips.tensors.len());
        for clip in &clips.tensors {
            let (scores, cache) = self.model.net.forward(clip, Mode::Train, &mut rng)?;
            raw_scores.push(scores);
            caches.push(cache);
        }
        let features: Vec<Tensor> = if self.model.agg_on_probs {
            raw_scores
                .iter()
                .map(|s| Tensor::from_vec(softmax(s.data())))
                .collect()
        } else {
            raw_scores.clone()
        };

        let (consensus, agg_cache) = aggregate(&self.model.agg, &features)?;
        let (loss, grad_consensus) = softmax_cross_entropy(&consensus, video.label)?;
        let (feature_grads, agg_grad) =
            aggregate_backward(&self.model.agg, &grad_consensus, &features, &agg_cache)?;

        let mut net_grads: Option<Vec<Tensor>> = None;
        for (s, feature_grad) in feature_grads.iter().enumerate() {
            let score_grad = if self.model.agg_on_probs {
                Tensor::from_vec(softmax_backward(features[s].data(), feature_grad.data()))
            } else {
                feature_grad.clone()
            };
            let (_, clip_grads) = self.model.net.backward(&score_grad, &caches[s])?;
            match &mut net_grads {
                None => net_grads = Some(clip_grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(clip_grads.iter()) {
                        a.add_assign(g);
                    }
                }
            }
        }
        Ok((loss, net_grads.expect("at least one clip"), agg_grad))
    }

    /// One optimizer update from one batch; returns the mean loss.
    pub fn train_step(&mut self, batch: &[&VideoSample], step_seed: u64) -> Result<f64> {
        assert!(!batch.is_empty(), "empty batch");
        let (loss, grads) = self.batch_gradients(batch, step_seed)?;
        let masks = self.masks.as_deref();
        let mut params = self.model.params_mut();
        self.optim.step(&mut params, &grads, masks);
        Ok(loss)
    }

    /// One pass over the dataset in seeded shuffled order; returns the mean
    /// loss across batches.
    pub fn train_epoch(&mut self, videos: &[VideoSample], batch_size: usize, epoch: usize) -> Result<f64> {
        let mut order: Vec<usize> = (0..videos.len()).collect();
        let mut shuffle_rng = rng_from(derive_seed(self.base_seed, &[0xe0, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut weighted_loss = 0.0;
        for (batch_idx, batch_ids) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&VideoSample> = batch_ids.iter().map(|&i| &videos[i]).collect();
            let step_seed = derive_seed(self.base_seed, &[0x7e, epoch as u64, batch_idx as u64]);
            let loss = self.train_step(&batch, step_seed)?;
            weighted_loss += loss * batch.len() as f64;
        }
        Ok(weighted_loss / videos.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: Option<f64>,
}

/// Learning rate at `epoch` under the divide-by-ten milestone schedule.
pub fn lr_at_epoch(base_lr: f64, milestones: (usize, usize), epoch: usize) -> f64 {
    let mut lr = base_lr;
    if epoch >= milestones.0 {
        lr /= 10.0;
    }
    if epoch >= milestones.1 {
        lr /= 10.0;
    }
    lr
}

/// Default milestones scaled to a run length: 40% and 75% of the epochs.
pub fn default_milestones(epochs: usize) -> (usize, usize) {
    ((epochs * 2) / 5, (epochs * 3) / 4)
}

pub fn run_training(
    state: &mut TrainState,
    videos: &[VideoSample],
    epochs: usize,
    base_lr: f64,
    milestones: (usize, usize),
    batch_size: usize,
    eval_each_epoch: bool,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<()> {
    for epoch in 0..epochs {
        let lr = lr_at_epoch(base_lr, milestones, epoch);
        state.optim.learning_rate = lr;
        let loss = state.train_epoch(videos, batch_size, epoch)?;
        let train_accuracy = if eval_each_epoch {
            Some(crate::consensus::evaluate(
                videos,
                &state.model,
                &state.model.agg,
                &state.sampler,
                crate::consensus::EvalMode::SClips,
            )?)
        } else {
            None
        };
        on_epoch(&EpochRecord { epoch, lr, loss, train_accuracy });
    }
    Ok(())
}
