//! Consensus over clips: run the shared-weight network on every sampled
//! clip, fuse the clip scores with an aggregation function, and score the
//! video from the fused result.

use crate::error::{Error, Result};
use crate::layers::{softmax, Mode};
use crate::network::Network;
use crate::sampler::{assemble_clips, tile_windows, Draw, SamplerConfig, VideoSample};
use crate::tensor::Tensor;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregatorKind {
    Average,
    Max,
    Weighted,
    Attention,
}

impl AggregatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::Average => "average",
            AggregatorKind::Max => "max",
            AggregatorKind::Weighted => "weighted",
            AggregatorKind::Attention => "attention",
        }
    }
}

/// Fusion function Q. Weighted and attention carry trainable parameters.
#[derive(Debug, Clone)]
pub enum Aggregator {
    Average,
    Max,
    /// One learned scalar per clip.
    Weighted { weights: Tensor },
    /// Shared query vector; clip weights are softmax of its dot products
    /// with the clip features.
    Attention { query: Tensor },
}

impl Aggregator {
    pub fn new(kind: AggregatorKind, clip_count: usize, feature_len: usize) -> Self {
        match kind {
            AggregatorKind::Average => Aggregator::Average,
            AggregatorKind::Max => Aggregator::Max,
            AggregatorKind::Weighted => Aggregator::Weighted {
                weights: Tensor::filled(&[clip_count], 1.0 / clip_count as f64),
            },
            AggregatorKind::Attention => Aggregator::Attention {
                query: Tensor::zeros(&[feature_len]),
            },
        }
    }

    pub fn kind(&self) -> AggregatorKind {
        match self {
            Aggregator::Average => AggregatorKind::Average,
            Aggregator::Max => AggregatorKind::Max,
            Aggregator::Weighted { .. } => AggregatorKind::Weighted,
            Aggregator::Attention { .. } => AggregatorKind::Attention,
        }
    }

    pub fn param(&self) -> Option<&Tensor> {
        match self {
            Aggregator::Weighted { weights } => Some(weights),
            Aggregator::Attention { query } => Some(query),
            _ => None,
        }
    }

    pub fn param_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Aggregator::Weighted { weights } => Some(weights),
            Aggregator::Attention { query } => Some(query),
            _ => None,
        }
    }
}

/// What aggregate() records for the backward pass.
#[derive(Debug, Clone)]
pub struct AggCache {
    pub consensus: Tensor,
    /// Normalized clip weights (attention only).
    pub clip_weights: Option<Vec<f64>>,
    /// Winning clip per element (max only; lowest index wins ties).
    pub argmax: Option<Vec<usize>>,
}

fn check_same_shape(clip_outputs: &[Tensor]) -> Result<()> {
    let first = clip_outputs[0].shape();
    for out in &clip_outputs[1..] {
        if out.shape() != first {
            return Err(Error::ShapeMismatch {
                context: "clip outputs disagree",
                expected: first.to_vec(),
                got: out.shape().to_vec(),
            });
        }
    }
    Ok(())
}

pub fn aggregate(agg: &Aggregator, clip_outputs: &[Tensor]) -> Result<(Tensor, AggCache)> {
    assert!(!clip_outputs.is_empty());
    check_same_shape(clip_outputs)?;
    let clips = clip_outputs.len();
    let len = clip_outputs[0].len();
    match agg {
        Aggregator::Average => {
            let mut data = vec![0.0; len];
            for out in clip_outputs {
                for (d, &v) in data.iter_mut().zip(out.data()) {
                    *d += v;
                }
            }
            for d in &mut data {
                *d /= clips as f64;
            }
            let consensus = Tensor::new(clip_outputs[0].shape().to_vec(), data)?;
            Ok((
                consensus.clone(),
                AggCache { consensus, clip_weights: None, argmax: None },
            ))
        }
        Aggregator::Max => {
            let mut data = clip_outputs[0].data().to_vec();
            let mut argmax = vec![0usize; len];
            for (s, out) in clip_outputs.iter().enumerate().skip(1) {
                for (i, &v) in out.data().iter().enumerate() {
                    if v > data[i] {
                        data[i] = v;
                        argmax[i] = s;
                    }
                }
            }
            let consensus = Tensor::new(clip_outputs[0].shape().to_vec(), data)?;
            Ok((
                consensus.clone(),
                AggCache { consensus, clip_weights: None, argmax: Some(argmax) },
            ))
        }
        Aggregator::Weighted { weights } => {
            if weights.len() != clips {
                return Err(Error::ShapeMismatch {
                    context: "weighted aggregator clip count",
                    expected: vec![weights.len()],
                    got: vec![clips],
                });
            }
            let mut data = vec![0.0; len];
            for (s, out) in clip_outputs.iter().enumerate() {
                let w = weights.data()[s];
                for (d, &v) in data.iter_mut().zip(out.data()) {
                    *d += w * v;
                }
            }
            let consensus = Tensor::new(clip_outputs[0].shape().to_vec(), data)?;
            Ok((
                consensus.clone(),
                AggCache { consensus, clip_weights: None, argmax: None },
            ))
        }
        Aggregator::Attention { query } => {
            if query.len() != len {
                return Err(Error::ShapeMismatch {
                    context: "attention query vs clip feature length",
                    expected: vec![query.len()],
                    got: vec![len],
                });
            }
            let scores: Vec<f64> = clip_outputs
                .iter()
                .map(|out| {
                    out.data()
                        .iter()
                        .zip(query.data())
                        .map(|(&f, &q)| f * q)
                        .sum()
                })
                .collect();
            let clip_weights = softmax(&scores);
            let mut data = vec![0.0; len];
            for (s, out) in clip_outputs.iter().enumerate() {
                let w = clip_weights[s];
                for (d, &v) in data.iter_mut().zip(out.data()) {
                    *d += w * v;
                }
            }
            let consensus = Tensor::new(clip_outputs[0].shape().to_vec(), data)?;
            Ok((
                consensus.clone(),
                AggCache { consensus, clip_weights: Some(clip_weights), argmax: None },
            ))
        }
    }
}

/// Gradients wrt every clip output, plus the aggregator-parameter gradient
/// when the aggregator is trainable.
pub fn aggregate_backward(
    agg: &Aggregator,
    grad_consensus: &Tensor,
    clip_outputs: &[Tensor],
    cache: &AggCache,
) -> Result<(Vec<Tensor>, Option<Tensor>)> {
    let clips = clip_outputs.len();
    match agg {
        Aggregator::Average => {
            let mut g = grad_consensus.clone();
            g.scale(1.0 / clips as f64);
            Ok((vec![g; clips], None))
        }
        Aggregator::Max => {
            let argmax = cache.argmax.as_ref().expect("max cache");
            let mut grads = vec![Tensor::zeros(grad_consensus.shape()); clips];
            for (i, &winner) in argmax.iter().enumerate() {
                grads[winner].data_mut()[i] = grad_consensus.data()[i];
            }
            Ok((grads, None))
        }
        Aggregator::Weighted { weights } => {
            let mut grads = Vec::with_capacity(clips);
            let mut param_grad = vec![0.0; clips];
            for (s, out) in clip_outputs.iter().enumerate() {
                let mut g = grad_consensus.clone();
                g.scale(weights.data()[s]);
                grads.push(g);
                param_grad[s] = grad_consensus
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&a, &b)| a * b)
                    .sum();
            }
            Ok((grads, Some(Tensor::from_vec(param_grad))))
        }
        Aggregator::Attention { query } => {
            let clip_weights = cache.clip_weights.as_ref().expect("attention cache");
            let consensus = &cache.consensus;
            let dot_consensus: f64 = grad_consensus
                .data()
                .iter()
                .zip(consensus.data())
                .map(|(&a, &b)| a * b)
                .sum();
            let mut grads = Vec::with_capacity(clips);
            let mut query_grad = vec![0.0; query.len()];
            for (s, out) in clip_outputs.iter().enumerate() {
                let dot_clip: f64 = grad_consensus
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&a, &b)| a * b)
                    .sum();
                // gradient wrt the pre-softmax attention score of clip s
                let score_grad = clip_weights[s] * (dot_clip - dot_consensus);
                let mut g = grad_consensus.clone();
                g.scale(clip_weights[s]);
                for (gv, &qv) in g.data_mut().iter_mut().zip(query.data()) {
                    *gv += score_grad * qv;
                }
                grads.push(g);
                for (qg, &fv) in query_grad.iter_mut().zip(out.data()) {
                    *qg += score_grad * fv;
                }
            }
            Ok((grads, Some(Tensor::from_vec(query_grad))))
        }
    }
}

/// Anything that can score a single clip tensor; the dense network and the
/// sparse inference engine both qualify.
pub trait ClipScorer: Sync {
    fn score_clip(&self, clip: &Tensor) -> Result<Tensor>;
    fn class_count(&self) -> usize;
}

/// Shared-weight network plus the fusion function trained with it.
#[derive(Debug, Clone)]
pub struct TemporalModel {
    pub net: Network,
    pub agg: Aggregator,
    /// Aggregate softmax probabilities instead of raw scores.
    pub agg_on_probs: bool,
}

impl TemporalModel {
    pub fn new(net: Network, agg: Aggregator) -> Self {
        Self { net, agg, agg_on_probs: false }
    }

    /// Network parameters followed by the aggregator parameter, if any.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.net.params();
        if let Some(p) = self.agg.param() {
            out.push(p);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.net.params_mut();
        if let Some(p) = self.agg.param_mut() {
            out.push(p);
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.shape().to_vec()).collect()
    }

    fn clip_feature(&self, clip: &Tensor) -> Result<Tensor> {
        let mut rng = crate::rng::rng_from(0);
        let (scores, _) = self.net.forward(clip, Mode::Eval, &mut rng)?;
        if self.agg_on_probs {
            Ok(Tensor::from_vec(softmax(scores.data())))
        } else {
            Ok(scores)
        }
    }
}

impl ClipScorer for TemporalModel {
    fn score_clip(&self, clip: &Tensor) -> Result<Tensor> {
        self.clip_feature(clip)
    }

    fn class_count(&self) -> usize {
        self.net.class_count
    }
}

/// What one consensus pass produced for a video.
#[derive(Debug, Clone)]
pub struct ConsensusRecord {
    pub clip_outputs: Vec<Tensor>,
    pub consensus: Tensor,
    pub attention_weights: Option<Vec<f64>>,
    pub probs: Vec<f64>,
    pub prediction: usize,
    pub loss: Option<f64>,
}

/// Sample S clips, score each with the shared scorer, aggregate, and apply
/// softmax for the video-level prediction.
pub fn consensus_forward(
    video: &VideoSample,
    scorer: &dyn ClipScorer,
    agg: &Aggregator,
    cfg: &SamplerConfig,
    draw: &mut Draw,
) -> Result<ConsensusRecord> {
    let clips = assemble_clips(video, cfg, draw)?;
    let mut clip_outputs = Vec::with_capacity(clips.tensors.len());
    for clip in &clips.tensors {
        clip_outputs.push(scorer.score_clip(clip)?);
    }
    let (consensus, cache) = aggregate(agg, &clip_outputs)?;
    let probs = softmax(consensus.data());
    let prediction = Tensor::from_vec(probs.clone()).argmax();
    Ok(ConsensusRecord {
        clip_outputs,
        consensus,
        attention_weights: cache.clip_weights,
        probs,
        prediction,
        loss: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// S deterministically-centered clips fused by the trained aggregator.
    SClips,
    /// Every non-overlapping k-frame window, scores averaged.
    AllClips,
}

impl EvalMode {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::SClips => "s-clips",
            EvalMode::AllClips => "all-clips",
        }
    }
}

/// Per-video class probabilities under the chosen evaluation mode.
pub fn predict_probs(
    video: &VideoSample,
    scorer: &dyn ClipScorer,
    agg: &Aggregator,
    cfg: &SamplerConfig,
    mode: EvalMode,
) -> Result<Vec<f64>> {
    match mode {
        EvalMode::SClips => {
            let record = consensus_forward(video, scorer, agg, cfg, &mut Draw::Center)?;
            Ok(record.probs)
        }
        EvalMode::AllClips => {
            let windows = tile_windows(video.frame_count(), cfg.frames_per_clip);
            let mut mean = vec![0.0; scorer.class_count()];
            for window in &windows {
                let clip = crate::sampler::gather_clip(video, window);
                let scores = scorer.score_clip(&clip)?;
                for (m, &s) in mean.iter_mut().zip(scores.data()) {
                    *m += s;
                }
            }
            for m in &mut mean {
                *m /= windows.len() as f64;
            }
            Ok(softmax(&mean))
        }
    }
}

/// Top-1 accuracy over a dataset slice.
pub fn evaluate(
    videos: &[VideoSample],
    scorer: &(dyn ClipScorer + Sync),
    agg: &Aggregator,
    cfg: &SamplerConfig,
    mode: EvalMode,
) -> Result<f64> {
    if videos.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = videos
        .par_iter()
        .map(|video| {
            let probs = predict_probs(video, scorer, agg, cfg, mode)?;
            Ok(Tensor::from_vec(probs).argmax() == video.label)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / videos.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_err};
    use crate::layers::{softmax_backward, Layer};
    use crate::network::reference_network;
    use crate::rng::rng_from;
    use crate::sampler::Strategy;

    fn vecs(vals: &[&[f64]]) -> Vec<Tensor> {
        vals.iter().map(|v| Tensor::from_vec(v.to_vec())).collect()
    }

    #[test]
    fn identical_clips_collapse_for_symmetric_aggregators() {
        let v = [0.3, -1.0, 2.5];
        let outs = vecs(&[&v, &v, &v]);
        for agg in [
            Aggregator::Average,
            Aggregator::Max,
            Aggregator::new(AggregatorKind::Attention, 3, 3),
        ] {
            let (g, cache) = aggregate(&agg, &outs).unwrap();
            for (a, b) in g.data().iter().zip(v.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
            if let Some(w) = cache.clip_weights {
                for &wi in &w {
                    assert!((wi - 1.0 / 3.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn hand_computed_max_and_average() {
        let outs = vecs(&[&[1.0, 4.0], &[3.0, 2.0]]);
        let (mx, _) = aggregate(&Aggregator::Max, &outs).unwrap();
        assert_eq!(mx.data(), &[3.0, 4.0]);
        let (avg, _) = aggregate(&Aggregator::Average, &outs).unwrap();
        assert_eq!(avg.data(), &[2.0, 3.0]);
    }

    #[test]
    fn attention_orthogonal_query_gives_uniform_weights() {
        let agg = Aggregator::Attention {
            query: Tensor::from_vec(vec![1.0, 0.0]),
        };
        let outs = vecs(&[&[0.0, 2.0], &[0.0, -3.0], &[0.0, 0.5]]);
        let (_, cache) = aggregate(&agg, &outs).unwrap();
        let w = cache.clip_weights.unwrap();
        for &wi in &w {
            assert!((wi - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_are_a_distribution() {
        let mut rng = rng_from(11);
        for _ in 0..200 {
            let agg = Aggregator::Attention {
                query: Tensor::uniform(&[5], 3.0, &mut rng),
            };
            let outs = vec![
                Tensor::uniform(&[5], 4.0, &mut rng),
                Tensor::uniform(&[5], 4.0, &mut rng),
                Tensor::uniform(&[5], 4.0, &mut rng),
            ];
            let (_, cache) = aggregate(&agg, &outs).unwrap();
            let w = cache.clip_weights.unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn aggregate_rejects_mismatched_clip_shapes() {
        let outs = vec![Tensor::zeros(&[3]), Tensor::zeros(&[4])];
        assert!(matches!(
            aggregate(&Aggregator::Average, &outs),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn average_backward_splits_grad_evenly() {
        let outs = vecs(&[&[1.0, 2.0], &[0.0, 1.0], &[5.0, -1.0]]);
        let (_, cache) = aggregate(&Aggregator::Average, &outs).unwrap();
        let grad = Tensor::from_vec(vec![3.0, 3.0]);
        let (grads, param) = aggregate_backward(&Aggregator::Average, &grad, &outs, &cache).unwrap();
        assert!(param.is_none());
        for g in &grads {
            assert_eq!(g.data(), &[1.0, 1.0]);
        }
    }

    #[test]
    fn max_backward_routes_grad_to_winner_only() {
        let outs = vecs(&[&[1.0, 4.0], &[3.0, 2.0]]);
        let (_, cache) = aggregate(&Aggregator::Max, &outs).unwrap();
        let grad = Tensor::from_vec(vec![1.0, 1.0]);
        let (grads, _) = aggregate_backward(&Aggregator::Max, &grad, &outs, &cache).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 1.0]);
        assert_eq!(grads[1].data(), &[1.0, 0.0]);
    }

    #[test]
    fn max_ties_break_to_lowest_clip_index() {
        let outs = vecs(&[&[2.0], &[2.0]]);
        let (_, cache) = aggregate(&Aggregator::Max, &outs).unwrap();
        assert_eq!(cache.argmax.as_ref().unwrap(), &vec![0]);
    }

    // finite differences through every aggregator, wrt clip outputs and
    // aggregator parameters
    #[test]
    fn aggregator_backward_matches_finite_differences() {
        let mut rng = rng_from(3);
        let clip_count = 3;
        let feat = 4;
        let outs: Vec<Tensor> = (0..clip_count)
            .map(|_| Tensor::uniform(&[feat], 1.5, &mut rng))
            .collect();
        let proj = Tensor::uniform(&[feat], 1.0, &mut rng);

        let aggs = vec![
            Aggregator::Average,
            Aggregator::Max,
            Aggregator::Weighted {
                weights: Tensor::uniform(&[clip_count], 0.9, &mut rng),
            },
            Aggregator::Attention {
                query: Tensor::uniform(&[feat], 0.8, &mut rng),
            },
        ];
        for agg in aggs {
            let (_, cache) = aggregate(&agg, &outs).unwrap();
            let (clip_grads, param_grad) =
                aggregate_backward(&agg, &proj, &outs, &cache).unwrap();

            for s in 0..clip_count {
                let loss = |x: &[f64]| {
                    let mut outs2 = outs.clone();
                    outs2[s] = Tensor::from_vec(x.to_vec());
                    let (g, _) = aggregate(&agg, &outs2).unwrap();
                    g.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
                };
                let fd = central_diff(&loss, outs[s].data(), 1e-6);
                assert!(
                    rel_err(clip_grads[s].data(), &fd) < 1e-5,
                    "aggregator {:?} clip {s}",
                    agg.kind()
                );
            }

            if let Some(pg) = param_grad {
                let loss = |x: &[f64]| {
                    let mut agg2 = agg.clone();
                    agg2.param_mut()
                        .unwrap()
                        .data_mut()
                        .copy_from_slice(x);
                    let (g, _) = aggregate(&agg2, &outs).unwrap();
                    g.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
                };
                let fd = central_diff(&loss, agg.param().unwrap().data(), 1e-6);
                assert!(rel_err(pg.data(), &fd) < 1e-5, "{:?} params", agg.kind());
            }
        }
    }

    #[test]
    fn average_and_max_are_permutation_invariant() {
        let outs = vecs(&[&[1.0, -2.0], &[0.5, 3.0], &[-1.0, 0.0]]);
        let perm = vecs(&[&[-1.0, 0.0], &[1.0, -2.0], &[0.5, 3.0]]);
        for agg in [Aggregator::Average, Aggregator::Max] {
            let (a, _) = aggregate(&agg, &outs).unwrap();
            let (b, _) = aggregate(&agg, &perm).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    fn tiny_video(frames: usize, label: usize) -> VideoSample {
        let mut rng = rng_from(77);
        VideoSample {
            frames: (0..frames)
                .map(|_| Tensor::uniform(&[1, 8, 8], 1.0, &mut rng))
                .collect(),
            label,
        }
    }

    #[test]
    fn s1_consensus_equals_single_clip_output() {
        let video = tiny_video(16, 0);
        let cfg = SamplerConfig {
            parts: 1,
            frames_per_clip: 8,
            offset: 1,
            strategy: Strategy::UniformSpread,
        };
        let net = reference_network(1, 4, 0.0, false, &mut rng_from(1));
        for kind in [
            AggregatorKind::Average,
            AggregatorKind::Max,
            AggregatorKind::Weighted,
            AggregatorKind::Attention,
        ] {
            let mut agg = Aggregator::new(kind, 1, 4);
            if let Aggregator::Weighted { weights } = &mut agg {
                weights.data_mut()[0] = 1.0;
            }
            let model = TemporalModel::new(net.clone(), agg);
            let record =
                consensus_forward(&video, &model, &model.agg, &cfg, &mut Draw::Center).unwrap();
            for (a, b) in record
                .consensus
                .data()
                .iter()
                .zip(record.clip_outputs[0].data())
            {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_final_fc_gives_uniform_probabilities() {
        let mut net = reference_network(1, 4, 0.0, false, &mut rng_from(2));
        if let Some(Layer::FullyConnected { weight, bias }) = net.layers.last_mut() {
            weight.data_mut().fill(0.0);
            bias.data_mut().fill(0.0);
        }
        let model = TemporalModel::new(net, Aggregator::Average);
        let video = tiny_video(24, 1);
        let cfg = SamplerConfig::default();
        let record =
            consensus_forward(&video, &model, &model.agg, &cfg, &mut Draw::Center).unwrap();
        for &p in &record.probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn adding_a_constant_to_scores_keeps_the_argmax() {
        let scores = vec![0.2, -0.4, 1.3, 0.9];
        let base = softmax(&scores);
        let shifted: Vec<f64> = scores.iter().map(|s| s + 17.5).collect();
        let shifted = softmax(&shifted);
        assert_eq!(
            Tensor::from_vec(base).argmax(),
            Tensor::from_vec(shifted).argmax()
        );
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let scores = [0.3, -1.2, 0.8];
        let proj = [1.0, -0.5, 0.25];
        let p = softmax(&scores);
        let analytic = softmax_backward(&p, &proj);
        let loss = |x: &[f64]| -> f64 {
            softmax(x).iter().zip(proj.iter()).map(|(a, b)| a * b).sum()
        };
        let fd = central_diff(&loss, &scores, 1e-6);
        assert!(rel_err(&analytic, &fd) < 1e-6);
    }
}
