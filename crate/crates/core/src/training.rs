//! Pre-training with class-weighted cross-entropy, confidence targets and
//! confidence-head training.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adaptation::Episode;
use crate::model::{BaseModel, ConfidenceModel, Features, ModelError, Posteriors};
use crate::nn::{sgd_step, Mode, NnError, Real, Tensor};
use crate::signal::FrameLabels;

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("training diverged at epoch {epoch}, sample {sample}: loss {loss}")]
    Divergence { epoch: usize, sample: String, loss: f64 },
    #[error("{0}")]
    Precondition(String),
}

impl From<crate::signal::SignalError> for TrainError {
    fn from(e: crate::signal::SignalError) -> Self {
        TrainError::Precondition(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Non-negative per-class loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(n_classes: usize) -> Self {
        Self(vec![1.0; n_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Weights inversely proportional to class frequency:
/// `total / (C * count)`, zero for classes that never occur.
pub fn global_class_weights(counts: &[u64]) -> ClassWeights {
    let total: u64 = counts.iter().sum();
    let c = counts.len() as f64;
    ClassWeights(
        counts
            .iter()
            .map(|&n| if n == 0 { 0.0 } else { total as f64 / (c * n as f64) })
            .collect(),
    )
}

/// Per-class frame counts over the valid frames of labelled episodes.
pub fn class_counts<'a>(episodes: impl IntoIterator<Item = &'a Episode>, n_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_classes];
    for ep in episodes {
        if let Some(l) = &ep.labels {
            for &c in &l.classes[..ep.valid_frames] {
                counts[c as usize] += 1;
            }
        }
    }
    counts
}

/// Weighted cross-entropy over the masked frames of a class-major posterior
/// matrix, with its gradient with respect to the softmax logits:
/// `mask * w_y * (p - onehot(y))`.
pub fn wce_core<R: Real>(
    probs: &[R],
    n_classes: usize,
    n_frames: usize,
    labels: &[u16],
    weights: &[f64],
    mask: &[bool],
) -> (f64, Vec<R>) {
    let mut grad = vec![R::zero(); probs.len()];
    let mut loss = 0.0;
    for m in 0..n_frames {
        if !mask[m] {
            continue;
        }
        let y = labels[m] as usize;
        let w = weights[y];
        if w == 0.0 {
            continue;
        }
        let py = probs[y * n_frames + m].as_f64();
        loss -= w * py.max(PROB_FLOOR).ln();
        let wr = R::from_f64(w);
        for c in 0..n_classes {
            grad[c * n_frames + m] = wr * probs[c * n_frames + m];
        }
        grad[y * n_frames + m] -= wr;
    }
    (loss, grad)
}

/// Loss value and gradient with respect to the classifier logits.
#[derive(Debug, Clone)]
pub struct WceLoss {
    pub loss: f64,
    /// Shape `[C, 1, M]`.
    pub grad_logits: Tensor<f32>,
}

pub fn wce_loss(posteriors: &Posteriors, labels: &FrameLabels, weights: &ClassWeights, mask: &[bool]) -> WceLoss {
    assert_eq!(labels.len(), posteriors.n_frames, "label length");
    assert_eq!(mask.len(), posteriors.n_frames, "mask length");
    assert_eq!(weights.len(), posteriors.n_classes, "weight length");
    let (loss, grad) = wce_core(
        &posteriors.data,
        posteriors.n_classes,
        posteriors.n_frames,
        &labels.classes,
        weights.as_slice(),
        mask,
    );
    WceLoss {
        loss,
        grad_logits: Tensor::new(vec![posteriors.n_classes, 1, posteriors.n_frames], grad),
    }
}

/// Mean squared error over masked frames and its gradient with respect to
/// the predictions.
pub fn mse_core<R: Real>(pred: &[R], target: &[R], mask: &[bool]) -> (f64, Vec<R>) {
    let n = mask.iter().filter(|&&b| b).count();
    let mut grad = vec![R::zero(); pred.len()];
    if n == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    let scale = 2.0 / n as f64;
    for i in 0..pred.len() {
        if mask[i] {
            let d = pred[i].as_f64() - target[i].as_f64();
            loss += d * d;
            grad[i] = R::from_f64(scale * d);
        }
    }
    (loss / n as f64, grad)
}

/// Maximum class probability per frame.
pub fn mcp(posteriors: &Posteriors) -> Vec<f32> {
    (0..posteriors.n_frames)
        .map(|m| posteriors.prob(posteriors.argmax(m), m))
        .collect()
}

/// True-class probability normalized by the predicted-class probability.
pub fn tcp_n(posteriors: &Posteriors, labels: &FrameLabels) -> Vec<f32> {
    (0..posteriors.n_frames)
        .map(|m| {
            let top = posteriors.prob(posteriors.argmax(m), m);
            let truth = posteriors.prob(labels.classes[m] as usize, m);
            if top > 0.0 {
                (truth / top).min(1.0)
            } else {
                1.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Weight of the newest batch in the batch-norm running statistics.
    pub bn_momentum: f32,
}

impl TrainConfig {
    pub fn new(epochs: usize, learning_rate: f32, seed: u64) -> Self {
        Self {
            epochs,
            learning_rate,
            seed,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainingTrace {
    /// `epoch<TAB>mean_loss<TAB>wall_seconds`, one line per epoch.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tmean_loss\twall_seconds\n");
        for r in &self.records {
            let _ = writeln!(s, "{}\t{:.6}\t{:.3}", r.epoch, r.mean_loss, r.wall_seconds);
        }
        s
    }
}

fn labelled<'a>(data: &'a [Episode]) -> Result<Vec<(&'a Episode, &'a FrameLabels)>> {
    if data.is_empty() {
        return Err(TrainError::Precondition("training set is empty".into()));
    }
    data.iter()
        .map(|e| {
            e.labels
                .as_ref()
                .map(|l| (e, l))
                .ok_or_else(|| TrainError::Precondition(format!("episode {} has no labels", e.id)))
        })
        .collect()
}

/// Per-sample SGD on the weighted cross-entropy. φ is frozen afterwards and
/// its batch-norm statistics are re-estimated over the training set.
pub fn pretrain(
    model: &mut BaseModel,
    data: &[Episode],
    weights: &ClassWeights,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingTrace> {
    if model.is_frozen() {
        return Err(TrainError::Precondition("pre-training needs an unfrozen model".into()));
    }
    let samples = labelled(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = TrainingTrace::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (ep, labels) = samples[i];
            let input = model.input_tensor(&ep.spectrogram)?;
            let (fnet, cnet, phi, theta) = model.parts_mut();
            let phi = phi.expect("checked unfrozen");
            let (feats, ftape) = fnet.forward(phi, &input, Mode::Train)?;
            let (probs, ctape) = cnet.forward(theta, &feats, Mode::Train)?;
            let post = Posteriors::from_tensor(probs);
            let loss = wce_loss(&post, labels, weights, &ep.valid_mask());
            if !loss.loss.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    sample: ep.id.clone(),
                    loss: loss.loss,
                });
            }
            total += loss.loss;
            let cg = cnet.backward_from(theta, &ctape, 0, &loss.grad_logits, true)?;
            let feat_grad = cg.input.clone().expect("requested");
            let fg = fnet.backward(phi, &ftape, &feat_grad, false)?;
            sgd_step(theta, &cg, cfg.learning_rate)?;
            sgd_step(phi, &fg, cfg.learning_rate)?;
            fnet.update_running_stats(phi, &ftape, cfg.bn_momentum)?;
        }
        let rec = EpochRecord {
            epoch,
            mean_loss: total / samples.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        trace.records.push(rec);
    }
    if cfg.epochs > 0 {
        recalibrate_batch_norm(model, &samples)?;
    }
    model.freeze_features();
    Ok(trace)
}

/// Replace running statistics with the exact average of per-sample batch
/// statistics under the final weights.
fn recalibrate_batch_norm(model: &mut BaseModel, samples: &[(&Episode, &FrameLabels)]) -> Result<()> {
    let inputs = samples
        .iter()
        .map(|(e, _)| model.input_tensor(&e.spectrogram))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (fnet, _, phi, _) = model.parts_mut();
    let phi = phi.expect("unfrozen");
    for (i, input) in inputs.iter().enumerate() {
        let (_, tape) = fnet.forward(phi, input, Mode::Train)?;
        fnet.update_running_stats(phi, &tape, 1.0 / (i + 1) as f32)?;
    }
    Ok(())
}

/// Cached inputs for confidence training: φ features, TCP-n targets and
/// the valid-frame mask.
struct ConfidenceSample {
    id: String,
    features: Features,
    targets: Vec<f32>,
    mask: Vec<bool>,
}

/// Confidence-head loss and gradients for one sample.
pub(crate) fn confidence_step(
    conf: &ConfidenceModel,
    psi: &crate::nn::ParameterSet,
    features: &Features,
    targets: &[f32],
    mask: &[bool],
) -> Result<(f64, crate::nn::Gradients)> {
    let (out, tape) = conf.net().forward(psi, &features.0, Mode::Train)?;
    let (loss, g) = mse_core(&out.data, targets, mask);
    let grad = Tensor::new(out.shape.clone(), g);
    let grads = conf.net().backward(psi, &tape, &grad, false)?;
    Ok((loss, grads))
}

/// Train ψ to regress TCP-n of the frozen base model. φ and θ are read only.
pub fn train_confidence(
    conf: &mut ConfidenceModel,
    base: &BaseModel,
    data: &[Episode],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingTrace> {
    if !base.is_frozen() {
        return Err(TrainError::Precondition(
            "confidence training needs a pre-trained, frozen base model".into(),
        ));
    }
    let samples = labelled(data)?
        .into_iter()
        .map(|(ep, labels)| {
            let features = base.features(&ep.spectrogram)?;
            let post = base.posteriors_from_features(&features)?;
            Ok(ConfidenceSample {
                id: ep.id.clone(),
                targets: tcp_n(&post, labels),
                features,
                mask: ep.valid_mask(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = TrainingTrace::default();
    let mut psi = conf.psi().clone();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = &samples[i];
            let (loss, grads) = confidence_step(conf, &psi, &s.features, &s.targets, &s.mask)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    sample: s.id.clone(),
                    loss,
                });
            }
            total += loss;
            sgd_step(&mut psi, &grads, cfg.learning_rate)?;
        }
        let rec = EpochRecord {
            epoch,
            mean_loss: total / samples.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        trace.records.push(rec);
    }
    conf.set_psi(psi)?;
    Ok(trace)
}
