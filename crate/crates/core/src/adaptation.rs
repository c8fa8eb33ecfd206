//! Episodic adaptation of the classifier θ and confidence head ψ on frozen
//! φ features: meta-weighted class weights, least-confidence support
//! selection, inner-loop adaptation, first-order outer updates, and the
//! stateful active-testing loop shared by the CLI and the HTTP service.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{evaluate_classes, MelodyScores, MetricsError};
use crate::model::{predict_classes, BaseModel, ConfidenceModel, Features, ModelError, Posteriors};
use crate::nn::{sgd_step, Gradients, Mode, Network, NnError, ParameterSet, Tensor};
use crate::signal::{FrameLabels, Spectrogram};
use crate::training::{mse_core, tcp_n, wce_core, ClassWeights};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Precondition(String),
    #[error("requested {requested} frames but only {available} are available")]
    TooFewFrames { requested: usize, available: usize },
    #[error("frame {0} was not suggested")]
    Unsuggested(usize),
    #[error("frame {frame} is already annotated as class {existing}, got {new}")]
    Conflict { frame: usize, existing: u16, new: u16 },
    #[error("{missing} suggested frames are still unannotated")]
    IncompleteAnnotations { missing: usize },
    #[error("no new annotations since the last adaptation")]
    NothingToAdapt,
    #[error("non-finite loss in {0}")]
    NonFinite(&'static str),
    #[error("annotator failed: {0}")]
    Annotator(String),
    #[error("episode {0} has no labels")]
    MissingLabels(String),
}

pub type Result<T> = std::result::Result<T, AdaptError>;

/// One 5-second chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub spectrogram: Spectrogram,
    pub labels: Option<FrameLabels>,
    /// Frames before zero padding; later frames are never selected or scored.
    pub valid_frames: usize,
}

impl Episode {
    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.spectrogram.n_frames).map(|m| m < self.valid_frames).collect()
    }
}

/// An episode with its φ features computed once.
#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub id: String,
    pub features: Features,
    pub labels: Option<FrameLabels>,
    pub valid_frames: usize,
}

impl PreparedEpisode {
    pub fn new(base: &BaseModel, episode: &Episode) -> Result<Self> {
        Ok(Self {
            id: episode.id.clone(),
            features: base.features(&episode.spectrogram)?,
            labels: episode.labels.clone(),
            valid_frames: episode.valid_frames,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.features.n_frames()
    }

    fn require_labels(&self) -> Result<&FrameLabels> {
        self.labels
            .as_ref()
            .ok_or_else(|| AdaptError::MissingLabels(self.id.clone()))
    }
}

/// Support and query frames of one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePartition {
    /// Selected frames, in selection order.
    pub support: Vec<usize>,
    /// Remaining candidate frames, ascending.
    pub query: Vec<usize>,
    /// Frames that were excluded because they are already annotated.
    pub annotated: BTreeSet<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Active,
    Random,
}

impl std::str::FromStr for Selection {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "active" => Ok(Self::Active),
            "random" => Ok(Self::Random),
            _ => Err(format!("unknown selection {s:?} (expected active or random)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaHyperparameters {
    /// Support frames per iteration.
    pub k: usize,
    pub inner_steps: usize,
    /// Annotation rounds at test time.
    pub iterations: usize,
    pub inner_lr: f32,
    pub outer_lr: f32,
    pub lambda: f64,
    pub delta_cap: f64,
    pub epochs: usize,
    pub meta_weighting: bool,
    pub selection: Selection,
    pub seed: u64,
}

impl Default for MetaHyperparameters {
    fn default() -> Self {
        Self {
            k: 10,
            inner_steps: 10,
            iterations: 1,
            inner_lr: 1e-5,
            outer_lr: 1e-5,
            lambda: 0.2,
            delta_cap: 10.0,
            epochs: 400,
            meta_weighting: true,
            selection: Selection::Active,
            seed: 0,
        }
    }
}

impl MetaHyperparameters {
    pub fn validate(&self) -> Result<()> {
        let ok = self.k > 0
            && self.inner_lr >= 0.0
            && self.outer_lr >= 0.0
            && self.lambda >= 0.0
            && self.delta_cap > 0.0
            && [self.inner_lr, self.outer_lr].iter().all(|v| v.is_finite())
            && self.lambda.is_finite()
            && self.delta_cap.is_finite();
        if ok {
            Ok(())
        } else {
            Err(AdaptError::Precondition(format!("invalid hyperparameters {self:?}")))
        }
    }

    fn check_budget(&self, valid_frames: usize) -> Result<()> {
        if self.k * self.iterations.max(1) >= valid_frames {
            return Err(AdaptError::TooFewFrames {
                requested: self.k * self.iterations.max(1),
                available: valid_frames.saturating_sub(1),
            });
        }
        Ok(())
    }
}

/// The adaptive methods compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Conventional training, no adaptation.
    #[serde(rename = "CT")]
    Ct,
    /// Fine-tuning on random frames without meta-training.
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "MAML")]
    Maml,
    #[serde(rename = "w-MAML")]
    WMaml,
    #[serde(rename = "AML")]
    Aml,
    #[serde(rename = "w-AML")]
    WAml,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Ct, Method::Ft, Method::Maml, Method::WMaml, Method::Aml, Method::WAml];

    pub fn label(self) -> &'static str {
        match self {
            Method::Ct => "CT",
            Method::Ft => "FT",
            Method::Maml => "MAML",
            Method::WMaml => "w-MAML",
            Method::Aml => "AML",
            Method::WAml => "w-AML",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.label().eq_ignore_ascii_case(s))
    }

    pub fn meta_trained(self) -> bool {
        !matches!(self, Method::Ct | Method::Ft)
    }

    pub fn adapts(self) -> bool {
        self != Method::Ct
    }

    pub fn meta_weighting(self) -> bool {
        matches!(self, Method::WMaml | Method::WAml)
    }

    pub fn selection(self) -> Selection {
        match self {
            Method::Aml | Method::WAml => Selection::Active,
            _ => Selection::Random,
        }
    }

    /// Name of the method implied by the two toggles and meta-training.
    pub fn from_toggles(meta_trained: bool, adapts: bool, meta_weighting: bool, selection: Selection) -> Self {
        match (meta_trained, adapts, meta_weighting, selection) {
            (_, false, _, _) => Method::Ct,
            (false, true, _, _) => Method::Ft,
            (true, true, false, Selection::Random) => Method::Maml,
            (true, true, true, Selection::Random) => Method::WMaml,
            (true, true, false, Selection::Active) => Method::Aml,
            (true, true, true, Selection::Active) => Method::WAml,
        }
    }
}

/// `M_set / n_c` for classes present in `labels`, zero otherwise.
pub fn episode_class_weights(labels: &[u16], n_classes: usize) -> ClassWeights {
    let mut counts = vec![0usize; n_classes];
    for &c in labels {
        counts[c as usize] += 1;
    }
    let n = labels.len() as f64;
    ClassWeights(
        counts
            .iter()
            .map(|&k| if k == 0 { 0.0 } else { n / k as f64 })
            .collect(),
    )
}

/// Amplify the ground-truth weights of classes whose predicted frequency
/// disagrees with their true frequency: `w' = w_g * exp(lambda * |dw|)` with
/// `dw = (w_g - w_p) / w_g`, `|dw|` clamped to `delta_cap`. A class that is
/// never predicted takes `|dw| = delta_cap`.
pub fn meta_weights(w_g: &ClassWeights, predicted: &[u16], lambda: f64, delta_cap: f64) -> ClassWeights {
    let w_p = episode_class_weights(predicted, w_g.len());
    ClassWeights(
        w_g.0
            .iter()
            .zip(&w_p.0)
            .map(|(&g, &p)| {
                if g == 0.0 {
                    return 0.0;
                }
                let delta = if p == 0.0 { delta_cap } else { ((g - p) / g).abs().min(delta_cap) };
                g * (lambda * delta).exp()
            })
            .collect(),
    )
}

/// The `k` lowest-confidence frames outside `excluded`; ties go to the lower
/// index. `confidences` covers only selectable (non-padding) frames.
pub fn select_support(confidences: &[f32], k: usize, excluded: &BTreeSet<usize>) -> Result<FramePartition> {
    let mut candidates: Vec<usize> = (0..confidences.len()).filter(|m| !excluded.contains(m)).collect();
    if k > candidates.len() {
        return Err(AdaptError::TooFewFrames {
            requested: k,
            available: candidates.len(),
        });
    }
    candidates.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]).then(a.cmp(&b)));
    let support = candidates[..k].to_vec();
    let mut query = candidates[k..].to_vec();
    query.sort_unstable();
    Ok(FramePartition {
        support,
        query,
        annotated: excluded.clone(),
    })
}

/// `k` frames drawn uniformly without replacement, ascending.
pub fn random_support<G: Rng + ?Sized>(
    rng: &mut G,
    n_valid: usize,
    k: usize,
    excluded: &BTreeSet<usize>,
) -> Result<FramePartition> {
    let candidates: Vec<usize> = (0..n_valid).filter(|m| !excluded.contains(m)).collect();
    if k > candidates.len() {
        return Err(AdaptError::TooFewFrames {
            requested: k,
            available: candidates.len(),
        });
    }
    let mut support: Vec<usize> = sample(rng, candidates.len(), k).into_iter().map(|i| candidates[i]).collect();
    support.sort_unstable();
    let chosen: BTreeSet<usize> = support.iter().copied().collect();
    Ok(FramePartition {
        query: candidates.into_iter().filter(|m| !chosen.contains(m)).collect(),
        support,
        annotated: excluded.clone(),
    })
}

/// Network definitions of θ and ψ. Parameters are passed separately so the
/// same heads serve meta-parameters and episode copies.
#[derive(Debug, Clone)]
pub struct Heads {
    pub classifier: Network,
    pub confidence: Network,
    pub n_classes: usize,
}

impl Heads {
    pub fn new(base: &BaseModel, conf: &ConfidenceModel) -> Self {
        Self {
            classifier: base.classifier_net().clone(),
            confidence: conf.net().clone(),
            n_classes: base.arch().n_classes,
        }
    }

    pub fn posteriors(&self, theta: &ParameterSet, features: &Features) -> Result<Posteriors> {
        let out = self.classifier.infer(theta, &features.0, Mode::Infer)?;
        Ok(Posteriors::from_tensor(out))
    }

    pub fn confidence(&self, psi: &ParameterSet, features: &Features) -> Result<Vec<f32>> {
        Ok(self.confidence.infer(psi, &features.0, Mode::Infer)?.data)
    }

    /// Weighted cross-entropy on every column of `features` and its θ gradient.
    pub fn classifier_loss(
        &self,
        theta: &ParameterSet,
        features: &Features,
        labels: &[u16],
        weights: &ClassWeights,
    ) -> Result<(f64, Gradients)> {
        let (probs, tape) = self.classifier.forward(theta, &features.0, Mode::Train)?;
        let m = features.n_frames();
        let mask = vec![true; m];
        let (loss, g) = wce_core(&probs.data, self.n_classes, m, labels, weights.as_slice(), &mask);
        let grad = Tensor::new(probs.shape.clone(), g);
        Ok((loss, self.classifier.backward_from(theta, &tape, 0, &grad, false)?))
    }

    /// Mean squared confidence error on every column of `features` and its ψ
    /// gradient.
    pub fn confidence_loss(&self, psi: &ParameterSet, features: &Features, targets: &[f32]) -> Result<(f64, Gradients)> {
        let (out, tape) = self.confidence.forward(psi, &features.0, Mode::Train)?;
        let mask = vec![true; targets.len()];
        let (loss, g) = mse_core(&out.data, targets, &mask);
        let grad = Tensor::new(out.shape.clone(), g);
        Ok((loss, self.confidence.backward(psi, &tape, &grad, false)?))
    }

    /// TCP-n of `theta` on every column of `features`.
    fn tcp_targets(&self, theta: &ParameterSet, features: &Features, labels: &[u16]) -> Result<Vec<f32>> {
        let post = self.posteriors(theta, features)?;
        Ok(tcp_n(&post, &FrameLabels { classes: labels.to_vec() }))
    }
}

/// Adapted parameters and the loss before each step plus after the last.
#[derive(Debug, Clone)]
pub struct IloOutcome {
    pub params: ParameterSet,
    pub losses: Vec<f64>,
}

fn check_frames(frames: &[usize], labels: &[u16]) -> Result<()> {
    if frames.len() != labels.len() {
        return Err(AdaptError::Precondition(format!(
            "{} frames but {} labels",
            frames.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// `steps` SGD steps of the weighted cross-entropy restricted to `frames`.
#[allow(clippy::too_many_arguments)]
pub fn ilo_classifier(
    heads: &Heads,
    theta_b: &ParameterSet,
    features: &Features,
    frames: &[usize],
    labels: &[u16],
    weights: &ClassWeights,
    steps: usize,
    lr: f32,
) -> Result<IloOutcome> {
    check_frames(frames, labels)?;
    let sub = features.gather(frames);
    let mut theta = theta_b.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, grads) = heads.classifier_loss(&theta, &sub, labels, weights)?;
        if !loss.is_finite() {
            return Err(AdaptError::NonFinite("classifier inner loop"));
        }
        losses.push(loss);
        if step < steps {
            sgd_step(&mut theta, &grads, lr)?;
        }
    }
    Ok(IloOutcome { params: theta, losses })
}

/// `steps` SGD steps of the confidence error on `frames`, with TCP-n targets
/// recomputed from the adapted classifier `theta_n`.
#[allow(clippy::too_many_arguments)]
pub fn ilo_confidence(
    heads: &Heads,
    psi_b: &ParameterSet,
    features: &Features,
    frames: &[usize],
    labels: &[u16],
    theta_n: &ParameterSet,
    steps: usize,
    lr: f32,
) -> Result<IloOutcome> {
    check_frames(frames, labels)?;
    let sub = features.gather(frames);
    let targets = heads.tcp_targets(theta_n, &sub, labels)?;
    let mut psi = psi_b.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, grads) = heads.confidence_loss(&psi, &sub, &targets)?;
        if !loss.is_finite() {
            return Err(AdaptError::NonFinite("confidence inner loop"));
        }
        losses.push(loss);
        if step < steps {
            sgd_step(&mut psi, &grads, lr)?;
        }
    }
    Ok(IloOutcome { params: psi, losses })
}

/// Query losses at the adapted parameters of one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryLosses {
    pub classifier: f64,
    pub confidence: f64,
}

/// First-order outer update: query gradients taken at the adapted
/// parameters are applied to the meta-parameters.
#[allow(clippy::too_many_arguments)]
pub fn olo_step(
    heads: &Heads,
    theta: &mut ParameterSet,
    psi: &mut ParameterSet,
    features: &Features,
    query: &[usize],
    query_labels: &[u16],
    theta_n: &ParameterSet,
    psi_n: &ParameterSet,
    weights: &ClassWeights,
    lr: f32,
) -> Result<QueryLosses> {
    check_frames(query, query_labels)?;
    let sub = features.gather(query);
    let (lc, gc) = heads.classifier_loss(theta_n, &sub, query_labels, weights)?;
    let targets = heads.tcp_targets(theta_n, &sub, query_labels)?;
    let (lp, gp) = heads.confidence_loss(psi_n, &sub, &targets)?;
    if !lc.is_finite() || !lp.is_finite() {
        return Err(AdaptError::NonFinite("outer loop"));
    }
    sgd_step(theta, &gc, lr)?;
    sgd_step(psi, &gp, lr)?;
    Ok(QueryLosses {
        classifier: lc,
        confidence: lp,
    })
}

fn pick(labels: &FrameLabels, frames: &[usize]) -> Vec<u16> {
    frames.iter().map(|&f| labels.classes[f]).collect()
}

/// Class weights for an ILO or OLO frame set.
fn set_weights(hyper: &MetaHyperparameters, n_classes: usize, truth: &[u16], predicted: &[u16]) -> ClassWeights {
    if hyper.meta_weighting {
        meta_weights(
            &episode_class_weights(truth, n_classes),
            predicted,
            hyper.lambda,
            hyper.delta_cap,
        )
    } else {
        ClassWeights::uniform(n_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaEpochRecord {
    pub epoch: usize,
    pub mean_support_loss_before: f64,
    pub mean_support_loss_after: f64,
    pub mean_query_loss: f64,
}

#[derive(Debug, Clone)]
pub struct MetaTrainOutcome {
    pub theta: ParameterSet,
    pub psi: ParameterSet,
    pub epochs: Vec<MetaEpochRecord>,
    pub olo_updates: usize,
}

/// Episodic meta-training. Each episode starts from the current
/// meta-parameters; only the outer step changes them.
pub fn meta_train(
    heads: &Heads,
    theta: &ParameterSet,
    psi: &ParameterSet,
    episodes: &[PreparedEpisode],
    hyper: &MetaHyperparameters,
    mut on_epoch: impl FnMut(&MetaEpochRecord),
) -> Result<MetaTrainOutcome> {
    hyper.validate()?;
    if episodes.is_empty() {
        return Err(AdaptError::Precondition("meta-training set is empty".into()));
    }
    for ep in episodes {
        ep.require_labels()?;
        hyper.check_budget(ep.valid_frames)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut theta = theta.clone();
    let mut psi = psi.clone();
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut records = Vec::with_capacity(hyper.epochs);
    let mut updates = 0;
    let none = BTreeSet::new();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let (mut before, mut after, mut query_loss) = (0.0, 0.0, 0.0);
        for &i in &order {
            let ep = &episodes[i];
            let labels = ep.require_labels()?;
            let valid = ep.valid_frames;
            let post = heads.posteriors(&theta, &ep.features)?;
            let predicted = predict_classes(&post);
            let partition = match hyper.selection {
                Selection::Active => {
                    let conf = heads.confidence(&psi, &ep.features)?;
                    select_support(&conf[..valid], hyper.k, &none)?
                }
                Selection::Random => random_support(&mut rng, valid, hyper.k, &none)?,
            };
            let s_labels = pick(labels, &partition.support);
            let q_labels = pick(labels, &partition.query);
            let s_weights = set_weights(hyper, heads.n_classes, &s_labels, &pick(&predicted, &partition.support));
            let q_weights = set_weights(hyper, heads.n_classes, &q_labels, &pick(&predicted, &partition.query));
            let th = ilo_classifier(
                heads,
                &theta,
                &ep.features,
                &partition.support,
                &s_labels,
                &s_weights,
                hyper.inner_steps,
                hyper.inner_lr,
            )?;
            let ps = ilo_confidence(
                heads,
                &psi,
                &ep.features,
                &partition.support,
                &s_labels,
                &th.params,
                hyper.inner_steps,
                hyper.inner_lr,
            )?;
            let q = olo_step(
                heads,
                &mut theta,
                &mut psi,
                &ep.features,
                &partition.query,
                &q_labels,
                &th.params,
                &ps.params,
                &q_weights,
                hyper.outer_lr,
            )?;
            updates += 1;
            before += th.losses[0];
            after += *th.losses.last().expect("at least one loss");
            query_loss += q.classifier;
        }
        let n = episodes.len() as f64;
        let rec = MetaEpochRecord {
            epoch,
            mean_support_loss_before: before / n,
            mean_support_loss_after: after / n,
            mean_query_loss: query_loss / n,
        };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(MetaTrainOutcome {
        theta,
        psi,
        epochs: records,
        olo_updates: updates,
    })
}

/// Supplies ground-truth classes for requested frames.
pub trait Annotator {
    fn annotate(&mut self, frames: &[usize]) -> std::result::Result<BTreeMap<usize, u16>, String>;
}

impl<F> Annotator for F
where
    F: FnMut(&[usize]) -> std::result::Result<BTreeMap<usize, u16>, String>,
{
    fn annotate(&mut self, frames: &[usize]) -> std::result::Result<BTreeMap<usize, u16>, String> {
        self(frames)
    }
}

/// Answers from stored labels.
#[derive(Debug, Clone)]
pub struct OracleAnnotator {
    labels: FrameLabels,
}

impl Annotator for OracleAnnotator {
    fn annotate(&mut self, frames: &[usize]) -> std::result::Result<BTreeMap<usize, u16>, String> {
        frames
            .iter()
            .map(|&f| {
                self.labels
                    .classes
                    .get(f)
                    .map(|&c| (f, c))
                    .ok_or_else(|| format!("frame {f} out of range"))
            })
            .collect()
    }
}

pub fn oracle_annotator(labels: Option<&FrameLabels>, episode_id: &str) -> Result<OracleAnnotator> {
    labels
        .cloned()
        .map(|labels| OracleAnnotator { labels })
        .ok_or_else(|| AdaptError::MissingLabels(episode_id.to_string()))
}

/// Settings of an interactive adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub inner_steps: usize,
    pub inner_lr: f32,
    pub lambda: f64,
    pub delta_cap: f64,
    pub meta_weighting: bool,
    pub selection: Selection,
    pub seed: u64,
}

impl From<&MetaHyperparameters> for AdapterConfig {
    fn from(h: &MetaHyperparameters) -> Self {
        Self {
            inner_steps: h.inner_steps,
            inner_lr: h.inner_lr,
            lambda: h.lambda,
            delta_cap: h.delta_cap,
            meta_weighting: h.meta_weighting,
            selection: h.selection,
            seed: h.seed,
        }
    }
}

/// Serializable bookkeeping of an [`EpisodeAdapter`]; parameters are stored
/// separately.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterState {
    pub annotated: BTreeMap<usize, u16>,
    /// Every frame ever suggested.
    pub suggested: BTreeSet<usize>,
    /// The latest suggestion batch.
    pub pending: Vec<usize>,
    /// Frames consumed by each completed adaptation, in order.
    pub batches: Vec<Vec<usize>>,
    pub iteration: usize,
    /// Position of the selection RNG, in 32-bit words.
    pub rng_word_pos: u128,
}

/// Result of one adaptation round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptStep {
    pub iteration: usize,
    /// Frames annotated since the previous round.
    pub new_frames: Vec<usize>,
    /// All annotated frames used by this round, ascending.
    pub frames: Vec<usize>,
    pub classifier_losses: Vec<f64>,
    pub confidence_losses: Vec<f64>,
}

/// Live state of one test episode: suggest frames, take annotations,
/// adapt, repeat. θ and ψ here are episode copies; meta-parameters are never
/// touched.
#[derive(Debug, Clone)]
pub struct EpisodeAdapter {
    heads: Heads,
    features: Features,
    valid_frames: usize,
    theta: ParameterSet,
    psi: ParameterSet,
    config: AdapterConfig,
    rng: ChaCha8Rng,
    state: AdapterState,
}

impl EpisodeAdapter {
    pub fn new(
        heads: Heads,
        theta: ParameterSet,
        psi: ParameterSet,
        episode: &PreparedEpisode,
        config: AdapterConfig,
    ) -> Self {
        Self::restore(heads, theta, psi, episode, config, AdapterState::default())
    }

    pub fn restore(
        heads: Heads,
        theta: ParameterSet,
        psi: ParameterSet,
        episode: &PreparedEpisode,
        config: AdapterConfig,
        state: AdapterState,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_word_pos(state.rng_word_pos);
        Self {
            heads,
            features: episode.features.clone(),
            valid_frames: episode.valid_frames,
            theta,
            psi,
            config,
            rng,
            state,
        }
    }

    pub fn state(&self) -> &AdapterState {
        &self.state
    }

    pub fn theta(&self) -> &ParameterSet {
        &self.theta
    }

    pub fn psi(&self) -> &ParameterSet {
        &self.psi
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn valid_frames(&self) -> usize {
        self.valid_frames
    }

    pub fn n_frames(&self) -> usize {
        self.features.n_frames()
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    pub fn posteriors(&self) -> Result<Posteriors> {
        self.heads.posteriors(&self.theta, &self.features)
    }

    pub fn predictions(&self) -> Result<FrameLabels> {
        Ok(predict_classes(&self.posteriors()?))
    }

    pub fn confidence(&self) -> Result<Vec<f32>> {
        self.heads.confidence(&self.psi, &self.features)
    }

    /// Valid frames that have never been annotated, ascending.
    pub fn query_frames(&self) -> Vec<usize> {
        (0..self.valid_frames)
            .filter(|f| !self.state.annotated.contains_key(f))
            .collect()
    }

    /// Pick the next `k` frames to annotate among valid, unannotated frames.
    pub fn suggest(&mut self, k: usize) -> Result<Vec<usize>> {
        if k == 0 {
            return Err(AdaptError::Precondition("k must be positive".into()));
        }
        let excluded: BTreeSet<usize> = self.state.annotated.keys().copied().collect();
        let partition = match self.config.selection {
            Selection::Active => {
                let conf = self.confidence()?;
                select_support(&conf[..self.valid_frames], k, &excluded)?
            }
            Selection::Random => random_support(&mut self.rng, self.valid_frames, k, &excluded)?,
        };
        self.state.rng_word_pos = self.rng.get_word_pos();
        self.state.suggested.extend(partition.support.iter().copied());
        self.state.pending = partition.support.clone();
        Ok(partition.support)
    }

    /// Store annotations for suggested frames. Resubmitting an identical
    /// value is a no-op; returns how many frames were newly stored.
    pub fn annotate(&mut self, annotations: &BTreeMap<usize, u16>) -> Result<usize> {
        for (&frame, &class) in annotations {
            if class as usize >= self.heads.n_classes {
                return Err(AdaptError::Precondition(format!("class {class} out of range")));
            }
            match self.state.annotated.get(&frame) {
                Some(&existing) if existing != class => {
                    return Err(AdaptError::Conflict {
                        frame,
                        existing,
                        new: class,
                    })
                }
                Some(_) => {}
                None if !self.state.suggested.contains(&frame) => return Err(AdaptError::Unsuggested(frame)),
                None => {}
            }
        }
        let before = self.state.annotated.len();
        self.state.annotated.extend(annotations.iter().map(|(&f, &c)| (f, c)));
        Ok(self.state.annotated.len() - before)
    }

    /// One round of inner-loop adaptation on every annotated frame.
    pub fn adapt(&mut self) -> Result<AdaptStep> {
        let missing = self
            .state
            .pending
            .iter()
            .filter(|f| !self.state.annotated.contains_key(f))
            .count();
        if missing > 0 {
            return Err(AdaptError::IncompleteAnnotations { missing });
        }
        let used: BTreeSet<usize> = self.state.batches.iter().flatten().copied().collect();
        let new_frames: Vec<usize> = self
            .state
            .annotated
            .keys()
            .copied()
            .filter(|f| !used.contains(f))
            .collect();
        if new_frames.is_empty() {
            return Err(AdaptError::NothingToAdapt);
        }
        let frames: Vec<usize> = self.state.annotated.keys().copied().collect();
        let labels: Vec<u16> = self.state.annotated.values().copied().collect();
        let weights = if self.config.meta_weighting {
            let predicted = self.predictions()?;
            meta_weights(
                &episode_class_weights(&labels, self.heads.n_classes),
                &pick(&predicted, &frames),
                self.config.lambda,
                self.config.delta_cap,
            )
        } else {
            ClassWeights::uniform(self.heads.n_classes)
        };
        let th = ilo_classifier(
            &self.heads,
            &self.theta,
            &self.features,
            &frames,
            &labels,
            &weights,
            self.config.inner_steps,
            self.config.inner_lr,
        )?;
        let ps = ilo_confidence(
            &self.heads,
            &self.psi,
            &self.features,
            &frames,
            &labels,
            &th.params,
            self.config.inner_steps,
            self.config.inner_lr,
        )?;
        self.theta = th.params;
        self.psi = ps.params;
        self.state.iteration += 1;
        self.state.batches.push(new_frames.clone());
        self.state.pending.clear();
        Ok(AdaptStep {
            iteration: self.state.iteration,
            new_frames,
            frames,
            classifier_losses: th.losses,
            confidence_losses: ps.losses,
        })
    }

    /// Scores of the current predictions on the never-annotated frames.
    pub fn query_scores(&self, reference: &FrameLabels) -> Result<MelodyScores> {
        Ok(evaluate_classes(&self.predictions()?, reference, &self.query_frames())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub s: usize,
    /// Frames annotated in this round (empty for s = 0).
    pub annotated: Vec<usize>,
    pub query_frames: usize,
    pub scores: Option<MelodyScores>,
    pub classifier_losses: Vec<f64>,
    pub confidence_losses: Vec<f64>,
}

/// Run `iterations` suggest/annotate/adapt rounds, scoring the query after
/// each when a reference is available. On error the adapter keeps every
/// completed round.
pub fn run_active_testing(
    adapter: &mut EpisodeAdapter,
    annotator: &mut dyn Annotator,
    k: usize,
    iterations: usize,
    reference: Option<&FrameLabels>,
) -> Result<Vec<IterationRecord>> {
    let score = |a: &EpisodeAdapter| reference.map(|r| a.query_scores(r)).transpose();
    let mut records = vec![IterationRecord {
        s: adapter.iteration(),
        annotated: Vec::new(),
        query_frames: adapter.query_frames().len(),
        scores: score(adapter)?,
        classifier_losses: Vec::new(),
        confidence_losses: Vec::new(),
    }];
    for _ in 0..iterations {
        let frames = adapter.suggest(k)?;
        let answers = annotator.annotate(&frames).map_err(AdaptError::Annotator)?;
        if let Some(f) = frames.iter().find(|f| !answers.contains_key(f)) {
            return Err(AdaptError::Annotator(format!("no annotation returned for frame {f}")));
        }
        adapter.annotate(&answers)?;
        let step = adapter.adapt()?;
        records.push(IterationRecord {
            s: step.iteration,
            annotated: step.new_frames,
            query_frames: adapter.query_frames().len(),
            scores: score(adapter)?,
            classifier_losses: step.classifier_losses,
            confidence_losses: step.confidence_losses,
        });
    }
    Ok(records)
}

/// Outcome of testing one episode.
#[derive(Debug, Clone)]
pub struct MetaTestOutcome {
    /// Predictions on every frame after the last round.
    pub predictions: FrameLabels,
    /// Never-annotated valid frames.
    pub query: Vec<usize>,
    pub theta: ParameterSet,
    pub psi: ParameterSet,
    pub iterations: Vec<IterationRecord>,
}

/// Active testing of one episode from the meta-parameters.
pub fn meta_test_episode(
    heads: &Heads,
    theta: &ParameterSet,
    psi: &ParameterSet,
    episode: &PreparedEpisode,
    annotator: &mut dyn Annotator,
    hyper: &MetaHyperparameters,
) -> Result<MetaTestOutcome> {
    hyper.validate()?;
    if hyper.iterations > 0 {
        hyper.check_budget(episode.valid_frames)?;
    }
    let mut adapter = EpisodeAdapter::new(heads.clone(), theta.clone(), psi.clone(), episode, hyper.into());
    let iterations = run_active_testing(
        &mut adapter,
        annotator,
        hyper.k,
        hyper.iterations,
        episode.labels.as_ref(),
    )?;
    Ok(MetaTestOutcome {
        predictions: adapter.predictions()?,
        query: adapter.query_frames(),
        theta: adapter.theta,
        psi: adapter.psi,
        iterations,
    })
}

/// Per-episode record of an adaptation run, written as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub episode: String,
    pub method: String,
    pub k: usize,
    pub s: usize,
    pub annotated: Vec<Vec<usize>>,
    pub iterations: Vec<IterationRecord>,
}

impl EpisodeReport {
    pub fn new(episode: &str, method: Method, hyper: &MetaHyperparameters, iterations: Vec<IterationRecord>) -> Self {
        Self {
            episode: episode.to_string(),
            method: method.label().to_string(),
            k: hyper.k,
            s: hyper.iterations,
            annotated: iterations.iter().skip(1).map(|r| r.annotated.clone()).collect(),
            iterations,
        }
    }

    /// Scores after the final round.
    pub fn final_scores(&self) -> Option<MelodyScores> {
        self.iterations.last().and_then(|r| r.scores)
    }
}
