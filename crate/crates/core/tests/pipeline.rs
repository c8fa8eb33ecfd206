use std::collections::BTreeSet;
use std::sync::OnceLock;

use melodapt::adaptation::{
    ilo_classifier, ilo_confidence, meta_test_episode, meta_train, olo_step, oracle_annotator, Episode, Heads,
    MetaHyperparameters, PreparedEpisode, Selection,
};
use melodapt::datasets::{default_domains, episode_stream, load_manifest, synthesize_corpus, write_manifest, Split};
use melodapt::model::{Architecture, BaseModel, ConfidenceModel, ModelBundle};
use melodapt::training::{class_counts, global_class_weights, pretrain, train_confidence, ClassWeights, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Trained {
    _dir: tempfile::TempDir,
    train: Vec<Episode>,
    base: BaseModel,
    conf: ConfidenceModel,
    pretrain_losses: Vec<f64>,
    confidence_losses: Vec<f64>,
    phi_before_confidence: u64,
}

/// Three source clips, pre-trained and confidence-trained for a few epochs.
fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = default_domains(5, 3, 1)[0].clone();
        let manifest = synthesize_corpus(&melodapt::datasets::SynthesisSpec { val_fraction: 0.0, ..spec }, dir.path()).unwrap();
        let train = episode_stream(&manifest, Split::Train, Some("source"), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut base = BaseModel::new(Architecture::desk(), &mut rng).unwrap();
        let weights = global_class_weights(&class_counts(&train, 506));
        let pre = pretrain(&mut base, &train, &weights, &TrainConfig::new(4, 3e-3, 2), |_| {}).unwrap();
        let phi_before_confidence = base.phi_checksum();
        let mut conf = ConfidenceModel::new(base.arch(), &mut rng).unwrap();
        let ct = train_confidence(&mut conf, &base, &train, &TrainConfig::new(6, 0.03, 2), |_| {}).unwrap();
        Trained {
            _dir: dir,
            train,
            base,
            conf,
            pretrain_losses: pre.records.iter().map(|r| r.mean_loss).collect(),
            confidence_losses: ct.records.iter().map(|r| r.mean_loss).collect(),
            phi_before_confidence,
        }
    })
}

fn prepared(t: &Trained) -> Vec<PreparedEpisode> {
    t.train.iter().map(|e| PreparedEpisode::new(&t.base, e).unwrap()).collect()
}

#[test]
fn pretraining_lowers_the_loss_and_freezes_phi() {
    let t = trained();
    let l = &t.pretrain_losses;
    assert!(l.last().unwrap() < l.first().unwrap(), "{l:?}");
    assert!(t.base.is_frozen());
}

#[test]
fn confidence_training_lowers_its_loss_and_leaves_phi_alone() {
    let t = trained();
    let l = &t.confidence_losses;
    assert!(l.last().unwrap() < l.first().unwrap(), "{l:?}");
    assert_eq!(t.base.phi_checksum(), t.phi_before_confidence);
}

#[test]
fn pretraining_refuses_a_frozen_model() {
    let t = trained();
    let mut base = t.base.clone();
    let w = ClassWeights::uniform(506);
    assert!(pretrain(&mut base, &t.train, &w, &TrainConfig::new(1, 1e-3, 0), |_| {}).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let unfrozen = BaseModel::new(Architecture::desk(), &mut rng).unwrap();
    let mut conf = ConfidenceModel::new(unfrozen.arch(), &mut rng).unwrap();
    assert!(train_confidence(&mut conf, &unfrozen, &t.train, &TrainConfig::new(1, 1e-3, 0), |_| {}).is_err());
}

#[test]
fn bundles_round_trip_through_disk() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let bundle = ModelBundle {
        base: t.base.clone(),
        confidence: Some(t.conf.clone()),
        stage: "confidence".into(),
    };
    bundle.save(&path).unwrap();
    let back = ModelBundle::load(&path, Some(&Architecture::desk())).unwrap();
    assert_eq!(back.stage, "confidence");
    assert!(back.base.is_frozen());
    assert_eq!(back.base.phi_checksum(), t.base.phi_checksum());
    assert_eq!(back.base.theta().checksum(), t.base.theta().checksum());
    assert_eq!(back.confidence.unwrap().psi().checksum(), t.conf.psi().checksum());
    assert!(ModelBundle::load(&path, Some(&Architecture::paper())).is_err());
}

#[test]
fn inner_loops_reduce_the_support_loss() {
    let t = trained();
    let heads = Heads::new(&t.base, &t.conf);
    let ep = &prepared(t)[0];
    let labels = ep.labels.as_ref().unwrap();
    let frames: Vec<usize> = (0..10).map(|i| i * 37).collect();
    let y: Vec<u16> = frames.iter().map(|&f| labels.classes[f]).collect();
    let w = ClassWeights::uniform(506);
    let c = ilo_classifier(&heads, t.base.theta(), &ep.features, &frames, &y, &w, 10, 0.05).unwrap();
    assert_eq!(c.losses.len(), 11);
    assert!(c.losses[10] < c.losses[0], "{:?}", c.losses);
    let p = ilo_confidence(&heads, t.conf.psi(), &ep.features, &frames, &y, &c.params, 10, 0.5).unwrap();
    assert!(p.losses[10] < p.losses[0], "{:?}", p.losses);
    let unchanged = ilo_classifier(&heads, t.base.theta(), &ep.features, &frames, &y, &w, 0, 0.05).unwrap();
    assert_eq!(unchanged.params.checksum(), t.base.theta().checksum());
}

#[test]
fn outer_step_with_zero_rate_keeps_the_meta_parameters() {
    let t = trained();
    let heads = Heads::new(&t.base, &t.conf);
    let ep = &prepared(t)[0];
    let labels = ep.labels.as_ref().unwrap();
    let query: Vec<usize> = (0..ep.valid_frames).filter(|m| m % 5 != 0).collect();
    let y: Vec<u16> = query.iter().map(|&f| labels.classes[f]).collect();
    let (mut theta, mut psi) = (t.base.theta().clone(), t.conf.psi().clone());
    let w = ClassWeights::uniform(506);
    let before = (theta.checksum(), psi.checksum());
    let losses = olo_step(&heads, &mut theta, &mut psi, &ep.features, &query, &y, t.base.theta(), t.conf.psi(), &w, 0.0).unwrap();
    assert!(losses.classifier.is_finite() && losses.confidence.is_finite());
    assert_eq!((theta.checksum(), psi.checksum()), before);
    olo_step(&heads, &mut theta, &mut psi, &ep.features, &query, &y, t.base.theta(), t.conf.psi(), &w, 1e-3).unwrap();
    assert_ne!(theta.checksum(), before.0);
}

#[test]
fn one_meta_epoch_updates_once_per_episode() {
    let t = trained();
    let heads = Heads::new(&t.base, &t.conf);
    let eps = prepared(t);
    let hyper = MetaHyperparameters {
        epochs: 1,
        inner_steps: 2,
        inner_lr: 1e-3,
        outer_lr: 1e-4,
        ..Default::default()
    };
    let mut seen = 0;
    let out = meta_train(&heads, t.base.theta(), t.conf.psi(), &eps, &hyper, |_| seen += 1).unwrap();
    assert_eq!(seen, 1);
    assert_eq!(out.olo_updates, eps.len());
    assert_ne!(out.theta.checksum(), t.base.theta().checksum());
    let again = meta_train(&heads, t.base.theta(), t.conf.psi(), &eps, &hyper, |_| {}).unwrap();
    assert_eq!(again.theta.checksum(), out.theta.checksum(), "deterministic");
}

#[test]
fn meta_test_scores_the_remaining_frames() {
    let t = trained();
    let heads = Heads::new(&t.base, &t.conf);
    let ep = &prepared(t)[0];
    assert_eq!(ep.valid_frames, 500);
    for selection in [Selection::Active, Selection::Random] {
        let hyper = MetaHyperparameters {
            inner_lr: 1e-3,
            selection,
            ..Default::default()
        };
        let mut oracle = oracle_annotator(ep.labels.as_ref(), &ep.id).unwrap();
        let out = meta_test_episode(&heads, t.base.theta(), t.conf.psi(), ep, &mut oracle, &hyper).unwrap();
        assert_eq!(out.query.len(), 490);
        assert_eq!(out.iterations.len(), 2);
        let chosen: BTreeSet<usize> = out.iterations[1].annotated.iter().copied().collect();
        assert_eq!(chosen.len(), 10);
        assert!(out.query.iter().all(|q| !chosen.contains(q)));
        assert_eq!(out.iterations[1].query_frames, 490);
        assert!(out.iterations.iter().all(|r| r.scores.is_some()));
    }
}

#[test]
fn manifests_round_trip_and_chunk_into_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = default_domains(9, 1, 2)[2].clone();
    spec.duration_seconds = 7.5;
    let m = synthesize_corpus(&spec, dir.path()).unwrap();
    let path = dir.path().join("manifest.tsv");
    write_manifest(&path, &m).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back, m);
    let eps = episode_stream(&back, Split::Test, Some("target"), None).unwrap();
    assert_eq!(eps.len(), 4, "two 7.5 s clips make two chunks each");
    assert_eq!(eps[0].id, "target_0000#0");
    assert_eq!(eps[1].valid_frames, 250);
    let labels = eps[1].labels.as_ref().unwrap();
    assert!(labels.classes[250..].iter().all(|&c| c == 0), "padding is unvoiced");
    let shuffled = episode_stream(&back, Split::Test, None, Some(3)).unwrap();
    assert_eq!(shuffled.len(), 4);
    assert!(episode_stream(&back, Split::Train, None, None).unwrap().is_empty());
}
