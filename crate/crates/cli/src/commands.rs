use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use melodapt::adaptation::{
    meta_test_episode, meta_train, oracle_annotator, Episode, EpisodeReport, Heads, MetaHyperparameters, Method,
    PreparedEpisode,
};
use melodapt::datasets::{
    default_domains, episode_stream, load_manifest, synthesize_corpus, write_manifest, DatasetManifest, Split,
};
use melodapt::metrics::{evaluate_classes, mean_scores, results_table, MelodyScores, ResultRow};
use melodapt::model::{predict_classes, BaseModel, ConfidenceModel, ModelBundle};
use melodapt::signal::{load_audio, read_label_file, AudioClip, CHUNK_SAMPLES, FRAMES_PER_CHUNK};
use melodapt::training::{class_counts, global_class_weights, pretrain, train_confidence, TrainConfig};
use melodapt_service::{AppState, CatalogEntry, Models, ServiceConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::report::{compare, Report, Summary};
use crate::{CliError, Cli, Command, Overrides, RunConfig, Stage};

pub const PRETRAINED: &str = "pretrained";
pub const CONFIDENCE: &str = "confidence";
pub const META_TRAINED: &str = "meta-trained";

pub fn dispatch(cli: Cli) -> Result<String, CliError> {
    let base = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::SynthData(a) => synth_data(&a.out, a.seed, a.clips, a.target_clips),
        Command::Pretrain(a) => {
            let cfg = resolved(base, &a.overrides, Stage::Pretrain)?;
            let manifest = manifest_path(a.manifest, &cfg)?;
            run_pretrain(&cfg, &manifest, &a.out, a.trace.as_deref())
        }
        Command::TrainConfidence(a) => {
            let cfg = resolved(base, &a.overrides, Stage::Confidence)?;
            let manifest = manifest_path(a.manifest, &cfg)?;
            let model = model_path(a.model, &cfg)?;
            run_train_confidence(&cfg, &manifest, &model, &a.out, a.trace.as_deref())
        }
        Command::MetaTrain(a) => {
            let cfg = resolved(base, &a.overrides, Stage::Meta)?;
            let manifest = manifest_path(a.manifest, &cfg)?;
            let model = model_path(a.model, &cfg)?;
            run_meta_train(&cfg, &manifest, &model, &a.out, a.trace.as_deref())
        }
        Command::MetaTest(a) => {
            if a.annotator != "oracle" {
                return Err(CliError::usage(format!(
                    "annotator {:?} is not available offline; use oracle or the serve command",
                    a.annotator
                )));
            }
            let cfg = resolved(base, &a.overrides, Stage::Test)?;
            let manifest = manifest_path(a.manifest, &cfg)?;
            let model = model_path(a.model, &cfg)?;
            let split = parse_split(&a.split)?;
            let domain = a.domain.unwrap_or_else(|| cfg.data.target_domain.clone());
            let report = run_meta_test(&cfg, &manifest, &model, split, &domain)?;
            write_atomic(&a.out, report.render().as_bytes())?;
            Ok(compare(std::slice::from_ref(&report))?)
        }
        Command::Evaluate(a) => {
            let cfg = base;
            let manifest = manifest_path(a.manifest, &cfg)?;
            let model = model_path(a.model, &cfg)?;
            let split = parse_split(&a.split)?;
            let domain = a.domain.unwrap_or_else(|| cfg.data.target_domain.clone());
            let table = run_evaluate(&manifest, &model, split, &domain)?;
            if let Some(out) = &a.out {
                write_atomic(out, table.as_bytes())?;
            }
            Ok(table)
        }
        Command::Compare(a) => {
            let reports = a.reports.iter().map(|p| Report::read(p)).collect::<Result<Vec<_>, _>>()?;
            let table = compare(&reports)?;
            if let Some(out) = &a.out {
                write_atomic(out, table.as_bytes())?;
            }
            Ok(table)
        }
        Command::Serve(a) => {
            let cfg = resolved(base, &a.overrides, Stage::Test)?;
            let model = model_path(a.model, &cfg)?;
            run_serve(&cfg, &model, a.addr, a.store, a.manifest.as_deref())?;
            Ok(String::new())
        }
    }
}

fn resolved(mut cfg: RunConfig, o: &Overrides, stage: Stage) -> Result<RunConfig, CliError> {
    o.apply(&mut cfg, stage)?;
    Ok(cfg)
}

fn must_exist(path: PathBuf, what: &str) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::missing(format!("{what} {} does not exist", path.display())))
    }
}

fn manifest_path(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let p = flag
        .or_else(|| cfg.paths.manifest.clone())
        .ok_or_else(|| CliError::usage("--manifest is required (or paths.manifest in the config)"))?;
    must_exist(p, "manifest")
}

fn model_path(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let p = flag
        .or_else(|| cfg.paths.model.clone())
        .ok_or_else(|| CliError::usage("--model is required (or paths.model in the config)"))?;
    must_exist(p, "model file")
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse().map_err(CliError::usage)
}

/// Write through a sibling temp file so a failed run leaves nothing behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let result = std::fs::write(&tmp, bytes).and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(CliError::runtime(format!("{}: {e}", path.display())));
    }
    Ok(())
}

fn load_corpus(path: &Path) -> Result<DatasetManifest, CliError> {
    load_manifest(path).map_err(CliError::runtime)
}

fn episodes(manifest: &DatasetManifest, split: Split, domain: &str) -> Result<Vec<Episode>, CliError> {
    let eps = episode_stream(manifest, split, Some(domain), None).map_err(CliError::runtime)?;
    if eps.is_empty() {
        return Err(CliError::missing(format!("manifest has no {split} entries in domain {domain:?}")));
    }
    Ok(eps)
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle, CliError> {
    ModelBundle::load(path, None).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<(), CliError> {
    write_atomic(path, &bundle.encode().map_err(CliError::runtime)?)
}

pub fn synth_data(out: &Path, seed: u64, clips: usize, target_clips: usize) -> Result<String, CliError> {
    let mut manifest = DatasetManifest::default();
    for spec in default_domains(seed, clips, target_clips) {
        let m = synthesize_corpus(&spec, out).map_err(CliError::runtime)?;
        manifest = manifest.merge(m);
    }
    let path = out.join("manifest.tsv");
    write_manifest(&path, &manifest).map_err(CliError::runtime)?;
    let mut text = String::new();
    let _ = writeln!(text, "manifest\t{}", path.display());
    for (domain, split) in [("source", Split::Train), ("source", Split::Val), ("meta", Split::Train), ("target", Split::Test)] {
        let _ = writeln!(text, "{domain}\t{split}\t{}", manifest.select(split, Some(domain)).count());
    }
    Ok(text)
}

pub fn run_pretrain(cfg: &RunConfig, manifest: &Path, out: &Path, trace: Option<&Path>) -> Result<String, CliError> {
    let arch = cfg.architecture()?;
    let corpus = load_corpus(manifest)?;
    let train = episodes(&corpus, Split::Train, &cfg.data.pretrain_domain)?;
    let weights = global_class_weights(&class_counts(&train, arch.n_classes));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let mut base = BaseModel::new(arch, &mut rng).map_err(CliError::runtime)?;
    let tc = TrainConfig::new(cfg.pretrain.epochs, cfg.pretrain.learning_rate, cfg.run.seed);
    let t = pretrain(&mut base, &train, &weights, &tc, |r| {
        tracing::info!(epoch = r.epoch, loss = r.mean_loss, "pretrain");
    })
    .map_err(CliError::runtime)?;
    if let Some(p) = trace {
        write_atomic(p, t.to_tsv().as_bytes())?;
    }
    let bundle = ModelBundle {
        base,
        confidence: None,
        stage: PRETRAINED.into(),
    };
    save_bundle(&bundle, out)?;
    let last = t.records.last().map_or(f64::NAN, |r| r.mean_loss);
    Ok(format!("pretrained\t{}\tepisodes\t{}\tfinal_loss\t{last:.6}\n", out.display(), train.len()))
}

pub fn run_train_confidence(
    cfg: &RunConfig,
    manifest: &Path,
    model: &Path,
    out: &Path,
    trace: Option<&Path>,
) -> Result<String, CliError> {
    let mut bundle = load_bundle(model)?;
    if !bundle.base.is_frozen() {
        return Err(CliError::runtime(format!("{} is not a pre-trained model", model.display())));
    }
    let corpus = load_corpus(manifest)?;
    let train = episodes(&corpus, Split::Train, &cfg.data.pretrain_domain)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed.wrapping_add(1));
    let mut conf = ConfidenceModel::new(bundle.base.arch(), &mut rng).map_err(CliError::runtime)?;
    let tc = TrainConfig::new(cfg.confidence.epochs, cfg.confidence.learning_rate, cfg.run.seed);
    let t = train_confidence(&mut conf, &bundle.base, &train, &tc, |r| {
        tracing::info!(epoch = r.epoch, loss = r.mean_loss, "confidence");
    })
    .map_err(CliError::runtime)?;
    if let Some(p) = trace {
        write_atomic(p, t.to_tsv().as_bytes())?;
    }
    bundle.confidence = Some(conf);
    bundle.stage = CONFIDENCE.into();
    save_bundle(&bundle, out)?;
    let last = t.records.last().map_or(f64::NAN, |r| r.mean_loss);
    Ok(format!("confidence\t{}\tfinal_loss\t{last:.6}\n", out.display()))
}

fn heads_of(bundle: &ModelBundle, model: &Path) -> Result<Heads, CliError> {
    let conf = bundle
        .confidence
        .as_ref()
        .ok_or_else(|| CliError::runtime(format!("{} has no confidence head; run train-confidence", model.display())))?;
    Ok(Heads::new(&bundle.base, conf))
}

fn prepare(base: &BaseModel, eps: &[Episode]) -> Result<Vec<PreparedEpisode>, CliError> {
    eps.iter()
        .map(|e| PreparedEpisode::new(base, e).map_err(CliError::runtime))
        .collect()
}

/// The method a bundle and hyperparameters amount to.
pub fn method_of(bundle: &ModelBundle, hyper: &MetaHyperparameters) -> Method {
    Method::from_toggles(
        bundle.stage.starts_with(META_TRAINED),
        hyper.iterations > 0,
        hyper.meta_weighting,
        hyper.selection,
    )
}

pub fn run_meta_train(
    cfg: &RunConfig,
    manifest: &Path,
    model: &Path,
    out: &Path,
    trace: Option<&Path>,
) -> Result<String, CliError> {
    let mut bundle = load_bundle(model)?;
    let heads = heads_of(&bundle, model)?;
    let corpus = load_corpus(manifest)?;
    let eps = prepare(&bundle.base, &episodes(&corpus, Split::Train, &cfg.data.meta_domain)?)?;
    let hyper = cfg.hyperparameters();
    let conf = bundle.confidence.as_mut().expect("checked by heads_of");
    let outcome = meta_train(&heads, bundle.base.theta(), conf.psi(), &eps, &hyper, |r| {
        tracing::info!(epoch = r.epoch, query_loss = r.mean_query_loss, "meta-train");
    })
    .map_err(CliError::runtime)?;
    conf.set_psi(outcome.psi).map_err(CliError::runtime)?;
    bundle.base.set_theta(outcome.theta).map_err(CliError::runtime)?;
    let method = Method::from_toggles(true, true, hyper.meta_weighting, hyper.selection);
    bundle.stage = format!("{META_TRAINED} {}", method.label());
    if let Some(p) = trace {
        let mut tsv = String::from("epoch\tsupport_loss_before\tsupport_loss_after\tquery_loss\n");
        for r in &outcome.epochs {
            let _ = writeln!(
                tsv,
                "{}\t{:.6}\t{:.6}\t{:.6}",
                r.epoch, r.mean_support_loss_before, r.mean_support_loss_after, r.mean_query_loss
            );
        }
        write_atomic(p, tsv.as_bytes())?;
    }
    save_bundle(&bundle, out)?;
    Ok(format!(
        "meta-trained\t{}\tmethod\t{}\tepisodes\t{}\tupdates\t{}\n",
        out.display(),
        method.label(),
        eps.len(),
        outcome.olo_updates
    ))
}

/// Adapt to every episode of one split with the oracle annotator.
pub fn run_meta_test(
    cfg: &RunConfig,
    manifest: &Path,
    model: &Path,
    split: Split,
    domain: &str,
) -> Result<Report, CliError> {
    let bundle = load_bundle(model)?;
    let heads = heads_of(&bundle, model)?;
    let corpus = load_corpus(manifest)?;
    let eps = episodes(&corpus, split, domain)?;
    let hyper = cfg.hyperparameters();
    let method = method_of(&bundle, &hyper);
    let conf = bundle.confidence.as_ref().expect("checked by heads_of");
    let jobs = cfg.run.jobs.min(eps.len()).max(1);
    let one = |i: usize| -> Result<EpisodeReport, CliError> {
        let ep = PreparedEpisode::new(&bundle.base, &eps[i]).map_err(CliError::runtime)?;
        let mut annotator = oracle_annotator(ep.labels.as_ref(), &ep.id).map_err(CliError::runtime)?;
        let h = episode_hyper(&hyper, i);
        let outcome = meta_test_episode(&heads, bundle.base.theta(), conf.psi(), &ep, &mut annotator, &h)
            .map_err(|e| CliError::runtime(format!("episode {}: {e}", ep.id)))?;
        tracing::debug!(episode = %ep.id, "adapted");
        Ok(EpisodeReport::new(&ep.id, method, &h, outcome.iterations))
    };
    let mut results: Vec<Option<Result<EpisodeReport, CliError>>> = (0..eps.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<(usize, &mut [Option<Result<EpisodeReport, CliError>>])> = {
            let per = eps.len().div_ceil(jobs);
            results.chunks_mut(per).enumerate().map(|(c, s)| (c * per, s)).collect()
        };
        for (offset, slots) in chunks {
            let one = &one;
            scope.spawn(move || {
                for (j, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(one(offset + j));
                }
            });
        }
    });
    let reports = results
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = Summary::from_episodes(domain, method.label(), hyper.k, hyper.iterations, &reports);
    Ok(Report {
        config_json: cfg.to_json(),
        summary,
        episodes: reports,
    })
}

/// Episode `i` gets its own random-selection stream.
pub fn episode_hyper(hyper: &MetaHyperparameters, i: usize) -> MetaHyperparameters {
    MetaHyperparameters {
        seed: hyper.seed.wrapping_add(i as u64),
        ..*hyper
    }
}

/// Mean scores of the base model over all valid frames of `split`.
pub fn evaluate_scores(bundle: &ModelBundle, manifest: &Path, split: Split, domain: &str) -> Result<MelodyScores, CliError> {
    let corpus = load_corpus(manifest)?;
    let eps = episodes(&corpus, split, domain)?;
    let mut scores = Vec::with_capacity(eps.len());
    for e in &eps {
        let post = bundle.base.predict_posteriors(&e.spectrogram).map_err(CliError::runtime)?;
        let labels = e.labels.as_ref().expect("manifest episodes carry labels");
        let frames: Vec<usize> = (0..e.valid_frames).collect();
        scores.push(evaluate_classes(&predict_classes(&post), labels, &frames).map_err(CliError::runtime)?);
    }
    Ok(mean_scores(&scores))
}

pub fn run_evaluate(manifest: &Path, model: &Path, split: Split, domain: &str) -> Result<String, CliError> {
    let bundle = load_bundle(model)?;
    let scores = evaluate_scores(&bundle, manifest, split, domain)?;
    Ok(results_table(&[ResultRow {
        dataset: domain.into(),
        method: Method::Ct.label().into(),
        k: 0,
        s: 0,
        scores,
    }]))
}

/// Test-split chunks of a manifest, keyed by episode id, for the service.
pub fn catalog(manifest: &Path, domain: &str) -> Result<BTreeMap<String, CatalogEntry>, CliError> {
    let corpus = load_corpus(manifest)?;
    let mut out = BTreeMap::new();
    for entry in corpus.select(Split::Test, Some(domain)) {
        let clip = load_audio(&entry.audio).map_err(CliError::runtime)?;
        let track = read_label_file(&entry.labels).map_err(CliError::runtime)?;
        for (i, piece) in clip.samples.chunks(CHUNK_SAMPLES).enumerate() {
            let start = (i * FRAMES_PER_CHUNK).min(track.len());
            let end = ((i + 1) * FRAMES_PER_CHUNK).min(track.len());
            out.insert(
                format!("{}#{i}", entry.id()),
                CatalogEntry {
                    clip: AudioClip::new(piece.to_vec(), clip.sample_rate),
                    reference_hz: Some(track[start..end].to_vec()),
                },
            );
        }
    }
    Ok(out)
}

/// Shared models and config for the service, as `serve` builds them.
pub fn service_parts(cfg: &RunConfig, model: &Path) -> Result<(Models, ServiceConfig), CliError> {
    let bundle = load_bundle(model)?;
    heads_of(&bundle, model)?;
    let hyper = cfg.hyperparameters();
    let method = method_of(&bundle, &MetaHyperparameters { iterations: 1, ..hyper });
    let models = Models::from_bundle(bundle, method).map_err(CliError::runtime)?;
    let mut sc = ServiceConfig::new((&hyper).into());
    sc.default_k = hyper.k;
    Ok((models, sc))
}

fn run_serve(
    cfg: &RunConfig,
    model: &Path,
    addr: std::net::SocketAddr,
    store: Option<PathBuf>,
    manifest: Option<&Path>,
) -> Result<(), CliError> {
    let (models, mut sc) = service_parts(cfg, model)?;
    sc.store = store;
    let catalog = match manifest {
        Some(m) => catalog(&must_exist(m.to_path_buf(), "manifest")?, &cfg.data.target_domain)?,
        None => BTreeMap::new(),
    };
    let state = AppState::new(models, sc, catalog).map_err(CliError::runtime)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::runtime)?;
    rt.block_on(melodapt_service::serve(state, addr)).map_err(CliError::runtime)
}
