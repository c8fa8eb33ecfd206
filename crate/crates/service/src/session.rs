//! One interactive adaptation session and its on-disk journal.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use melodapt::adaptation::{
    AdaptStep, AdapterConfig, AdapterState, EpisodeAdapter, EpisodeReport, Heads, IterationRecord, Method,
    PreparedEpisode,
};
use melodapt::metrics::MelodyScores;
use melodapt::model::BaseModel;
use melodapt::nn::io::{self as weight_io, TensorRecord, WeightFile};
use melodapt::nn::{Network, ParameterSet};
use melodapt::signal::{
    class_to_hz, encode_wav, format_label_track, read_label_file, write_label_file, write_wav, AudioClip,
    FrameLabels, Spectrogram, Stft, quantize_labels,
};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Read-only models shared by every session.
#[derive(Debug, Clone)]
pub struct Models {
    pub base: BaseModel,
    pub heads: Heads,
    pub theta: ParameterSet,
    pub psi: ParameterSet,
    pub method: Method,
}

/// Static facts about a session, written once at creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub source: String,
    pub chunk_index: usize,
    /// Sessions cut from the same upload, in chunk order.
    pub linked: Vec<String>,
    pub valid_frames: usize,
    pub has_reference: bool,
    pub config: AdapterConfig,
}

/// Mutable state that the journal records after every change.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub adapter: AdapterState,
    /// Pitches exactly as the annotator submitted them.
    pub human_hz: BTreeMap<usize, f64>,
    pub records: Vec<IterationRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JournalEntry {
    seq: u64,
    unix_ms: u128,
    event: String,
    detail: serde_json::Value,
    state: SessionState,
}

pub struct Session {
    pub meta: SessionMeta,
    pub clip: AudioClip,
    pub spectrogram: Spectrogram,
    pub reference: Option<FrameLabels>,
    pub adapter: EpisodeAdapter,
    pub state: SessionState,
    dir: Option<PathBuf>,
    seq: u64,
}

fn storage(path: &Path) -> impl FnOnce(std::io::Error) -> ServiceError + '_ {
    move |e| ServiceError::Storage(format!("{}: {e}", path.display()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(storage(&tmp))?;
    fs::rename(&tmp, path).map_err(storage(path))
}

fn params_file(heads: &Heads, theta: &ParameterSet, psi: &ParameterSet) -> WeightFile {
    let mut records = Vec::new();
    let mut push = |prefix: &str, net: &Network, p: &ParameterSet| {
        for (name, kind, _, _) in net.param_manifest() {
            let t = p.get(&name).expect("manifest names exist");
            records.push(TensorRecord {
                name: format!("{prefix}{name}"),
                kind: kind.to_string(),
                trainable: t.trainable,
                tensor: t.tensor.clone(),
            });
        }
    };
    push("theta/", &heads.classifier, theta);
    push("psi/", &heads.confidence, psi);
    WeightFile {
        manifest: vec![("content".into(), "episode-parameters".into())],
        records,
    }
}

fn params_from_file(heads: &Heads, file: &WeightFile) -> Result<(ParameterSet, ParameterSet), ServiceError> {
    let take = |prefix: &str, net: &Network| -> Result<ParameterSet, ServiceError> {
        let mut set = ParameterSet::new();
        for (name, _, shape, _) in net.param_manifest() {
            let full = format!("{prefix}{name}");
            let rec = file
                .records
                .iter()
                .find(|r| r.name == full && r.tensor.shape == shape)
                .ok_or_else(|| ServiceError::Storage(format!("snapshot lacks {full}")))?;
            set.insert(name, rec.tensor.clone(), rec.trainable)
                .map_err(|e| ServiceError::Storage(e.to_string()))?;
        }
        Ok(set)
    };
    Ok((take("theta/", &heads.classifier)?, take("psi/", &heads.confidence)?))
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl Session {
    /// Build a session for one chunk. `reference` is an optional per-frame
    /// ground-truth f0 track used only for reporting.
    pub fn create(
        models: &Models,
        meta: SessionMeta,
        clip: AudioClip,
        reference_hz: Option<&[f64]>,
        store: Option<&Path>,
    ) -> Result<Self, ServiceError> {
        let spectrogram = Stft::new().magnitude(&clip.samples)?;
        let reference = reference_hz
            .map(|track| {
                let mut l = quantize_labels(track, spectrogram.n_frames)?;
                for c in &mut l.classes[meta.valid_frames..] {
                    *c = 0;
                }
                Ok::<_, melodapt::signal::SignalError>(l)
            })
            .transpose()?;
        let episode = PreparedEpisode {
            id: meta.id.clone(),
            features: models.base.features(&spectrogram)?,
            labels: reference.clone(),
            valid_frames: meta.valid_frames,
        };
        let adapter = EpisodeAdapter::new(
            models.heads.clone(),
            models.theta.clone(),
            models.psi.clone(),
            &episode,
            meta.config,
        );
        let mut session = Self {
            meta,
            clip,
            spectrogram,
            reference,
            adapter,
            state: SessionState::default(),
            dir: store.map(|s| s.join("sessions")),
            seq: 0,
        };
        let initial = session.record(Vec::new(), Vec::new(), Vec::new())?;
        session.state.records.push(initial);
        if let Some(dir) = session.dir.take() {
            let dir = dir.join(&session.meta.id);
            fs::create_dir_all(&dir).map_err(storage(&dir))?;
            write_wav(&dir.join("audio.wav"), &session.clip).map_err(storage(&dir))?;
            if let Some(r) = &session.reference {
                let hz: Vec<f64> = r.classes.iter().map(|&c| class_to_hz(c).expect("valid")).collect();
                write_label_file(&dir.join("reference.txt"), &hz).map_err(storage(&dir))?;
            }
            let meta = serde_json::to_vec_pretty(&session.meta).expect("serializable");
            write_atomic(&dir.join("meta.json"), &meta)?;
            session.dir = Some(dir);
        }
        session.journal("create", serde_json::json!({}))?;
        Ok(session)
    }

    /// Reload a persisted session directory.
    pub fn load(models: &Models, dir: &Path) -> Result<Self, ServiceError> {
        let meta: SessionMeta = serde_json::from_slice(&fs::read(dir.join("meta.json")).map_err(storage(dir))?)
            .map_err(|e| ServiceError::Storage(format!("{}: {e}", dir.display())))?;
        let clip = melodapt::signal::load_audio(&dir.join("audio.wav"))?;
        let reference_path = dir.join("reference.txt");
        let reference_hz = if reference_path.is_file() {
            Some(read_label_file(&reference_path)?)
        } else {
            None
        };
        let mut session = Self::create(models, meta, clip, reference_hz.as_deref(), None)?;
        let journal = fs::read_to_string(dir.join("journal.jsonl")).map_err(storage(dir))?;
        let mut last: Option<JournalEntry> = None;
        for line in journal.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<JournalEntry>(line) {
                Ok(e) => last = Some(e),
                // A torn final line from a crash mid-append is ignored.
                Err(_) => break,
            }
        }
        let last = last.ok_or_else(|| ServiceError::Storage(format!("{}: empty journal", dir.display())))?;
        let (theta, psi) = if last.state.adapter.iteration == 0 {
            (models.theta.clone(), models.psi.clone())
        } else {
            let path = dir.join(format!("snapshot_{:03}.bin", last.state.adapter.iteration));
            let bytes = fs::read(&path).map_err(storage(&path))?;
            let file = weight_io::decode(&bytes).map_err(|e| ServiceError::Storage(e.to_string()))?;
            params_from_file(&models.heads, &file)?
        };
        let episode = PreparedEpisode {
            id: session.meta.id.clone(),
            features: models.base.features(&session.spectrogram)?,
            labels: session.reference.clone(),
            valid_frames: session.meta.valid_frames,
        };
        session.adapter = EpisodeAdapter::restore(
            models.heads.clone(),
            theta,
            psi,
            &episode,
            session.meta.config,
            last.state.adapter.clone(),
        );
        session.state = last.state;
        session.seq = last.seq + 1;
        session.dir = Some(dir.to_path_buf());
        Ok(session)
    }

    fn journal(&mut self, event: &str, detail: serde_json::Value) -> Result<(), ServiceError> {
        self.state.adapter = self.adapter.state().clone();
        let Some(dir) = &self.dir else {
            self.seq += 1;
            return Ok(());
        };
        let entry = JournalEntry {
            seq: self.seq,
            unix_ms: unix_ms(),
            event: event.to_string(),
            detail,
            state: self.state.clone(),
        };
        let path = dir.join("journal.jsonl");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(storage(&path))?;
        let mut line = serde_json::to_vec(&entry).expect("serializable");
        line.push(b'\n');
        f.write_all(&line).map_err(storage(&path))?;
        f.sync_data().map_err(storage(&path))?;
        self.seq += 1;
        Ok(())
    }

    pub fn query_scores(&self) -> Result<Option<MelodyScores>, ServiceError> {
        Ok(self
            .reference
            .as_ref()
            .map(|r| self.adapter.query_scores(r))
            .transpose()?)
    }

    fn record(
        &self,
        annotated: Vec<usize>,
        classifier_losses: Vec<f64>,
        confidence_losses: Vec<f64>,
    ) -> Result<IterationRecord, ServiceError> {
        Ok(IterationRecord {
            s: self.adapter.iteration(),
            annotated,
            query_frames: self.adapter.query_frames().len(),
            scores: self.query_scores()?,
            classifier_losses,
            confidence_losses,
        })
    }

    pub fn suggest(&mut self, k: usize) -> Result<Vec<usize>, ServiceError> {
        let frames = self.adapter.suggest(k)?;
        self.journal("suggest", serde_json::json!({ "k": k, "frames": frames }))?;
        Ok(frames)
    }

    /// Store annotations given as `(frame, class, submitted Hz)`.
    pub fn annotate(&mut self, items: &[(usize, u16, f64)]) -> Result<usize, ServiceError> {
        let map: BTreeMap<usize, u16> = items.iter().map(|&(f, c, _)| (f, c)).collect();
        let accepted = self.adapter.annotate(&map)?;
        for &(f, _, hz) in items {
            self.state.human_hz.entry(f).or_insert(hz);
        }
        self.journal(
            "annotate",
            serde_json::json!({ "annotations": items.iter().map(|&(f, c, hz)| (f, c, hz)).collect::<Vec<_>>(), "accepted": accepted }),
        )?;
        Ok(accepted)
    }

    pub fn adapt(&mut self) -> Result<AdaptStep, ServiceError> {
        let step = self.adapter.adapt()?;
        let rec = self.record(
            step.new_frames.clone(),
            step.classifier_losses.clone(),
            step.confidence_losses.clone(),
        )?;
        self.state.records.push(rec);
        if let Some(dir) = &self.dir {
            let file = params_file(self.adapter.heads(), self.adapter.theta(), self.adapter.psi());
            let bytes = weight_io::encode(&file).map_err(|e| ServiceError::Storage(e.to_string()))?;
            write_atomic(&dir.join(format!("snapshot_{:03}.bin", step.iteration)), &bytes)?;
        }
        self.journal("adapt", serde_json::json!({ "iteration": step.iteration, "frames": step.frames }))?;
        Ok(step)
    }

    /// Per-frame Hz of the current predictions with annotated frames
    /// replaced by the submitted values, over valid frames.
    pub fn export_track(&self) -> Result<Vec<f64>, ServiceError> {
        let predicted = self.adapter.predictions()?;
        Ok((0..self.meta.valid_frames)
            .map(|m| {
                self.state
                    .human_hz
                    .get(&m)
                    .copied()
                    .unwrap_or_else(|| class_to_hz(predicted.classes[m]).expect("valid class"))
            })
            .collect())
    }

    pub fn export_labels(&self) -> Result<String, ServiceError> {
        Ok(format_label_track(&self.export_track()?))
    }

    pub fn report(&self, method: Method) -> EpisodeReport {
        EpisodeReport {
            episode: self.meta.id.clone(),
            method: method.label().to_string(),
            k: self.state.adapter.batches.first().map_or(0, Vec::len),
            s: self.adapter.iteration(),
            annotated: self.state.adapter.batches.clone(),
            iterations: self.state.records.clone(),
        }
    }

    /// WAV bytes of `radius` seconds around a frame centre.
    pub fn audio_slice(&self, frame: usize, radius: f64) -> Vec<u8> {
        let sr = self.clip.sample_rate as f64;
        let centre = frame as f64 * self.spectrogram.hop_seconds() * sr;
        let r = (radius * sr).round();
        let start = (centre - r).max(0.0) as usize;
        let end = ((centre + r) as usize + 1).min(self.clip.samples.len());
        encode_wav(&AudioClip::new(self.clip.samples[start..end.max(start)].to_vec(), self.clip.sample_rate))
    }
}
