//! Dataset manifests and label ingestion, chunking into episodes, and a
//! synthetic harmonic-melody corpus for controlled domain-shift experiments.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adaptation::Episode;
use crate::signal::{
    chunk, class_to_hz, hz_to_class, load_audio, quantize_labels, read_label_file, write_label_file, write_wav,
    AudioClip, SignalError, Stft, CHUNK_SAMPLES, FRAMES_PER_CHUNK, HOP_LEN, MAX_CLASS, NUM_CLASSES, SAMPLE_RATE,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("manifest {0} has no entries")]
    Empty(String),
    #[error("entry {entry}: missing {what} file {path}")]
    MissingFile { entry: String, what: &'static str, path: String },
    #[error("entry {entry}: {labels} label frames for {expected} audio frames")]
    Misaligned { entry: String, labels: usize, expected: usize },
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub audio: PathBuf,
    pub labels: PathBuf,
    pub split: Split,
    pub domain: String,
}

impl ManifestEntry {
    /// Stable identifier: the audio file stem.
    pub fn id(&self) -> String {
        self.audio
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.audio.display().to_string())
    }
}

/// Entries with paths resolved against the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn select<'a>(&'a self, split: Split, domain: Option<&'a str>) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries
            .iter()
            .filter(move |e| e.split == split && domain.is_none_or(|d| e.domain == d))
    }

    pub fn count(&self, split: Split) -> usize {
        self.select(split, None).count()
    }

    pub fn merge(mut self, other: DatasetManifest) -> Self {
        self.entries.extend(other.entries);
        self
    }
}

/// Parse `audio<TAB>labels<TAB>split<TAB>domain` lines. Blank lines and
/// lines starting with `#` are skipped. Relative paths are resolved against
/// the manifest's directory, and every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: String| DatasetError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(malformed(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let split = fields[2].parse().map_err(malformed)?;
        let entry = ManifestEntry {
            audio: base.join(fields[0]),
            labels: base.join(fields[1]),
            split,
            domain: fields[3].to_string(),
        };
        for (what, p) in [("audio", &entry.audio), ("label", &entry.labels)] {
            if !p.is_file() {
                return Err(DatasetError::MissingFile {
                    entry: fields[0].to_string(),
                    what,
                    path: p.display().to_string(),
                });
            }
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(DatasetError::Empty(path.display().to_string()));
    }
    Ok(DatasetManifest { entries })
}

/// Write a manifest with paths relative to `path`'s directory when possible.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut out = String::new();
    for e in &manifest.entries {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", rel(&e.audio), rel(&e.labels), e.split, e.domain));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Frames on the 10 ms label grid for `samples` audio samples.
pub fn expected_label_frames(samples: usize) -> usize {
    samples.div_ceil(HOP_LEN)
}

/// Load one entry and cut it into labelled episodes of 500 frames.
pub fn entry_episodes(entry: &ManifestEntry, stft: &Stft) -> Result<Vec<Episode>> {
    let clip = load_audio(&entry.audio)?;
    let track = read_label_file(&entry.labels)?;
    let expected = expected_label_frames(clip.samples.len());
    if track.len().abs_diff(expected) > 1 {
        return Err(DatasetError::Misaligned {
            entry: entry.id(),
            labels: track.len(),
            expected,
        });
    }
    let id = entry.id();
    chunk(&clip, CHUNK_SAMPLES as f64 / SAMPLE_RATE as f64)
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let start = (i * FRAMES_PER_CHUNK).min(track.len());
            let end = ((i + 1) * FRAMES_PER_CHUNK).min(track.len());
            let valid = c.valid_frames();
            let mut labels = quantize_labels(&track[start..end], FRAMES_PER_CHUNK)?;
            for l in &mut labels.classes[valid..] {
                *l = 0;
            }
            Ok(Episode {
                id: format!("{id}#{i}"),
                spectrogram: stft.magnitude(&c.clip.samples)?,
                labels: Some(labels),
                valid_frames: valid,
            })
        })
        .collect()
}

/// Episodes of one split (optionally one domain) in manifest order, or
/// shuffled when a seed is given.
pub fn episode_stream(
    manifest: &DatasetManifest,
    split: Split,
    domain: Option<&str>,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Episode>> {
    let stft = Stft::new();
    let mut out = Vec::new();
    for e in manifest.select(split, domain) {
        out.extend(entry_episodes(e, &stft)?);
    }
    if let Some(seed) = shuffle_seed {
        out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(out)
}

/// Per-class frame counts over the label files of one split.
pub fn class_histogram(manifest: &DatasetManifest, split: Split, domain: Option<&str>) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; NUM_CLASSES];
    for e in manifest.select(split, domain) {
        for hz in read_label_file(&e.labels)? {
            counts[hz_to_class(hz)? as usize] += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accompaniment {
    /// Sustained low root with harmonics.
    Drone,
    /// Triads that change about once per second.
    Chord,
    /// White noise.
    Noise,
}

impl FromStr for Accompaniment {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "drone" => Ok(Self::Drone),
            "chord" => Ok(Self::Chord),
            "noise" => Ok(Self::Noise),
            other => Err(format!("unknown accompaniment {other:?}")),
        }
    }
}

/// Parameters of one synthetic domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisSpec {
    pub domain: String,
    pub n_clips: usize,
    pub duration_seconds: f64,
    pub pitch_range_hz: (f64, f64),
    /// Relative amplitude of harmonics 1, 2, 3...
    pub partials: Vec<f64>,
    pub accompaniment: Accompaniment,
    /// Melody-to-accompaniment power ratio.
    pub snr_db: f64,
    pub voiced_fraction: f64,
    /// Note pitches are drawn every this many classes (8 = semitones).
    pub note_step: u16,
    /// Frames of log-frequency glide into a note that follows another.
    pub glide_frames: usize,
    /// Fraction of clips tagged `val` and `test`; the rest are `train`.
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SynthesisSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DatasetError::InvalidSpec(m.to_string()));
        let (lo, hi) = self.pitch_range_hz;
        if !(55.0..=2000.0).contains(&lo) || !(55.0..=2000.0).contains(&hi) || lo > hi {
            return bad("pitch range must lie within [55, 2000] Hz");
        }
        if !self.snr_db.is_finite() {
            return bad("SNR must be finite");
        }
        if self.partials.is_empty() || self.partials.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return bad("partials must be non-negative and non-empty");
        }
        if !(0.0..=1.0).contains(&self.voiced_fraction) {
            return bad("voiced fraction must lie in [0, 1]");
        }
        if !(self.duration_seconds > 0.0 && self.duration_seconds.is_finite()) {
            return bad("duration must be positive");
        }
        if self.val_fraction < 0.0 || self.test_fraction < 0.0 || self.val_fraction + self.test_fraction > 1.0 {
            return bad("split fractions must be non-negative and sum to at most 1");
        }
        if self.note_step == 0 {
            return bad("note step must be positive");
        }
        if self.domain.is_empty() || self.domain.contains(['/', '\t', '\n']) {
            return bad("domain name must be a plain word");
        }
        Ok(())
    }

    fn split_of(&self, index: usize) -> Split {
        let n = self.n_clips as f64;
        let n_test = (self.test_fraction * n).round() as usize;
        let n_val = (self.val_fraction * n).round() as usize;
        let n_train = self.n_clips.saturating_sub(n_test + n_val);
        if index < n_train {
            Split::Train
        } else if index < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// One rendered clip: audio plus its on-grid f0 track.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub audio: AudioClip,
    /// Hz per 10 ms frame, each value the centre of its class.
    pub f0: Vec<f64>,
}

/// Frame-level f0 of a melody made of piecewise-constant notes on the class
/// grid with short log-frequency glides between adjacent notes.
fn melody_track(rng: &mut ChaCha8Rng, spec: &SynthesisSpec, frames: usize) -> Vec<f64> {
    let lo = hz_to_class(spec.pitch_range_hz.0).expect("validated").max(1);
    let hi = hz_to_class(spec.pitch_range_hz.1).expect("validated").min(MAX_CLASS);
    let mut f0 = Vec::with_capacity(frames);
    let mut prev: Option<f64> = None;
    while f0.len() < frames {
        let len = rng.gen_range(10..=40).min(frames - f0.len());
        if rng.gen_bool(spec.voiced_fraction) {
            let steps = (hi - lo) / spec.note_step;
            let class = lo + spec.note_step * rng.gen_range(0..=steps);
            let target = class_to_hz(class).expect("in range");
            let glide = if prev.is_some() { spec.glide_frames.min(len / 2) } else { 0 };
            for j in 0..len {
                let hz = match prev {
                    Some(p) if j < glide => p * (target / p).powf((j + 1) as f64 / (glide + 1) as f64),
                    _ => target,
                };
                f0.push(hz);
            }
            prev = Some(target);
        } else {
            f0.extend(std::iter::repeat_n(0.0, len));
            prev = None;
        }
    }
    f0
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn accompaniment(rng: &mut ChaCha8Rng, kind: Accompaniment, n: usize) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let tone = |out: &mut [f64], start: usize, hz: f64, harmonics: usize, amp: f64| {
        for (i, v) in out.iter_mut().enumerate() {
            let t = (start + i) as f64 / sr;
            for h in 1..=harmonics {
                if hz * h as f64 >= sr / 2.0 {
                    break;
                }
                *v += amp / h as f64 * (2.0 * PI * hz * h as f64 * t).sin();
            }
        }
    };
    let mut out = vec![0.0; n];
    match kind {
        Accompaniment::Drone => {
            let root = class_to_hz(rng.gen_range(1..=97)).expect("in range");
            tone(&mut out, 0, root, 6, 1.0);
            tone(&mut out, 0, root * 1.5, 4, 0.5);
        }
        Accompaniment::Chord => {
            let seg = SAMPLE_RATE as usize;
            let mut start = 0;
            while start < n {
                let end = (start + seg).min(n);
                let root = class_to_hz(rng.gen_range(49..=145)).expect("in range");
                let third = if rng.gen_bool(0.5) { 2f64.powf(4.0 / 12.0) } else { 2f64.powf(3.0 / 12.0) };
                for ratio in [1.0, third, 2f64.powf(7.0 / 12.0)] {
                    tone(&mut out[start..end], start, root * ratio, 3, 1.0);
                }
                start = end;
            }
        }
        Accompaniment::Noise => {
            for v in &mut out {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }
    out
}

/// Render clip `index` of a spec. Deterministic in (spec, index).
pub fn synthesize_clip(spec: &SynthesisSpec, index: usize) -> Result<SynthClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let n = (spec.duration_seconds * SAMPLE_RATE as f64).round() as usize;
    let frames = expected_label_frames(n);
    let track = melody_track(&mut rng, spec, frames);
    let sr = SAMPLE_RATE as f64;

    // Sample-rate f0 and amplitude, interpolated between frame centres, with
    // 5 ms fades around voicing changes.
    let fade = (0.005 * sr) as usize;
    let mut voice = vec![0.0; n];
    let mut phase = vec![0.0; spec.partials.len()];
    let mut gain = 0.0f64;
    for (i, v) in voice.iter_mut().enumerate() {
        let pos = i as f64 / HOP_LEN as f64;
        let m = (pos.floor() as usize).min(frames - 1);
        let next = (m + 1).min(frames - 1);
        let (a, b) = (track[m], track[next]);
        let hz = match (a > 0.0, b > 0.0) {
            (true, true) => a * (b / a).powf(pos - m as f64),
            (true, false) => a,
            (false, true) => b,
            _ => 0.0,
        };
        let voiced = track[((pos + 0.5).floor() as usize).min(frames - 1)] > 0.0;
        let target = if voiced { 1.0 } else { 0.0 };
        gain += (target - gain).clamp(-1.0 / fade as f64, 1.0 / fade as f64);
        if hz <= 0.0 {
            continue;
        }
        for (h, (amp, ph)) in spec.partials.iter().zip(phase.iter_mut()).enumerate() {
            let fh = hz * (h + 1) as f64;
            *ph = (*ph + 2.0 * PI * fh / sr) % (2.0 * PI);
            if fh < sr / 2.0 {
                *v += gain * amp * ph.sin();
            }
        }
    }
    let acc = accompaniment(&mut rng, spec.accompaniment, n);
    let voiced: Vec<f64> = voice.iter().copied().filter(|v| *v != 0.0).collect();
    let scale = if voiced.is_empty() || rms(&acc) == 0.0 {
        0.05
    } else {
        rms(&voiced) / (rms(&acc) * 10f64.powf(spec.snr_db / 20.0))
    };
    let mix: Vec<f64> = voice.iter().zip(&acc).map(|(v, a)| v + scale * a).collect();
    let peak = mix.iter().fold(0.0f64, |p, v| p.max(v.abs())).max(1e-9);
    let audio = AudioClip::new(mix.iter().map(|v| (0.9 * v / peak) as f32).collect(), SAMPLE_RATE);
    let f0 = track
        .iter()
        .map(|&hz| hz_to_class(hz).and_then(class_to_hz))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(SynthClip { audio, f0 })
}

/// Write every clip of `spec` under `out_dir/<domain>/` and return the
/// manifest describing them.
pub fn synthesize_corpus(spec: &SynthesisSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let dir = out_dir.join(&spec.domain);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut entries = Vec::with_capacity(spec.n_clips);
    for i in 0..spec.n_clips {
        let clip = synthesize_clip(spec, i)?;
        let stem = format!("{}_{i:04}", spec.domain);
        let audio = dir.join(format!("{stem}.wav"));
        let labels = dir.join(format!("{stem}.txt"));
        write_wav(&audio, &clip.audio).map_err(io_err(&audio))?;
        write_label_file(&labels, &clip.f0).map_err(io_err(&labels))?;
        entries.push(ManifestEntry {
            audio,
            labels,
            split: spec.split_of(i),
            domain: spec.domain.clone(),
        });
    }
    Ok(DatasetManifest { entries })
}

/// Three domains for desk-scale experiments: `source` for pre-training and
/// confidence training, `meta` (same distribution, fresh clips) for
/// meta-training, and `target`, a shifted domain with a wider register and a
/// louder drone accompaniment.
pub fn default_domains(seed: u64, clips_per_domain: usize, target_clips: usize) -> [SynthesisSpec; 3] {
    let source = SynthesisSpec {
        domain: "source".into(),
        n_clips: clips_per_domain,
        duration_seconds: 5.0,
        pitch_range_hz: (110.0, 440.0),
        partials: vec![1.0, 0.5, 0.25, 0.12],
        accompaniment: Accompaniment::Chord,
        snr_db: 10.0,
        voiced_fraction: 0.7,
        note_step: 8,
        glide_frames: 4,
        val_fraction: 0.2,
        test_fraction: 0.0,
        seed,
    };
    let meta = SynthesisSpec {
        domain: "meta".into(),
        val_fraction: 0.0,
        seed: seed.wrapping_add(1),
        ..source.clone()
    };
    let target = SynthesisSpec {
        domain: "target".into(),
        n_clips: target_clips,
        pitch_range_hz: (110.0, 700.0),
        accompaniment: Accompaniment::Drone,
        snr_db: 6.0,
        val_fraction: 0.0,
        test_fraction: 1.0,
        seed: seed.wrapping_add(2),
        ..source.clone()
    };
    [source, meta, target]
}
