//! Audio ingestion, chunking, magnitude STFT and the pitch-class grid.
//!
//! Every clip is brought to mono 8 kHz, cut into 5 second chunks and turned
//! into a 513 x 500 magnitude spectrogram (1024-point Hann window, 10 ms hop,
//! reflect-centred frames). Pitch is quantized onto a 1/8-semitone grid
//! anchored at 55 Hz; class 0 is the unvoiced class.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

/// Analysis sample rate after ingestion.
pub const SAMPLE_RATE: u32 = 8000;
/// STFT window length in samples.
pub const WINDOW_LEN: usize = 1024;
/// 10 ms at 8 kHz.
pub const HOP_LEN: usize = 80;
/// Frequency bins of a one-sided 1024-point spectrum.
pub const N_BINS: usize = WINDOW_LEN / 2 + 1;
/// Frames per full 5 second chunk.
pub const FRAMES_PER_CHUNK: usize = 500;
/// Samples per full 5 second chunk.
pub const CHUNK_SAMPLES: usize = FRAMES_PER_CHUNK * HOP_LEN;
/// Unvoiced class plus 505 voiced classes.
pub const NUM_CLASSES: usize = 506;
/// Frequency of class 1.
pub const BASE_HZ: f64 = 55.0;
/// Grid resolution: 8 classes per semitone.
pub const CLASSES_PER_OCTAVE: f64 = 96.0;
/// Highest voiced class id.
pub const MAX_CLASS: u16 = (NUM_CLASSES - 1) as u16;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a readable PCM WAV file: {reason}")]
    NotWav { path: String, reason: String },
    #[error("{0} contains no audio")]
    Empty(String),
    #[error("audio contains a non-finite sample")]
    NonFiniteSample,
    #[error("expected {expected} samples, got {actual}")]
    WrongLength { expected: usize, actual: usize },
    #[error("pitch must be finite, got {0}")]
    InvalidPitch(f64),
    #[error("class id {0} outside [0, {MAX_CLASS}]")]
    ClassOutOfRange(usize),
    #[error("label file {path}, line {line}: {reason}")]
    BadLabelLine {
        path: String,
        line: usize,
        reason: String,
    },
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// One fixed-length chunk of a clip. `valid_len` is the number of samples
/// that came from the source; the rest is zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub clip: AudioClip,
    pub valid_len: usize,
}

impl Chunk {
    /// Frames whose centre falls on real (non-padded) audio.
    pub fn valid_frames(&self) -> usize {
        self.valid_len.div_ceil(HOP_LEN).min(self.clip.samples.len() / HOP_LEN)
    }
}

/// F x M magnitude matrix stored bin-major: `data[bin * n_frames + frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub n_bins: usize,
    pub n_frames: usize,
    pub data: Vec<f32>,
}

impl Spectrogram {
    pub fn zeros(n_bins: usize, n_frames: usize) -> Self {
        Self {
            n_bins,
            n_frames,
            data: vec![0.0; n_bins * n_frames],
        }
    }

    #[inline]
    pub fn get(&self, bin: usize, frame: usize) -> f32 {
        self.data[bin * self.n_frames + frame]
    }

    pub fn hop_seconds(&self) -> f64 {
        HOP_LEN as f64 / SAMPLE_RATE as f64
    }

    /// Magnitudes of one frame across all bins.
    pub fn frame(&self, frame: usize) -> Vec<f32> {
        (0..self.n_bins).map(|b| self.get(b, frame)).collect()
    }
}

/// Per-frame pitch-class ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FrameLabels {
    pub classes: Vec<u16>,
}

impl FrameLabels {
    pub fn new(classes: Vec<u16>) -> Result<Self> {
        if let Some(&bad) = classes.iter().find(|&&c| c > MAX_CLASS) {
            return Err(SignalError::ClassOutOfRange(bad as usize));
        }
        Ok(Self { classes })
    }

    pub fn unvoiced(n_frames: usize) -> Self {
        Self {
            classes: vec![0; n_frames],
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn to_hz(&self) -> Vec<f64> {
        self.classes
            .iter()
            .map(|&c| class_to_hz(c).expect("validated at construction"))
            .collect()
    }
}

/// Windowed-sinc resampler settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResamplerConfig {
    /// Sinc zero crossings on each side of the kernel centre.
    pub zero_crossings: usize,
    /// Cutoff as a fraction of the lower Nyquist frequency.
    pub rolloff: f64,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        Self {
            zero_crossings: 24,
            rolloff: 0.94,
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window on [-1, 1].
fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let x = PI * (u + 1.0);
    0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos()
}

struct SincKernel {
    cutoff: f64,
    half_width: f64,
}

impl SincKernel {
    fn new(from: u32, to: u32, cfg: &ResamplerConfig) -> Self {
        let ratio = (to as f64 / from as f64).min(1.0);
        let cutoff = 0.5 * cfg.rolloff * ratio;
        let half_width = cfg.zero_crossings as f64 / (2.0 * cutoff);
        Self { cutoff, half_width }
    }

    #[inline]
    fn tap(&self, offset: f64) -> f64 {
        2.0 * self.cutoff * sinc(2.0 * self.cutoff * offset) * blackman(offset / self.half_width)
    }

    /// Input index range and normalized weights for an output centred at `pos`.
    fn taps(&self, pos: f64) -> (i64, Vec<f64>) {
        let first = (pos - self.half_width).ceil() as i64;
        let last = (pos + self.half_width).floor() as i64;
        let mut w: Vec<f64> = (first..=last).map(|i| self.tap(pos - i as f64)).collect();
        let norm: f64 = w.iter().sum();
        if norm.abs() > 1e-12 {
            w.iter_mut().for_each(|x| *x /= norm);
        }
        (first, w)
    }
}

/// Resample by windowed-sinc interpolation. Identity when rates match.
pub fn resample(samples: &[f32], from: u32, to: u32, cfg: &ResamplerConfig) -> Vec<f32> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let n_out = ((samples.len() as u64 * to as u64 + from as u64 / 2) / from as u64) as usize;
    let kernel = SincKernel::new(from, to, cfg);
    let g = gcd(from as u64, to as u64);
    let phases = (to as u64 / g) as usize;
    let step = from as f64 / to as f64;

    // Output j sits at input position j * from / to; its fractional part
    // repeats with period `phases`, so tap tables can be shared.
    let cached: Option<Vec<(i64, Vec<f64>)>> =
        (phases <= 4096).then(|| (0..phases).map(|p| kernel.taps(p as f64 * step)).collect());

    let n_in = samples.len() as i64;
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let (first, weights) = match &cached {
            Some(table) => {
                let p = j % phases;
                let shift = ((j / phases) as u64 * from as u64 / g) as i64;
                let (f, w) = &table[p];
                (f + shift, std::borrow::Cow::Borrowed(w))
            }
            None => {
                let (f, w) = kernel.taps(j as f64 * step);
                (f, std::borrow::Cow::Owned(w))
            }
        };
        let mut acc = 0.0f64;
        for (k, &w) in weights.iter().enumerate() {
            let i = first + k as i64;
            if (0..n_in).contains(&i) {
                acc += w * samples[i as usize] as f64;
            }
        }
        out.push(acc.clamp(-1.0, 1.0) as f32);
    }
    out
}

/// Read a PCM WAV file, mix to mono and resample to 8 kHz.
pub fn load_audio(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path).map_err(|source| SignalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_wav(&bytes, &path.display().to_string())
}

/// Decode WAV bytes (any channel count, PCM int or float) to a mono 8 kHz clip.
pub fn decode_wav(bytes: &[u8], name: &str) -> Result<AudioClip> {
    let not_wav = |e: hound::Error| SignalError::NotWav {
        path: name.to_string(),
        reason: e.to_string(),
    };
    let reader = hound::WavReader::new(std::io::Cursor::new(bytes)).map_err(not_wav)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(not_wav)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(not_wav)?
        }
    };
    if interleaved.len() < channels {
        return Err(SignalError::Empty(name.to_string()));
    }
    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    if mono.iter().any(|s| !s.is_finite()) {
        return Err(SignalError::NonFiniteSample);
    }
    let samples = resample(&mono, spec.sample_rate, SAMPLE_RATE, &ResamplerConfig::default());
    Ok(AudioClip::new(samples, SAMPLE_RATE))
}

/// Write a mono float32 WAV.
pub fn write_wav(path: &Path, clip: &AudioClip) -> std::io::Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(std::io::Error::other)?;
    for &s in &clip.samples {
        w.write_sample(s).map_err(std::io::Error::other)?;
    }
    w.finalize().map_err(std::io::Error::other)
}

/// Encode a mono clip as float32 WAV bytes.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, spec).expect("in-memory writer");
        for &s in &clip.samples {
            w.write_sample(s).expect("in-memory write");
        }
        w.finalize().expect("in-memory finalize");
    }
    cursor.into_inner()
}

/// Cut a clip into consecutive non-overlapping chunks; the last one is
/// zero-padded and keeps its true length.
pub fn chunk(clip: &AudioClip, chunk_seconds: f64) -> Vec<Chunk> {
    let len = (chunk_seconds * clip.sample_rate as f64).round() as usize;
    if clip.samples.is_empty() || len == 0 {
        return Vec::new();
    }
    clip.samples
        .chunks(len)
        .map(|piece| {
            let mut samples = piece.to_vec();
            samples.resize(len, 0.0);
            Chunk {
                clip: AudioClip::new(samples, clip.sample_rate),
                valid_len: piece.len(),
            }
        })
        .collect()
}

/// Reusable STFT plan: periodic Hann window and a cached FFT.
pub struct Stft {
    window: Vec<f32>,
    fft: Arc<dyn Fft<f32>>,
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        let window = (0..WINDOW_LEN)
            .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / WINDOW_LEN as f64).cos()) as f32)
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(WINDOW_LEN);
        Self { window, fft }
    }

    /// Magnitude spectrogram of a full chunk: 513 bins x 500 frames, frame m
    /// centred on sample m * 80 with reflect padding at both ends.
    pub fn magnitude(&self, samples: &[f32]) -> Result<Spectrogram> {
        if samples.len() != CHUNK_SAMPLES {
            return Err(SignalError::WrongLength {
                expected: CHUNK_SAMPLES,
                actual: samples.len(),
            });
        }
        let n = samples.len() as i64;
        let half = (WINDOW_LEN / 2) as i64;
        let reflect = |i: i64| -> f32 {
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
            samples[i as usize]
        };
        let mut spec = Spectrogram::zeros(N_BINS, FRAMES_PER_CHUNK);
        let mut buf = vec![Complex::new(0.0f32, 0.0); WINDOW_LEN];
        for m in 0..FRAMES_PER_CHUNK {
            let start = (m * HOP_LEN) as i64 - half;
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(reflect(start + k as i64) * self.window[k], 0.0);
            }
            self.fft.process(&mut buf);
            for (bin, c) in buf.iter().take(N_BINS).enumerate() {
                spec.data[bin * FRAMES_PER_CHUNK + m] = c.norm();
            }
        }
        Ok(spec)
    }
}

/// One-shot convenience wrapper around [`Stft::magnitude`].
pub fn stft_magnitude(chunk: &AudioClip) -> Result<Spectrogram> {
    Stft::new().magnitude(&chunk.samples)
}

/// Map a frequency to its pitch class. Non-positive input and anything more
/// than half a step below 55 Hz is unvoiced; the top of the grid clamps.
pub fn hz_to_class(f0: f64) -> Result<u16> {
    if !f0.is_finite() {
        return Err(SignalError::InvalidPitch(f0));
    }
    if f0 <= 0.0 {
        return Ok(0);
    }
    let steps = CLASSES_PER_OCTAVE * (f0 / BASE_HZ).log2();
    if steps < -0.5 {
        return Ok(0);
    }
    Ok((1.0 + steps.round()).clamp(1.0, MAX_CLASS as f64) as u16)
}

/// Centre frequency of a class; class 0 maps to the 0 Hz unvoiced sentinel.
pub fn class_to_hz(class: u16) -> Result<f64> {
    match class {
        0 => Ok(0.0),
        c if c <= MAX_CLASS => Ok(BASE_HZ * 2f64.powf((c - 1) as f64 / CLASSES_PER_OCTAVE)),
        c => Err(SignalError::ClassOutOfRange(c as usize)),
    }
}

/// Quantize a 10 ms f0 track to `n_frames` labels; missing frames are unvoiced.
pub fn quantize_labels(f0_track: &[f64], n_frames: usize) -> Result<FrameLabels> {
    let classes = (0..n_frames)
        .map(|m| f0_track.get(m).map_or(Ok(0), |&f| hz_to_class(f)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameLabels { classes })
}

/// Read a label file: one decimal Hz value per 10 ms frame, 0 for unvoiced.
pub fn read_label_file(path: &Path) -> Result<Vec<f64>> {
    let file = fs::File::open(path).map_err(|source| SignalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut track = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| SignalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let bad = |reason: String| SignalError::BadLabelLine {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let hz: f64 = text.parse().map_err(|e| bad(format!("{e}")))?;
        if !hz.is_finite() || hz < 0.0 {
            return Err(bad(format!("invalid pitch {hz}")));
        }
        track.push(hz);
    }
    Ok(track)
}

/// Render a track in the canonical label format.
pub fn format_label_track(track: &[f64]) -> String {
    let mut out = String::with_capacity(track.len() * 8);
    for hz in track {
        out.push_str(&format!("{hz}\n"));
    }
    out
}

pub fn write_label_file(path: &Path, track: &[f64]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(format_label_track(track).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect()
    }

    #[test]
    fn class_grid_examples() {
        assert_eq!(hz_to_class(55.0).unwrap(), 1);
        assert_eq!(hz_to_class(0.0).unwrap(), 0);
        assert_eq!(hz_to_class(110.0).unwrap(), 97);
        assert_eq!(hz_to_class(220.0).unwrap(), 193);
        assert_eq!(class_to_hz(1).unwrap(), 55.0);
        assert_eq!(class_to_hz(0).unwrap(), 0.0);
        assert!((class_to_hz(97).unwrap() - 110.0).abs() < 1e-9);
        assert!(class_to_hz(506).is_err());
        assert!(hz_to_class(f64::NAN).is_err());
        assert!(hz_to_class(f64::NEG_INFINITY).is_err());
        assert_eq!(hz_to_class(-3.0).unwrap(), 0);
    }

    #[test]
    fn class_grid_edges() {
        // Half a step below 55 Hz is the unvoiced boundary.
        let half_below = BASE_HZ * 2f64.powf(-0.49 / 96.0);
        assert_eq!(hz_to_class(half_below).unwrap(), 1);
        assert_eq!(hz_to_class(BASE_HZ * 2f64.powf(-0.51 / 96.0)).unwrap(), 0);
        assert_eq!(hz_to_class(20_000.0).unwrap(), MAX_CLASS);
    }

    #[test]
    fn round_trip_every_class() {
        for c in 1..=MAX_CLASS {
            assert_eq!(hz_to_class(class_to_hz(c).unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn quantize_examples() {
        let l = quantize_labels(&[0.0, 55.0, 110.0], 3).unwrap();
        assert_eq!(l.classes, vec![0, 1, 97]);
        let l = quantize_labels(&[0.0; 10], 10).unwrap();
        assert!(l.classes.iter().all(|&c| c == 0));
        let l = quantize_labels(&[220.0; 5], 5).unwrap();
        assert!(l.classes.iter().all(|&c| c == 193));
        // Short tracks are padded as unvoiced.
        let l = quantize_labels(&[110.0], 3).unwrap();
        assert_eq!(l.classes, vec![97, 0, 0]);
    }

    #[test]
    fn chunk_arithmetic() {
        let clip = AudioClip::new(vec![0.1; 12 * 8000], 8000);
        let chunks = chunk(&clip, 5.0);
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[2].valid_len, 16000);
        assert!(chunks[2].clip.samples[16000..].iter().all(|&s| s == 0.0));
        assert_eq!(chunks[2].valid_frames(), 200);

        let clip = AudioClip::new(vec![0.1; 40000], 8000);
        let chunks = chunk(&clip, 5.0);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].valid_len, 40000);
        assert_eq!(chunks[0].valid_frames(), 500);

        let clip = AudioClip::new(vec![0.1; 58400], 8000);
        let chunks = chunk(&clip, 5.0);
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[1].valid_len, 18400);
        assert_eq!(chunks[1].valid_frames(), 230);
    }

    #[test]
    fn stft_shape_and_silence() {
        let stft = Stft::new();
        let spec = stft.magnitude(&vec![0.0; CHUNK_SAMPLES]).unwrap();
        assert_eq!((spec.n_bins, spec.n_frames), (513, 500));
        assert!(spec.data.iter().all(|&v| v == 0.0));
        assert!(matches!(
            stft.magnitude(&vec![0.0; 100]),
            Err(SignalError::WrongLength { .. })
        ));
    }

    /// Frames whose whole window lies inside the clip. Reflect padding
    /// mirrors a sine with a phase flip, so edge frames smear.
    fn interior_frames() -> std::ops::RangeInclusive<usize> {
        let half = WINDOW_LEN / 2;
        half.div_ceil(HOP_LEN)..=(CHUNK_SAMPLES - half) / HOP_LEN
    }

    #[test]
    fn stft_sine_peaks_at_closed_form_bin() {
        let spec = Stft::new().magnitude(&sine(1000.0, 8000, CHUNK_SAMPLES)).unwrap();
        let expected = (1000.0f64 * 1024.0 / 8000.0).round() as usize;
        for m in interior_frames() {
            let frame = spec.frame(m);
            let argmax = frame
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, expected, "frame {m}");
        }
    }

    #[test]
    fn windowed_sine_energy_concentrates() {
        for &f in &[220.0, 437.0, 1000.0, 2500.0] {
            let spec = Stft::new().magnitude(&sine(f, 8000, CHUNK_SAMPLES)).unwrap();
            let center = (f * 1024.0 / 8000.0).round() as usize;
            for m in interior_frames().step_by(40) {
                let power: Vec<f64> = spec.frame(m).iter().map(|&v| (v as f64).powi(2)).collect();
                let total: f64 = power.iter().sum();
                let near: f64 = power[center - 2..=center + 2].iter().sum();
                assert!(near / total >= 0.9, "f={f} m={m} ratio={}", near / total);
            }
        }
    }

    #[test]
    fn resample_length_and_identity() {
        let x = sine(440.0, 44100, 44100);
        let y = resample(&x, 44100, 8000, &ResamplerConfig::default());
        assert_eq!(y.len(), 8000);
        let z = resample(&x, 8000, 8000, &ResamplerConfig::default());
        assert_eq!(z, x);
    }

    #[test]
    fn label_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.txt");
        let track = vec![0.0, 55.0, 110.5, 1975.7];
        write_label_file(&path, &track).unwrap();
        assert_eq!(read_label_file(&path).unwrap(), track);
        fs::write(&path, "0\nabc\n").unwrap();
        assert!(matches!(
            read_label_file(&path),
            Err(SignalError::BadLabelLine { line: 2, .. })
        ));
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(matches!(
            decode_wav(b"not a wav file at all", "x"),
            Err(SignalError::NotWav { .. })
        ));
    }
}
