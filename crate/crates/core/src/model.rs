//! Base model (feature extractor plus frame classifier) and the confidence
//! head, with the prediction surfaces the rest of the crate builds on.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::io::{self, TensorRecord, WeightFile};
use crate::nn::{Layer, LayerSpec, Mode, Network, NnError, ParameterSet, Tensor};
use crate::signal::{FrameLabels, Spectrogram, N_BINS, NUM_CLASSES};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("spectrogram has {actual} bins, model expects {expected}")]
    BinMismatch { expected: usize, actual: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Layer sizes of the base and confidence models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub preset: String,
    pub n_bins: usize,
    pub n_classes: usize,
    /// Feed `ln(1 + |X|)` instead of raw magnitudes.
    pub log_input: bool,
    /// Output channels of each convolution.
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub pool_factor: usize,
    /// How many of the leading convolutions are followed by frequency pooling.
    pub pooled_convs: usize,
    /// Max-pool the remaining frequency axis to one bin after the last
    /// convolution. Without it the last conv output is flattened per frame.
    pub global_pool: bool,
    pub embed_width: usize,
    pub confidence_hidden: usize,
}

impl Architecture {
    /// Full-size network.
    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            n_bins: N_BINS,
            n_classes: NUM_CLASSES,
            log_input: true,
            filters: vec![64, 128, 192, 256],
            kernel: 5,
            pool_factor: 4,
            pooled_convs: 3,
            global_pool: true,
            embed_width: 512,
            confidence_hidden: 256,
        }
    }

    /// CPU-sized network with the same structure. The final frequency axis is
    /// flattened rather than pooled so 32 channels still give 256 features.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            filters: vec![8, 16, 24, 32],
            global_pool: false,
            embed_width: 64,
            confidence_hidden: 32,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    /// Frequency bins left after the pooled convolutions.
    pub fn pooled_bins(&self) -> usize {
        (0..self.pooled_convs).fold(self.n_bins, |f, _| f / self.pool_factor.max(1))
    }

    /// Width of the per-frame vector entering the embedding layer.
    pub fn conv_features(&self) -> usize {
        let channels = self.filters.last().copied().unwrap_or(0);
        if self.global_pool {
            channels
        } else {
            channels * self.pooled_bins()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidArchitecture(m));
        if self.filters.is_empty() {
            return bad("at least one convolution is required".into());
        }
        if self.pooled_convs > self.filters.len() {
            return bad(format!(
                "{} pooled convolutions but only {} convolutions",
                self.pooled_convs,
                self.filters.len()
            ));
        }
        if self.kernel % 2 == 0 || self.pool_factor == 0 {
            return bad("kernel must be odd and pool factor positive".into());
        }
        if self.pooled_bins() == 0 {
            return bad(format!("{} bins cannot be pooled {} times", self.n_bins, self.pooled_convs));
        }
        if self.n_classes < 2 || self.embed_width == 0 || self.confidence_hidden == 0 {
            return bad("class count, embedding and confidence widths must be positive".into());
        }
        Ok(())
    }

    pub fn feature_network(&self) -> Result<Network> {
        self.validate()?;
        let mut layers = Vec::new();
        let mut in_ch = 1;
        for (i, &out) in self.filters.iter().enumerate() {
            let n = i + 1;
            layers.push(Layer::new(
                format!("conv{n}"),
                LayerSpec::Conv2d {
                    in_channels: in_ch,
                    out_channels: out,
                    kernel: self.kernel,
                },
            ));
            layers.push(Layer::new(format!("bn{n}"), LayerSpec::BatchNorm { channels: out }));
            layers.push(Layer::new(format!("relu{n}"), LayerSpec::Relu));
            if i < self.pooled_convs {
                layers.push(Layer::new(
                    format!("pool{n}"),
                    LayerSpec::FreqPool {
                        factor: self.pool_factor,
                    },
                ));
            }
            in_ch = out;
        }
        if self.global_pool && self.pooled_bins() > 1 {
            layers.push(Layer::new(
                "global_pool",
                LayerSpec::FreqPool {
                    factor: self.pooled_bins(),
                },
            ));
        }
        layers.push(Layer::new(
            "embed",
            LayerSpec::DensePerFrame {
                in_features: self.conv_features(),
                units: self.embed_width,
            },
        ));
        layers.push(Layer::new("embed_relu", LayerSpec::Relu));
        Ok(Network::new(layers)?)
    }

    pub fn classifier_network(&self) -> Result<Network> {
        Ok(Network::new(vec![
            Layer::new(
                "classifier",
                LayerSpec::DensePerFrame {
                    in_features: self.embed_width,
                    units: self.n_classes,
                },
            ),
            Layer::new("softmax", LayerSpec::SoftmaxPerFrame),
        ])?)
    }

    pub fn confidence_network(&self) -> Result<Network> {
        Ok(Network::new(vec![
            Layer::new(
                "conf_hidden",
                LayerSpec::DensePerFrame {
                    in_features: self.embed_width,
                    units: self.confidence_hidden,
                },
            ),
            Layer::new("conf_relu", LayerSpec::Relu),
            Layer::new(
                "conf_out",
                LayerSpec::DensePerFrame {
                    in_features: self.confidence_hidden,
                    units: 1,
                },
            ),
            Layer::new("conf_sigmoid", LayerSpec::Sigmoid),
        ])?)
    }

    fn manifest(&self) -> Vec<(String, String)> {
        let filters: Vec<String> = self.filters.iter().map(|f| f.to_string()).collect();
        vec![
            ("preset".into(), self.preset.clone()),
            ("n_bins".into(), self.n_bins.to_string()),
            ("n_classes".into(), self.n_classes.to_string()),
            ("log_input".into(), self.log_input.to_string()),
            ("filters".into(), filters.join(",")),
            ("kernel".into(), self.kernel.to_string()),
            ("pool_factor".into(), self.pool_factor.to_string()),
            ("pooled_convs".into(), self.pooled_convs.to_string()),
            ("global_pool".into(), self.global_pool.to_string()),
            ("embed_width".into(), self.embed_width.to_string()),
            ("confidence_hidden".into(), self.confidence_hidden.to_string()),
        ]
    }

    fn from_manifest(file: &WeightFile) -> Result<Self> {
        let get = |k: &str| {
            file.manifest_value(k)
                .ok_or_else(|| NnError::ManifestMismatch(format!("manifest lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| NnError::ManifestMismatch(format!("manifest {k} is not a number")).into())
        };
        let filters = get("filters")?
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| NnError::ManifestMismatch("manifest filters malformed".into()))?;
        Ok(Self {
            preset: get("preset")?.to_string(),
            n_bins: num("n_bins")?,
            n_classes: num("n_classes")?,
            log_input: get("log_input")? == "true",
            filters,
            kernel: num("kernel")?,
            pool_factor: num("pool_factor")?,
            pooled_convs: num("pooled_convs")?,
            global_pool: get("global_pool")? == "true",
            embed_width: num("embed_width")?,
            confidence_hidden: num("confidence_hidden")?,
        })
    }
}

/// Per-frame φ features, shape `[embed_width, 1, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features(pub Tensor<f32>);

impl Features {
    pub fn dim(&self) -> usize {
        self.0.shape[0]
    }

    pub fn n_frames(&self) -> usize {
        self.0.shape[2]
    }

    /// Features of the listed frames, in order.
    pub fn gather(&self, frames: &[usize]) -> Features {
        let (d, m) = (self.dim(), self.n_frames());
        let mut data = Vec::with_capacity(d * frames.len());
        for k in 0..d {
            let row = &self.0.data[k * m..(k + 1) * m];
            data.extend(frames.iter().map(|&f| row[f]));
        }
        Features(Tensor::new(vec![d, 1, frames.len()], data))
    }
}

/// Class posteriors, stored class-major: `data[c * n_frames + m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    pub n_classes: usize,
    pub n_frames: usize,
    pub data: Vec<f32>,
}

impl Posteriors {
    pub fn from_tensor(t: Tensor<f32>) -> Self {
        let (c, _, m) = (t.shape[0], t.shape[1], t.shape[2]);
        Self {
            n_classes: c,
            n_frames: m,
            data: t.data,
        }
    }

    /// Build from per-frame columns (each of length `n_classes`).
    pub fn from_columns(columns: &[Vec<f32>]) -> Self {
        let m = columns.len();
        let c = columns.first().map_or(0, Vec::len);
        let mut data = vec![0.0; c * m];
        for (j, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), c, "ragged posterior columns");
            for (k, &p) in col.iter().enumerate() {
                data[k * m + j] = p;
            }
        }
        Self {
            n_classes: c,
            n_frames: m,
            data,
        }
    }

    #[inline]
    pub fn prob(&self, class: usize, frame: usize) -> f32 {
        self.data[class * self.n_frames + frame]
    }

    pub fn column(&self, frame: usize) -> Vec<f32> {
        (0..self.n_classes).map(|c| self.prob(c, frame)).collect()
    }

    /// Per-frame argmax; ties go to the lowest class id.
    pub fn argmax(&self, frame: usize) -> usize {
        let mut best = 0;
        let mut best_p = self.prob(0, frame);
        for c in 1..self.n_classes {
            let p = self.prob(c, frame);
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        best
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.n_classes, 1, self.n_frames], self.data.clone())
    }
}

pub fn predict_classes(posteriors: &Posteriors) -> FrameLabels {
    FrameLabels {
        classes: (0..posteriors.n_frames).map(|m| posteriors.argmax(m) as u16).collect(),
    }
}

fn spectrogram_tensor(arch: &Architecture, x: &Spectrogram) -> Result<Tensor<f32>> {
    if x.n_bins != arch.n_bins {
        return Err(ModelError::BinMismatch {
            expected: arch.n_bins,
            actual: x.n_bins,
        });
    }
    let data = if arch.log_input {
        x.data.iter().map(|v| v.ln_1p()).collect()
    } else {
        x.data.clone()
    };
    Ok(Tensor::new(vec![1, x.n_bins, x.n_frames], data))
}

/// The frame classifier f_[φ,θ].
#[derive(Debug, Clone)]
pub struct BaseModel {
    arch: Architecture,
    feature_net: Network,
    classifier_net: Network,
    phi: ParameterSet,
    theta: ParameterSet,
    frozen: bool,
}

impl BaseModel {
    pub fn new<G: Rng + ?Sized>(arch: Architecture, rng: &mut G) -> Result<Self> {
        let feature_net = arch.feature_network()?;
        let classifier_net = arch.classifier_network()?;
        let phi = feature_net.init_params(rng);
        let theta = classifier_net.init_params(rng);
        Ok(Self {
            arch,
            feature_net,
            classifier_net,
            phi,
            theta,
            frozen: false,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn feature_net(&self) -> &Network {
        &self.feature_net
    }

    pub fn classifier_net(&self) -> &Network {
        &self.classifier_net
    }

    pub fn phi(&self) -> &ParameterSet {
        &self.phi
    }

    pub fn theta(&self) -> &ParameterSet {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: ParameterSet) -> Result<()> {
        check_same_layout(&self.theta, &theta)?;
        self.theta = theta;
        Ok(())
    }

    /// Only pre-training may touch φ, and only before it is frozen.
    pub(crate) fn parts_mut(&mut self) -> (&Network, &Network, Option<&mut ParameterSet>, &mut ParameterSet) {
        let phi = (!self.frozen).then_some(&mut self.phi);
        (&self.feature_net, &self.classifier_net, phi, &mut self.theta)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freeze φ, including its batch-norm statistics.
    pub fn freeze_features(&mut self) {
        self.phi.set_trainable(false);
        self.frozen = true;
    }

    pub fn phi_checksum(&self) -> u64 {
        self.phi.checksum()
    }

    /// φ features in inference mode.
    pub fn features(&self, x: &Spectrogram) -> Result<Features> {
        let input = spectrogram_tensor(&self.arch, x)?;
        Ok(Features(self.feature_net.infer(&self.phi, &input, Mode::Infer)?))
    }

    pub(crate) fn input_tensor(&self, x: &Spectrogram) -> Result<Tensor<f32>> {
        spectrogram_tensor(&self.arch, x)
    }

    /// Posteriors from cached features under an arbitrary θ (e.g. an
    /// episode copy).
    pub fn posteriors_with(&self, theta: &ParameterSet, features: &Features) -> Result<Posteriors> {
        let out = self.classifier_net.infer(theta, &features.0, Mode::Infer)?;
        Ok(Posteriors::from_tensor(out))
    }

    pub fn posteriors_from_features(&self, features: &Features) -> Result<Posteriors> {
        self.posteriors_with(&self.theta, features)
    }

    pub fn predict_posteriors(&self, x: &Spectrogram) -> Result<Posteriors> {
        self.posteriors_from_features(&self.features(x)?)
    }

    /// Features, posteriors and confidence from a single φ pass.
    pub fn analyze(&self, conf: &ConfidenceModel, x: &Spectrogram) -> Result<Analysis> {
        let features = self.features(x)?;
        let posteriors = self.posteriors_from_features(&features)?;
        let confidence = conf.predict(&features)?;
        Ok(Analysis {
            features,
            posteriors,
            confidence,
        })
    }
}

/// Result of [`BaseModel::analyze`].
#[derive(Debug, Clone)]
pub struct Analysis {
    pub features: Features,
    pub posteriors: Posteriors,
    pub confidence: Vec<f32>,
}

/// The confidence head f_ψ on top of φ features.
#[derive(Debug, Clone)]
pub struct ConfidenceModel {
    net: Network,
    psi: ParameterSet,
}

impl ConfidenceModel {
    pub fn new<G: Rng + ?Sized>(arch: &Architecture, rng: &mut G) -> Result<Self> {
        let net = arch.confidence_network()?;
        let psi = net.init_params(rng);
        Ok(Self { net, psi })
    }

    pub fn zeroed(arch: &Architecture) -> Result<Self> {
        let net = arch.confidence_network()?;
        let psi = net.zero_params();
        Ok(Self { net, psi })
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn psi(&self) -> &ParameterSet {
        &self.psi
    }

    pub fn set_psi(&mut self, psi: ParameterSet) -> Result<()> {
        check_same_layout(&self.psi, &psi)?;
        self.psi = psi;
        Ok(())
    }

    pub fn predict_with(&self, psi: &ParameterSet, features: &Features) -> Result<Vec<f32>> {
        Ok(self.net.infer(psi, &features.0, Mode::Infer)?.data)
    }

    pub fn predict(&self, features: &Features) -> Result<Vec<f32>> {
        self.predict_with(&self.psi, features)
    }
}

pub fn predict_posteriors(model: &BaseModel, x: &Spectrogram) -> Result<Posteriors> {
    model.predict_posteriors(x)
}

pub fn predict_confidence(conf: &ConfidenceModel, base: &BaseModel, x: &Spectrogram) -> Result<Vec<f32>> {
    conf.predict(&base.features(x)?)
}

fn check_same_layout(a: &ParameterSet, b: &ParameterSet) -> Result<()> {
    let layout = |p: &ParameterSet| -> Vec<(String, Vec<usize>)> {
        p.iter().map(|(n, t)| (n.clone(), t.tensor.shape.clone())).collect()
    };
    if layout(a) != layout(b) {
        return Err(NnError::ManifestMismatch("parameter layout differs".into()).into());
    }
    Ok(())
}

const PHI: &str = "phi/";
const THETA: &str = "theta/";
const PSI: &str = "psi/";

/// A base model and, optionally, its confidence head as stored on disk.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub base: BaseModel,
    pub confidence: Option<ConfidenceModel>,
    /// Free-form training stage, e.g. `pretrained` or `meta-trained`.
    pub stage: String,
}

impl ModelBundle {
    pub fn to_weight_file(&self) -> WeightFile {
        let mut manifest = self.base.arch.manifest();
        manifest.push(("frozen_features".into(), self.base.frozen.to_string()));
        manifest.push(("has_confidence".into(), self.confidence.is_some().to_string()));
        manifest.push(("stage".into(), self.stage.clone()));
        let mut records = Vec::new();
        let mut push = |prefix: &str, net: &Network, params: &ParameterSet| {
            for (name, kind, _, _) in net.param_manifest() {
                let p = params.get(&name).expect("manifest names exist");
                records.push(TensorRecord {
                    name: format!("{prefix}{name}"),
                    kind: kind.to_string(),
                    trainable: p.trainable,
                    tensor: p.tensor.clone(),
                });
            }
        };
        push(PHI, &self.base.feature_net, &self.base.phi);
        push(THETA, &self.base.classifier_net, &self.base.theta);
        if let Some(c) = &self.confidence {
            push(PSI, &c.net, &c.psi);
        }
        WeightFile { manifest, records }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        Ok(io::encode(&self.to_weight_file())?)
    }

    /// Rebuild from a decoded file. When `expected` is given the stored
    /// architecture must equal it.
    pub fn from_weight_file(file: &WeightFile, expected: Option<&Architecture>) -> Result<Self> {
        let arch = Architecture::from_manifest(file)?;
        if let Some(e) = expected {
            if e != &arch {
                return Err(NnError::ManifestMismatch(format!(
                    "file holds a {} network with filters {:?}, expected {} with filters {:?}",
                    arch.preset, arch.filters, e.preset, e.filters
                ))
                .into());
            }
        }
        let has_conf = file.manifest_value("has_confidence") == Some("true");
        let frozen = file.manifest_value("frozen_features") == Some("true");
        let stage = file.manifest_value("stage").unwrap_or_default().to_string();
        let feature_net = arch.feature_network()?;
        let classifier_net = arch.classifier_network()?;
        let mut expected_names = 0;
        let mut take = |prefix: &str, net: &Network| -> Result<ParameterSet> {
            let mut set = ParameterSet::new();
            for (name, kind, shape, _) in net.param_manifest() {
                let full = format!("{prefix}{name}");
                let rec = file
                    .records
                    .iter()
                    .find(|r| r.name == full)
                    .ok_or_else(|| NnError::ManifestMismatch(format!("missing tensor {full}")))?;
                if rec.kind != kind || rec.tensor.shape != shape {
                    return Err(NnError::ManifestMismatch(format!(
                        "{full}: stored {} {:?}, expected {kind} {shape:?}",
                        rec.kind, rec.tensor.shape
                    ))
                    .into());
                }
                set.insert(name, rec.tensor.clone(), rec.trainable)?;
                expected_names += 1;
            }
            Ok(set)
        };
        let phi = take(PHI, &feature_net)?;
        let theta = take(THETA, &classifier_net)?;
        let confidence = if has_conf {
            let net = arch.confidence_network()?;
            let psi = take(PSI, &net)?;
            Some(ConfidenceModel { net, psi })
        } else {
            None
        };
        if expected_names != file.records.len() {
            return Err(NnError::ManifestMismatch(format!(
                "file has {} tensors, architecture defines {expected_names}",
                file.records.len()
            ))
            .into());
        }
        Ok(Self {
            base: BaseModel {
                arch,
                feature_net,
                classifier_net,
                phi,
                theta,
                frozen,
            },
            confidence,
            stage,
        })
    }

    pub fn decode(bytes: &[u8], expected: Option<&Architecture>) -> Result<Self> {
        Self::from_weight_file(&io::decode(bytes)?, expected)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(NnError::Io)?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&Architecture>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(NnError::Io)?;
        Self::decode(&bytes, expected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Small enough to run in milliseconds.
    pub(crate) fn tiny() -> Architecture {
        Architecture {
            preset: "tiny".into(),
            n_bins: 33,
            n_classes: 6,
            log_input: true,
            filters: vec![2, 3],
            kernel: 3,
            pool_factor: 4,
            pooled_convs: 2,
            global_pool: false,
            embed_width: 5,
            confidence_hidden: 4,
        }
    }

    fn spec(bins: usize, frames: usize, seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Spectrogram {
            n_bins: bins,
            n_frames: frames,
            data: (0..bins * frames).map(|_| rng.gen_range(0.0..2.0)).collect(),
        }
    }

    #[test]
    fn preset_feature_widths() {
        assert_eq!(Architecture::desk().pooled_bins(), 8);
        assert_eq!(Architecture::desk().conv_features(), 256);
        assert_eq!(Architecture::paper().conv_features(), 256);
        Architecture::paper().feature_network().unwrap();
    }

    #[test]
    fn posteriors_shape_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = BaseModel::new(tiny(), &mut rng).unwrap();
        let p = model.predict_posteriors(&spec(33, 7, 2)).unwrap();
        assert_eq!((p.n_classes, p.n_frames), (6, 7));
        for m in 0..7 {
            let s: f64 = p.column(m).iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(matches!(model.predict_posteriors(&spec(32, 7, 2)), Err(ModelError::BinMismatch { .. })));
    }

    #[test]
    fn zeroed_classifier_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = BaseModel::new(tiny(), &mut rng).unwrap();
        let zero = model.classifier_net().zero_params();
        model.set_theta(zero).unwrap();
        let p = model.predict_posteriors(&spec(33, 4, 4)).unwrap();
        assert!(p.data.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-7));
        assert_eq!(predict_classes(&p).classes, vec![0; 4]);
    }

    #[test]
    fn argmax_examples() {
        let p = Posteriors::from_columns(&[vec![0.1, 0.7, 0.2], vec![0.5, 0.5, 0.0]]);
        assert_eq!(predict_classes(&p).classes, vec![1, 0]);
    }

    #[test]
    fn zeroed_confidence_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = BaseModel::new(tiny(), &mut rng).unwrap();
        let conf = ConfidenceModel::zeroed(&tiny()).unwrap();
        let c = predict_confidence(&conf, &base, &spec(33, 9, 6)).unwrap();
        assert_eq!(c, vec![0.5; 9]);
    }

    #[test]
    fn analyze_shares_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = BaseModel::new(tiny(), &mut rng).unwrap();
        let conf = ConfidenceModel::new(&tiny(), &mut rng).unwrap();
        let x = spec(33, 6, 8);
        let a = base.analyze(&conf, &x).unwrap();
        assert_eq!(a.features, base.features(&x).unwrap());
        assert_eq!(a.posteriors, base.predict_posteriors(&x).unwrap());
        assert_eq!(a.confidence, predict_confidence(&conf, &base, &x).unwrap());
        assert!(a.confidence.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn gather_picks_columns() {
        let f = Features(Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(f.gather(&[2, 0]).0.data, vec![3.0, 1.0, 6.0, 4.0]);
    }

    #[test]
    fn bundle_round_trip_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut base = BaseModel::new(tiny(), &mut rng).unwrap();
        base.freeze_features();
        let conf = ConfidenceModel::new(&tiny(), &mut rng).unwrap();
        let bundle = ModelBundle {
            base,
            confidence: Some(conf),
            stage: "meta-trained".into(),
        };
        let bytes = bundle.encode().unwrap();
        let back = ModelBundle::decode(&bytes, Some(&tiny())).unwrap();
        let x = spec(33, 5, 10);
        assert_eq!(
            back.base.predict_posteriors(&x).unwrap(),
            bundle.base.predict_posteriors(&x).unwrap()
        );
        assert!(back.base.is_frozen());
        assert_eq!(back.stage, "meta-trained");
        assert_eq!(back.base.phi_checksum(), bundle.base.phi_checksum());
        assert_eq!(back.confidence.unwrap().psi(), bundle.confidence.as_ref().unwrap().psi());

        let mut other = tiny();
        other.filters = vec![2, 4];
        let err = ModelBundle::decode(&bytes, Some(&other)).unwrap_err();
        assert!(matches!(err, ModelError::Nn(NnError::ManifestMismatch(_))));
        let err = ModelBundle::decode(&bytes[..bytes.len() - 10], None).unwrap_err();
        assert!(matches!(err, ModelError::Nn(NnError::CorruptWeights(_))));
    }
}
