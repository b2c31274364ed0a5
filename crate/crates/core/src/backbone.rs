//! Frozen 152-layer residual network used as a feature extractor.
//!
//! Convolutions are indexed over the flattened sequence of the stem conv
//! (index 0) followed by the three convs of each bottleneck block; the 1×1
//! projection convs on the shortcut path are not counted. That gives 151
//! indexed convs, with resolution stages ending at 9, 33, 141 and 150.
//!
//! A tap at index `i` captures the activation after that conv's batch-norm
//! and ReLU. For the last conv of a block the residual sum is included, so
//! stage-end taps see the block output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::nn::{self, ModuleT};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::imaging::BScan;
use crate::net;

pub const BLOCKS_PER_STAGE: [usize; 4] = [3, 8, 36, 3];
pub const STAGE_WIDTHS: [i64; 4] = [64, 128, 256, 512];
pub const EXPANSION: i64 = 4;
pub const CONV_LAYER_COUNT: usize = 151;
pub const DEFAULT_TAPS: [usize; 3] = [9, 33, 141];

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    Pretrained,
    RandomSeeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub mode: BackboneMode,
    /// Safetensors file with torchvision parameter names. A JSON manifest
    /// with the same stem (`<name>.json`) must sit next to it.
    pub weights: Option<PathBuf>,
    /// Without strict mode a missing weights file falls back to seeded
    /// random weights with a warning.
    pub strict: bool,
    pub taps: Vec<usize>,
    /// Divides every channel count; 1 is the full-size network.
    pub width_divisor: i64,
    pub seed: u64,
    /// Initial scale of the last batch-norm in each block for random
    /// weights. Keeps deep activations bounded without pretraining.
    pub random_residual_gain: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            mode: BackboneMode::Pretrained,
            weights: None,
            strict: true,
            taps: DEFAULT_TAPS.to_vec(),
            width_divisor: 1,
            seed: 7,
            random_residual_gain: 0.2,
        }
    }
}

impl BackboneConfig {
    pub fn random(seed: u64, width_divisor: i64) -> Self {
        Self {
            mode: BackboneMode::RandomSeeded,
            seed,
            width_divisor,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Config("backbone needs at least one tap".into()));
        }
        if let Some(&bad) = self.taps.iter().find(|&&t| t >= CONV_LAYER_COUNT) {
            return Err(Error::Config(format!(
                "tap {bad} out of range (0..{CONV_LAYER_COUNT})"
            )));
        }
        for pair in self.taps.windows(2) {
            if tap_level(pair[1]) <= tap_level(pair[0]) {
                return Err(Error::Config(format!(
                    "taps {} and {} do not sit at strictly decreasing resolutions",
                    pair[0], pair[1]
                )));
            }
        }
        if self.width_divisor < 1 || 64 % self.width_divisor != 0 {
            return Err(Error::Config(format!(
                "width_divisor {} must divide 64",
                self.width_divisor
            )));
        }
        if !(self.random_residual_gain.is_finite() && self.random_residual_gain > 0.0) {
            return Err(Error::Config("random_residual_gain must be positive".into()));
        }
        Ok(())
    }
}

/// Number of stride-2 reductions applied before conv `index` produces
/// its output.
pub fn tap_level(index: usize) -> usize {
    if index == 0 {
        return 1;
    }
    let block = (index - 1) / 3;
    let pos = (index - 1) % 3;
    let mut first = 0;
    for (stage, &n) in BLOCKS_PER_STAGE.iter().enumerate() {
        if block < first + n {
            // the stride sits in the middle conv of a stage's first block
            let strided = stage > 0 && block == first && pos == 0;
            return 2 + stage - usize::from(strided);
        }
        first += n;
    }
    unreachable!("index bounded by CONV_LAYER_COUNT")
}

/// Activations at the tap layers, each `[N, C, H, W]`.
#[derive(Debug)]
pub struct FeatureStack {
    pub tap_ids: Vec<usize>,
    pub maps: Vec<Tensor>,
}

/// Anything that maps an image batch to tap activations. Losses take this
/// rather than the concrete backbone so tests can substitute small stubs.
pub trait FeatureExtractor {
    fn extract(&self, x: &Tensor) -> Result<FeatureStack>;
}

#[derive(Debug)]
struct ConvBn {
    conv: nn::Conv2D,
    bn: nn::BatchNorm,
}

impl ConvBn {
    fn new(p: nn::Path, conv: &str, bn: &str, cin: i64, cout: i64, k: i64, stride: i64) -> Self {
        let cfg = nn::ConvConfig {
            stride,
            padding: k / 2,
            bias: false,
            ..Default::default()
        };
        Self {
            conv: nn::conv2d(&p / conv, cin, cout, k, cfg),
            bn: nn::batch_norm2d(&p / bn, cout, Default::default()),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        self.bn.forward_t(&x.apply(&self.conv), false)
    }
}

#[derive(Debug)]
struct Bottleneck {
    c1: ConvBn,
    c2: ConvBn,
    c3: ConvBn,
    downsample: Option<ConvBn>,
}

impl Bottleneck {
    fn new(p: nn::Path, cin: i64, width: i64, stride: i64) -> Self {
        let cout = width * EXPANSION;
        let downsample = (stride != 1 || cin != cout)
            .then(|| ConvBn::new(&p / "downsample", "0", "1", cin, cout, 1, stride));
        Self {
            c1: ConvBn::new(p.clone(), "conv1", "bn1", cin, width, 1, 1),
            c2: ConvBn::new(p.clone(), "conv2", "bn2", width, width, 3, stride),
            c3: ConvBn::new(p, "conv3", "bn3", width, cout, 1, 1),
            downsample,
        }
    }

    /// Returns the block output plus the intermediate activations of the
    /// first two convs.
    fn forward(&self, x: &Tensor) -> [Tensor; 3] {
        let a1 = self.c1.forward(x).relu();
        let a2 = self.c2.forward(&a1).relu();
        let shortcut = match &self.downsample {
            Some(d) => d.forward(x),
            None => x.shallow_clone(),
        };
        let out = (self.c3.forward(&a2) + shortcut).relu();
        [a1, a2, out]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsManifest {
    parameter_count: usize,
    sha256: String,
}

pub struct Backbone {
    vs: nn::VarStore,
    stem: ConvBn,
    blocks: Vec<Bottleneck>,
    taps: Vec<usize>,
    checksum: String,
    mode: BackboneMode,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone")
            .field("taps", &self.taps)
            .field("mode", &self.mode)
            .field("checksum", &self.checksum)
            .finish()
    }
}

impl Backbone {
    fn build(cfg: &BackboneConfig) -> (nn::VarStore, ConvBn, Vec<Bottleneck>) {
        let vs = nn::VarStore::new(net::DEVICE);
        let root = vs.root();
        let d = cfg.width_divisor;
        let stem = ConvBn::new(root.clone(), "conv1", "bn1", 3, 64 / d, 7, 2);
        let mut blocks = Vec::new();
        let mut cin = 64 / d;
        for (stage, (&n, &w)) in BLOCKS_PER_STAGE.iter().zip(&STAGE_WIDTHS).enumerate() {
            let width = w / d;
            let p = &root / format!("layer{}", stage + 1);
            for b in 0..n {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(Bottleneck::new(&p / b.to_string(), cin, width, stride));
                cin = width * EXPANSION;
            }
        }
        (vs, stem, blocks)
    }

    /// Build the extractor. Pretrained mode reads the weights file and
    /// checks it against its manifest; random-seeded mode draws weights
    /// deterministically from `cfg.seed`.
    pub fn load(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let (mut vs, stem, blocks) = Self::build(cfg);
        let mut mode = cfg.mode;
        let mut checksum = None;
        if mode == BackboneMode::Pretrained {
            match cfg.weights.as_deref().filter(|p| p.exists()) {
                Some(path) => checksum = Some(load_pretrained(&mut vs, path)?),
                None if cfg.strict => {
                    return Err(Error::Init(format!(
                        "pretrained backbone weights not found: {}",
                        cfg.weights
                            .as_deref()
                            .map(|p| p.display().to_string())
                            .unwrap_or_else(|| "<no path configured>".into())
                    )))
                }
                None => {
                    log::warn!("backbone weights missing; using seeded random weights");
                    mode = BackboneMode::RandomSeeded;
                }
            }
        }
        if mode == BackboneMode::RandomSeeded {
            let gain = cfg.random_residual_gain;
            net::init_deterministic(&vs, cfg.seed, |n| {
                if n.ends_with("bn3.weight") {
                    gain
                } else {
                    1.0
                }
            });
        }
        vs.freeze();
        let checksum = match checksum {
            Some(c) => c,
            None => net::weight_hash(&vs)?,
        };
        Ok(Self {
            vs,
            stem,
            blocks,
            taps: cfg.taps.clone(),
            checksum,
            mode,
        })
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    /// SHA-256 of the weights file in pretrained mode, of the generated
    /// weights otherwise.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn mode(&self) -> BackboneMode {
        self.mode
    }

    pub fn parameter_count(&self) -> usize {
        net::parameter_count(&self.vs)
    }

    pub fn weight_hash(&self) -> Result<String> {
        net::weight_hash(&self.vs)
    }

    pub fn is_frozen(&self) -> bool {
        net::is_frozen(&self.vs)
    }

    /// Switch to double precision (for finite-difference checks).
    pub fn to_double(&mut self) {
        self.vs.double();
    }

    /// Replicate to three channels and standardize.
    fn normalize(x: &Tensor) -> Tensor {
        let kind = x.kind();
        let mean = Tensor::from_slice(&IMAGENET_MEAN).to_kind(kind).view([1, 3, 1, 1]);
        let std = Tensor::from_slice(&IMAGENET_STD).to_kind(kind).view([1, 3, 1, 1]);
        (x.repeat([1, 3, 1, 1]) - mean) / std
    }

    pub fn extract_bscan(&self, img: &BScan) -> Result<FeatureStack> {
        self.extract(&net::bscans_to_tensor(&[img])?)
    }
}

impl FeatureExtractor for Backbone {
    fn extract(&self, x: &Tensor) -> Result<FeatureStack> {
        let size = x.size();
        if size.len() != 4 || size[1] != 1 || size[2] < 32 || size[3] < 32 {
            return Err(Error::shape("[N, 1, H>=32, W>=32]", format!("{size:?}")));
        }
        let deepest = *self.taps.last().expect("validated non-empty");
        let mut maps = Vec::with_capacity(self.taps.len());
        let mut want = self.taps.iter().peekable();

        let mut h = self.stem.forward(&Self::normalize(x)).relu();
        if want.peek() == Some(&&0) {
            maps.push(h.shallow_clone());
            want.next();
        }
        h = h.max_pool2d([3, 3], [2, 2], [1, 1], [1, 1], false);
        for (b, block) in self.blocks.iter().enumerate() {
            let first = 3 * b + 1;
            if first > deepest {
                break;
            }
            let acts = block.forward(&h);
            while let Some(&&t) = want.peek() {
                if t >= first && t < first + 3 {
                    maps.push(acts[t - first].shallow_clone());
                    want.next();
                } else {
                    break;
                }
            }
            let [_, _, out] = acts;
            h = out;
        }
        Ok(FeatureStack {
            tap_ids: self.taps.clone(),
            maps,
        })
    }
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load_pretrained(vs: &mut nn::VarStore, path: &Path) -> Result<String> {
    let manifest_path = path.with_extension("json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: WeightsManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    let checksum = file_sha256(path)?;
    if checksum != manifest.sha256 {
        return Err(Error::Format(format!(
            "{}: sha256 {checksum} does not match manifest {}",
            path.display(),
            manifest.sha256
        )));
    }
    vs.load(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let count = net::parameter_count(vs);
    if count != manifest.parameter_count {
        return Err(Error::Format(format!(
            "backbone has {count} parameters, manifest declares {}",
            manifest.parameter_count
        )));
    }
    Ok(checksum)
}

/// Write `vs`-compatible weights plus manifest. Used to produce fixtures.
pub fn export_weights(backbone: &Backbone, path: &Path) -> Result<()> {
    backbone
        .vs
        .save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let manifest = WeightsManifest {
        parameter_count: backbone.parameter_count(),
        sha256: file_sha256(path)?,
    };
    let manifest_path = path.with_extension("json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
}
