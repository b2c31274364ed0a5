//! U-Net style per-pixel shadow classifier.

use serde::{Deserialize, Serialize};
use tch::nn::{self, Module};
use tch::{Kind, Reduction, Tensor};

use crate::error::{Error, Result};
use crate::imaging::{BScan, ShadowMask};
use crate::net;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub in_channels: i64,
    pub base_filters: i64,
    /// Number of max-pool descents (and transposed-conv ascents).
    pub depth: usize,
    pub kernel: i64,
    pub pool: i64,
    /// Divides every filter count; 1 is the full-size network.
    pub width_divisor: i64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_filters: 64,
            depth: 4,
            kernel: 3,
            pool: 2,
            width_divisor: 1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 {
            return Err(Error::Config("detector takes single-channel input".into()));
        }
        if self.depth == 0 || self.kernel < 1 || self.kernel % 2 == 0 || self.pool < 2 {
            return Err(Error::Config(format!("invalid detector geometry {self:?}")));
        }
        if self.width_divisor < 1 || self.base_filters % self.width_divisor != 0 {
            return Err(Error::Config(format!(
                "width_divisor {} must divide base_filters {}",
                self.width_divisor, self.base_filters
            )));
        }
        Ok(())
    }

    /// Filters per encoder level, e.g. 64, 128, 256, 512.
    pub fn filters(&self) -> Vec<i64> {
        let base = self.base_filters / self.width_divisor;
        (0..self.depth).map(|l| base << l).collect()
    }

    /// Input sides must be a multiple of this.
    pub fn size_multiple(&self) -> i64 {
        self.pool.pow(self.depth as u32)
    }
}

/// Scores how shadowed an image batch looks, as per-pixel probabilities.
/// Losses take this trait so tests can plug in stubs.
pub trait ShadowScorer {
    /// `[N, 1, H, W]` in, `[N, 1, H, W]` probabilities out.
    fn score(&self, x: &Tensor) -> Result<Tensor>;
}

#[derive(Debug)]
struct DoubleConv {
    a: nn::Conv2D,
    b: nn::Conv2D,
}

impl DoubleConv {
    fn new(p: nn::Path, cin: i64, cout: i64, k: i64) -> Self {
        let cfg = nn::ConvConfig {
            padding: k / 2,
            ..Default::default()
        };
        Self {
            a: nn::conv2d(&p / "conv1", cin, cout, k, cfg),
            b: nn::conv2d(&p / "conv2", cout, cout, k, cfg),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        x.apply(&self.a).relu().apply(&self.b).relu()
    }
}

pub struct Detector {
    vs: nn::VarStore,
    cfg: DetectorConfig,
    enc: Vec<DoubleConv>,
    ups: Vec<nn::ConvTranspose2D>,
    dec: Vec<DoubleConv>,
    head: nn::Conv2D,
}

impl std::fmt::Debug for Detector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Detector").field("cfg", &self.cfg).finish()
    }
}

impl Detector {
    /// Build with weights drawn deterministically from `seed`.
    pub fn new(cfg: &DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vs = nn::VarStore::new(net::DEVICE);
        let root = vs.root();
        let filters = cfg.filters();
        let mut enc = Vec::new();
        let mut cin = cfg.in_channels;
        for (l, &f) in filters.iter().enumerate() {
            enc.push(DoubleConv::new(&root / format!("enc{l}"), cin, f, cfg.kernel));
            cin = f;
        }
        // Each ascent halves the channels of the level below, then fuses
        // with the skip from the encoder level at the new resolution.
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        let mut c = *filters.last().expect("depth >= 1");
        for l in (0..cfg.depth).rev() {
            let up_cfg = nn::ConvTransposeConfig {
                stride: cfg.pool,
                ..Default::default()
            };
            ups.push(nn::conv_transpose2d(&root / format!("up{l}"), c, c / 2, cfg.pool, up_cfg));
            let skip = filters[l];
            dec.push(DoubleConv::new(&root / format!("dec{l}"), c / 2 + skip, skip, cfg.kernel));
            c = skip;
        }
        let head = nn::conv2d(&root / "head", c, 1, 1, Default::default());
        net::init_deterministic(&vs, seed, |_| 1.0);
        Ok(Self {
            vs,
            cfg: cfg.clone(),
            enc,
            ups,
            dec,
            head,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    pub fn parameter_count(&self) -> usize {
        net::parameter_count(&self.vs)
    }

    pub fn weight_hash(&self) -> Result<String> {
        net::weight_hash(&self.vs)
    }

    pub fn freeze(&mut self) {
        self.vs.freeze();
    }

    pub fn unfreeze(&mut self) {
        self.vs.unfreeze();
    }

    pub fn is_frozen(&self) -> bool {
        net::is_frozen(&self.vs)
    }

    pub fn to_double(&mut self) {
        self.vs.double();
    }

    /// Forward pass returning per-pixel logits and the spatial size after
    /// each encoder stage (input first).
    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, Vec<(i64, i64)>)> {
        net::check_input(x, self.cfg.size_multiple(), "detector")?;
        let mut sizes = vec![(x.size()[2], x.size()[3])];
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = x.shallow_clone();
        for block in &self.enc {
            let f = block.forward(&h);
            h = f.max_pool2d([self.cfg.pool; 2], [self.cfg.pool; 2], [0, 0], [1, 1], false);
            sizes.push((h.size()[2], h.size()[3]));
            skips.push(f);
        }
        for ((up, block), skip) in self.ups.iter().zip(&self.dec).zip(skips.iter().rev()) {
            h = block.forward(&Tensor::cat(&[up.forward(&h), skip.shallow_clone()], 1));
        }
        Ok((h.apply(&self.head), sizes))
    }

    /// Per-pixel shadow probabilities in (0, 1).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(x)?.0.sigmoid())
    }

    /// Inference on one B-scan, returning a soft mask.
    pub fn predict(&self, img: &BScan) -> Result<ShadowMask> {
        let x = net::bscans_to_tensor(&[img])?;
        let y = tch::no_grad(|| self.forward(&x))?;
        let mut out = net::tensor_to_arrays(&y)?;
        ShadowMask::soft(out.remove(0))
    }
}

impl ShadowScorer for Detector {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

/// Mean binary cross entropy, with log terms clamped at -100 as torch does.
pub fn bce(pred: &Tensor, target: &Tensor) -> Tensor {
    pred.binary_cross_entropy::<Tensor>(target, None, Reduction::Mean)
}

/// Mean per-pixel binary cross entropy of a predicted mask against a binary
/// ground-truth mask.
pub fn detector_loss(pred: &ShadowMask, gt: &ShadowMask) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            format!("{:?}", gt.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    if gt.values().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation("ground-truth mask must be binary".into()));
    }
    let p = net::array_to_tensor(pred.values()).to_kind(Kind::Double);
    let t = net::array_to_tensor(gt.values()).to_kind(Kind::Double);
    Ok(bce(&p, &t).double_value(&[]))
}
