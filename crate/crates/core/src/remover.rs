//! Encoder-decoder generator mapping a shadowed B-scan to a deshadowed one.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tch::nn::{self, Module, ModuleT};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::imaging::BScan;
use crate::net;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoverConfig {
    pub encoder_filters: Vec<i64>,
    /// Output width of each decoding stage, deepest first.
    pub decoder_filters: Vec<i64>,
    pub down_kernel: i64,
    pub up_kernel: i64,
    pub refine_kernel: i64,
    pub dropout_p: f64,
    /// Dropout is active in this many decoding stages, counted from the
    /// deepest.
    pub dropout_stages: usize,
    pub leaky_slope: f64,
    pub width_divisor: i64,
}

impl Default for RemoverConfig {
    fn default() -> Self {
        Self {
            encoder_filters: vec![64, 128, 256, 512, 512, 512, 512, 512],
            decoder_filters: vec![512, 512, 512, 512, 256, 128, 64, 64],
            down_kernel: 4,
            up_kernel: 4,
            refine_kernel: 3,
            dropout_p: 0.5,
            dropout_stages: 3,
            leaky_slope: 0.2,
            width_divisor: 1,
        }
    }
}

impl RemoverConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.encoder_filters.len();
        if n == 0 || self.decoder_filters.len() != n {
            return Err(Error::Config(
                "remover needs as many decoding stages as encoder stages".into(),
            ));
        }
        if self.width_divisor < 1 {
            return Err(Error::Config("width_divisor must be >= 1".into()));
        }
        for &f in self.encoder_filters.iter().chain(&self.decoder_filters) {
            if f % self.width_divisor != 0 || f / self.width_divisor < 2 {
                return Err(Error::Config(format!(
                    "filter count {f} not divisible into >= 2 channels by {}",
                    self.width_divisor
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must be in [0, 1)".into()));
        }
        if self.dropout_stages > n {
            return Err(Error::Config("dropout_stages exceeds decoding stages".into()));
        }
        if self.down_kernel != 4 || self.up_kernel != 4 || self.refine_kernel % 2 == 0 {
            return Err(Error::Config(
                "down/up kernels must be 4 and the refine kernel odd".into(),
            ));
        }
        Ok(())
    }

    pub fn size_multiple(&self) -> i64 {
        1 << self.encoder_filters.len()
    }

    fn scaled(&self, v: &[i64]) -> Vec<i64> {
        v.iter().map(|f| f / self.width_divisor).collect()
    }

    /// Bitmask of decoding stages where dropout applies in training.
    pub fn default_dropout_mask(&self) -> u32 {
        (1u32 << self.dropout_stages) - 1
    }
}

/// Training-time behavior of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    /// Batch-norm normalizes with batch statistics and updates its
    /// running averages.
    pub batch_stats: bool,
    /// Seed for dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
    /// Decoding stages (bit `s` = stage `s`, deepest first) with dropout.
    pub dropout_mask: u32,
}

impl ForwardMode {
    pub const EVAL: ForwardMode = ForwardMode {
        batch_stats: false,
        dropout_seed: None,
        dropout_mask: 0,
    };
}

#[derive(Debug)]
struct Down {
    conv: nn::Conv2D,
    bn: Option<nn::BatchNorm>,
}

#[derive(Debug)]
struct UpStage {
    up: nn::ConvTranspose2D,
    up_bn: Option<nn::BatchNorm>,
    refine1: nn::Conv2D,
    bn1: Option<nn::BatchNorm>,
    refine2: nn::Conv2D,
    bn2: Option<nn::BatchNorm>,
}

fn bn(p: nn::Path, c: i64) -> nn::BatchNorm {
    nn::batch_norm2d(p, c, Default::default())
}

pub struct Remover {
    vs: nn::VarStore,
    cfg: RemoverConfig,
    downs: Vec<Down>,
    stages: Vec<UpStage>,
    head: nn::Conv2D,
}

impl std::fmt::Debug for Remover {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Remover").field("cfg", &self.cfg).finish()
    }
}

/// Anything that maps a shadowed batch to a deshadowed batch.
pub trait Deshadower {
    /// `[N, 1, H, W]` in, `[N, 1, H, W]` out, inference mode.
    fn deshadow(&self, x: &Tensor) -> Result<Tensor>;
}

impl Remover {
    /// Build with weights drawn deterministically from `seed`.
    pub fn new(cfg: &RemoverConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vs = nn::VarStore::new(net::DEVICE);
        let root = vs.root();
        let enc = cfg.scaled(&cfg.encoder_filters);
        let dec = cfg.scaled(&cfg.decoder_filters);
        let n = enc.len();

        let down_cfg = nn::ConvConfig {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        let mut downs = Vec::with_capacity(n);
        let mut cin = 1;
        for (i, &f) in enc.iter().enumerate() {
            let p = &root / format!("down{i}");
            downs.push(Down {
                conv: nn::conv2d(&p / "conv", cin, f, cfg.down_kernel, down_cfg),
                bn: (i > 0).then(|| bn(&p / "bn", f)),
            });
            cin = f;
        }

        let up_cfg = nn::ConvTransposeConfig {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        let refine_cfg = nn::ConvConfig {
            padding: cfg.refine_kernel / 2,
            ..Default::default()
        };
        let mut stages = Vec::with_capacity(n);
        for (s, &d) in dec.iter().enumerate() {
            let p = &root / format!("up{s}");
            // skip from the encoder level at the upsampled resolution; the
            // shallowest stage pairs with the raw input
            let skip = if s + 1 < n { enc[n - 2 - s] } else { 1 };
            let last = s + 1 == n;
            stages.push(UpStage {
                up: nn::conv_transpose2d(&p / "up", cin, d / 2, cfg.up_kernel, up_cfg),
                up_bn: (!last).then(|| bn(&p / "up_bn", d / 2)),
                refine1: nn::conv2d(&p / "refine1", d / 2 + skip, d, cfg.refine_kernel, refine_cfg),
                bn1: (!last).then(|| bn(&p / "bn1", d)),
                refine2: nn::conv2d(&p / "refine2", d, d, cfg.refine_kernel, refine_cfg),
                bn2: (!last).then(|| bn(&p / "bn2", d)),
            });
            cin = d;
        }
        let head = nn::conv2d(&root / "head", cin, 1, 1, Default::default());
        net::init_deterministic(&vs, seed, |_| 1.0);
        Ok(Self {
            vs,
            cfg: cfg.clone(),
            downs,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &RemoverConfig {
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

    /// Training-mode settings: batch statistics plus dropout seeded by
    /// `dropout_seed` in the configured stages.
    pub fn train_mode(&self, dropout_seed: u64) -> ForwardMode {
        ForwardMode {
            batch_stats: true,
            dropout_seed: Some(dropout_seed),
            dropout_mask: self.cfg.default_dropout_mask(),
        }
    }

    /// Forward pass returning the output and the spatial size after each
    /// encoder stage (input first).
    pub fn forward_traced(&self, x: &Tensor, mode: ForwardMode) -> Result<(Tensor, Vec<(i64, i64)>)> {
        net::check_input(x, self.cfg.size_multiple(), "remover")?;
        let train = mode.batch_stats;
        let slope = self.cfg.leaky_slope;
        let mut sizes = vec![(x.size()[2], x.size()[3])];
        let mut skips = vec![x.shallow_clone()];
        let mut h = x.shallow_clone();
        for down in &self.downs {
            h = h.apply(&down.conv);
            if let Some(bn) = &down.bn {
                h = bn.forward_t(&h, train);
            }
            h = h.maximum(&(&h * slope));
            sizes.push((h.size()[2], h.size()[3]));
            skips.push(h.shallow_clone());
        }
        // drop the bottleneck; what remains lines up with the decoder
        skips.pop();

        let dropout = |t: Tensor, stage: usize, which: u64| -> Tensor {
            match mode.dropout_seed {
                Some(seed) if mode.dropout_mask & (1 << stage) != 0 && self.cfg.dropout_p > 0.0 => {
                    let s = net::mix_seed(seed, (stage as u64) << 1 | which);
                    net::seeded_dropout(&t, self.cfg.dropout_p, s)
                }
                _ => t,
            }
        };

        for (s, stage) in self.stages.iter().enumerate() {
            let mut up = stage.up.forward(&h);
            if let Some(bn) = &stage.up_bn {
                up = bn.forward_t(&up, train);
            }
            let up = up.relu();
            let skip = skips.pop().expect("one skip per stage");
            let mut r = Tensor::cat(&[up, skip], 1).apply(&stage.refine1);
            if let Some(bn) = &stage.bn1 {
                r = bn.forward_t(&r, train);
            }
            r = dropout(r.relu(), s, 0);
            let mut r2 = r.apply(&stage.refine2);
            if let Some(bn) = &stage.bn2 {
                r2 = bn.forward_t(&r2, train);
            }
            h = dropout(r2.relu(), s, 1);
        }
        Ok((h.apply(&self.head).sigmoid(), sizes))
    }

    pub fn forward_t(&self, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        Ok(self.forward_traced(x, mode)?.0)
    }

    /// Inference on a list of B-scans in one batch.
    pub fn infer_batch(&self, imgs: &[BScan]) -> Result<(Vec<BScan>, Duration)> {
        if imgs.is_empty() {
            return Err(Error::Validation("empty inference batch".into()));
        }
        let refs: Vec<&BScan> = imgs.iter().collect();
        let start = Instant::now();
        let x = net::bscans_to_tensor(&refs)?;
        let y = self.deshadow(&x)?;
        let arrays = net::tensor_to_arrays(&y)?;
        let elapsed = start.elapsed();
        log::info!(
            "deshadowed {} image(s) in {:.1} ms ({:.2} ms/image)",
            imgs.len(),
            elapsed.as_secs_f64() * 1e3,
            elapsed.as_secs_f64() * 1e3 / imgs.len() as f64
        );
        let out = arrays
            .into_iter()
            .zip(imgs)
            .map(|(a, src)| BScan::new(a, src.source_id()))
            .collect::<Result<Vec<_>>>()?;
        Ok((out, elapsed))
    }
}

impl Deshadower for Remover {
    fn deshadow(&self, x: &Tensor) -> Result<Tensor> {
        tch::no_grad(|| self.forward_t(x, ForwardMode::EVAL))
    }
}
