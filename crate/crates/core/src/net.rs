//! Shared tensor plumbing for the networks: deterministic initialization,
//! weight hashing, parameter counting and B-scan/tensor conversion.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tch::{nn, Device, Kind, Tensor};

use crate::error::{Error, Result};
use crate::imaging::BScan;

pub(crate) const DEVICE: Device = Device::Cpu;

fn stable_hash(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Fan-in as torch computes it: dim 1 times the receptive field, for both
/// plain and transposed convolutions.
fn fan_in(dims: &[i64]) -> i64 {
    let receptive: i64 = dims.iter().skip(2).product();
    if dims.len() >= 2 {
        dims[1] * receptive
    } else {
        1
    }
}

/// Fill every variable from a ChaCha stream keyed by `(seed, name)`, so the
/// result is independent of construction order and of torch's global RNG.
///
/// Batch-norm scales become `bn_weight(name)`, shifts and running means 0,
/// running variances 1.
pub(crate) fn init_deterministic(
    vs: &nn::VarStore,
    seed: u64,
    bn_weight: impl Fn(&str) -> f64,
) {
    let mut vars: Vec<(String, Tensor)> = vs.variables().into_iter().collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    let bias_fans: std::collections::HashMap<String, i64> = vars
        .iter()
        .filter(|(n, t)| n.ends_with(".weight") && t.dim() == 4)
        .map(|(n, t)| (n.trim_end_matches(".weight").to_owned(), fan_in(&t.size())))
        .collect();

    tch::no_grad(|| {
        for (name, var) in &vars {
            let dims = var.size();
            let numel: i64 = dims.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(name));
            let prefix = name.rsplit_once('.').map(|(p, _)| p).unwrap_or("");
            let is_bn = !bias_fans.contains_key(prefix);
            let values: Vec<f32> = if name.ends_with("running_mean") {
                vec![0.0; numel as usize]
            } else if name.ends_with("running_var") {
                vec![1.0; numel as usize]
            } else if is_bn && name.ends_with(".weight") {
                vec![bn_weight(name) as f32; numel as usize]
            } else if is_bn && name.ends_with(".bias") {
                vec![0.0; numel as usize]
            } else if name.ends_with(".bias") {
                let fan = bias_fans[prefix].max(1) as f64;
                let bound = 1.0 / fan.sqrt();
                (0..numel).map(|_| rng.random_range(-bound..bound) as f32).collect()
            } else {
                // kaiming_uniform with a = sqrt(5), torch's conv default
                let fan = fan_in(&dims).max(1) as f64;
                let bound = 1.0 / fan.sqrt();
                (0..numel).map(|_| rng.random_range(-bound..bound) as f32).collect()
            };
            let t = Tensor::from_slice(&values)
                .view(dims.as_slice())
                .to_kind(var.kind());
            let mut v = var.shallow_clone();
            v.copy_(&t);
        }
    });
}

/// Number of learnable scalars (batch-norm running statistics excluded).
pub(crate) fn parameter_count(vs: &nn::VarStore) -> usize {
    vs.variables()
        .iter()
        .filter(|(n, _)| !n.ends_with("running_mean") && !n.ends_with("running_var"))
        .map(|(_, t)| t.numel())
        .sum()
}

pub(crate) fn sorted_variables(vs: &nn::VarStore) -> Vec<(String, Tensor)> {
    let mut vars: Vec<(String, Tensor)> = vs.variables().into_iter().collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

/// Little-endian bytes of a float tensor in its own precision.
pub(crate) fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.detach().contiguous().view(-1);
    match flat.kind() {
        Kind::Float => {
            let v = Vec::<f32>::try_from(&flat)?;
            Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
        }
        Kind::Double => {
            let v = Vec::<f64>::try_from(&flat)?;
            Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
        }
        other => Err(Error::Validation(format!("unsupported tensor kind {other:?}"))),
    }
}

/// SHA-256 over variable names and values, in name order.
pub(crate) fn weight_hash(vs: &nn::VarStore) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in sorted_variables(vs) {
        hasher.update(name.as_bytes());
        hasher.update(tensor_bytes(&t)?);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub(crate) fn is_frozen(vs: &nn::VarStore) -> bool {
    vs.trainable_variables().iter().all(|t| !t.requires_grad())
}

/// Stack B-scans into an `[N, 1, H, W]` float tensor.
pub fn bscans_to_tensor(imgs: &[&BScan]) -> Result<Tensor> {
    let first = imgs
        .first()
        .ok_or_else(|| Error::Validation("empty image batch".into()))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(imgs.len() * h * w);
    for img in imgs {
        if img.shape() != (h, w) {
            return Err(Error::shape(format!("{h}x{w}"), format!("{:?}", img.shape())));
        }
        data.extend(img.pixels().iter().copied());
    }
    Ok(Tensor::from_slice(&data).view([imgs.len() as i64, 1, h as i64, w as i64]))
}

pub fn array_to_tensor(a: &Array2<f32>) -> Tensor {
    let (h, w) = a.dim();
    let data: Vec<f32> = a.iter().copied().collect();
    Tensor::from_slice(&data).view([1, 1, h as i64, w as i64])
}

/// Split an `[N, 1, H, W]` tensor back into row-major arrays.
pub fn tensor_to_arrays(t: &Tensor) -> Result<Vec<Array2<f32>>> {
    let size = t.size();
    if size.len() != 4 || size[1] != 1 {
        return Err(Error::shape("[N, 1, H, W]", format!("{size:?}")));
    }
    let (n, h, w) = (size[0] as usize, size[2] as usize, size[3] as usize);
    let flat = Vec::<f32>::try_from(&t.detach().to_kind(Kind::Float).contiguous().view(-1))?;
    Ok((0..n)
        .map(|i| {
            Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].to_vec())
                .expect("slice length matches shape")
        })
        .collect())
}

/// Check a batch is `[N, 1, H, W]` with H and W multiples of `multiple`.
pub(crate) fn check_input(x: &Tensor, multiple: i64, what: &str) -> Result<(i64, i64)> {
    let size = x.size();
    if size.len() != 4 || size[1] != 1 {
        return Err(Error::shape(
            format!("{what} input [N, 1, H, W]"),
            format!("{size:?}"),
        ));
    }
    let (h, w) = (size[2], size[3]);
    if h < multiple || w < multiple || h % multiple != 0 || w % multiple != 0 {
        return Err(Error::shape(
            format!("{what} spatial size divisible by {multiple}"),
            format!("{h}x{w}"),
        ));
    }
    Ok((h, w))
}

/// Inverted dropout with a mask drawn from our own RNG so results do not
/// depend on torch's global generator.
pub(crate) fn seeded_dropout(x: &Tensor, p: f64, seed: u64) -> Tensor {
    let numel = x.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - p;
    let scale = (1.0 / keep) as f32;
    let mask: Vec<f32> = (0..numel)
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let mask = Tensor::from_slice(&mask)
        .view(x.size().as_slice())
        .to_kind(x.kind());
    x * mask
}

pub fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
