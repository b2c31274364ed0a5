//! Adam with inspectable, checkpointable state.

use serde::{Deserialize, Serialize};
use tch::{nn, Tensor};

use crate::error::{Error, Result};
use crate::net;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

/// Adam over the learnable variables of one var store, in name order.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(vs: &nn::VarStore, cfg: AdamConfig) -> Self {
        let (names, params): (Vec<String>, Vec<Tensor>) = net::sorted_variables(vs)
            .into_iter()
            .filter(|(n, _)| !is_buffer(n))
            .unzip();
        let m = params.iter().map(|p| p.zeros_like()).collect();
        let v = params.iter().map(|p| p.zeros_like()).collect();
        Self {
            cfg,
            names,
            params,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// One update with the accumulated gradients. Parameters without a
    /// gradient are skipped, as are frozen ones.
    pub fn step(&mut self, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        tch::no_grad(|| {
            for ((p, m), v) in self.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                let g = p.grad();
                if !g.defined() || !p.requires_grad() {
                    continue;
                }
                m.copy_(&(&*m * beta1 + &g * (1.0 - beta1)));
                v.copy_(&(&*v * beta2 + g.square() * (1.0 - beta2)));
                let denom = v.sqrt() / bc2.sqrt() + eps;
                let update = &*m / denom * (lr / bc1);
                let _ = p.f_sub_(&update).expect("in-place update on a leaf");
            }
        });
    }

    /// Moment buffers as named tensors (`m.<var>`, `v.<var>`).
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.names.len());
        for (name, (m, v)) in self.names.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("m.{name}"), m.shallow_clone()));
            out.push((format!("v.{name}"), v.shallow_clone()));
        }
        out
    }

    /// Restore moment buffers and the step counter.
    pub fn load_state(&mut self, step: u64, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        tch::no_grad(|| -> Result<()> {
            for (name, (m, v)) in self.names.iter().zip(self.m.iter_mut().zip(&mut self.v)) {
                for (prefix, dst) in [("m", &mut *m), ("v", &mut *v)] {
                    let key = format!("{prefix}.{name}");
                    let src = lookup(&key)
                        .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
                    if src.size() != dst.size() {
                        return Err(Error::Checkpoint(format!(
                            "optimizer state {key} has shape {:?}, expected {:?}",
                            src.size(),
                            dst.size()
                        )));
                    }
                    dst.copy_(&src.to_kind(dst.kind()));
                }
            }
            Ok(())
        })?;
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Kind;

    #[test]
    fn matches_reference_update() {
        let vs = nn::VarStore::new(net::DEVICE);
        let w = vs.root().var("w", &[2], nn::Init::Const(1.0));
        let mut opt = Adam::new(&vs, AdamConfig::default());
        // loss = sum(w^2 * [1, 3]) so grad = [2, 6] w
        let coef = Tensor::from_slice(&[1.0f32, 3.0]);
        let mut expect = [1.0f64, 1.0];
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        for t in 1..=3 {
            opt.zero_grad();
            (w.square() * &coef).sum(Kind::Float).backward();
            opt.step(0.1);
            for i in 0..2 {
                let g = 2.0 * [1.0, 3.0][i] * expect[i];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                expect[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
        }
        let got = Vec::<f32>::try_from(&w).unwrap();
        for i in 0..2 {
            assert!((got[i] as f64 - expect[i]).abs() < 1e-5, "{got:?} vs {expect:?}");
        }
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn frozen_store_is_untouched() {
        let mut vs = nn::VarStore::new(net::DEVICE);
        let w = vs.root().var("w", &[3], nn::Init::Const(0.5));
        let mut opt = Adam::new(&vs, AdamConfig::default());
        w.sum(Kind::Float).backward();
        vs.freeze();
        opt.step(1.0);
        assert!(w.equal(&Tensor::from_slice(&[0.5f32; 3])));
    }

    #[test]
    fn state_round_trip() {
        let vs = nn::VarStore::new(net::DEVICE);
        let w = vs.root().var("w", &[2], nn::Init::Const(1.0));
        let mut a = Adam::new(&vs, AdamConfig::default());
        w.square().sum(Kind::Float).backward();
        a.step(0.01);
        let saved: Vec<(String, Tensor)> = a.state();
        let mut b = Adam::new(&vs, AdamConfig::default());
        b.load_state(a.step_count(), &|k| {
            saved.iter().find(|(n, _)| n == k).map(|(_, t)| t.copy())
        })
        .unwrap();
        for ((_, x), (_, y)) in a.state().iter().zip(b.state().iter()) {
            assert!(x.equal(y));
        }
        assert!(b.load_state(1, &|_| None).is_err());
    }
}
