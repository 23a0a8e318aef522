use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::checkpoint::Blob;

/// Warmup–stable–decay profile: linear ramp from 0 to `peak` over
/// `warmup`, constant, then geometric decay over the last `decay` steps
/// reaching `final_lr` exactly at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wsd {
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup: u64,
    pub decay: u64,
    pub total: u64,
}

impl Wsd {
    pub fn new(peak_lr: f64, final_lr: f64, warmup: u64, decay_fraction: f64, total: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay_fraction) {
            return Err(Error::Config(format!("decay_fraction {decay_fraction} outside [0, 1]")));
        }
        let decay = (decay_fraction * total as f64).round() as u64;
        if warmup + decay > total {
            return Err(Error::Config(format!("warmup {warmup} + decay {decay} exceed total steps {total}")));
        }
        if !(final_lr <= peak_lr) || final_lr < 0.0 {
            return Err(Error::Config(format!("need 0 <= final_lr <= peak_lr, got {final_lr} / {peak_lr}")));
        }
        if decay > 0 && final_lr == 0.0 && peak_lr > 0.0 {
            return Err(Error::Config("geometric decay needs final_lr > 0".into()));
        }
        Ok(Wsd {
            peak_lr,
            final_lr,
            warmup,
            decay,
            total,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total {
            return Err(Error::Invalid(format!("step {step} beyond total {}", self.total)));
        }
        let start_decay = self.total - self.decay;
        Ok(if step < self.warmup {
            self.peak_lr * step as f64 / self.warmup as f64
        } else if step <= start_decay || self.peak_lr == 0.0 {
            self.peak_lr
        } else if step == self.total {
            self.final_lr
        } else {
            let frac = (step - start_decay) as f64 / self.decay as f64;
            self.peak_lr * (self.final_lr / self.peak_lr).powf(frac)
        })
    }
}

/// Decoupled-weight-decay Adam. Weight decay applies to matrices only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &[Tensor<f32>], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.shape().len() == 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.get(i).copied().unwrap_or(0.0) as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / c1) / ((vi / c2).sqrt() + self.eps) + decay * *w as f64;
                *w = (*w as f64 - lr * update) as f32;
            }
        }
    }

    pub fn to_blobs(&self) -> Vec<Blob> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (tag, set) in [("m", &self.m), ("v", &self.v)] {
            for (i, x) in set.iter().enumerate() {
                out.push(Blob {
                    name: format!("adam.{tag}.{i}"),
                    shape: vec![x.len()],
                    data: x.clone(),
                });
            }
        }
        out
    }

    pub fn load_blobs(&mut self, blobs: Vec<Blob>, t: u64) -> Result<()> {
        let n = self.m.len();
        if blobs.len() != 2 * n {
            return Err(Error::Invalid(format!("optimizer state has {} blobs, expected {}", blobs.len(), 2 * n)));
        }
        for (j, b) in blobs.into_iter().enumerate() {
            let slot = if j < n { &mut self.m[j] } else { &mut self.v[j - n] };
            if b.data.len() != slot.len() {
                return Err(Error::Invalid(format!("optimizer blob {} has wrong size", b.name)));
            }
            *slot = b.data;
        }
        self.t = t;
        Ok(())
    }
}

pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns
/// the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let c = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= c);
    }
    norm
}
