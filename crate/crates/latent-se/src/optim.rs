//! AdamW with decoupled weight decay, global-norm gradient clipping, and
//! the linear-warmup + cosine-decay learning-rate schedule.

use crate::autodiff::Grads;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::params::ParamStore;

/// Learning rate at `step` of `total_steps`: linear warmup from 0 over
/// `warmup_steps`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, max_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} out of range 0..={total_steps}"
        )));
    }
    if warmup_steps > 0 && step < warmup_steps {
        return Ok(max_lr * step as f64 / warmup_steps as f64);
    }
    let decay_span = (total_steps - warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / decay_span as f64;
    Ok(max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let mut total = 0.0;
    for g in grads.by_param.iter().flatten() {
        for v in &g.data {
            total += v * v;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.by_param.iter_mut().flatten() {
            for v in g.data.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let m = (0..store.len())
            .map(|i| {
                let (r, c) = store.value(i).shape();
                Mat::zeros(r, c)
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One optimizer step. Parameters without a gradient are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for pid in 0..store.len() {
            let g = match grads.by_param.get(pid).and_then(|g| g.as_ref()) {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            let p = store.value_mut(pid);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps)
                    + self.weight_decay * p.data[i]);
            }
        }
    }

    /// Optimizer state as named tensors, for bit-exact training resume.
    pub fn state_tensors(&self) -> Vec<(String, Mat)> {
        let mut out = Vec::new();
        for (i, m) in self.m.iter().enumerate() {
            out.push((format!("adam.m.{i}"), m.clone()));
        }
        for (i, v) in self.v.iter().enumerate() {
            out.push((format!("adam.v.{i}"), v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, tensors: &[(String, Mat)], step_count: u64) -> Result<()> {
        for (name, mat) in tensors {
            if let Some(idx) = name.strip_prefix("adam.m.") {
                let i: usize = idx
                    .parse()
                    .map_err(|_| Error::MalformedCheckpoint(format!("bad state name {name}")))?;
                self.m[i] = mat.clone();
            } else if let Some(idx) = name.strip_prefix("adam.v.") {
                let i: usize = idx
                    .parse()
                    .map_err(|_| Error::MalformedCheckpoint(format!("bad state name {name}")))?;
                self.v[i] = mat.clone();
            }
        }
        self.step_count = step_count;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        // batch 32 scaling rule: 0.005 * 32/256 = 6.25e-4.
        let max_lr: f64 = 0.005 * 32.0 / 256.0;
        assert!((max_lr - 6.25e-4).abs() < 1e-15);
        let total = 1000;
        let warmup = 100;
        assert_eq!(lr_schedule(0, total, warmup, max_lr).unwrap(), 0.0);
        assert_eq!(lr_schedule(warmup, total, warmup, max_lr).unwrap(), max_lr);
        let mid = lr_schedule(warmup + (total - warmup) / 2, total, warmup, max_lr).unwrap();
        assert!((mid - max_lr / 2.0).abs() < 1e-15);
        let end = lr_schedule(total, total, warmup, max_lr).unwrap();
        assert!(end.abs() < 1e-15);
        assert!(lr_schedule(total + 1, total, warmup, max_lr).is_err());
    }

    #[test]
    fn schedule_is_continuous_and_single_peaked() {
        let total = 500;
        let warmup = 50;
        let lrs: Vec<f64> = (0..=total)
            .map(|s| lr_schedule(s, total, warmup, 1.0).unwrap())
            .collect();
        let mut peak_count = 0;
        for i in 1..lrs.len() - 1 {
            assert!((lrs[i] - lrs[i - 1]).abs() < 0.05, "jump at {i}");
            if lrs[i] >= lrs[i - 1] && lrs[i] > lrs[i + 1] {
                peak_count += 1;
            }
        }
        assert_eq!(peak_count, 1);
        assert_eq!(lrs[total], 0.0);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store.add("w", Mat::from_vec(1, 3, vec![0.5, -0.25, 1.0]));
        let before = store.value(0).clone();
        let mut opt = AdamW::new(&store, 0.9, 0.95, 0.0);
        let grads = Grads {
            by_param: vec![Some(Mat::zeros(1, 3))],
        };
        for _ in 0..5 {
            opt.step(&mut store, &grads, 0.1);
        }
        assert_eq!(store.value(0).data, before.data);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged_bit_exactly() {
        let mut store = ParamStore::new();
        store.add("w", Mat::from_vec(1, 2, vec![0.3, -0.7]));
        let before = store.value(0).clone();
        let mut opt = AdamW::new(&store, 0.9, 0.95, 0.05);
        let grads = Grads {
            by_param: vec![Some(Mat::from_vec(1, 2, vec![1.0, -2.0]))],
        };
        opt.step(&mut store, &grads, 0.0);
        assert_eq!(store.value(0).data, before.data);
    }

    #[test]
    fn adamw_reduces_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Mat::from_vec(1, 2, vec![2.0, -3.0]));
        let mut opt = AdamW::new(&store, 0.9, 0.95, 0.0);
        for _ in 0..300 {
            let mut tape = Tape::new();
            let w = tape.param(&store, 0);
            let sq = tape.sqr(w);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss, &store).unwrap();
            opt.step(&mut store, &grads, 0.05);
        }
        assert!(store.value(0).data.iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn clip_scales_large_gradients() {
        let mut grads = Grads {
            by_param: vec![Some(Mat::from_vec(1, 2, vec![3.0, 4.0]))],
        };
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let g = grads.by_param[0].as_ref().unwrap();
        let new_norm: f64 = g.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((new_norm - 1.0).abs() < 1e-12);

        let mut small = Grads {
            by_param: vec![Some(Mat::from_vec(1, 1, vec![0.5]))],
        };
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.by_param[0].as_ref().unwrap().data[0], 0.5);
    }
}
