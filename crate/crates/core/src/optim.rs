//! Decoupled-weight-decay adaptive optimizer (AdamW), learning-rate
//! schedules, and global gradient-norm clipping.

use std::collections::BTreeMap;

use crate::model::Param;
use crate::tensor::Precision;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup to `peak` over `warmup` steps, then linear decay to zero
/// at `total`. Steps are zero-based: `lr(0) = peak/warmup`,
/// `lr(warmup) = peak`.
#[derive(Debug, Clone, Copy)]
pub struct WarmupLinearDecay {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl WarmupLinearDecay {
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            self.peak * (step + 1) as f64 / self.warmup as f64
        } else if self.total > self.warmup {
            let span = (self.total - self.warmup) as f64;
            let done = (step - self.warmup) as f64;
            self.peak * (1.0 - (done / span).min(1.0))
        } else {
            self.peak
        }
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        for v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g {
                *v *= scale;
            }
        }
    }
    norm
}

pub struct AdamW {
    pub weight_decay: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> AdamW {
        AdamW {
            weight_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// One update over every parameter that received a gradient.
    /// `lr_for` maps a parameter name to its learning rate (the text
    /// encoder and the graph network run separate schedules). Weight decay
    /// is decoupled and applied to weight matrices only (not to biases or
    /// layer-norm parameters, which are single-row).
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Param>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr_for: impl Fn(&str) -> f64,
        precision: Precision,
    ) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);

        for (name, g) in grads {
            let lr = lr_for(name);
            let p: &mut Param = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            debug_assert_eq!(g.len(), p.values.len());
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let decay = if p.rows > 1 { self.weight_decay } else { 0.0 };

            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.values[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + decay * p.values[i]);
            }
            if precision == Precision::F32 {
                for i in 0..g.len() {
                    p.values[i] = p.values[i] as f32 as f64;
                    m[i] = m[i] as f32 as f64;
                    v[i] = v[i] as f32 as f64;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HyperParams, ModelState};

    fn small_state() -> ModelState {
        let hyper = HyperParams {
            d_tok: 8,
            d: 4,
            n_layers_lm: 1,
            n_heads: 2,
            n_layers_gnn: 1,
            ffn_mult: 2,
            max_len: 16,
            vocab_size: 10,
            type_names: vec!["t".into()],
            rel_names: vec!["r".into()],
            tie_mlm_head: false,
            dropout: 0.0,
            precision: Precision::F64,
        };
        ModelState::new(hyper, 0)
    }

    #[test]
    fn zero_lr_is_a_bitwise_noop() {
        let mut state = small_state();
        let before = state.checksum();
        let mut grads = BTreeMap::new();
        grads.insert("lm.token_emb".to_string(), vec![1.0; 10 * 8]);
        grads.insert("gnn.layer0.self".to_string(), vec![-3.0; 16]);
        let mut opt = AdamW::new(0.01);
        for _ in 0..5 {
            opt.step(&mut state.params, &grads, |_| 0.0, Precision::F64);
        }
        assert_eq!(state.checksum(), before);
    }

    #[test]
    fn warmup_hits_exact_endpoints() {
        let sched = WarmupLinearDecay {
            peak: 6e-5,
            warmup: 100,
            total: 1000,
        };
        assert!((sched.lr(0) - 6e-5 / 100.0).abs() < 1e-18);
        assert_eq!(sched.lr(100), 6e-5);
        assert!((sched.lr(99) - 6e-5).abs() < 1e-12);
        // Decay reaches zero at the final step boundary.
        assert!(sched.lr(999) > 0.0);
        assert_eq!(sched.lr(1000), 0.0);
    }

    #[test]
    fn no_warmup_schedule_is_flat_then_decaying() {
        let sched = WarmupLinearDecay {
            peak: 1e-4,
            warmup: 0,
            total: 0,
        };
        assert_eq!(sched.lr(0), 1e-4);
        assert_eq!(sched.lr(500), 1e-4);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), vec![3.0, 4.0]); // norm 5
        let pre = clip_grad_norm(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let g = &grads["a"];
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);

        let mut small = BTreeMap::new();
        small.insert("a".to_string(), vec![0.1, 0.1]);
        let pre = clip_grad_norm(&mut small, 1.0);
        assert!(pre < 1.0);
        assert_eq!(small["a"], vec![0.1, 0.1]);
    }

    #[test]
    fn update_moves_parameters_against_gradient() {
        let mut state = small_state();
        let before = state.param("gnn.layer0.self").values.clone();
        let mut grads = BTreeMap::new();
        grads.insert("gnn.layer0.self".to_string(), vec![1.0; 16]);
        let mut opt = AdamW::new(0.0);
        opt.step(&mut state.params, &grads, |_| 0.1, Precision::F64);
        let after = &state.param("gnn.layer0.self").values;
        for (b, a) in before.iter().zip(after) {
            assert!(a < b, "positive gradient must decrease the parameter");
        }
    }

    #[test]
    fn weight_decay_shrinks_matrices_but_not_biases() {
        let mut state = small_state();
        // Force a known positive value into a matrix and a bias.
        state
            .params
            .get_mut("lm.block0.attn.wq")
            .unwrap()
            .values
            .fill(1.0);
        state
            .params
            .get_mut("lm.block0.attn.bq")
            .unwrap()
            .values
            .fill(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("lm.block0.attn.wq".to_string(), vec![0.0; 64]);
        grads.insert("lm.block0.attn.bq".to_string(), vec![0.0; 8]);
        let mut opt = AdamW::new(0.01);
        opt.step(&mut state.params, &grads, |_| 0.1, Precision::F64);
        assert!(state.param("lm.block0.attn.wq").values[0] < 1.0);
        assert_eq!(state.param("lm.block0.attn.bq").values[0], 1.0);
    }
}
