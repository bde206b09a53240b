//! Low-rank adapters on attention projections.
//!
//! Each host attention group gets adapter pairs on its query and value
//! projections: delta(x) = (alpha/r) * (x A^T) B^T with A random, B zero,
//! so an adapted model is exactly the base model at attach time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LayerGroupId, LoraIds, Model};
use crate::error::{Result, TglError};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Host attention groups by block index.
    pub hosts: Vec<usize>,
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(TglError::config("lora rank must be positive".to_string()));
        }
        if self.hosts.is_empty() {
            return Err(TglError::config("lora hosts must be nonempty".to_string()));
        }
        for &b in &self.hosts {
            if b >= n_blocks {
                return Err(TglError::config(format!(
                    "lora host block {b} out of range for {n_blocks} blocks (hosts must be attention groups)"
                )));
            }
        }
        Ok(())
    }
}

impl<T: Element> Model<T> {
    /// Attach adapters to the given attention blocks. Base weights become
    /// non-trainable; adapters are the only trainable parameters and inherit
    /// their host's group for profiling and plan purposes.
    pub fn attach_lora(&mut self, rank: usize, alpha: f64, hosts: &[usize]) -> Result<()> {
        if self.cfg.lora.is_some() {
            return Err(TglError::config("lora adapters already attached".to_string()));
        }
        let lc = LoraConfig {
            rank,
            alpha,
            hosts: hosts.to_vec(),
        };
        lc.validate(self.cfg.n_blocks)?;

        let d = self.cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(0x10ea));
        let mut normal = |shape: Vec<usize>| -> Tensor<T> {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64(super::sample_normal(&mut rng) * 0.02))
                .collect();
            Tensor::new(shape, data).expect("shape/data agree")
        };

        for (_, p) in self.store.iter_mut() {
            p.trainable = false;
        }

        let mut sorted = hosts.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &b in &sorted {
            let group = LayerGroupId::attention(b);
            let ids = LoraIds {
                block: b,
                q_a: self
                    .store
                    .push(format!("h{b}.attn.wq.lora_a"), group, normal(vec![rank, d])),
                q_b: self
                    .store
                    .push(format!("h{b}.attn.wq.lora_b"), group, Tensor::zeros(vec![d, rank])),
                v_a: self
                    .store
                    .push(format!("h{b}.attn.wv.lora_a"), group, normal(vec![rank, d])),
                v_b: self
                    .store
                    .push(format!("h{b}.attn.wv.lora_b"), group, Tensor::zeros(vec![d, rank])),
            };
            self.layout.lora.push(ids);
        }
        self.cfg.lora = Some(lc);
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        !self.layout.lora.is_empty()
    }

    /// Fold adapters into the base weights: W' = W + (alpha/r) (B A)^T.
    /// Returns a plain model without adapters whose forward matches the
    /// adapted one up to rounding.
    pub fn merge_lora(&self) -> Result<Model<T>> {
        let lc = self
            .cfg
            .lora
            .clone()
            .ok_or_else(|| TglError::config("no lora adapters to merge".to_string()))?;
        let mut cfg = self.cfg.clone();
        cfg.lora = None;
        let mut merged = Model::init(cfg)?;
        for ((_, src), (_, dst)) in self.store.iter().zip(merged.store.iter_mut()) {
            dst.value = src.value.clone();
            dst.trainable = true;
        }
        let s = lc.scaling();
        let d = self.cfg.d_model;
        for ids in &self.layout.lora {
            let block = &self.layout.blocks[ids.block];
            for (w_id, a_id, b_id) in [(block.wq, ids.q_a, ids.q_b), (block.wv, ids.v_a, ids.v_b)] {
                let a = self.store.value(a_id);
                let b = self.store.value(b_id);
                let r = lc.rank;
                let w = merged.store.get_mut(w_id);
                // delta^T[d_in, d_out] = (B[d_out,r] @ A[r,d_in])^T
                for i in 0..d {
                    for j in 0..d {
                        let mut acc = 0.0f64;
                        for p in 0..r {
                            acc += b.data()[j * r + p].to_f64() * a.data()[p * d + i].to_f64();
                        }
                        let idx = i * d + j;
                        let cur = w.value.data()[idx].to_f64();
                        w.value.data_mut()[idx] = T::from_f64(cur + s * acc);
                    }
                }
            }
        }
        Ok(merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 17,
            context_length: 16,
            n_blocks: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            tie_embeddings: true,
            seed: 5,
            lora: None,
        }
    }

    #[test]
    fn identity_at_attach_time() {
        let base = Model::<f64>::init(cfg()).unwrap();
        let mut adapted = Model::<f64>::init(cfg()).unwrap();
        adapted.attach_lora(4, 8.0, &[0, 1]).unwrap();
        let toks = [1, 5, 9, 2];
        let a = base.forward_logits(&toks).unwrap();
        let b = adapted.forward_logits(&toks).unwrap();
        let max_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert_eq!(max_diff, 0.0);
    }

    #[test]
    fn adapters_are_only_trainable_params_and_inherit_group() {
        let mut m = Model::<f32>::init(cfg()).unwrap();
        m.attach_lora(4, 8.0, &[1]).unwrap();
        for (_, p) in m.store.iter() {
            if p.name.contains("lora") {
                assert!(p.trainable);
                assert_eq!(p.group, LayerGroupId::attention(1));
            } else {
                assert!(!p.trainable);
            }
        }
    }

    #[test]
    fn merged_weights_reproduce_adapted_forward() {
        let mut m = Model::<f64>::init(cfg()).unwrap();
        m.attach_lora(4, 8.0, &[0, 1]).unwrap();
        // Give B nonzero values so the adapter actually contributes.
        let b_ids: Vec<_> = m
            .store
            .iter()
            .filter(|(_, p)| p.name.ends_with("lora_b"))
            .map(|(id, _)| id)
            .collect();
        for id in b_ids {
            for (i, v) in m.store.get_mut(id).value.data_mut().iter_mut().enumerate() {
                *v = (i as f64 * 0.37).sin() * 0.1;
            }
        }
        let toks = [3, 1, 4, 1, 5];
        let adapted = m.forward_logits(&toks).unwrap();
        let merged = m.merge_lora().unwrap();
        assert!(!merged.has_lora());
        let folded = merged.forward_logits(&toks).unwrap();
        let max_diff = adapted
            .data()
            .iter()
            .zip(folded.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-5, "max diff {max_diff}");
        // And the adapter genuinely changed the function.
        let base = Model::<f64>::init(cfg()).unwrap();
        let base_logits = base.forward_logits(&toks).unwrap();
        assert_ne!(base_logits.data(), adapted.data());
    }

    #[test]
    fn rank_64_accepted_desk_default_4() {
        let mut m = Model::<f32>::init(cfg()).unwrap();
        assert!(m.attach_lora(64, 64.0, &[0]).is_ok());
    }

    #[test]
    fn non_attention_host_rejected() {
        let mut m = Model::<f32>::init(cfg()).unwrap();
        assert!(m.attach_lora(4, 8.0, &[7]).is_err());
    }
}
