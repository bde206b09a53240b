//! GPT-2-style decoder-only transformer with parameters partitioned into
//! named layer groups.
//!
//! Layer groups are the unit over which gradient norms, freezing, and
//! per-group learning rates are defined. Each block contributes one
//! `Attention` and one `Mlp` group; the two pre-norms are assigned to the
//! sublayer they feed. Embedding, final norm, and the (optional, untied)
//! LM head are their own groups but sit outside the profiled layer set.

mod checkpoint;
mod forward;
mod lora;
mod params;

pub use forward::{Span, Tape, Tracking};
pub use lora::LoraConfig;
pub use params::{Param, ParamStore};

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TglError};
use crate::tensor::{Element, ParamId, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Embedding,
    Attention,
    Mlp,
    FinalNorm,
    LmHead,
}

impl Component {
    pub fn as_str(&self) -> &'static str {
        match self {
            Component::Embedding => "embedding",
            Component::Attention => "attention",
            Component::Mlp => "mlp",
            Component::FinalNorm => "final_norm",
            Component::LmHead => "lm_head",
        }
    }
}

impl std::str::FromStr for Component {
    type Err = TglError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(Component::Embedding),
            "attention" => Ok(Component::Attention),
            "mlp" => Ok(Component::Mlp),
            "final_norm" => Ok(Component::FinalNorm),
            "lm_head" => Ok(Component::LmHead),
            other => Err(TglError::input(format!("unknown component '{other}'"))),
        }
    }
}

/// Identity of a parameter group: block-scoped for attention/MLP, global for
/// embedding, final norm, and LM head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerGroupId {
    pub component: Component,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
}

impl LayerGroupId {
    pub fn embedding() -> Self {
        LayerGroupId {
            component: Component::Embedding,
            block: None,
        }
    }
    pub fn attention(block: usize) -> Self {
        LayerGroupId {
            component: Component::Attention,
            block: Some(block),
        }
    }
    pub fn mlp(block: usize) -> Self {
        LayerGroupId {
            component: Component::Mlp,
            block: Some(block),
        }
    }
    pub fn final_norm() -> Self {
        LayerGroupId {
            component: Component::FinalNorm,
            block: None,
        }
    }
    pub fn lm_head() -> Self {
        LayerGroupId {
            component: Component::LmHead,
            block: None,
        }
    }

    /// True for the groups the relative-gradient profile is defined over.
    pub fn in_profiled_set(&self) -> bool {
        matches!(self.component, Component::Attention | Component::Mlp)
    }
}

impl std::fmt::Display for LayerGroupId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.block {
            Some(b) => write!(f, "{}({b})", self.component.as_str()),
            None => write!(f, "{}", self.component.as_str()),
        }
    }
}

// Order by (block, component) so profile listings read block 0 attention,
// block 0 mlp, block 1 attention, ...
impl Ord for LayerGroupId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.block, self.component).cmp(&(other.block, other.component))
    }
}

impl PartialOrd for LayerGroupId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub tie_embeddings: bool,
    pub seed: u64,
    /// Present once adapters are attached; persisted in checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraConfig>,
}

impl ModelConfig {
    /// Default desk-scale shape: a full experiment runs in minutes on a CPU.
    pub fn desk_default(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            context_length: 128,
            n_blocks: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            tie_embeddings: true,
            seed,
            lora: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("vocab_size", self.vocab_size),
            ("context_length", self.context_length),
            ("n_blocks", self.n_blocks),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(TglError::config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(TglError::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if let Some(lora) = &self.lora {
            lora.validate(self.n_blocks)?;
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w_fc: ParamId,
    pub b_fc: ParamId,
    pub w_proj: ParamId,
    pub b_proj: ParamId,
}

/// Adapter parameter ids for one host attention group (q and v projections).
#[derive(Debug, Clone)]
pub(crate) struct LoraIds {
    pub block: usize,
    pub q_a: ParamId,
    pub q_b: ParamId,
    pub v_a: ParamId,
    pub v_b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub wte: ParamId,
    pub wpe: ParamId,
    pub blocks: Vec<BlockIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub lm_head: Option<ParamId>,
    pub lora: Vec<LoraIds>,
}

#[derive(Debug)]
pub struct Model<T: Element> {
    pub(crate) cfg: ModelConfig,
    pub(crate) store: ParamStore<T>,
    pub(crate) layout: Layout,
}

impl<T: Element> Model<T> {
    /// Initialize parameters: normal with std 0.02, residual projections
    /// scaled down by 1/sqrt(2 * n_blocks); deterministic given cfg.seed.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let lora_cfg = cfg.lora.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_blocks as f64).sqrt();

        let mut normal = |shape: Vec<usize>, std: f64| -> Tensor<T> {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64(sample_normal(&mut rng) * std))
                .collect();
            Tensor::new(shape, data).expect("shape/data agree")
        };

        let emb = LayerGroupId::embedding();
        let wte = store.push("wte", emb, normal(vec![cfg.vocab_size, d], std));
        let wpe = store.push("wpe", emb, normal(vec![cfg.context_length, d], std));

        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let attn = LayerGroupId::attention(b);
            let mlp = LayerGroupId::mlp(b);
            let ids = BlockIds {
                ln1_g: store.push(format!("h{b}.ln1.g"), attn, Tensor::filled(vec![d], T::ONE)),
                ln1_b: store.push(format!("h{b}.ln1.b"), attn, Tensor::zeros(vec![d])),
                wq: store.push(format!("h{b}.attn.wq"), attn, normal(vec![d, d], std)),
                bq: store.push(format!("h{b}.attn.bq"), attn, Tensor::zeros(vec![d])),
                wk: store.push(format!("h{b}.attn.wk"), attn, normal(vec![d, d], std)),
                bk: store.push(format!("h{b}.attn.bk"), attn, Tensor::zeros(vec![d])),
                wv: store.push(format!("h{b}.attn.wv"), attn, normal(vec![d, d], std)),
                bv: store.push(format!("h{b}.attn.bv"), attn, Tensor::zeros(vec![d])),
                wo: store.push(format!("h{b}.attn.wo"), attn, normal(vec![d, d], resid_std)),
                bo: store.push(format!("h{b}.attn.bo"), attn, Tensor::zeros(vec![d])),
                ln2_g: store.push(format!("h{b}.ln2.g"), mlp, Tensor::filled(vec![d], T::ONE)),
                ln2_b: store.push(format!("h{b}.ln2.b"), mlp, Tensor::zeros(vec![d])),
                w_fc: store.push(format!("h{b}.mlp.w_fc"), mlp, normal(vec![d, cfg.d_ff], std)),
                b_fc: store.push(format!("h{b}.mlp.b_fc"), mlp, Tensor::zeros(vec![cfg.d_ff])),
                w_proj: store.push(
                    format!("h{b}.mlp.w_proj"),
                    mlp,
                    normal(vec![cfg.d_ff, d], resid_std),
                ),
                b_proj: store.push(format!("h{b}.mlp.b_proj"), mlp, Tensor::zeros(vec![d])),
            };
            blocks.push(ids);
        }

        let fin = LayerGroupId::final_norm();
        let lnf_g = store.push("lnf.g", fin, Tensor::filled(vec![d], T::ONE));
        let lnf_b = store.push("lnf.b", fin, Tensor::zeros(vec![d]));

        let lm_head = if cfg.tie_embeddings {
            None
        } else {
            Some(store.push(
                "lm_head.w",
                LayerGroupId::lm_head(),
                normal(vec![d, cfg.vocab_size], std),
            ))
        };

        let mut model = Model {
            cfg,
            store,
            layout: Layout {
                wte,
                wpe,
                blocks,
                lnf_g,
                lnf_b,
                lm_head,
                lora: Vec::new(),
            },
        };
        // Re-attach adapters when the config carries them (checkpoint load).
        if let Some(lc) = lora_cfg {
            model.cfg.lora = None;
            model.attach_lora(lc.rank, lc.alpha, &lc.hosts)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// All layer groups present in the model, ordered.
    pub fn groups(&self) -> BTreeSet<LayerGroupId> {
        self.store.iter().map(|(_, p)| p.group).collect()
    }

    /// The Attention/Mlp groups the gradient profile ranges over, ordered.
    pub fn profiled_groups(&self) -> Vec<LayerGroupId> {
        let mut v: Vec<LayerGroupId> = self
            .groups()
            .into_iter()
            .filter(|g| g.in_profiled_set())
            .collect();
        v.sort();
        v
    }

    pub fn total_params(&self) -> usize {
        self.store.iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// Content hash over parameter values in storage order.
    pub fn fingerprint(&self) -> String {
        crate::fingerprint::fingerprint_f32s(
            self.store
                .iter()
                .flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_f64() as f32)),
        )
    }

    pub fn to_precision<U: Element>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.map_to(),
            layout: self.layout.clone(),
        }
    }
}

/// Box-Muller normal sampler; deterministic for a seeded rng.
fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            context_length: 16,
            n_blocks: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            tie_embeddings: true,
            seed: 3,
            lora: None,
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = Model::<f32>::init(small_cfg()).unwrap();
        let b = Model::<f32>::init(small_cfg()).unwrap();
        for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.value, pb.value);
        }
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn group_list_matches_partition() {
        let m = Model::<f32>::init(small_cfg()).unwrap();
        let groups = m.groups();
        let want: BTreeSet<LayerGroupId> = [
            LayerGroupId::embedding(),
            LayerGroupId::attention(0),
            LayerGroupId::mlp(0),
            LayerGroupId::attention(1),
            LayerGroupId::mlp(1),
            LayerGroupId::final_norm(),
        ]
        .into_iter()
        .collect();
        assert_eq!(groups, want);
    }

    #[test]
    fn untied_model_has_lm_head_group() {
        let mut cfg = small_cfg();
        cfg.tie_embeddings = false;
        let m = Model::<f32>::init(cfg).unwrap();
        assert!(m.groups().contains(&LayerGroupId::lm_head()));
    }

    #[test]
    fn parameter_partition_counts() {
        let m = Model::<f32>::init(small_cfg()).unwrap();
        let total = m.total_params();
        let by_group: usize = m
            .groups()
            .iter()
            .map(|g| {
                m.store
                    .iter()
                    .filter(|(_, p)| p.group == *g)
                    .map(|(_, p)| p.value.numel())
                    .sum::<usize>()
            })
            .sum();
        assert_eq!(total, by_group);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small_cfg();
        cfg.n_heads = 3; // does not divide d_model=8
        assert!(Model::<f32>::init(cfg).is_err());
        let mut cfg = small_cfg();
        cfg.n_blocks = 0;
        assert!(Model::<f32>::init(cfg).is_err());
    }

    #[test]
    fn group_ordering_is_block_major() {
        let mut v = vec![
            LayerGroupId::mlp(1),
            LayerGroupId::attention(0),
            LayerGroupId::mlp(0),
            LayerGroupId::attention(1),
        ];
        v.sort();
        assert_eq!(
            v,
            vec![
                LayerGroupId::attention(0),
                LayerGroupId::mlp(0),
                LayerGroupId::attention(1),
                LayerGroupId::mlp(1),
            ]
        );
    }
}
