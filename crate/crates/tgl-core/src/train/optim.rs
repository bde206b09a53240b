//! Decoupled-weight-decay Adam with plan application.
//!
//! Frozen groups (by plan or by trainability) are exactly untouched: values,
//! moments, everything. Per-group learning-rate scales multiply the whole
//! step, weight decay included.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Result, TglError};
use crate::model::ParamStore;
use crate::tensor::{Element, GradMap, ParamId, Tensor};
use crate::tgl::UpdatePlan;

#[derive(Debug, Clone)]
pub struct AdamState<T: Element> {
    pub step: usize,
    pub m: BTreeMap<ParamId, Tensor<T>>,
    pub v: BTreeMap<ParamId, Tensor<T>>,
    /// Phase-start parameter values; present only under RecAdam.
    pub anchor: Option<BTreeMap<ParamId, Tensor<T>>>,
}

impl<T: Element> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            anchor: None,
        }
    }

    /// Capture the anchor for the RecAdam penalty from current parameters.
    pub fn capture_anchor(&mut self, store: &ParamStore<T>) {
        self.anchor = Some(
            store
                .iter()
                .map(|(id, p)| (id, p.value.clone()))
                .collect(),
        );
    }
}

impl<T: Element> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One optimizer step over every trainable, unfrozen parameter that has a
/// gradient. `lr` is the scheduled rate before per-group scaling.
pub fn adamw_step<T: Element>(
    store: &mut ParamStore<T>,
    grads: &GradMap<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    plan: &UpdatePlan,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let group = store.get(id).group;
        if !store.get(id).trainable || plan.is_frozen(group) {
            continue;
        }
        let Some(grad) = grads.get(id) else {
            continue;
        };
        if !grad.all_finite() {
            return Err(TglError::Train(format!(
                "non-finite gradient for group {group} at step {}",
                state.step
            )));
        }
        let eff_lr = lr * plan.scale_for(group);
        let numel = grad.numel();
        let m = state
            .m
            .entry(id)
            .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        let v = state
            .v
            .entry(id)
            .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        debug_assert_eq!(m.numel(), numel);

        let param = store.get_mut(id);
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        for i in 0..numel {
            let g = grad.data()[i].to_f64();
            let mi = b1 * m.data()[i].to_f64() + (1.0 - b1) * g;
            let vi = b2 * v.data()[i].to_f64() + (1.0 - b2) * g * g;
            m.data_mut()[i] = T::from_f64(mi);
            v.data_mut()[i] = T::from_f64(vi);
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let theta = param.value.data()[i].to_f64();
            let delta = eff_lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta);
            param.value.data_mut()[i] = T::from_f64(theta - delta);
        }
    }
    Ok(())
}

const STATE_MAGIC: &[u8; 4] = b"TGLO";
const STATE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct StateHeader {
    step: usize,
    has_anchor: bool,
}

/// Persist optimizer state with the same binary framing as model
/// checkpoints (magic, version, JSON blob, named f32 tensors).
pub fn save_optimizer_state<T: Element>(
    state: &AdamState<T>,
    store: &ParamStore<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    w.write_all(STATE_MAGIC)?;
    w.write_all(&STATE_VERSION.to_le_bytes())?;
    let blob = serde_json::to_vec(&StateHeader {
        step: state.step,
        has_anchor: state.anchor.is_some(),
    })?;
    w.write_all(&(blob.len() as u64).to_le_bytes())?;
    w.write_all(&blob)?;

    let mut write_tensor = |name: &str, t: &Tensor<T>| -> Result<()> {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
        Ok(())
    };
    for (id, t) in &state.m {
        write_tensor(&format!("{}.m", store.get(*id).name), t)?;
    }
    for (id, t) in &state.v {
        write_tensor(&format!("{}.v", store.get(*id).name), t)?;
    }
    if let Some(anchor) = &state.anchor {
        for (id, t) in anchor {
            write_tensor(&format!("{}.anchor", store.get(*id).name), t)?;
        }
    }
    Ok(())
}

pub fn load_optimizer_state<T: Element>(
    store: &ParamStore<T>,
    path: impl AsRef<Path>,
) -> Result<AdamState<T>> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| {
        TglError::checkpoint(format!("cannot open {}: {e}", path.as_ref().display()))
    })?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| TglError::checkpoint("truncated optimizer state".to_string()))?;
    if &magic != STATE_MAGIC {
        return Err(TglError::checkpoint(format!(
            "bad optimizer-state magic {magic:?}"
        )));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)
        .map_err(|_| TglError::checkpoint("truncated optimizer state".to_string()))?;
    let version = u32::from_le_bytes(v4);
    if version != STATE_VERSION {
        return Err(TglError::checkpoint(format!(
            "unsupported optimizer-state version {version}"
        )));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)
        .map_err(|_| TglError::checkpoint("truncated optimizer state".to_string()))?;
    let mut blob = vec![0u8; u64::from_le_bytes(l8) as usize];
    r.read_exact(&mut blob)
        .map_err(|_| TglError::checkpoint("truncated optimizer state".to_string()))?;
    let header: StateHeader = serde_json::from_slice(&blob)
        .map_err(|e| TglError::checkpoint(format!("bad state header: {e}")))?;

    let mut state = AdamState::new();
    state.step = header.step;
    if header.has_anchor {
        state.anchor = Some(BTreeMap::new());
    }
    loop {
        let mut n2 = [0u8; 2];
        match r.read(&mut n2)? {
            0 => break,
            1 => return Err(TglError::checkpoint("truncated tensor header".to_string())),
            _ => {}
        }
        let mut name = vec![0u8; u16::from_le_bytes(n2) as usize];
        r.read_exact(&mut name)
            .map_err(|_| TglError::checkpoint("truncated tensor name".to_string()))?;
        let name = String::from_utf8(name)
            .map_err(|_| TglError::checkpoint("non-utf8 tensor name".to_string()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)
            .map_err(|_| TglError::checkpoint("truncated tensor rank".to_string()))?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d4 = [0u8; 4];
            r.read_exact(&mut d4)
                .map_err(|_| TglError::checkpoint("truncated tensor dim".to_string()))?;
            shape.push(u32::from_le_bytes(d4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload)
            .map_err(|_| TglError::checkpoint("truncated tensor payload".to_string()))?;
        let data: Vec<T> = payload
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        let tensor = Tensor::new(shape, data)?;

        let (param_name, kind) = name.rsplit_once('.').ok_or_else(|| {
            TglError::checkpoint(format!("bad state tensor name '{name}'"))
        })?;
        let id = store.find_by_name(param_name).ok_or_else(|| {
            TglError::checkpoint(format!("state names unknown parameter '{param_name}'"))
        })?;
        match kind {
            "m" => {
                state.m.insert(id, tensor);
            }
            "v" => {
                state.v.insert(id, tensor);
            }
            "anchor" => {
                state
                    .anchor
                    .get_or_insert_with(BTreeMap::new)
                    .insert(id, tensor);
            }
            other => {
                return Err(TglError::checkpoint(format!(
                    "unknown state tensor kind '{other}'"
                )))
            }
        }
    }
    Ok(state)
}
