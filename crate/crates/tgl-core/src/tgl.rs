//! Update plans derived from a gradient profile: freeze groups below the
//! mean relative norm (FP) and/or scale per-group learning rates by
//! relative norm over the maximum (ALR).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TglError};
use crate::model::{LayerGroupId, Model};
use crate::profiler::GradientProfile;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TglMode {
    #[default]
    None,
    Fp,
    Alr,
    #[serde(rename = "fp+alr")]
    FpAlr,
}

impl TglMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TglMode::None => "none",
            TglMode::Fp => "fp",
            TglMode::Alr => "alr",
            TglMode::FpAlr => "fp+alr",
        }
    }

    /// Whether this mode needs a gradient profile at all.
    pub fn needs_profile(&self) -> bool {
        !matches!(self, TglMode::None)
    }
}

impl std::str::FromStr for TglMode {
    type Err = TglError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(TglMode::None),
            "fp" => Ok(TglMode::Fp),
            "alr" => Ok(TglMode::Alr),
            "fp+alr" | "fp_alr" => Ok(TglMode::FpAlr),
            other => Err(TglError::input(format!(
                "unknown tgl mode '{other}' (expected none|fp|alr|fp+alr)"
            ))),
        }
    }
}

impl std::fmt::Display for TglMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a continual phase treats each layer group. Groups outside the
/// profiled set (embedding, final norm, LM head) are never frozen here and
/// always carry scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PlanFile", into = "PlanFile")]
pub struct UpdatePlan {
    pub mode: TglMode,
    pub frozen: BTreeSet<LayerGroupId>,
    pub lr_scale: BTreeMap<LayerGroupId, f64>,
    pub profile_fingerprint: String,
}

/// On-disk plan shape: group maps flattened into entry lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlanFile {
    mode: TglMode,
    frozen: Vec<LayerGroupId>,
    lr_scale: Vec<ScaleEntry>,
    profile_fingerprint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScaleEntry {
    #[serde(flatten)]
    group: LayerGroupId,
    scale: f64,
}

impl From<UpdatePlan> for PlanFile {
    fn from(plan: UpdatePlan) -> Self {
        PlanFile {
            mode: plan.mode,
            frozen: plan.frozen.into_iter().collect(),
            lr_scale: plan
                .lr_scale
                .into_iter()
                .map(|(group, scale)| ScaleEntry { group, scale })
                .collect(),
            profile_fingerprint: plan.profile_fingerprint,
        }
    }
}

impl From<PlanFile> for UpdatePlan {
    fn from(file: PlanFile) -> Self {
        UpdatePlan {
            mode: file.mode,
            frozen: file.frozen.into_iter().collect(),
            lr_scale: file
                .lr_scale
                .into_iter()
                .map(|e| (e.group, e.scale))
                .collect(),
            profile_fingerprint: file.profile_fingerprint,
        }
    }
}

impl UpdatePlan {
    /// The empty plan: nothing frozen, every scale 1.
    pub fn identity() -> Self {
        UpdatePlan {
            mode: TglMode::None,
            frozen: BTreeSet::new(),
            lr_scale: BTreeMap::new(),
            profile_fingerprint: String::new(),
        }
    }

    pub fn is_frozen(&self, group: LayerGroupId) -> bool {
        self.frozen.contains(&group)
    }

    pub fn scale_for(&self, group: LayerGroupId) -> f64 {
        self.lr_scale.get(&group).copied().unwrap_or(1.0)
    }

    pub fn validate_against<T: Element>(&self, model: &Model<T>) -> Result<()> {
        let profiled: BTreeSet<LayerGroupId> = model.profiled_groups().into_iter().collect();
        for g in &self.frozen {
            if !profiled.contains(g) {
                return Err(TglError::Plan(format!(
                    "plan freezes group {g} which is not a profiled group of this model"
                )));
            }
        }
        for g in self.lr_scale.keys() {
            if !profiled.contains(g) {
                return Err(TglError::Plan(format!(
                    "plan scales group {g} which is not a profiled group of this model"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), json + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())
            .map_err(|e| TglError::Plan(format!("cannot open {}: {e}", path.as_ref().display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| TglError::Plan(format!("bad plan file: {e}")))
    }
}

/// Freeze rule: a group is frozen when its relative norm is strictly below
/// the arithmetic mean over the profiled groups. A uniform profile freezes
/// nothing, which keeps FP identical to vanilla in the degenerate case.
pub fn select_frozen(profile: &GradientProfile) -> Result<BTreeSet<LayerGroupId>> {
    if profile.entries.is_empty() {
        return Err(TglError::Plan("empty profile".to_string()));
    }
    let mean = profile.mean_relative_norm();
    Ok(profile
        .entries
        .iter()
        .filter(|(_, e)| e.relative_norm < mean)
        .map(|(g, _)| *g)
        .collect())
}

/// ALR rule: scale each group's learning rate by its relative norm over the
/// maximum; the argmax group trains at exactly the base rate.
pub fn alr_scales(profile: &GradientProfile) -> Result<BTreeMap<LayerGroupId, f64>> {
    if profile.entries.is_empty() {
        return Err(TglError::Plan("empty profile".to_string()));
    }
    let max = profile.max_relative_norm();
    if !(max > 0.0) {
        return Err(TglError::Plan(format!(
            "all relative norms are <= 0 (max {max}); cannot derive learning-rate scales"
        )));
    }
    Ok(profile
        .entries
        .iter()
        .map(|(g, e)| (*g, e.relative_norm / max))
        .collect())
}

/// Compose the rules for one mode. FP+ALR freezes first, then scales the
/// survivors by their relative norm over the surviving maximum.
pub fn make_plan(profile: &GradientProfile, mode: TglMode) -> Result<UpdatePlan> {
    let fingerprint = profile.fingerprint();
    let plan = match mode {
        TglMode::None => UpdatePlan {
            mode,
            frozen: BTreeSet::new(),
            lr_scale: BTreeMap::new(),
            profile_fingerprint: fingerprint,
        },
        TglMode::Fp => UpdatePlan {
            mode,
            frozen: select_frozen(profile)?,
            lr_scale: BTreeMap::new(),
            profile_fingerprint: fingerprint,
        },
        TglMode::Alr => UpdatePlan {
            mode,
            frozen: BTreeSet::new(),
            lr_scale: alr_scales(profile)?,
            profile_fingerprint: fingerprint,
        },
        TglMode::FpAlr => {
            let frozen = select_frozen(profile)?;
            let survivors: Vec<(LayerGroupId, f64)> = profile
                .entries
                .iter()
                .filter(|(g, _)| !frozen.contains(g))
                .map(|(g, e)| (*g, e.relative_norm))
                .collect();
            let max = survivors
                .iter()
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if !(max > 0.0) {
                return Err(TglError::Plan(
                    "no surviving group with positive relative norm".to_string(),
                ));
            }
            let mut lr_scale: BTreeMap<LayerGroupId, f64> =
                survivors.into_iter().map(|(g, v)| (g, v / max)).collect();
            for g in &frozen {
                lr_scale.insert(*g, 1.0);
            }
            UpdatePlan {
                mode,
                frozen,
                lr_scale,
                profile_fingerprint: fingerprint,
            }
        }
    };
    Ok(plan)
}
