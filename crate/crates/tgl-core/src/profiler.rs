//! Per-layer-group gradient norms and the relative gradient profile.
//!
//! The profile compares two gradient regimes on the current parameters. The
//! numerator is the mean gradient norm for salient-span prediction on probe
//! examples; the denominator is the mean gradient norm for full-sequence
//! language modeling on corpus samples. Groups whose relative norm is large
//! are where span knowledge wants to move the model.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Result, TglError};
use crate::model::{Component, LayerGroupId, Model, Span};
use crate::tensor::{Element, GradMap, ParamId};

/// How per-example gradients are combined into one norm per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormAggregation {
    /// Mean over examples of each example's group gradient norm.
    #[default]
    PerExampleMean,
    /// Norm of the mean gradient across examples.
    NormOfMean,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProfileConfig {
    pub n_probe_examples: usize,
    pub n_baseline_examples: usize,
    pub aggregation: NormAggregation,
    pub seed: u64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        // Baseline count echoes the 2000-example normalization regime and is
        // clamped to the corpus size by the caller; probe default is 200.
        ProfileConfig {
            n_probe_examples: 200,
            n_baseline_examples: 2000,
            aggregation: NormAggregation::PerExampleMean,
            seed: 0,
        }
    }
}

impl ProfileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_probe_examples == 0 || self.n_baseline_examples == 0 {
            return Err(TglError::config(
                "profile example counts must be >= 1".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileEntry {
    pub probe_norm: f64,
    pub baseline_norm: f64,
    pub relative_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProfileMeta {
    pub n_probe: usize,
    pub n_baseline: usize,
    pub seed: u64,
    pub model_fingerprint: String,
}

/// The relative gradient profile over the Attention/Mlp layer set.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientProfile {
    pub entries: BTreeMap<LayerGroupId, ProfileEntry>,
    pub meta: ProfileMeta,
}

impl GradientProfile {
    pub fn relative_norms(&self) -> BTreeMap<LayerGroupId, f64> {
        self.entries
            .iter()
            .map(|(g, e)| (*g, e.relative_norm))
            .collect()
    }

    pub fn mean_relative_norm(&self) -> f64 {
        let n = self.entries.len() as f64;
        self.entries.values().map(|e| e.relative_norm).sum::<f64>() / n
    }

    pub fn max_relative_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|e| e.relative_norm)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean relative norm over groups of one component.
    pub fn component_mean(&self, component: Component) -> f64 {
        let values: Vec<f64> = self
            .entries
            .iter()
            .filter(|(g, _)| g.component == component)
            .map(|(_, e)| e.relative_norm)
            .collect();
        values.iter().sum::<f64>() / values.len() as f64
    }

    /// Content hash over the printed data rows.
    pub fn fingerprint(&self) -> String {
        crate::fingerprint::fingerprint_bytes(self.data_rows().as_bytes())
    }

    fn data_rows(&self) -> String {
        let mut out = String::new();
        for (group, e) in &self.entries {
            let block = group.block.expect("profiled groups are block-scoped");
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                block,
                group.component.as_str(),
                sig9(e.probe_norm),
                sig9(e.baseline_norm),
                sig9(e.relative_norm),
            ));
        }
        out
    }

    /// Fail unless the profile covers exactly the model's profiled groups.
    pub fn validate_against<T: Element>(&self, model: &Model<T>) -> Result<()> {
        let expected: Vec<LayerGroupId> = model.profiled_groups();
        let got: Vec<LayerGroupId> = self.entries.keys().copied().collect();
        if expected != got {
            return Err(TglError::Profile(format!(
                "profile covers {} groups, model has {} profiled groups",
                got.len(),
                expected.len()
            )));
        }
        Ok(())
    }
}

/// Fixed 9 significant digits; parse -> print is stable at this precision.
fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Mean L2 gradient norm per group over examples.
///
/// `grad_fn` produces one [`GradMap`] per example. An example whose loss
/// excludes a group contributes zero to that group's norm. Reduction order
/// is fixed by example index, so results are bit-reproducible.
pub fn mean_group_norms<T: Element, E>(
    examples: &[E],
    group_params: &BTreeMap<LayerGroupId, Vec<ParamId>>,
    aggregation: NormAggregation,
    grad_fn: impl Fn(&E) -> Result<GradMap<T>>,
) -> Result<BTreeMap<LayerGroupId, f64>> {
    if examples.is_empty() {
        return Err(TglError::Profile("no examples to profile".to_string()));
    }
    let mut norms: BTreeMap<LayerGroupId, f64> =
        group_params.keys().map(|g| (*g, 0.0)).collect();
    match aggregation {
        NormAggregation::PerExampleMean => {
            for example in examples {
                let grads = grad_fn(example)?;
                for (group, params) in group_params {
                    let mut sumsq = 0.0f64;
                    for id in params {
                        if let Some(g) = grads.get(*id) {
                            for v in g.data() {
                                let x = v.to_f64();
                                sumsq += x * x;
                            }
                        }
                    }
                    *norms.get_mut(group).expect("group present") += sumsq.sqrt();
                }
            }
            let n = examples.len() as f64;
            for v in norms.values_mut() {
                *v /= n;
            }
        }
        NormAggregation::NormOfMean => {
            // Accumulate the mean gradient per parameter, then take norms.
            let mut acc: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
            for example in examples {
                let grads = grad_fn(example)?;
                for (id, g) in grads.iter() {
                    let slot = acc
                        .entry(id)
                        .or_insert_with(|| vec![0.0; g.numel()]);
                    for (a, v) in slot.iter_mut().zip(g.data()) {
                        *a += v.to_f64();
                    }
                }
            }
            let n = examples.len() as f64;
            for (group, params) in group_params {
                let mut sumsq = 0.0f64;
                for id in params {
                    if let Some(slot) = acc.get(id) {
                        for a in slot {
                            let x = a / n;
                            sumsq += x * x;
                        }
                    }
                }
                *norms.get_mut(group).expect("group present") = sumsq.sqrt();
            }
        }
    }
    Ok(norms)
}

/// Group -> parameter ids for a model's profiled (Attention/Mlp) groups.
pub fn profiled_group_params<T: Element>(
    model: &Model<T>,
) -> BTreeMap<LayerGroupId, Vec<ParamId>> {
    let mut map: BTreeMap<LayerGroupId, Vec<ParamId>> = BTreeMap::new();
    for (id, p) in model.store().iter() {
        if p.group.in_profiled_set() {
            map.entry(p.group).or_default().push(id);
        }
    }
    map
}

/// Combine probe and baseline norms into a profile; ratios are exact f64
/// divisions of the two means.
pub fn profile_from_norms(
    probe_norms: &BTreeMap<LayerGroupId, f64>,
    baseline_norms: &BTreeMap<LayerGroupId, f64>,
    meta: ProfileMeta,
) -> Result<GradientProfile> {
    if probe_norms.keys().ne(baseline_norms.keys()) {
        return Err(TglError::Profile(
            "probe and baseline norms cover different groups".to_string(),
        ));
    }
    let mut entries = BTreeMap::new();
    for (group, &p) in probe_norms {
        let b = baseline_norms[group];
        if b == 0.0 {
            return Err(TglError::Profile(format!(
                "zero baseline gradient norm for group {group}"
            )));
        }
        let rel = p / b;
        if !rel.is_finite() {
            return Err(TglError::Profile(format!(
                "non-finite relative norm for group {group}"
            )));
        }
        entries.insert(
            *group,
            ProfileEntry {
                probe_norm: p,
                baseline_norm: b,
                relative_norm: rel,
            },
        );
    }
    Ok(GradientProfile { entries, meta })
}

/// Compute the relative gradient profile of a model.
///
/// Probes are scored with the span loss (mean NLL over the span given its
/// left context); baseline sequences with the full-sequence LM loss. Both
/// lists are truncated to the configured counts. Gradients are taken per
/// example with no accumulation across examples.
pub fn relative_profile<T: Element>(
    model: &Model<T>,
    probes: &[(Vec<usize>, Span)],
    baseline: &[Vec<usize>],
    cfg: &ProfileConfig,
) -> Result<GradientProfile> {
    cfg.validate()?;
    if probes.is_empty() {
        return Err(TglError::Profile("no probe examples".to_string()));
    }
    if baseline.is_empty() {
        return Err(TglError::Profile("no baseline examples".to_string()));
    }
    let probes = &probes[..probes.len().min(cfg.n_probe_examples)];
    let baseline = &baseline[..baseline.len().min(cfg.n_baseline_examples)];
    let group_params = profiled_group_params(model);

    let probe_norms = mean_group_norms(probes, &group_params, cfg.aggregation, |(tokens, span)| {
        model.span_loss_grads(tokens, *span)
    })?;
    let baseline_norms = mean_group_norms(baseline, &group_params, cfg.aggregation, |tokens| {
        model.lm_loss_grads(tokens)
    })?;

    profile_from_norms(
        &probe_norms,
        &baseline_norms,
        ProfileMeta {
            n_probe: probes.len(),
            n_baseline: baseline.len(),
            seed: cfg.seed,
            model_fingerprint: model.fingerprint(),
        },
    )
}

const CSV_HEADER: &str = "block,component,probe_norm,baseline_norm,relative_norm";

/// Write the profile CSV: metadata comments, a mandatory header row, one row
/// per group. Values carry 9 significant digits and survive the roundtrip
/// exactly as printed.
pub fn export_profile(profile: &GradientProfile, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# n_probe={}", profile.meta.n_probe)?;
    writeln!(w, "# n_baseline={}", profile.meta.n_baseline)?;
    writeln!(w, "# seed={}", profile.meta.seed)?;
    writeln!(w, "# model_fingerprint={}", profile.meta.model_fingerprint)?;
    writeln!(w, "{CSV_HEADER}")?;
    w.write_all(profile.data_rows().as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn import_profile(path: impl AsRef<Path>) -> Result<GradientProfile> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| TglError::data(format!("cannot open {}: {e}", path.as_ref().display())))?;
    let mut meta = ProfileMeta::default();
    let mut entries = BTreeMap::new();
    let mut saw_header = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.trim().split_once('=') {
                match key {
                    "n_probe" => meta.n_probe = parse_field(value, line_no)?,
                    "n_baseline" => meta.n_baseline = parse_field(value, line_no)?,
                    "seed" => meta.seed = parse_field(value, line_no)?,
                    "model_fingerprint" => meta.model_fingerprint = value.to_string(),
                    _ => {}
                }
            }
            continue;
        }
        if !saw_header {
            if line != CSV_HEADER {
                return Err(TglError::Parse {
                    line: line_no,
                    msg: format!("expected header '{CSV_HEADER}', got '{line}'"),
                });
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(TglError::Parse {
                line: line_no,
                msg: format!("expected 5 columns, got {}", fields.len()),
            });
        }
        let block: usize = parse_field(fields[0], line_no)?;
        let component: Component = fields[1].parse().map_err(|_| TglError::Parse {
            line: line_no,
            msg: format!("unknown component '{}'", fields[1]),
        })?;
        if !matches!(component, Component::Attention | Component::Mlp) {
            return Err(TglError::Parse {
                line: line_no,
                msg: format!("component '{}' is not a profiled group", fields[1]),
            });
        }
        let group = LayerGroupId {
            component,
            block: Some(block),
        };
        let entry = ProfileEntry {
            probe_norm: parse_field(fields[2], line_no)?,
            baseline_norm: parse_field(fields[3], line_no)?,
            relative_norm: parse_field(fields[4], line_no)?,
        };
        if entries.insert(group, entry).is_some() {
            return Err(TglError::Parse {
                line: line_no,
                msg: format!("duplicate group {group}"),
            });
        }
    }
    if !saw_header {
        return Err(TglError::Parse {
            line: 1,
            msg: "missing header row".to_string(),
        });
    }
    if entries.is_empty() {
        return Err(TglError::Parse {
            line: 1,
            msg: "profile has no data rows".to_string(),
        });
    }
    Ok(GradientProfile { entries, meta })
}

/// Companion plot data: one row per block, relative norm per component.
pub fn export_plot_data(profile: &GradientProfile, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(w, "block,attention_relative_norm,mlp_relative_norm")?;
    let blocks: std::collections::BTreeSet<usize> = profile
        .entries
        .keys()
        .filter_map(|g| g.block)
        .collect();
    for b in blocks {
        let attn = profile
            .entries
            .get(&LayerGroupId::attention(b))
            .map(|e| sig9(e.relative_norm))
            .unwrap_or_default();
        let mlp = profile
            .entries
            .get(&LayerGroupId::mlp(b))
            .map(|e| sig9(e.relative_norm))
            .unwrap_or_default();
        writeln!(w, "{b},{attn},{mlp}")?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field<F: std::str::FromStr>(s: &str, line: usize) -> Result<F> {
    s.trim().parse().map_err(|_| TglError::Parse {
        line,
        msg: format!("cannot parse '{s}'"),
    })
}
